//! Reference tiled attention: QK over whole K/V blocks, row-wise masking,
//! online softmax across K/V splits, and SV.
//!
//! Masked logits are set to [`MASKED`] rather than `-inf` so that the running
//! max subtraction never produces `inf - inf`. Position 0 is valid for every
//! row (causal rows see at least themselves; tree rows see the root or the
//! history), so the first split always fixes a finite row max and later
//! fully-masked blocks contribute exactly zero.

use thiserror::Error;

use crate::kv_cache::{BlockTable, RadixKvCache};
use crate::planner::TileUnit;
use crate::smooth_gemm::{QkvLayout, QkvSel};
use crate::spec_decode::SpecMask;
use crate::tensor::Matrix;

/// Logit assigned to masked positions.
pub const MASKED: f32 = -1e30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("block table holds {got} tokens, tile needs {expected}")]
    InconsistentBlockTable { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Read access to one K/V head over logical positions `0..len()`.
pub trait KvView {
    fn len(&self) -> usize;
    fn key(&self, pos: usize) -> &[f32];
    fn value(&self, pos: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contiguous K/V matrices (rows are positions).
#[derive(Debug, Clone)]
pub struct DenseKv {
    pub keys: Matrix,
    pub values: Matrix,
}

impl KvView for DenseKv {
    fn len(&self) -> usize {
        self.keys.rows()
    }

    fn key(&self, pos: usize) -> &[f32] {
        self.keys.row(pos)
    }

    fn value(&self, pos: usize) -> &[f32] {
        self.values.row(pos)
    }
}

/// Rows of the current chunk's fused QKV tensor that extend a paged history.
#[derive(Debug, Clone, Copy)]
pub struct QkvTail<'a> {
    pub qkv: &'a [f32],
    pub layout: QkvLayout,
    pub first_row: usize,
    pub len: usize,
}

/// Paged history read through a block table, followed by an optional tail
/// read with strides from the fused QKV tensor.
#[derive(Debug, Clone, Copy)]
pub struct PagedKv<'a> {
    cache: &'a RadixKvCache,
    table: &'a BlockTable,
    /// Column of this head inside a cached K or V row.
    col: usize,
    head_size: usize,
    kv_head: usize,
    tail: Option<QkvTail<'a>>,
}

impl<'a> PagedKv<'a> {
    /// `col` is the offset of this layer and head inside cached rows.
    pub fn new(
        cache: &'a RadixKvCache,
        table: &'a BlockTable,
        col: usize,
        head_size: usize,
        kv_head: usize,
        tail: Option<QkvTail<'a>>,
    ) -> Result<Self, AttentionError> {
        if col + head_size > cache.kv_width() && table.total_tokens() > 0 {
            return Err(AttentionError::DimensionMismatch(format!(
                "head columns {col}..{} exceed cached width {}",
                col + head_size,
                cache.kv_width()
            )));
        }
        if let Some(t) = &tail {
            if t.layout.head_size != head_size || kv_head >= t.layout.kv_heads {
                return Err(AttentionError::DimensionMismatch("tail layout".into()));
            }
        }
        Ok(Self {
            cache,
            table,
            col,
            head_size,
            kv_head,
            tail,
        })
    }

    fn history(&self) -> usize {
        self.table.total_tokens()
    }

    fn tail_row(&self, pos: usize, sel: QkvSel) -> &'a [f32] {
        let t = self.tail.as_ref().expect("position beyond history needs a tail");
        let width = t.layout.width();
        let off = (t.first_row + pos - self.history()) * width + t.layout.offset(sel, self.kv_head);
        &t.qkv[off..off + self.head_size]
    }
}

impl KvView for PagedKv<'_> {
    fn len(&self) -> usize {
        self.history() + self.tail.map_or(0, |t| t.len)
    }

    fn key(&self, pos: usize) -> &[f32] {
        if pos < self.history() {
            &self.cache.key_row(self.table, pos)[self.col..self.col + self.head_size]
        } else {
            self.tail_row(pos, QkvSel::K)
        }
    }

    fn value(&self, pos: usize) -> &[f32] {
        if pos < self.history() {
            &self.cache.value_row(self.table, pos)[self.col..self.col + self.head_size]
        } else {
            self.tail_row(pos, QkvSel::V)
        }
    }
}

/// Which positions a query row may attend to.
#[derive(Debug, Clone, Copy)]
pub enum TileMask<'a> {
    /// Row `r` sees positions below `kv_len + q_start + r + 1`.
    Causal,
    /// History is fully visible; tree positions follow the mask.
    Spec(&'a SpecMask),
}

/// One tile of attention work for a single query head.
#[derive(Debug, Clone)]
pub struct AttentionTileJob<'a> {
    /// `q_len x head_size` queries.
    pub q: Matrix,
    /// Offset of the tile's first row within its stage.
    pub q_start: usize,
    /// Cached history length of the stage.
    pub kv_len: usize,
    pub mask: TileMask<'a>,
    pub scale: f32,
    pub block_size: usize,
}

impl AttentionTileJob<'_> {
    pub fn q_len(&self) -> usize {
        self.q.rows()
    }

    /// Positions the tile needs from the K/V view.
    pub fn kv_span(&self) -> usize {
        match self.mask {
            TileMask::Causal => self.kv_len + self.q_start + self.q_len(),
            TileMask::Spec(m) => self.kv_len + m.len(),
        }
    }

    /// Logical K/V blocks the tile computes.
    pub fn computed_blocks(&self) -> usize {
        self.kv_span().div_ceil(self.block_size)
    }

    /// Whether row `r` may see position `pos`.
    #[inline]
    fn visible(&self, r: usize, pos: usize) -> bool {
        match self.mask {
            TileMask::Causal => pos < causal_valid_len(self.q_start + r, self.kv_len),
            TileMask::Spec(m) => {
                pos < self.kv_len || (pos - self.kv_len < m.len() && m.get(self.q_start + r, pos - self.kv_len))
            }
        }
    }
}

/// Running softmax statistics for a query tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    pub row_max: Vec<f32>,
    pub row_sum: Vec<f32>,
    pub accum: Matrix,
}

impl SoftmaxState {
    pub fn new(rows: usize, head_size: usize) -> Self {
        Self {
            row_max: vec![MASKED; rows],
            row_sum: vec![0.0; rows],
            accum: Matrix::zeros(rows, head_size),
        }
    }

    /// Folds one split: `scores` is `rows x len`, `value(j)` the V row of
    /// the split's `j`-th position.
    pub fn update<'v>(&mut self, scores: &Matrix, value: impl Fn(usize) -> &'v [f32]) {
        for r in 0..scores.rows() {
            let s = scores.row(r);
            let m_new = s.iter().copied().fold(self.row_max[r], f32::max);
            let alpha = (self.row_max[r] - m_new).exp();
            let acc = self.accum.row_mut(r);
            for a in acc.iter_mut() {
                *a *= alpha;
            }
            let mut sum = 0.0f32;
            for (j, &x) in s.iter().enumerate() {
                let p = (x - m_new).exp();
                if p == 0.0 {
                    continue;
                }
                sum += p;
                for (a, v) in acc.iter_mut().zip(value(j)) {
                    *a += p * v;
                }
            }
            self.row_sum[r] = self.row_sum[r] * alpha + sum;
            self.row_max[r] = m_new;
        }
    }

    pub fn finish(mut self) -> Matrix {
        for r in 0..self.accum.rows() {
            let inv = 1.0 / self.row_sum[r];
            for a in self.accum.row_mut(r) {
                *a *= inv;
            }
        }
        self.accum
    }
}

/// Runs one tile, folding `split_blocks` K/V blocks per online-softmax step.
pub fn run_tile(job: &AttentionTileJob<'_>, kv: &dyn KvView, split_blocks: usize) -> Result<Matrix, AttentionError> {
    let hs = job.q.cols();
    if job.block_size == 0 || split_blocks == 0 {
        return Err(AttentionError::DimensionMismatch("zero block or split size".into()));
    }
    if let TileMask::Spec(m) = job.mask {
        if job.q_start + job.q_len() > m.len() {
            return Err(AttentionError::DimensionMismatch(format!(
                "tile rows {}..{} exceed tree of {}",
                job.q_start,
                job.q_start + job.q_len(),
                m.len()
            )));
        }
    }
    if kv.len() < job.kv_span() {
        return Err(AttentionError::InconsistentBlockTable {
            expected: job.kv_span(),
            got: kv.len(),
        });
    }
    if !kv.is_empty() && kv.key(0).len() != hs {
        return Err(AttentionError::DimensionMismatch(format!(
            "query width {hs} vs key width {}",
            kv.key(0).len()
        )));
    }

    let q_len = job.q_len();
    let bs = job.block_size;
    let span = job.computed_blocks() * bs;
    let view_len = kv.len();
    let mut state = SoftmaxState::new(q_len, hs);
    let split = split_blocks * bs;
    let mut p0 = 0;
    while p0 < span {
        let p1 = (p0 + split).min(span);
        // QK over whole blocks.
        let mut scores = Matrix::from_fn(q_len, p1 - p0, |r, j| {
            let pos = p0 + j;
            if pos >= view_len {
                return MASKED;
            }
            dot(job.q.row(r), kv.key(pos)) * job.scale
        });
        // Row-wise validity at token granularity.
        for r in 0..q_len {
            let row = scores.row_mut(r);
            for (j, s) in row.iter_mut().enumerate() {
                if !job.visible(r, p0 + j) {
                    *s = MASKED;
                }
            }
        }
        let zero = vec![0.0f32; hs];
        state.update(&scores, |j| {
            let pos = p0 + j;
            if pos < view_len {
                kv.value(pos)
            } else {
                &zero
            }
        });
        p0 = p1;
    }
    Ok(state.finish())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positions visible to a causal query at stage row `q_row` (self-inclusive).
pub fn causal_valid_len(q_row: usize, kv_len: usize) -> usize {
    kv_len + q_row + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkipPlan {
    pub computed: usize,
    pub skipped: usize,
}

impl SkipPlan {
    pub fn total(&self) -> usize {
        self.computed + self.skipped
    }
}

/// Blocks of the stage's K/V span a tile computes or skips. Causal tiles
/// compute a block iff it starts before the last row's valid length;
/// verify tiles compute everything.
pub fn skip_plan(tile: &TileUnit, block_size: usize) -> SkipPlan {
    let total = (tile.kv_len + tile.stage_len).div_ceil(block_size);
    let computed = if tile.stage.is_causal() {
        causal_valid_len(tile.q_start + tile.q_len - 1, tile.kv_len).div_ceil(block_size)
    } else {
        total
    };
    SkipPlan {
        computed,
        skipped: total - computed,
    }
}

/// Masks tree positions of a `specLen x (kv_len + specLen)` score block row
/// by row; history columns are left alone.
pub fn apply_spec_mask(scores: &mut Matrix, mask: &SpecMask, kv_len: usize) -> Result<(), AttentionError> {
    let n = mask.len();
    if scores.rows() != n || scores.cols() != kv_len + n {
        return Err(AttentionError::DimensionMismatch(format!(
            "scores {}x{} for tree of {n} over history {kv_len}",
            scores.rows(),
            scores.cols()
        )));
    }
    for i in 0..n {
        let row = &mut scores.row_mut(i)[kv_len..];
        for (j, s) in row.iter_mut().enumerate() {
            if !mask.get(i, j) {
                *s = MASKED;
            }
        }
    }
    Ok(())
}

/// Masks the padded tail of the last block so padded V rows get zero weight.
pub fn zero_padded_kv(scores: &mut Matrix, last_block_tokens: usize, block_size: usize) -> Result<(), AttentionError> {
    if block_size == 0 || !scores.cols().is_multiple_of(block_size) || scores.cols() == 0 {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} columns are not whole blocks of {block_size}",
            scores.cols()
        )));
    }
    if last_block_tokens == 0 || last_block_tokens > block_size {
        return Err(AttentionError::DimensionMismatch(format!(
            "last block holds {last_block_tokens} of {block_size}"
        )));
    }
    let first_pad = scores.cols() - block_size + last_block_tokens;
    for r in 0..scores.rows() {
        for s in &mut scores.row_mut(r)[first_pad..] {
            *s = MASKED;
        }
    }
    Ok(())
}

/// Whether a tile's K/V working set overflows L2 and must be split.
pub fn needs_kv_split(pipe_depth: usize, tile_size: usize, kv_len: usize, core_num: usize, l2_bytes: usize) -> bool {
    pipe_depth * tile_size * kv_len * core_num * 4 > l2_bytes
}

/// Blocks per split: the whole span when it fits, else the largest block
/// count whose buffer fits in L2 (at least one).
pub fn split_blocks(
    pipe_depth: usize,
    tile_size: usize,
    kv_span: usize,
    core_num: usize,
    l2_bytes: usize,
    block_size: usize,
) -> usize {
    let blocks = kv_span.div_ceil(block_size).max(1);
    if !needs_kv_split(pipe_depth, tile_size, kv_span, core_num, l2_bytes) {
        return blocks;
    }
    let per_block = pipe_depth * tile_size * block_size * core_num * 4;
    (l2_bytes / per_block.max(1)).clamp(1, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Stage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn job(q: Matrix, kv_len: usize, mask: TileMask<'_>, bs: usize) -> AttentionTileJob<'_> {
        let hs = q.cols();
        AttentionTileJob {
            q,
            q_start: 0,
            kv_len,
            mask,
            scale: 1.0 / (hs as f32).sqrt(),
            block_size: bs,
        }
    }

    #[test]
    fn single_logit_returns_value_row() {
        let kv = DenseKv {
            keys: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
            values: Matrix::from_vec(1, 2, vec![0.0, 1.0]),
        };
        let j = job(Matrix::from_vec(1, 2, vec![1.0, 0.0]), 0, TileMask::Causal, 4);
        let out = run_tile(&j, &kv, 1).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn split_sizes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let kv = DenseKv {
            keys: Matrix::random(n, 8, &mut rng),
            values: Matrix::random(n, 8, &mut rng),
        };
        let j = job(Matrix::random(n, 8, &mut rng), 0, TileMask::Causal, 4);
        let a = run_tile(&j, &kv, 1).unwrap();
        let b = run_tile(&j, &kv, 4).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn short_view_is_inconsistent() {
        let kv = DenseKv {
            keys: Matrix::zeros(3, 2),
            values: Matrix::zeros(3, 2),
        };
        let j = job(Matrix::zeros(2, 2), 2, TileMask::Causal, 4);
        assert_eq!(
            run_tile(&j, &kv, 1),
            Err(AttentionError::InconsistentBlockTable { expected: 4, got: 3 })
        );
    }

    #[test]
    fn valid_len_and_skips() {
        assert_eq!(causal_valid_len(0, 0), 1);
        assert_eq!(causal_valid_len(5, 100), 106);
        let tile = TileUnit {
            stage_id: 0,
            stage: Stage::Prefill,
            head: 0,
            q_start: 0,
            q_len: 128,
            kv_len: 0,
            stage_len: 512,
        };
        assert_eq!(
            skip_plan(&tile, 128),
            SkipPlan {
                computed: 1,
                skipped: 3
            }
        );
        let decode = TileUnit {
            stage: Stage::Decode,
            q_len: 1,
            kv_len: 300,
            stage_len: 1,
            ..tile
        };
        assert_eq!(
            skip_plan(&decode, 128),
            SkipPlan {
                computed: 3,
                skipped: 0
            }
        );
        let verify = TileUnit {
            stage: Stage::Verify,
            q_len: 7,
            kv_len: 10,
            stage_len: 7,
            ..tile
        };
        assert_eq!(
            skip_plan(&verify, 4),
            SkipPlan {
                computed: 5,
                skipped: 0
            }
        );
    }

    #[test]
    fn masks_mutate_expected_cells() {
        let mask = SpecMask::from_rows(&[
            vec![true, false, false],
            vec![true, true, false],
            vec![true, false, true],
        ]);
        let mut s = Matrix::zeros(3, 5);
        apply_spec_mask(&mut s, &mask, 2).unwrap();
        assert_eq!(s.row(0), &[0.0, 0.0, 0.0, MASKED, MASKED]);
        assert_eq!(s.row(2), &[0.0, 0.0, 0.0, MASKED, 0.0]);
        assert!(apply_spec_mask(&mut Matrix::zeros(3, 4), &mask, 2).is_err());

        let mut s = Matrix::zeros(1, 8);
        zero_padded_kv(&mut s, 4, 4).unwrap();
        assert_eq!(s, Matrix::zeros(1, 8));
        zero_padded_kv(&mut s, 1, 4).unwrap();
        assert_eq!(s.row(0), &[0.0, 0.0, 0.0, 0.0, 0.0, MASKED, MASKED, MASKED]);
        assert!(zero_padded_kv(&mut s, 0, 4).is_err());
    }

    #[test]
    fn l2_split_rule() {
        assert!(!needs_kv_split(2, 128, 1024, 8, 8 << 20));
        assert!(needs_kv_split(2, 128, 4096, 8, 8 << 20));
        assert_eq!(split_blocks(2, 128, 1024, 8, 8 << 20, 128), 8);
        assert_eq!(split_blocks(2, 128, 4096, 8, 8 << 20, 128), 8);
        assert_eq!(split_blocks(2, 128, 4096, 8, 4 << 20, 128), 4);
        assert_eq!(split_blocks(2, 128, 4096, 8, 1, 128), 1);
    }
}
