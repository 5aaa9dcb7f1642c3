//! Fixed-shape GEMM with virtual padding on M, plus the strided QKV/O
//! layout helpers that replace explicit split and permute passes.
//!
//! A tile primitive only ever multiplies full `tile_m x tile_k` by
//! `tile_k x tile_n` blocks. Rows of A beyond M are never read from memory;
//! the on-chip buffer rows are simply zero. Output rows beyond M are never
//! written.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

/// Hardware tile quantum along every GEMM dimension.
pub const QUANTUM: usize = 16;
pub const TILE_MN_SET: [usize; 5] = [16, 32, 64, 128, 256];
pub const TILE_K_SET: [usize; 2] = [64, 128];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GemmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("tile order is not a permutation of the {rows}x{cols} grid")]
    InvalidOrder { rows: usize, cols: usize },
    #[error("unsupported tile primitive {m}x{n}x{k}")]
    UnsupportedPrimitive { m: usize, n: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TilePrimitive {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
}

impl TilePrimitive {
    pub fn new(tile_m: usize, tile_n: usize, tile_k: usize) -> Result<Self, GemmError> {
        if !TILE_MN_SET.contains(&tile_m) || !TILE_MN_SET.contains(&tile_n) || !TILE_K_SET.contains(&tile_k) {
            return Err(GemmError::UnsupportedPrimitive {
                m: tile_m,
                n: tile_n,
                k: tile_k,
            });
        }
        Ok(Self { tile_m, tile_n, tile_k })
    }

    /// Every supported primitive, in ascending (m, n, k) order.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::new();
        for m in TILE_MN_SET {
            for n in TILE_MN_SET {
                for k in TILE_K_SET {
                    out.push(Self {
                        tile_m: m,
                        tile_n: n,
                        tile_k: k,
                    });
                }
            }
        }
        out
    }

    /// Whether the primitive tiles N and K without remainders.
    pub fn fits(&self, n: usize, k: usize) -> bool {
        n.is_multiple_of(self.tile_n) && k.is_multiple_of(self.tile_k)
    }

    /// A reasonable primitive for an N x K weight when no profile exists:
    /// the widest tileN up to 128 and the deepest tileK dividing the shape.
    pub fn default_for(n: usize, k: usize) -> Option<Self> {
        let tile_n = TILE_MN_SET
            .iter()
            .rev()
            .copied()
            .find(|&t| t <= 128 && n.is_multiple_of(t))?;
        let tile_k = TILE_K_SET.iter().rev().copied().find(|&t| k.is_multiple_of(t))?;
        Some(Self {
            tile_m: 64,
            tile_n,
            tile_k,
        })
    }

    /// Tile grid (rows, cols) covering an `m x n` output with M virtually
    /// padded to the tile.
    pub fn grid(&self, m: usize, n: usize) -> (usize, usize) {
        (m.div_ceil(self.tile_m), n.div_ceil(self.tile_n))
    }

    pub fn kernel_id(&self) -> String {
        self.to_string()
    }
}

impl std::fmt::Display for TilePrimitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.tile_m, self.tile_n, self.tile_k)
    }
}

impl std::str::FromStr for TilePrimitive {
    type Err = GemmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GemmError::ShapeMismatch(format!("bad tile primitive '{s}'"));
        let dims: Vec<usize> = s
            .split('x')
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match dims[..] {
            [m, n, k] => Self::new(m, n, k),
            _ => Err(bad()),
        }
    }
}

/// Smallest supported M not below `m`: a multiple of `tile_m`, capped at the
/// budget, which is always supported.
pub fn smooth_shape(m: usize, budget: usize, tile_m: usize) -> usize {
    debug_assert!(m >= 1 && m <= budget);
    m.next_multiple_of(tile_m).min(budget)
}

/// `A (m x k) * B (k x n)` through fixed tiles visited in `order`.
pub fn gemm_virtual_pad(
    a: &Matrix,
    b: &Matrix,
    prim: TilePrimitive,
    order: &[(usize, usize)],
) -> Result<Matrix, GemmError> {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    let ldc = b.cols();
    gemm_virtual_pad_into(a, b, prim, order, c.as_mut_slice(), ldc)?;
    Ok(c)
}

/// Row-major visit order over a `rows x cols` tile grid.
pub fn row_major_order(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

/// Like [`gemm_virtual_pad`] but writes into `out` with row stride `ldc`.
/// Only elements `(r, c)` with `r < m` and `c < n` are written.
pub fn gemm_virtual_pad_into(
    a: &Matrix,
    b: &Matrix,
    prim: TilePrimitive,
    order: &[(usize, usize)],
    out: &mut [f32],
    ldc: usize,
) -> Result<(), GemmError> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(GemmError::ShapeMismatch(format!(
            "A is {m}x{k} but B is {}x{n}",
            b.rows()
        )));
    }
    if !prim.fits(n, k) {
        return Err(GemmError::ShapeMismatch(format!(
            "N={n}, K={k} not divisible by tile {prim}"
        )));
    }
    if ldc < n || (m > 0 && out.len() < (m - 1) * ldc + n) {
        return Err(GemmError::ShapeMismatch(format!(
            "output buffer of {} with ldc {ldc} cannot hold {m}x{n}",
            out.len()
        )));
    }
    let (rows, cols) = prim.grid(m, n);
    check_permutation(order, rows, cols)?;

    let TilePrimitive {
        tile_m: tm,
        tile_n: tn,
        tile_k: tk,
    } = prim;
    let mut a_buf = vec![0.0f32; tm * tk];
    let mut b_buf = vec![0.0f32; tk * tn];
    let mut acc = vec![0.0f32; tm * tn];
    for &(tr, tc) in order {
        let m0 = tr * tm;
        let valid_m = (m - m0).min(tm);
        let n0 = tc * tn;
        acc.fill(0.0);
        for k0 in (0..k).step_by(tk) {
            // Selective read: only valid rows leave global memory; the rest of
            // the on-chip buffer stays zero.
            a_buf.fill(0.0);
            for i in 0..valid_m {
                a_buf[i * tk..(i + 1) * tk].copy_from_slice(&a.row(m0 + i)[k0..k0 + tk]);
            }
            for kk in 0..tk {
                b_buf[kk * tn..(kk + 1) * tn].copy_from_slice(&b.row(k0 + kk)[n0..n0 + tn]);
            }
            tile_mma(&a_buf, &b_buf, &mut acc, tm, tn, tk);
        }
        for i in 0..valid_m {
            let dst = (m0 + i) * ldc + n0;
            out[dst..dst + tn].copy_from_slice(&acc[i * tn..(i + 1) * tn]);
        }
    }
    Ok(())
}

/// Full fixed-shape tile product `acc += a * b`, ascending k.
#[inline]
fn tile_mma(a: &[f32], b: &[f32], acc: &mut [f32], tm: usize, tn: usize, tk: usize) {
    for i in 0..tm {
        let acc_row = &mut acc[i * tn..(i + 1) * tn];
        for kk in 0..tk {
            let av = a[i * tk + kk];
            let b_row = &b[kk * tn..(kk + 1) * tn];
            for (c, bv) in acc_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

fn check_permutation(order: &[(usize, usize)], rows: usize, cols: usize) -> Result<(), GemmError> {
    let bad = GemmError::InvalidOrder { rows, cols };
    if order.len() != rows * cols {
        return Err(bad);
    }
    let mut seen = vec![false; rows * cols];
    for &(r, c) in order {
        if r >= rows || c >= cols || std::mem::replace(&mut seen[r * cols + c], true) {
            return Err(bad);
        }
    }
    Ok(())
}

/// Which section of a fused QKV row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkvSel {
    Q,
    K,
    V,
}

/// Layout of a fused `[tokens, heads + 2 * kv_heads, head_size]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QkvLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_size: usize,
}

impl QkvLayout {
    /// Floats per token row.
    pub fn width(&self) -> usize {
        (self.heads + 2 * self.kv_heads) * self.head_size
    }

    pub fn section_heads(&self, sel: QkvSel) -> usize {
        match sel {
            QkvSel::Q => self.heads,
            QkvSel::K | QkvSel::V => self.kv_heads,
        }
    }

    /// Column offset of `head` within `sel` in a token row.
    pub fn offset(&self, sel: QkvSel, head: usize) -> usize {
        let base = match sel {
            QkvSel::Q => 0,
            QkvSel::K => self.heads,
            QkvSel::V => self.heads + self.kv_heads,
        };
        (base + head) * self.head_size
    }
}

/// Strided read of one head's Q, K or V rows straight out of the fused QKV
/// tensor.
pub fn fused_qkv_read(
    qkv: &[f32],
    layout: QkvLayout,
    sel: QkvSel,
    head: usize,
    rows: Range<usize>,
) -> Result<Matrix, GemmError> {
    let width = layout.width();
    let tokens = qkv.len() / width.max(1);
    if head >= layout.section_heads(sel) {
        return Err(GemmError::IndexOutOfRange(format!(
            "{sel:?} head {head} of {}",
            layout.section_heads(sel)
        )));
    }
    if rows.start > rows.end || rows.end > tokens || !qkv.len().is_multiple_of(width) {
        return Err(GemmError::IndexOutOfRange(format!("rows {rows:?} of {tokens} tokens")));
    }
    let hs = layout.head_size;
    let off = layout.offset(sel, head);
    let mut out = Matrix::zeros(rows.len(), hs);
    for (i, r) in rows.enumerate() {
        out.row_mut(i)
            .copy_from_slice(&qkv[r * width + off..r * width + off + hs]);
    }
    Ok(out)
}

/// Strided write of one head's output tile into `[tokens, heads, head_size]`.
pub fn fused_sv_write(
    o: &mut [f32],
    heads: usize,
    head: usize,
    row_start: usize,
    tile: &Matrix,
) -> Result<(), GemmError> {
    let hs = tile.cols();
    let width = heads * hs;
    if head >= heads || (row_start + tile.rows()) * width > o.len() {
        return Err(GemmError::IndexOutOfRange(format!(
            "head {head} rows {row_start}..{} into buffer of {}",
            row_start + tile.rows(),
            o.len()
        )));
    }
    for i in 0..tile.rows() {
        let dst = (row_start + i) * width + head * hs;
        o[dst..dst + hs].copy_from_slice(tile.row(i));
    }
    Ok(())
}
