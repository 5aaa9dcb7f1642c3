//! Dense, deliberately naive references for the tiled and paged code paths.
//!
//! Nothing here shares code with the optimized kernels beyond the model
//! weights: attention and the forward pass run in f64 over full tensors.

use thiserror::Error;

use crate::config::Config;
use crate::engine::{Engine, Mode};
use crate::model::{positional, ToyModel};
use crate::scheduler::Request;
use crate::smooth_gemm::{QkvLayout, QkvSel};
use crate::spec_decode::{DraftProposer, HashProposer, SpecTree};
use crate::tensor::Matrix;
use crate::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `visible[r][j]` says whether query row `r` may see key `j`.
pub type DenseMask = Vec<Vec<bool>>;

/// Row `r` of a tile starting `q_offset` rows into a stage with `kv_len`
/// cached tokens sees keys `0..=kv_len + q_offset + r`.
pub fn causal_mask(q_len: usize, kv_total: usize, kv_len: usize, q_offset: usize) -> DenseMask {
    (0..q_len)
        .map(|r| (0..kv_total).map(|j| j <= kv_len + q_offset + r).collect())
        .collect()
}

/// Full history plus an ancestor-or-self mask over the tree nodes.
pub fn tree_mask(kv_len: usize, tree: &SpecTree) -> DenseMask {
    let anc = ancestor_mask(tree);
    anc.iter()
        .map(|row| (0..kv_len).map(|_| true).chain(row.iter().copied()).collect())
        .collect()
}

/// `m[i][j]` iff node `j` is `i` or one of its ancestors, by walking parents.
pub fn ancestor_mask(tree: &SpecTree) -> DenseMask {
    (0..tree.len())
        .map(|i| {
            let mut row = vec![false; tree.len()];
            let mut cur = Some(i);
            while let Some(c) = cur {
                row[c] = true;
                cur = tree.parent(c);
            }
            row
        })
        .collect()
}

/// Softmax probabilities `q_len x kv` in f64; masked keys get exactly 0.
pub fn dense_attention_probs(
    q: &Matrix,
    k: &Matrix,
    mask: &DenseMask,
    scale: f64,
) -> Result<Vec<Vec<f64>>, OracleError> {
    if q.cols() != k.cols() {
        return Err(OracleError::ShapeMismatch(format!(
            "q has {} columns, k has {}",
            q.cols(),
            k.cols()
        )));
    }
    if mask.len() != q.rows() || mask.iter().any(|m| m.len() != k.rows()) {
        return Err(OracleError::ShapeMismatch("mask does not match q x k".into()));
    }
    let mut out = Vec::with_capacity(q.rows());
    for (r, visible) in mask.iter().enumerate() {
        let scores: Vec<Option<f64>> = (0..k.rows())
            .map(|j| {
                visible[j].then(|| {
                    q.row(r)
                        .iter()
                        .zip(k.row(j))
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>()
                        * scale
                })
            })
            .collect();
        let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
        let sum: f64 = exps.iter().sum();
        out.push(exps.iter().map(|e| if sum > 0.0 { e / sum } else { 0.0 }).collect());
    }
    Ok(out)
}

/// `softmax(q k^T * scale + mask) v` in f64.
pub fn dense_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &DenseMask,
    scale: f64,
) -> Result<Vec<Vec<f64>>, OracleError> {
    if k.rows() != v.rows() {
        return Err(OracleError::ShapeMismatch(format!(
            "k has {} rows, v has {}",
            k.rows(),
            v.rows()
        )));
    }
    let p = dense_attention_probs(q, k, mask, scale)?;
    Ok(p.iter()
        .map(|row| {
            (0..v.cols())
                .map(|c| row.iter().enumerate().map(|(j, pj)| pj * v.get(j, c) as f64).sum())
                .collect()
        })
        .collect())
}

/// Naive `A * B` accumulating in f32 over ascending k.
pub fn dense_gemm(a: &Matrix, b: &Matrix) -> Result<Matrix, OracleError> {
    if a.cols() != b.rows() {
        return Err(OracleError::ShapeMismatch(format!(
            "{}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut acc = 0.0f32;
        for k in 0..a.cols() {
            acc += a.get(i, k) * b.get(k, j);
        }
        acc
    }))
}

/// Naive `A * B` in f64.
pub fn dense_gemm_f64(a: &Matrix, b: &Matrix) -> Result<Vec<Vec<f64>>, OracleError> {
    if a.cols() != b.rows() {
        return Err(OracleError::ShapeMismatch(format!(
            "{}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok((0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|k| a.get(i, k) as f64 * b.get(k, j) as f64).sum())
                .collect()
        })
        .collect())
}

/// Explicit split of a fused `[tokens, width]` QKV tensor into one
/// `tokens x head_size` matrix per head of `sel`.
pub fn split_heads(qkv: &Matrix, layout: QkvLayout, sel: QkvSel) -> Vec<Matrix> {
    let heads = match sel {
        QkvSel::Q => layout.heads,
        QkvSel::K | QkvSel::V => layout.kv_heads,
    };
    let base = match sel {
        QkvSel::Q => 0,
        QkvSel::K => layout.heads,
        QkvSel::V => layout.heads + layout.kv_heads,
    };
    (0..heads)
        .map(|h| {
            Matrix::from_fn(qkv.rows(), layout.head_size, |r, c| {
                qkv.get(r, (base + h) * layout.head_size + c)
            })
        })
        .collect()
}

/// Explicit permute of per-head outputs back to `[tokens, heads * head_size]`.
pub fn merge_heads(per_head: &[Matrix]) -> Matrix {
    let hs = per_head.first().map_or(0, Matrix::cols);
    let rows = per_head.first().map_or(0, Matrix::rows);
    Matrix::from_fn(rows, per_head.len() * hs, |r, c| per_head[c / hs].get(r, c % hs))
}

/// Longest common prefix of `query` with any of `paths`.
pub fn brute_force_lcp(paths: &[Vec<TokenId>], query: &[TokenId]) -> usize {
    paths
        .iter()
        .map(|p| p.iter().zip(query).take_while(|(a, b)| a == b).count())
        .max()
        .unwrap_or(0)
}

/// Longest accepted path found by checking every root path independently.
/// Ties go to the path ending at the lowest node index.
pub fn brute_force_accept(tree: &SpecTree, context_next: TokenId, target_next: &[TokenId]) -> Vec<usize> {
    if tree.is_empty() || tree.token(0) != context_next {
        return Vec::new();
    }
    let mut best: Vec<usize> = vec![0];
    for end in 0..tree.len() {
        let path = tree.path_to(end);
        let ok = path.windows(2).all(|w| tree.token(w[1]) == target_next[w[0]]);
        if ok && path.len() > best.len() {
            best = path;
        }
    }
    best
}

fn rms64(x: &[f64], w: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + crate::model::RMS_EPS as f64).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * *g as f64).collect()
}

fn matvec(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j) as f64).sum())
        .collect()
}

/// Logits after every position of `tokens`, recomputed from scratch in f64
/// with full causal attention and no cache.
pub fn dense_forward(model: &ToyModel, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let c = model.cfg;
    let hs = c.head_size;
    let group = c.heads / c.kv_heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            model
                .embed
                .row(t as usize % c.vocab)
                .iter()
                .enumerate()
                .map(|(i, &e)| (e + positional(p, i, c.hidden) as f32) as f64)
                .collect()
        })
        .collect();
    for w in &model.layers {
        let qkv: Vec<Vec<f64>> = x.iter().map(|r| matvec(&rms64(r, &w.attn_norm), &w.w_qkv)).collect();
        let q_off = |h: usize| h * hs;
        let k_off = |h: usize| (c.heads + h) * hs;
        let v_off = |h: usize| (c.heads + c.kv_heads + h) * hs;
        let mut attn = vec![vec![0.0f64; c.heads * hs]; tokens.len()];
        for (i, out) in attn.iter_mut().enumerate() {
            for h in 0..c.heads {
                let kvh = h / group;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..hs)
                            .map(|d| qkv[i][q_off(h) + d] * qkv[j][k_off(kvh) + d])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for d in 0..hs {
                    out[h * hs + d] = exps
                        .iter()
                        .enumerate()
                        .map(|(j, e)| e / sum * qkv[j][v_off(kvh) + d])
                        .sum();
                }
            }
        }
        for (xi, a) in x.iter_mut().zip(&attn) {
            for (v, o) in xi.iter_mut().zip(matvec(a, &w.w_o)) {
                *v += o;
            }
        }
        for xi in x.iter_mut() {
            let gu = matvec(&rms64(xi, &w.mlp_norm), &w.w_gate_up);
            let act: Vec<f64> = (0..c.ffn)
                .map(|j| {
                    let g = gu[j];
                    g / (1.0 + (-g).exp()) * gu[c.ffn + j]
                })
                .collect();
            for (v, d) in xi.iter_mut().zip(matvec(&act, &w.w_down)) {
                *v += d;
            }
        }
    }
    x.iter()
        .map(|r| matvec(&rms64(r, &model.final_norm), &model.lm_head))
        .collect()
}

/// How [`tiny_forward`] evaluates the model.
#[derive(Debug, Clone)]
pub enum CacheMode {
    /// Dense f64 recompute.
    None,
    /// Through the serving engine with paged K/V: `warmup` prompts are served
    /// first so later prompts can reuse cached prefixes.
    PagedPrefix {
        config: Box<Config>,
        warmup: Vec<Vec<TokenId>>,
    },
}

/// Next-token logits after `tokens`.
pub fn tiny_forward(model: &ToyModel, tokens: &[TokenId], mode: &CacheMode) -> crate::Result<Vec<f64>> {
    match mode {
        CacheMode::None => Ok(dense_forward(model, tokens).pop().unwrap_or_default()),
        CacheMode::PagedPrefix { config, warmup } => {
            let mut engine = Engine::new(
                (**config).clone(),
                Mode::Numeric,
                Some(model.clone()),
                Box::new(HashProposer::new(0, model.cfg.vocab as u32)),
                0,
            )?;
            engine.set_record_logits(true);
            let mut id = 0;
            for prompt in warmup.iter().chain(std::iter::once(&tokens.to_vec())) {
                engine.run(vec![Request {
                    id,
                    arrival: engine.clock(),
                    prompt: prompt.clone(),
                    output_len: 1,
                    spec: None,
                }])?;
                id += 1;
            }
            let rec = &engine.records()[&(id - 1)];
            Ok(rec.logits[0].iter().map(|&v| v as f64).collect())
        }
    }
}

/// Drafts whose first candidate is the dense model's own greedy choice, so
/// verification of its trees accepts at least one draft per level. The
/// remaining candidates are distinct hash tokens.
pub struct GreedyOracleProposer {
    model: ToyModel,
    fallback: HashProposer,
}

impl GreedyOracleProposer {
    pub fn new(model: ToyModel, seed: u64) -> Self {
        let vocab = model.cfg.vocab as u32;
        Self {
            model,
            fallback: HashProposer::new(seed, vocab),
        }
    }
}

impl DraftProposer for GreedyOracleProposer {
    fn propose(&self, context: &[TokenId], width: usize) -> Vec<TokenId> {
        let logits = dense_forward(&self.model, context).pop().unwrap_or_default();
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        let mut out = vec![best as TokenId];
        for t in self.fallback.propose(context, width + 1) {
            if out.len() == width {
                break;
            }
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out.truncate(width);
        out
    }
}
