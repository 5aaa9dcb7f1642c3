//! Small random-weight decoder used to exercise the serving path end to end.
//!
//! Pre-norm blocks: `x += OProj(attn(QKV(rms(x))))`, then
//! `x += Down(silu(gate) * up)` with `[gate | up] = GateUp(rms(x))`.
//! Token embeddings are summed with sinusoidal absolute positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::tensor::Matrix;
use crate::TokenId;

pub const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `hidden x (heads + 2 kv_heads) * head_size`.
    pub w_qkv: Matrix,
    /// `heads * head_size x hidden`.
    pub w_o: Matrix,
    pub mlp_norm: Vec<f32>,
    /// `hidden x 2 ffn`, gate columns first.
    pub w_gate_up: Matrix,
    /// `ffn x hidden`.
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    /// `vocab x hidden`.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `hidden x vocab`.
    pub lm_head: Matrix,
}

fn scaled(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    // Uniform with unit variance per input, divided by sqrt(fan-in).
    let s = (3.0 / rows as f32).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

fn norm_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect()
}

impl ToyModel {
    pub fn random(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qkv = (cfg.heads + 2 * cfg.kv_heads) * cfg.head_size;
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: norm_weights(cfg.hidden, &mut rng),
                w_qkv: scaled(cfg.hidden, qkv, &mut rng),
                w_o: scaled(cfg.heads * cfg.head_size, cfg.hidden, &mut rng),
                mlp_norm: norm_weights(cfg.hidden, &mut rng),
                w_gate_up: scaled(cfg.hidden, 2 * cfg.ffn, &mut rng),
                w_down: scaled(cfg.ffn, cfg.hidden, &mut rng),
            })
            .collect();
        Self {
            embed: Matrix::from_fn(cfg.vocab, cfg.hidden, |_, _| rng.random_range(-1.0..1.0)),
            layers,
            final_norm: norm_weights(cfg.hidden, &mut rng),
            lm_head: scaled(cfg.hidden, cfg.vocab, &mut rng),
            cfg,
        }
    }

    /// Embedding of `token` at absolute position `pos`.
    pub fn input_row(&self, token: TokenId, pos: usize) -> Vec<f32> {
        let d = self.cfg.hidden;
        self.embed
            .row(token as usize % self.cfg.vocab)
            .iter()
            .enumerate()
            .map(|(i, &e)| e + positional(pos, i, d) as f32)
            .collect()
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.cfg.head_size as f32).sqrt()
    }
}

/// Sinusoidal encoding: `sin(pos / 10000^(2i/d))` on even dims, `cos` on odd.
pub fn positional(pos: usize, dim: usize, d: usize) -> f64 {
    let i = (dim / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn rms_norm(x: &[f32], w: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let cfg = ModelConfig::default();
        let m = ToyModel::random(cfg, 3);
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].w_qkv.cols(), 128);
        assert_eq!(m.lm_head.cols(), 64);
        assert_eq!(m, ToyModel::random(cfg, 3));
        assert_ne!(m.embed, ToyModel::random(cfg, 4).embed);
    }

    #[test]
    fn helpers() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert!((silu(0.0)).abs() < 1e-7);
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0]);
        let ms = (y[0] * y[0] + y[1] * y[1]) / 2.0;
        assert!((ms - 1.0).abs() < 1e-4);
        assert_eq!(positional(0, 0, 8), 0.0);
        assert_eq!(positional(0, 1, 8), 1.0);
    }
}
