//! Deterministic fixtures shared by the criterion benches.

use tokenwise_core::meta_attention::DenseKv;
use tokenwise_core::scheduler::{Chunk, ChunkEntry, Request, Stage};
use tokenwise_core::tensor::Matrix;
use tokenwise_core::trace::{gen_trace, GenParams, TraceProfile};

/// Matrix with entries in `[-1, 1)` from an integer hash of `(salt, r, c)`.
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| {
        let mut x = salt ^ ((r as u64) << 32 | c as u64);
        x = (x ^ (x >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
        x = (x ^ (x >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        x ^= x >> 33;
        (x >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

pub fn dense_kv(len: usize, head_size: usize, salt: u64) -> DenseKv {
    DenseKv {
        keys: matrix(len, head_size, salt),
        values: matrix(len, head_size, salt ^ 0x55),
    }
}

/// One prefill of `prefill` new tokens over a `history`-token prefix plus
/// `decodes` decode requests with growing histories.
pub fn mixed_chunk(prefill: usize, history: usize, decodes: usize) -> Chunk {
    let mut chunk = Chunk {
        entries: Vec::new(),
        total_tokens: 0,
    };
    let mut push = |stage: Stage, token_num: usize, kv_len: usize| {
        let req_id = chunk.entries.len() as u64;
        chunk.entries.push(ChunkEntry {
            req_id,
            stage,
            start_pos: chunk.total_tokens,
            token_num,
            kv_len,
            tokens: vec![0; token_num],
            last_part: stage == Stage::Prefill,
            tree: None,
        });
        chunk.total_tokens += token_num;
    };
    for d in 0..decodes {
        push(Stage::Decode, 1, 256 + 97 * d);
    }
    if prefill > 0 {
        push(Stage::Prefill, prefill, history);
    }
    chunk
}

pub fn sharegpt_trace(count: usize, seed: u64) -> Vec<Request> {
    gen_trace(TraceProfile::ShareGptLike, seed, count, &GenParams::default())
}
