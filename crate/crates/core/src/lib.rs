//! Serving core for dynamic LLM workloads on tile-based accelerators.
//!
//! The crate covers the whole path a scheduled chunk takes:
//!
//! - [`scheduler`] builds fixed-budget chunks that mix prefill, decode and
//!   verify tokens.
//! - [`kv_cache`] stores K/V in fixed-size blocks indexed by a radix tree so
//!   prompt prefixes are reused token by token.
//! - [`planner`] decomposes a chunk into tile units (the Token-Table) and
//!   assigns them to cores (the Task-Table).
//! - [`smooth_gemm`] and [`meta_attention`] are reference implementations of
//!   the fixed-shape GEMM and tiled attention kernels.
//! - [`spec_decode`] builds speculative token trees and their masks.
//! - [`sim`] is a discrete-event model of cube/vector/MTE units that executes
//!   Task-Tables through the attention pipelines and profiles GEMM swizzles.
//! - [`engine`] ties everything into a serving loop over a small
//!   random-weight transformer ([`model`]), with [`oracle`] providing dense
//!   references.

pub mod config;
pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod meta_attention;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod scheduler;
pub mod sim;
pub mod smooth_gemm;
pub mod spec_decode;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use kv_cache::{BlockTable, KvCacheConfig, RadixKvCache};
pub use planner::{LinearOp, TaskTable, TileUnit};
pub use scheduler::{Chunk, ChunkEntry, Scheduler, Stage};
pub use spec_decode::{SpecMask, SpecTree};
pub use tensor::Matrix;

/// Token identifier.
pub type TokenId = u32;

/// Request identifier.
pub type ReqId = u64;
