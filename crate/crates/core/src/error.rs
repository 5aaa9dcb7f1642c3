use thiserror::Error;

use crate::config::ConfigError;
use crate::kv_cache::KvCacheError;
use crate::meta_attention::AttentionError;
use crate::planner::PlannerError;
use crate::scheduler::SchedulerError;
use crate::sim::SimError;
use crate::smooth_gemm::GemmError;
use crate::spec_decode::SpecError;
use crate::trace::TraceError;

/// Crate-level error wrapping each subsystem's error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    KvCache(#[from] KvCacheError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Gemm(#[from] GemmError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
