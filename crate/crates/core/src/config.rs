//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, malformed values
//! and inconsistent settings are errors naming the offending key.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::kv_cache::KvCacheConfig;
use crate::planner::ModelDims;
use crate::sim::HwModel;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("config key '{key}': {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    fn new(key: &str, reason: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedConfig {
    pub budget: usize,
    pub reserve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub prefill_tile: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_size: usize,
    pub ffn: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            hidden: 64,
            heads: 4,
            kv_heads: 2,
            head_size: 16,
            ffn: 128,
            layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.hidden,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_size: self.head_size,
            ffn: self.ffn,
        }
    }

    /// Floats per token in a cached K (or V) row: every layer's K/V heads.
    pub fn kv_width(&self) -> usize {
        self.layers * self.kv_heads * self.head_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearConfig {
    /// Grid step for shape smoothing of M.
    pub smooth_step: usize,
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub kv: KvCacheConfig,
    pub sched: SchedConfig,
    pub attn: AttnConfig,
    pub hw: HwModel,
    pub model: ModelConfig,
    pub linear: LinearConfig,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            kv: KvCacheConfig {
                kv_width: model.kv_width(),
                ..KvCacheConfig::default()
            },
            sched: SchedConfig {
                budget: 4096,
                reserve: 1024,
            },
            attn: AttnConfig { prefill_tile: 128 },
            hw: HwModel::default(),
            model,
            linear: LinearConfig {
                smooth_step: 64,
                profile: None,
            },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError::new(key, format!("invalid value '{value}': {e}")))
}

impl Config {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut reserve_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::new(
                    line,
                    format!("line {}: expected 'key = value'", i + 1),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "kv.block_size" => cfg.kv.block_size = parse_num(key, value)?,
                "kv.pool_blocks" => cfg.kv.pool_blocks = parse_num(key, value)?,
                "kv.cache_cap_blocks" => cfg.kv.cache_cap_blocks = parse_num(key, value)?,
                "sched.budget" => cfg.sched.budget = parse_num(key, value)?,
                "sched.reserve" => {
                    cfg.sched.reserve = parse_num(key, value)?;
                    reserve_set = true;
                }
                "attn.prefill_tile" => cfg.attn.prefill_tile = parse_num(key, value)?,
                "attn.pipe_depth" => cfg.hw.pipe_depth = parse_num(key, value)?,
                "hw.core_num" => cfg.hw.core_num = parse_num(key, value)?,
                "hw.cube_flops_per_tick" => cfg.hw.cube_flops_per_tick = parse_num(key, value)?,
                "hw.vector_elems_per_tick" => cfg.hw.vector_elems_per_tick = parse_num(key, value)?,
                "hw.hbm_bytes_per_tick" => cfg.hw.hbm_bytes_per_tick = parse_num(key, value)?,
                "hw.l2_bytes" => cfg.hw.l2_bytes = parse_num(key, value)?,
                "hw.l2_hit_bytes_per_tick" => cfg.hw.l2_hit_bytes_per_tick = parse_num(key, value)?,
                "model.vocab" => cfg.model.vocab = parse_num(key, value)?,
                "model.hidden" => cfg.model.hidden = parse_num(key, value)?,
                "model.heads" => cfg.model.heads = parse_num(key, value)?,
                "model.kv_heads" => cfg.model.kv_heads = parse_num(key, value)?,
                "model.head_size" => cfg.model.head_size = parse_num(key, value)?,
                "model.ffn" => cfg.model.ffn = parse_num(key, value)?,
                "model.layers" => cfg.model.layers = parse_num(key, value)?,
                "linear.smooth_step" => cfg.linear.smooth_step = parse_num(key, value)?,
                "linear.profile" => {
                    let unquoted = value
                        .strip_prefix('"')
                        .and_then(|v| v.strip_suffix('"'))
                        .unwrap_or(value);
                    if unquoted.is_empty() {
                        return Err(ConfigError::new(key, "empty path"));
                    }
                    cfg.linear.profile = Some(PathBuf::from(unquoted));
                }
                _ => return Err(ConfigError::new(key, "unknown key")),
            }
        }
        if !reserve_set {
            cfg.sched.reserve = cfg.sched.budget / 4;
        }
        cfg.kv.kv_width = cfg.model.kv_width();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("kv.block_size", self.kv.block_size),
            ("kv.pool_blocks", self.kv.pool_blocks),
            ("sched.budget", self.sched.budget),
            ("attn.prefill_tile", self.attn.prefill_tile),
            ("model.vocab", self.model.vocab),
            ("model.hidden", self.model.hidden),
            ("model.heads", self.model.heads),
            ("model.kv_heads", self.model.kv_heads),
            ("model.head_size", self.model.head_size),
            ("model.ffn", self.model.ffn),
            ("model.layers", self.model.layers),
            ("linear.smooth_step", self.linear.smooth_step),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(key, "must be at least 1"));
            }
        }
        if self.kv.cache_cap_blocks > self.kv.pool_blocks {
            return Err(ConfigError::new("kv.cache_cap_blocks", "exceeds kv.pool_blocks"));
        }
        if self.sched.reserve >= self.sched.budget {
            return Err(ConfigError::new("sched.reserve", "must be below sched.budget"));
        }
        if !self.model.heads.is_multiple_of(self.model.kv_heads) {
            return Err(ConfigError::new("model.kv_heads", "must divide model.heads"));
        }
        if !self.linear.smooth_step.is_multiple_of(crate::smooth_gemm::QUANTUM) {
            return Err(ConfigError::new("linear.smooth_step", "must be a multiple of 16"));
        }
        let dims = self.model.dims();
        for op in crate::planner::LinearOp::ALL {
            let (n, k) = op.weight_shape(&dims);
            if crate::smooth_gemm::TilePrimitive::default_for(n, k).is_none() {
                return Err(ConfigError::new(
                    "model.hidden",
                    format!("{op} weight {n}x{k} has no supported tiling (N multiple of 16, K multiple of 64)"),
                ));
            }
        }
        self.hw.validate().map_err(|e| ConfigError::new("hw", e.to_string()))?;
        Ok(())
    }
}
