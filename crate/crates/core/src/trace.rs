//! Request traces: JSONL ingestion and seeded synthetic generators.
//!
//! One request per line:
//! `{"id": 0, "arrival": 0, "prompt": [..], "output_len": 16, "spec": null}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::Request;
use crate::spec_decode::SpecShape;
use crate::{ReqId, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: ReqId,
    pub arrival: u64,
    pub prompt: Vec<TokenId>,
    pub output_len: usize,
    #[serde(default)]
    pub spec: Option<SpecShape>,
}

impl From<TraceRecord> for Request {
    fn from(r: TraceRecord) -> Self {
        Request {
            id: r.id,
            arrival: r.arrival,
            prompt: r.prompt,
            output_len: r.output_len,
            spec: r.spec,
        }
    }
}

impl From<&Request> for TraceRecord {
    fn from(r: &Request) -> Self {
        TraceRecord {
            id: r.id,
            arrival: r.arrival,
            prompt: r.prompt.clone(),
            output_len: r.output_len,
            spec: r.spec,
        }
    }
}

/// Parses JSONL; blank lines are skipped. Requests must be valid for
/// serving: nonempty prompt, at least one output token, unique ids.
pub fn parse_trace(text: &str) -> Result<Vec<Request>, TraceError> {
    let mut out: Vec<Request> = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| TraceError::Parse { line: i + 1, message };
        let rec: TraceRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.prompt.is_empty() {
            return Err(err("empty prompt".into()));
        }
        if rec.output_len == 0 {
            return Err(err("output_len must be at least 1".into()));
        }
        if let Some(s) = rec.spec {
            if s.width == 0 {
                return Err(err("spec width must be at least 1".into()));
            }
        }
        if !ids.insert(rec.id) {
            return Err(err(format!("duplicate id {}", rec.id)));
        }
        out.push(rec.into());
    }
    Ok(out)
}

pub fn write_trace(requests: &[Request]) -> String {
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(&TraceRecord::from(r)).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceProfile {
    PrefillHeavy,
    DecodeHeavy,
    ShareGptLike,
}

impl std::str::FromStr for TraceProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill_heavy" => Ok(Self::PrefillHeavy),
            "decode_heavy" => Ok(Self::DecodeHeavy),
            "sharegpt_like" => Ok(Self::ShareGptLike),
            _ => Err(format!("unknown trace profile '{s}'")),
        }
    }
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub vocab: u32,
    /// Mean ticks between arrivals (Poisson process).
    pub mean_interarrival: f64,
    /// Log-normal user-prompt length (mean and sigma of the underlying
    /// normal are derived from `prompt_mean`).
    pub prompt_mean: f64,
    pub prompt_sigma: f64,
    pub output_mean: f64,
    pub output_sigma: f64,
    pub max_len: usize,
    /// Number of shared system prefixes and the chance a prompt starts with one.
    pub system_prefixes: usize,
    pub system_prefix_len: usize,
    pub system_prefix_prob: f64,
    /// Speculation shape attached to every request, if any.
    pub spec: Option<SpecShape>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            vocab: 64,
            mean_interarrival: 20_000.0,
            prompt_mean: 160.0,
            prompt_sigma: 0.8,
            output_mean: 48.0,
            output_sigma: 0.7,
            max_len: 4096,
            system_prefixes: 4,
            system_prefix_len: 64,
            system_prefix_prob: 0.5,
            spec: None,
        }
    }
}

impl GenParams {
    /// Expected prompt length of a ShareGPT-like request, shared prefix included.
    pub fn expected_prompt_len(&self) -> f64 {
        self.prompt_mean + self.system_prefix_prob * self.system_prefix_len as f64
    }
}

fn log_normal(mean: f64, sigma: f64) -> LogNormal<f64> {
    LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("positive parameters")
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Seeded synthetic trace.
pub fn gen_trace(profile: TraceProfile, seed: u64, count: usize, params: &GenParams) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(1.0 / params.mean_interarrival).expect("positive rate");
    let prompt_len = log_normal(params.prompt_mean, params.prompt_sigma);
    let output_len = log_normal(params.output_mean, params.output_sigma);
    let prefixes: Vec<Vec<TokenId>> = (0..params.system_prefixes)
        .map(|_| random_tokens(&mut rng, params.system_prefix_len, params.vocab))
        .collect();
    let mut arrival = 0.0f64;
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        if id > 0 {
            arrival += gaps.sample(&mut rng);
        }
        let (prompt, output) = match profile {
            TraceProfile::PrefillHeavy => (random_tokens(&mut rng, 462, params.vocab), 16),
            TraceProfile::DecodeHeavy => (random_tokens(&mut rng, 462, params.vocab), 256),
            TraceProfile::ShareGptLike => {
                let user = (prompt_len.sample(&mut rng).round() as usize).clamp(1, params.max_len);
                let output = (output_len.sample(&mut rng).round() as usize).clamp(1, params.max_len);
                let mut prompt = Vec::new();
                if !prefixes.is_empty() && rng.random_bool(params.system_prefix_prob) {
                    prompt.extend_from_slice(&prefixes[rng.random_range(0..prefixes.len())]);
                }
                prompt.extend(random_tokens(&mut rng, user, params.vocab));
                (prompt, output)
            }
        };
        out.push(Request {
            id: id as ReqId,
            arrival: arrival.round() as u64,
            prompt,
            output_len: output,
            spec: params.spec,
        });
    }
    out
}
