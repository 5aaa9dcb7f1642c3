//! Discrete-event model of a tile-based accelerator.
//!
//! Every core owns one cube unit, one vector unit and one MTE (memory
//! mover). Work is a set of operations, each bound to a unit with a fixed
//! duration and a list of dependencies. Each unit runs its operations in a
//! fixed order; an operation starts when its unit is free and all its
//! dependencies have ended. Time is in integer ticks.

mod attention;
mod linear;

pub use attention::{
    attention_items, auto_schedule, simulate_attention, simulate_attention_items, AttnCostModel, AttnItem, Schedule,
};
pub use linear::{profile_linear, profile_swizzle, simulate_linear, LinearSim, SwizzleReport};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("schedule violation: {0}")]
    ScheduleViolation(String),
    #[error("invalid hardware model: {0}")]
    InvalidHw(String),
}

/// Rates and capacities of the modeled accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HwModel {
    pub core_num: usize,
    pub cube_flops_per_tick: f64,
    pub vector_elems_per_tick: f64,
    pub hbm_bytes_per_tick: f64,
    pub l2_bytes: usize,
    pub l2_hit_bytes_per_tick: f64,
    pub pipe_depth: usize,
}

impl Default for HwModel {
    fn default() -> Self {
        Self {
            core_num: 8,
            cube_flops_per_tick: 4096.0,
            vector_elems_per_tick: 512.0,
            hbm_bytes_per_tick: 64.0,
            l2_bytes: 8 << 20,
            l2_hit_bytes_per_tick: 256.0,
            pipe_depth: 2,
        }
    }
}

impl HwModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("cube_flops_per_tick", self.cube_flops_per_tick),
            ("vector_elems_per_tick", self.vector_elems_per_tick),
            ("hbm_bytes_per_tick", self.hbm_bytes_per_tick),
            ("l2_hit_bytes_per_tick", self.l2_hit_bytes_per_tick),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r > 0.0) {
                return Err(SimError::InvalidHw(format!("{name} must be positive")));
            }
        }
        if self.core_num == 0 {
            return Err(SimError::InvalidHw("core_num must be at least 1".into()));
        }
        if self.pipe_depth < 2 {
            return Err(SimError::InvalidHw("pipe_depth must be at least 2".into()));
        }
        Ok(())
    }
}

/// Ticks to process `work` at `rate` per tick; any nonzero work takes at
/// least one tick.
pub fn ticks(work: f64, rate: f64) -> u64 {
    if work <= 0.0 {
        0
    } else {
        ((work / rate).ceil() as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    Cube,
    Vector,
    Mte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    QK,
    Softmax,
    SV,
    Update,
    Load,
    Matmul,
    Store,
}

/// One busy interval of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub core: usize,
    pub unit: Unit,
    pub kind: Kind,
    pub tile: usize,
    pub split: usize,
    pub start: u64,
    pub end: u64,
}

/// An operation for [`simulate_items`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOp {
    pub core: usize,
    pub unit: Unit,
    pub kind: Kind,
    pub tile: usize,
    pub split: usize,
    pub dur: u64,
    /// Indices of operations that must end first.
    pub deps: Vec<usize>,
}

/// Operation indices one unit executes, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitQueue {
    pub core: usize,
    pub unit: Unit,
    pub ops: Vec<usize>,
}

/// Record of a simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTrace {
    pub events: Vec<StageEvent>,
    pub makespan: u64,
    pub core_num: usize,
}

/// JSON summary of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub makespan: u64,
    pub utilization: BTreeMap<String, f64>,
    pub per_core_load: Vec<u64>,
}

impl SimTrace {
    pub fn busy(&self, unit: Unit) -> u64 {
        self.events
            .iter()
            .filter(|e| e.unit == unit)
            .map(|e| e.end - e.start)
            .sum()
    }

    pub fn per_core_busy(&self, unit: Unit) -> Vec<u64> {
        let mut out = vec![0; self.core_num];
        for e in self.events.iter().filter(|e| e.unit == unit) {
            out[e.core] += e.end - e.start;
        }
        out
    }

    /// Finish time of each core's last event.
    pub fn per_core_finish(&self) -> Vec<u64> {
        let mut out = vec![0; self.core_num];
        for e in &self.events {
            out[e.core] = out[e.core].max(e.end);
        }
        out
    }

    /// Busy fraction of a unit kind across all cores.
    pub fn utilization(&self, unit: Unit) -> f64 {
        if self.makespan == 0 {
            return 0.0;
        }
        self.busy(unit) as f64 / (self.makespan as f64 * self.core_num as f64)
    }

    pub fn summary(&self) -> SimSummary {
        let utilization = [Unit::Cube, Unit::Vector, Unit::Mte]
            .into_iter()
            .map(|u| (format!("{u:?}").to_lowercase(), self.utilization(u)))
            .collect();
        SimSummary {
            makespan: self.makespan,
            utilization,
            per_core_load: self.per_core_finish(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.summary()).expect("summary serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("core,unit,kind,tile,split,start,end\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{},{},{},{}",
                e.core, e.unit, e.kind, e.tile, e.split, e.start, e.end
            );
        }
        out
    }

    /// Checks unit exclusivity: events on one (core, unit) never overlap.
    pub fn check_exclusive(&self) -> Result<(), SimError> {
        let mut by_unit: BTreeMap<(usize, Unit), Vec<(u64, u64)>> = BTreeMap::new();
        for e in &self.events {
            by_unit.entry((e.core, e.unit)).or_default().push((e.start, e.end));
        }
        for ((core, unit), mut spans) in by_unit {
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                return Err(SimError::ScheduleViolation(format!(
                    "overlapping events on core {core} {unit:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Runs operations through fixed per-unit orders.
pub fn simulate_items(ops: &[SimOp], queues: &[UnitQueue], core_num: usize) -> Result<SimTrace, SimError> {
    let mut owner = vec![usize::MAX; ops.len()];
    for (qi, q) in queues.iter().enumerate() {
        for &o in &q.ops {
            let op = ops
                .get(o)
                .ok_or_else(|| SimError::ScheduleViolation(format!("queue references missing op {o}")))?;
            if owner[o] != usize::MAX {
                return Err(SimError::ScheduleViolation(format!("op {o} queued twice")));
            }
            if op.unit != q.unit || op.core != q.core {
                return Err(SimError::ScheduleViolation(format!("op {o} queued on the wrong unit")));
            }
            if op.core >= core_num {
                return Err(SimError::ScheduleViolation(format!(
                    "op {o} on missing core {}",
                    op.core
                )));
            }
            owner[o] = qi;
        }
    }
    if let Some(o) = owner.iter().position(|&q| q == usize::MAX) {
        return Err(SimError::ScheduleViolation(format!("op {o} is not queued")));
    }

    let mut end: Vec<Option<u64>> = vec![None; ops.len()];
    let mut head = vec![0usize; queues.len()];
    let mut free = vec![0u64; queues.len()];
    let mut events = Vec::with_capacity(ops.len());
    let mut remaining = ops.len();
    while remaining > 0 {
        let mut progress = false;
        for (qi, q) in queues.iter().enumerate() {
            while let Some(&o) = q.ops.get(head[qi]) {
                let op = &ops[o];
                let mut ready = free[qi];
                let mut blocked = false;
                for &d in &op.deps {
                    match end.get(d).copied().flatten() {
                        Some(t) => ready = ready.max(t),
                        None => {
                            blocked = true;
                            break;
                        }
                    }
                }
                if blocked {
                    break;
                }
                let finish = ready + op.dur;
                end[o] = Some(finish);
                free[qi] = finish;
                head[qi] += 1;
                remaining -= 1;
                progress = true;
                events.push(StageEvent {
                    core: op.core,
                    unit: op.unit,
                    kind: op.kind,
                    tile: op.tile,
                    split: op.split,
                    start: ready,
                    end: finish,
                });
            }
        }
        if !progress {
            return Err(SimError::ScheduleViolation(
                "dependency cycle between unit orders".into(),
            ));
        }
    }
    events.sort_by_key(|e| (e.start, e.core, e.unit, e.end, e.tile, e.split, e.kind));
    let makespan = events.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(SimTrace {
        events,
        makespan,
        core_num,
    })
}
