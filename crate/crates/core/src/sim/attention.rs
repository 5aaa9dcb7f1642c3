//! Attention pipelines over a Task-Table.
//!
//! Each tile is cut into K/V splits; a split is one pipeline item with the
//! stages QK (cube), Softmax (vector), SV (cube) and, when the tile has more
//! than one split, Update (vector).
//!
//! - `Seq` runs every stage of every item back to back.
//! - `Pipe3` interleaves the cube as QK1, QK2, SV1, QK3, SV2, ... so the
//!   vector softmax of one item overlaps the cube work of its neighbours.
//!   It has no Update stage and so only accepts unsplit tiles.
//! - `Pipe4` adds Update: after a prologue in which the first softmax
//!   completes before the second QK is issued, the cube alternates
//!   [QK(k+1), SV(k)] and the vector alternates [Softmax(k+1), Update(k)].
//! - `DecodePipe` moves QK onto the vector unit next to Softmax, leaving SV
//!   on the cube; it only accepts single-row tiles.

use serde::{Deserialize, Serialize};

use super::{simulate_items, ticks, HwModel, Kind, SimError, SimOp, SimTrace, Unit, UnitQueue};
use crate::meta_attention::{skip_plan, split_blocks};
use crate::planner::{TaskTable, TileUnit};
use crate::smooth_gemm::QUANTUM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    Seq,
    Pipe3,
    Pipe4,
    DecodePipe,
}

/// One K/V split of a tile with its per-stage costs in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnItem {
    pub tile: usize,
    pub split: usize,
    pub q_len: usize,
    pub qk: u64,
    /// QK cost when run on the vector unit.
    pub qk_vector: u64,
    pub softmax: u64,
    pub sv: u64,
    /// Zero when the tile is not split.
    pub update: u64,
}

impl AttnItem {
    /// An item whose four stages all cost `t`.
    pub fn uniform(tile: usize, t: u64) -> Self {
        Self {
            tile,
            split: 0,
            q_len: 1,
            qk: t,
            qk_vector: t,
            softmax: t,
            sv: t,
            update: t,
        }
    }
}

/// Geometry needed to cost attention tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnCostModel {
    pub head_size: usize,
    pub block_size: usize,
}

/// Expands a Task-Table into per-core pipeline items. Tiles are numbered
/// core by core in table order.
pub fn attention_items(table: &TaskTable<TileUnit>, hw: &HwModel, cost: AttnCostModel) -> Vec<Vec<AttnItem>> {
    let bs = cost.block_size;
    let hs = cost.head_size as f64;
    let mut tile_id = 0;
    table
        .per_core
        .iter()
        .map(|tiles| {
            let mut items = Vec::new();
            for t in tiles {
                let computed = skip_plan(t, bs).computed;
                let per_split = split_blocks(hw.pipe_depth, t.q_len, t.kv_span(), hw.core_num, hw.l2_bytes, bs);
                let splits = computed.div_ceil(per_split);
                let q = t.q_len as f64;
                let q_pad = t.q_len.next_multiple_of(QUANTUM) as f64;
                for s in 0..splits {
                    let blocks = per_split.min(computed - s * per_split);
                    let span = (blocks * bs) as f64;
                    let mm = ticks(2.0 * q_pad * span * hs, hw.cube_flops_per_tick);
                    items.push(AttnItem {
                        tile: tile_id,
                        split: s,
                        q_len: t.q_len,
                        qk: mm,
                        qk_vector: ticks(q * span * hs, hw.vector_elems_per_tick),
                        softmax: ticks(q * span, hw.vector_elems_per_tick),
                        sv: mm,
                        update: if splits > 1 {
                            ticks(q * hs, hw.vector_elems_per_tick)
                        } else {
                            0
                        },
                    });
                }
                tile_id += 1;
            }
            items
        })
        .collect()
}

/// The pipeline a tile set calls for: DecodePipe for all-decode work, Pipe4
/// when any tile is split, Pipe3 otherwise.
pub fn auto_schedule(per_core: &[Vec<AttnItem>]) -> Schedule {
    let items = || per_core.iter().flatten();
    if items().next().is_some() && items().all(|i| i.q_len == 1) {
        Schedule::DecodePipe
    } else if items().any(|i| i.update > 0) {
        Schedule::Pipe4
    } else {
        Schedule::Pipe3
    }
}

pub fn simulate_attention(
    table: &TaskTable<TileUnit>,
    hw: &HwModel,
    cost: AttnCostModel,
    schedule: Schedule,
) -> Result<SimTrace, SimError> {
    let items = attention_items(table, hw, cost);
    simulate_attention_items(&items, schedule)
}

struct Builder {
    ops: Vec<SimOp>,
    queues: Vec<UnitQueue>,
}

impl Builder {
    fn push(&mut self, core: usize, unit: Unit, kind: Kind, item: &AttnItem, dur: u64, deps: Vec<usize>) -> usize {
        self.ops.push(SimOp {
            core,
            unit,
            kind,
            tile: item.tile,
            split: item.split,
            dur,
            deps,
        });
        self.ops.len() - 1
    }
}

/// Runs per-core item lists through `schedule`.
pub fn simulate_attention_items(per_core: &[Vec<AttnItem>], schedule: Schedule) -> Result<SimTrace, SimError> {
    let all = || per_core.iter().flatten();
    match schedule {
        Schedule::Pipe3 if all().any(|i| i.update > 0) => {
            return Err(SimError::ScheduleViolation(
                "Pipe3 has no Update stage for split tiles".into(),
            ))
        }
        Schedule::Pipe4 if !all().any(|i| i.update > 0) => {
            return Err(SimError::ScheduleViolation("Pipe4 requires K/V splitting".into()))
        }
        Schedule::DecodePipe if all().any(|i| i.q_len != 1) => {
            return Err(SimError::ScheduleViolation(
                "DecodePipe requires single-row tiles".into(),
            ))
        }
        _ => {}
    }

    let mut b = Builder {
        ops: Vec::new(),
        queues: Vec::new(),
    };
    for (core, items) in per_core.iter().enumerate() {
        let mut cube = Vec::new();
        let mut vector = Vec::new();
        match schedule {
            Schedule::Seq => {
                let mut prev: Option<usize> = None;
                for it in items {
                    let qk = b.push(core, Unit::Cube, Kind::QK, it, it.qk, prev.into_iter().collect());
                    let s = b.push(core, Unit::Vector, Kind::Softmax, it, it.softmax, vec![qk]);
                    let sv = b.push(core, Unit::Cube, Kind::SV, it, it.sv, vec![s]);
                    cube.extend([qk, sv]);
                    vector.push(s);
                    prev = Some(sv);
                    if it.update > 0 {
                        let u = b.push(core, Unit::Vector, Kind::Update, it, it.update, vec![sv]);
                        vector.push(u);
                        prev = Some(u);
                    }
                }
            }
            Schedule::Pipe3 | Schedule::Pipe4 => {
                let mut qk = Vec::new();
                let mut s = Vec::new();
                let mut sv = Vec::new();
                let mut u = Vec::new();
                for (k, it) in items.iter().enumerate() {
                    let mut deps = Vec::new();
                    if schedule == Schedule::Pipe4 && k == 1 {
                        deps.push(s[0]);
                    }
                    let q = b.push(core, Unit::Cube, Kind::QK, it, it.qk, deps);
                    let sm = b.push(core, Unit::Vector, Kind::Softmax, it, it.softmax, vec![q]);
                    let o = b.push(core, Unit::Cube, Kind::SV, it, it.sv, vec![sm]);
                    let up = (it.update > 0).then(|| b.push(core, Unit::Vector, Kind::Update, it, it.update, vec![o]));
                    qk.push(q);
                    s.push(sm);
                    sv.push(o);
                    u.push(up);
                }
                interleave(&qk, &sv, &s, &u, &mut cube, &mut vector);
            }
            Schedule::DecodePipe => {
                let mut qks = Vec::new();
                let mut sv = Vec::new();
                let mut u = Vec::new();
                for it in items {
                    let q = b.push(core, Unit::Vector, Kind::QK, it, it.qk_vector, vec![]);
                    let sm = b.push(core, Unit::Vector, Kind::Softmax, it, it.softmax, vec![q]);
                    let o = b.push(core, Unit::Cube, Kind::SV, it, it.sv, vec![sm]);
                    let up = (it.update > 0).then(|| b.push(core, Unit::Vector, Kind::Update, it, it.update, vec![o]));
                    qks.push((q, sm));
                    sv.push(o);
                    u.push(up);
                }
                cube = sv;
                if let Some(&(q, sm)) = qks.first() {
                    vector.extend([q, sm]);
                }
                for (k, up) in u.iter().enumerate() {
                    if let Some(&(q, sm)) = qks.get(k + 1) {
                        vector.extend([q, sm]);
                    }
                    vector.extend(*up);
                }
            }
        }
        b.queues.push(UnitQueue {
            core,
            unit: Unit::Cube,
            ops: cube,
        });
        b.queues.push(UnitQueue {
            core,
            unit: Unit::Vector,
            ops: vector,
        });
    }
    simulate_items(&b.ops, &b.queues, per_core.len().max(1))
}

/// Cube: QK1, then [QK(k+1), SV(k)]; vector: S1, then [S(k+1), U(k)].
fn interleave(
    qk: &[usize],
    sv: &[usize],
    s: &[usize],
    u: &[Option<usize>],
    cube: &mut Vec<usize>,
    vector: &mut Vec<usize>,
) {
    if qk.is_empty() {
        return;
    }
    cube.push(qk[0]);
    vector.push(s[0]);
    for k in 0..qk.len() {
        if let Some(&next) = qk.get(k + 1) {
            cube.push(next);
        }
        cube.push(sv[k]);
        if let Some(&next) = s.get(k + 1) {
            vector.push(next);
        }
        vector.extend(u[k]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize, t: u64, update: bool) -> Vec<Vec<AttnItem>> {
        vec![(0..n)
            .map(|i| AttnItem {
                update: if update { t } else { 0 },
                ..AttnItem::uniform(i, t)
            })
            .collect()]
    }

    #[test]
    fn pipe4_closed_form() {
        for n in 1..=20 {
            let items = uniform(n, 5, true);
            let seq = simulate_attention_items(&items, Schedule::Seq).unwrap();
            let p4 = simulate_attention_items(&items, Schedule::Pipe4).unwrap();
            assert_eq!(seq.makespan, 4 * n as u64 * 5);
            assert_eq!(p4.makespan, (2 * n as u64 + 2) * 5);
            p4.check_exclusive().unwrap();
        }
    }

    #[test]
    fn pipe3_closed_form() {
        for n in 1..=20 {
            let items = uniform(n, 3, false);
            let seq = simulate_attention_items(&items, Schedule::Seq).unwrap();
            let p3 = simulate_attention_items(&items, Schedule::Pipe3).unwrap();
            assert_eq!(seq.makespan, 3 * n as u64 * 3);
            assert_eq!(p3.makespan, 2 * n as u64 * 3 + if n == 1 { 3 } else { 0 });
        }
    }

    #[test]
    fn preconditions() {
        let split = uniform(3, 1, true);
        let whole = uniform(3, 1, false);
        assert!(simulate_attention_items(&split, Schedule::Pipe3).is_err());
        assert!(simulate_attention_items(&whole, Schedule::Pipe4).is_err());
        let mut wide = whole.clone();
        wide[0][1].q_len = 4;
        assert!(simulate_attention_items(&wide, Schedule::DecodePipe).is_err());
        assert_eq!(auto_schedule(&whole), Schedule::DecodePipe);
        assert_eq!(auto_schedule(&wide), Schedule::Pipe3);
    }

    #[test]
    fn decode_pipe_overlaps() {
        let items = uniform(4, 2, false);
        let seq = simulate_attention_items(&items, Schedule::Seq).unwrap();
        let dp = simulate_attention_items(&items, Schedule::DecodePipe).unwrap();
        assert!(dp.makespan < seq.makespan);
        dp.check_exclusive().unwrap();
    }
}
