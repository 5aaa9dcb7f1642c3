//! Linear-op timing with a shared L2 and the offline swizzle profiler.
//!
//! Every core walks its task list doing load, matmul and store back to back.
//! A load reads the tile's A row panel (`tile_m x K`) and B column panel
//! (`K x tile_n`). Panels live in a shared byte-capacity LRU: a resident
//! panel is read at the L2 rate, anything else at the HBM rate and is then
//! inserted. HBM is one channel shared by all cores, so a load with misses
//! waits for it. Loads touch the L2 in global time order (earliest-free core
//! first, lowest core on ties), so the visit order decides reuse.

use std::collections::VecDeque;

use super::{ticks, HwModel, Kind, SimTrace, StageEvent, Unit};
use crate::planner::{
    linear_tasktable, GridTile, LinearGrid, LinearOp, ModelDims, ProfileEntry, ProfileStore, SwizzleOrder, TaskTable,
};
use crate::smooth_gemm::TilePrimitive;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSim {
    pub trace: SimTrace,
    /// Bytes read from HBM by loads.
    pub hbm_read_bytes: u64,
    pub l2_hit_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Panel {
    A(usize),
    B(usize),
}

struct Lru {
    capacity: usize,
    used: usize,
    entries: VecDeque<(Panel, usize)>,
}

impl Lru {
    /// Returns whether `panel` was resident, and makes it most recent.
    fn touch(&mut self, panel: Panel, bytes: usize) -> bool {
        if let Some(i) = self.entries.iter().position(|(p, _)| *p == panel) {
            let e = self.entries.remove(i).expect("position is valid");
            self.entries.push_back(e);
            return true;
        }
        if bytes <= self.capacity {
            while self.used + bytes > self.capacity {
                let (_, b) = self.entries.pop_front().expect("used bytes imply entries");
                self.used -= b;
            }
            self.entries.push_back((panel, bytes));
            self.used += bytes;
        }
        false
    }
}

pub fn simulate_linear(grid: &LinearGrid, table: &TaskTable<GridTile>, hw: &HwModel) -> LinearSim {
    let TilePrimitive { tile_m, tile_n, .. } = grid.prim;
    let k = grid.k;
    let a_bytes = tile_m * k * 4;
    let b_bytes = k * tile_n * 4;
    let compute = ticks(2.0 * (tile_m * tile_n * k) as f64, hw.cube_flops_per_tick);
    let store = ticks((tile_m * tile_n * 4) as f64, hw.hbm_bytes_per_tick);
    let mut lru = Lru {
        capacity: hw.l2_bytes,
        used: 0,
        entries: VecDeque::new(),
    };
    let cores = table.core_num();
    let mut next = vec![0usize; cores];
    let mut free = vec![0u64; cores];
    let mut hbm_free = 0u64;
    let mut events = Vec::with_capacity(3 * table.task_count());
    let mut hbm = 0u64;
    let mut hit = 0u64;
    loop {
        let pick = (0..cores)
            .filter(|&c| next[c] < table.per_core[c].len())
            .min_by_key(|&c| (free[c], c));
        let Some(c) = pick else { break };
        let tile = table.per_core[c][next[c]];
        next[c] += 1;
        let (mut hit_bytes, mut miss_bytes) = (0usize, 0usize);
        for (panel, bytes) in [(Panel::A(tile.row), a_bytes), (Panel::B(tile.col), b_bytes)] {
            if lru.touch(panel, bytes) {
                hit_bytes += bytes;
            } else {
                miss_bytes += bytes;
            }
        }
        hit += hit_bytes as u64;
        hbm += miss_bytes as u64;
        let tile_id = tile.row * grid.cols + tile.col;
        let mut t0 = free[c];
        let hit_ticks = hit_bytes as f64 / hw.l2_hit_bytes_per_tick;
        let load = if miss_bytes > 0 {
            t0 = t0.max(hbm_free);
            let miss_ticks = ticks(miss_bytes as f64, hw.hbm_bytes_per_tick);
            hbm_free = t0 + miss_ticks;
            miss_ticks + hit_ticks.ceil() as u64
        } else {
            ticks(hit_bytes as f64, hw.l2_hit_bytes_per_tick)
        };
        let t1 = t0 + load;
        let t2 = t1 + compute;
        let t3 = t2 + store;
        for (unit, kind, start, end) in [
            (Unit::Mte, Kind::Load, t0, t1),
            (Unit::Cube, Kind::Matmul, t1, t2),
            (Unit::Mte, Kind::Store, t2, t3),
        ] {
            events.push(StageEvent {
                core: c,
                unit,
                kind,
                tile: tile_id,
                split: 0,
                start,
                end,
            });
        }
        free[c] = t3;
    }
    events.sort_by_key(|e| (e.start, e.core, e.unit, e.end, e.tile, e.split, e.kind));
    let makespan = free.iter().copied().max().unwrap_or(0);
    LinearSim {
        trace: SimTrace {
            events,
            makespan,
            core_num: cores,
        },
        hbm_read_bytes: hbm,
        l2_hit_bytes: hit,
    }
}

/// Outcome of evaluating one candidate order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwizzleReport {
    pub order: SwizzleOrder,
    pub makespan: u64,
    pub hbm_read_bytes: u64,
}

/// Simulates each candidate order on `grid`, stores the one with the
/// smallest makespan (earliest candidate on ties) and returns all reports.
pub fn profile_swizzle(
    store: &mut ProfileStore,
    grid: &LinearGrid,
    hw: &HwModel,
    candidates: &[SwizzleOrder],
) -> (SwizzleOrder, Vec<SwizzleReport>) {
    let reports: Vec<SwizzleReport> = candidates
        .iter()
        .map(|&order| {
            let sim = simulate_linear(grid, &linear_tasktable(grid, order, hw.core_num), hw);
            SwizzleReport {
                order,
                makespan: sim.trace.makespan,
                hbm_read_bytes: sim.hbm_read_bytes,
            }
        })
        .collect();
    let best = reports
        .iter()
        .enumerate()
        .min_by_key(|(i, r)| (r.makespan, *i))
        .map_or(SwizzleOrder::RowMajor, |(_, r)| r.order);
    store.insert(
        grid.op,
        (grid.m, grid.n, grid.k),
        ProfileEntry {
            prim: grid.prim,
            order: best,
        },
    );
    (best, reports)
}

/// Profiles every op of a model at each smoothed M: picks the fastest tile
/// primitive under row-major order, then the best swizzle for it.
pub fn profile_linear(dims: &ModelDims, ms: &[usize], hw: &HwModel) -> ProfileStore {
    let mut store = ProfileStore::new();
    for &m in ms {
        for op in LinearOp::ALL {
            let (n, k) = op.weight_shape(dims);
            let mut best: Option<(u64, LinearGrid)> = None;
            for prim in TilePrimitive::all() {
                if !prim.fits(n, k) || prim.tile_m > m.next_power_of_two().max(16) {
                    continue;
                }
                let grid = LinearGrid::new(op, m, n, k, prim);
                let sim = simulate_linear(&grid, &linear_tasktable(&grid, SwizzleOrder::RowMajor, hw.core_num), hw);
                if best.is_none_or(|(t, _)| sim.trace.makespan < t) {
                    best = Some((sim.trace.makespan, grid));
                }
            }
            if let Some((_, grid)) = best {
                profile_swizzle(&mut store, &grid, hw, &SwizzleOrder::candidates());
            }
        }
    }
    store
}
