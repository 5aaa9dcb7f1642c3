//! Token-Table decomposition and Task-Table reordering.
//!
//! Attention work is cut into tile units of one query block times one head.
//! Units are sorted by area and dealt to cores in snake order
//! (1..k, k..1, ...). Linear work is a 2-D grid of output tiles whose visit
//! order comes from an offline profile store.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{Chunk, Stage};
use crate::smooth_gemm::{TilePrimitive, QUANTUM};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlannerError {
    #[error("empty chunk")]
    EmptyChunk,
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("profile store line {line}: {reason}")]
    ProfileParse { line: usize, reason: String },
    #[error("core count must be at least 1")]
    NoCores,
}

/// One Token-Table row: a stage instance of the chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTableEntry {
    pub stage_id: usize,
    pub stage: Stage,
    pub start_pos: usize,
    pub token_num: usize,
    pub kv_len: usize,
    pub tile_size: usize,
}

impl TokenTableEntry {
    pub fn tile_blocks(&self) -> usize {
        self.token_num.div_ceil(self.tile_size)
    }
}

/// Query tile size per stage kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePolicy {
    pub prefill_tile: usize,
}

impl Default for TilePolicy {
    fn default() -> Self {
        Self { prefill_tile: 128 }
    }
}

impl TilePolicy {
    /// Prefill uses the fixed tile; decode and verify use one block.
    pub fn tile_size(&self, stage: Stage, token_num: usize) -> usize {
        match stage {
            Stage::Prefill => self.prefill_tile,
            Stage::Decode | Stage::Verify => token_num.max(1),
        }
    }
}

/// Attention Token-Table of a chunk.
pub fn token_table(chunk: &Chunk, policy: TilePolicy) -> Vec<TokenTableEntry> {
    chunk
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| TokenTableEntry {
            stage_id: i,
            stage: e.stage,
            start_pos: e.start_pos,
            token_num: e.token_num,
            kv_len: e.kv_len,
            tile_size: policy.tile_size(e.stage, e.token_num),
        })
        .collect()
}

/// One attention work item: a query block of one stage for one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileUnit {
    pub stage_id: usize,
    pub stage: Stage,
    pub head: usize,
    /// Offset of the block within its stage's tokens.
    pub q_start: usize,
    pub q_len: usize,
    /// Cached history length of the stage.
    pub kv_len: usize,
    /// Token count of the whole stage.
    pub stage_len: usize,
}

impl TileUnit {
    /// K/V positions the tile must read: up to its last row's causal
    /// window, or the whole history plus tree for verify.
    pub fn kv_span(&self) -> usize {
        if self.stage.is_causal() {
            self.kv_len + self.q_start + self.q_len
        } else {
            self.kv_len + self.stage_len
        }
    }

    /// Compute load used for balancing.
    pub fn area(&self) -> u64 {
        (self.q_len * self.kv_span()) as u64
    }
}

/// Splits every stage along queries and crosses the blocks with heads.
pub fn decompose_attention(chunk: &Chunk, head_num: usize, policy: TilePolicy) -> Result<Vec<TileUnit>, PlannerError> {
    if chunk.entries.is_empty() {
        return Err(PlannerError::EmptyChunk);
    }
    let mut tiles = Vec::new();
    for entry in token_table(chunk, policy) {
        for b in 0..entry.tile_blocks() {
            let q_start = b * entry.tile_size;
            let q_len = entry.tile_size.min(entry.token_num - q_start);
            for head in 0..head_num {
                tiles.push(TileUnit {
                    stage_id: entry.stage_id,
                    stage: entry.stage,
                    head,
                    q_start,
                    q_len,
                    kv_len: entry.kv_len,
                    stage_len: entry.token_num,
                });
            }
        }
    }
    Ok(tiles)
}

/// Per-core ordered task lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTable<T> {
    pub per_core: Vec<Vec<T>>,
}

impl<T> TaskTable<T> {
    pub fn empty(core_num: usize) -> Self {
        Self {
            per_core: (0..core_num).map(|_| Vec::new()).collect(),
        }
    }

    pub fn core_num(&self) -> usize {
        self.per_core.len()
    }

    pub fn task_count(&self) -> usize {
        self.per_core.iter().map(Vec::len).sum()
    }

    pub fn loads(&self, cost: impl Fn(&T) -> u64) -> Vec<u64> {
        self.per_core
            .iter()
            .map(|tasks| tasks.iter().map(&cost).sum())
            .collect()
    }
}

impl TaskTable<TileUnit> {
    pub fn area_loads(&self) -> Vec<u64> {
        self.loads(TileUnit::area)
    }

    /// Debug export: one list of tiles per core.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Row {
            stage: usize,
            head: usize,
            #[serde(rename = "qStart")]
            q_start: usize,
            #[serde(rename = "qLen")]
            q_len: usize,
            #[serde(rename = "kvLen")]
            kv_len: usize,
            area: u64,
        }
        #[derive(Serialize)]
        struct Export {
            core: Vec<Vec<Row>>,
        }
        let export = Export {
            core: self
                .per_core
                .iter()
                .map(|tiles| {
                    tiles
                        .iter()
                        .map(|t| Row {
                            stage: t.stage_id,
                            head: t.head,
                            q_start: t.q_start,
                            q_len: t.q_len,
                            kv_len: t.kv_len,
                            area: t.area(),
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string(&export).expect("plain structs serialize")
    }
}

/// Core receiving the `i`-th task under symmetric round-robin.
pub fn snake_core(i: usize, core_num: usize) -> usize {
    let round = i / core_num;
    let pos = i % core_num;
    if round.is_multiple_of(2) {
        pos
    } else {
        core_num - 1 - pos
    }
}

/// Largest area first; ties by (stage, head, query offset).
pub fn sort_tiles(tiles: &mut [TileUnit]) {
    tiles.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then(a.stage_id.cmp(&b.stage_id))
            .then(a.head.cmp(&b.head))
            .then(a.q_start.cmp(&b.q_start))
    });
}

/// Sorts tiles by load and deals them to cores in snake order.
pub fn reorder_attention(mut tiles: Vec<TileUnit>, core_num: usize) -> Result<TaskTable<TileUnit>, PlannerError> {
    if core_num == 0 {
        return Err(PlannerError::NoCores);
    }
    sort_tiles(&mut tiles);
    let mut table = TaskTable::empty(core_num);
    for (i, t) in tiles.into_iter().enumerate() {
        table.per_core[snake_core(i, core_num)].push(t);
    }
    Ok(table)
}

/// Baseline: consecutive runs of `ceil(n / core_num)` tasks per core, in the
/// given order.
pub fn contiguous_assignment<T>(tasks: Vec<T>, core_num: usize) -> Result<TaskTable<T>, PlannerError> {
    if core_num == 0 {
        return Err(PlannerError::NoCores);
    }
    let per = tasks.len().div_ceil(core_num).max(1);
    let mut table = TaskTable::empty(core_num);
    for (i, t) in tasks.into_iter().enumerate() {
        table.per_core[i / per].push(t);
    }
    Ok(table)
}

/// The four linear operators of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinearOp {
    Qkv,
    OProj,
    GateUp,
    Down,
}

impl LinearOp {
    pub const ALL: [LinearOp; 4] = [LinearOp::Qkv, LinearOp::OProj, LinearOp::GateUp, LinearOp::Down];

    pub fn name(self) -> &'static str {
        match self {
            LinearOp::Qkv => "QKV",
            LinearOp::OProj => "OProj",
            LinearOp::GateUp => "GateUp",
            LinearOp::Down => "Down",
        }
    }

    /// Weight shape (N, K) for a model.
    pub fn weight_shape(self, dims: &ModelDims) -> (usize, usize) {
        let q = dims.heads * dims.head_size;
        match self {
            LinearOp::Qkv => ((dims.heads + 2 * dims.kv_heads) * dims.head_size, dims.hidden),
            LinearOp::OProj => (dims.hidden, q),
            LinearOp::GateUp => (2 * dims.ffn, dims.hidden),
            LinearOp::Down => (dims.hidden, dims.ffn),
        }
    }
}

impl fmt::Display for LinearOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinearOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinearOp::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown linear op '{s}'"))
    }
}

/// Dimensions that determine linear weight shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_size: usize,
    pub ffn: usize,
}

/// Output tile grid of one linear op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearGrid {
    pub op: LinearOp,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub prim: TilePrimitive,
    pub rows: usize,
    pub cols: usize,
}

impl LinearGrid {
    pub fn new(op: LinearOp, m: usize, n: usize, k: usize, prim: TilePrimitive) -> Self {
        let (rows, cols) = prim.grid(m, n);
        Self {
            op,
            m,
            n,
            k,
            prim,
            rows,
            cols,
        }
    }

    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }
}

/// One output tile of a linear grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridTile {
    pub row: usize,
    pub col: usize,
}

/// Linear Token-Table entry and tile grid for a chunk.
pub fn decompose_linear(
    token_num: usize,
    op: LinearOp,
    n_len: usize,
    k_len: usize,
    prim: TilePrimitive,
) -> Result<(TokenTableEntry, LinearGrid), PlannerError> {
    if token_num == 0 {
        return Err(PlannerError::EmptyChunk);
    }
    if !n_len.is_multiple_of(QUANTUM) || !k_len.is_multiple_of(QUANTUM) {
        return Err(PlannerError::UnsupportedShape(format!(
            "{op}: N={n_len}, K={k_len} not multiples of {QUANTUM}"
        )));
    }
    let padded_m = token_num.next_multiple_of(QUANTUM);
    let entry = TokenTableEntry {
        stage_id: 0,
        stage: Stage::Prefill,
        start_pos: 0,
        token_num,
        kv_len: 0,
        tile_size: prim.tile_m,
    };
    Ok((entry, LinearGrid::new(op, padded_m, n_len, k_len, prim)))
}

/// Visit order over a tile grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SwizzleOrder {
    RowMajor,
    ColumnMajor,
    /// Bands of `w` tile rows; within a band columns are walked one at a time
    /// (all band rows of a column before the next column), alternating column
    /// direction from band to band.
    Zigzag(usize),
}

impl SwizzleOrder {
    /// Profiler candidates, row-major first so ties resolve to it.
    pub fn candidates() -> Vec<SwizzleOrder> {
        vec![
            SwizzleOrder::RowMajor,
            SwizzleOrder::ColumnMajor,
            SwizzleOrder::Zigzag(2),
            SwizzleOrder::Zigzag(4),
            SwizzleOrder::Zigzag(8),
        ]
    }

    pub fn visit_order(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        match *self {
            SwizzleOrder::RowMajor => (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
            SwizzleOrder::ColumnMajor => (0..cols).flat_map(|c| (0..rows).map(move |r| (r, c))).collect(),
            SwizzleOrder::Zigzag(w) => {
                let w = w.max(1);
                let mut out = Vec::with_capacity(rows * cols);
                for (band, r0) in (0..rows).step_by(w).enumerate() {
                    let band_rows = r0..(r0 + w).min(rows);
                    let cols_iter: Box<dyn Iterator<Item = usize>> = if band % 2 == 0 {
                        Box::new(0..cols)
                    } else {
                        Box::new((0..cols).rev())
                    };
                    for c in cols_iter {
                        out.extend(band_rows.clone().map(|r| (r, c)));
                    }
                }
                out
            }
        }
    }
}

impl fmt::Display for SwizzleOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SwizzleOrder::RowMajor => f.write_str("row-major"),
            SwizzleOrder::ColumnMajor => f.write_str("col-major"),
            SwizzleOrder::Zigzag(w) => write!(f, "zigzag-{w}"),
        }
    }
}

impl FromStr for SwizzleOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row-major" => Ok(SwizzleOrder::RowMajor),
            "col-major" => Ok(SwizzleOrder::ColumnMajor),
            _ => s
                .strip_prefix("zigzag-")
                .and_then(|w| w.parse().ok())
                .filter(|&w| w >= 1)
                .map(SwizzleOrder::Zigzag)
                .ok_or_else(|| format!("unknown swizzle order '{s}'")),
        }
    }
}

/// Profiled choice for one (op, M, N, K).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileEntry {
    pub prim: TilePrimitive,
    pub order: SwizzleOrder,
}

const PROFILE_HEADER: &str = "# linear-profile v1";

/// Offline tiling and swizzle choices keyed by (op, M, N, K).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileStore {
    entries: BTreeMap<(LinearOp, usize, usize, usize), ProfileEntry>,
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, op: LinearOp, shape: (usize, usize, usize), entry: ProfileEntry) {
        self.entries.insert((op, shape.0, shape.1, shape.2), entry);
    }

    pub fn get(&self, op: LinearOp, shape: (usize, usize, usize)) -> Option<&ProfileEntry> {
        self.entries.get(&(op, shape.0, shape.1, shape.2))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses the text form written by `Display`.
    pub fn parse(text: &str) -> Result<Self, PlannerError> {
        let mut store = ProfileStore::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == PROFILE_HEADER => {}
            _ => {
                return Err(PlannerError::ProfileParse {
                    line: 1,
                    reason: format!("expected header '{PROFILE_HEADER}'"),
                })
            }
        }
        for (i, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| PlannerError::ProfileParse { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err("missing '='".into()))?;
            let key: Vec<&str> = key.split_whitespace().collect();
            let [op, m, n, k] = key[..] else {
                return Err(err("expected 'OP M N K'".into()));
            };
            let op: LinearOp = op.parse().map_err(err)?;
            let dim = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad dimension '{s}': {e}")));
            let shape = (dim(m)?, dim(n)?, dim(k)?);
            let mut prim = None;
            let mut order = None;
            for field in value.split_whitespace() {
                match field.split_once(':').or_else(|| field.split_once('=')) {
                    Some(("tile", v)) => prim = Some(v.parse::<TilePrimitive>().map_err(|e| err(e.to_string()))?),
                    Some(("order", v)) => order = Some(v.parse::<SwizzleOrder>().map_err(err)?),
                    _ => return Err(err(format!("unknown field '{field}'"))),
                }
            }
            let (Some(prim), Some(order)) = (prim, order) else {
                return Err(err("entry needs tile and order".into()));
            };
            store.insert(op, shape, ProfileEntry { prim, order });
        }
        Ok(store)
    }
}

impl fmt::Display for ProfileStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{PROFILE_HEADER}")?;
        for ((op, m, n, k), e) in &self.entries {
            writeln!(f, "{op} {m} {n} {k} = tile:{} order:{}", e.prim, e.order)?;
        }
        Ok(())
    }
}

/// Task-Table for a smoothed linear shape: the profiled primitive and order
/// when present, else `fallback` in row-major order. Tiles are dealt to cores
/// round-robin along the visit order.
pub fn lookup_linear_tasktable(
    store: &ProfileStore,
    op: LinearOp,
    shape: (usize, usize, usize),
    fallback: TilePrimitive,
    core_num: usize,
) -> Result<(LinearGrid, SwizzleOrder, TaskTable<GridTile>), PlannerError> {
    if core_num == 0 {
        return Err(PlannerError::NoCores);
    }
    let entry = store.get(op, shape).copied().unwrap_or(ProfileEntry {
        prim: fallback,
        order: SwizzleOrder::RowMajor,
    });
    let grid = LinearGrid::new(op, shape.0, shape.1, shape.2, entry.prim);
    Ok((grid, entry.order, linear_tasktable(&grid, entry.order, core_num)))
}

/// Deals a grid's visit order to cores round-robin.
pub fn linear_tasktable(grid: &LinearGrid, order: SwizzleOrder, core_num: usize) -> TaskTable<GridTile> {
    let mut table = TaskTable::empty(core_num.max(1));
    for (i, (row, col)) in order.visit_order(grid.rows, grid.cols).into_iter().enumerate() {
        table.per_core[i % core_num.max(1)].push(GridTile { row, col });
    }
    table
}
