//! Serving loop: admit requests, schedule chunks, execute them (numerically
//! on the toy model or as cost only), commit K/V and collect metrics.
//!
//! Every chunk is costed by the simulator: per layer, the four linear ops on
//! the smoothed token count plus the attention Task-Table under the pipeline
//! it calls for. The clock advances by that cost, so all latencies are in
//! ticks.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::Config;
use crate::kv_cache::{BlockTable, RadixKvCache};
use crate::meta_attention::{
    run_tile, skip_plan, split_blocks, AttentionError, AttentionTileJob, PagedKv, QkvTail, TileMask,
};
use crate::model::{argmax, rms_norm, silu, ToyModel};
use crate::planner::{
    decompose_attention, lookup_linear_tasktable, reorder_attention, LinearOp, ProfileStore, SwizzleOrder, TilePolicy,
};
use crate::scheduler::{Chunk, Request, Scheduler, Stage, StepOutput};
use crate::sim::{attention_items, auto_schedule, simulate_attention_items, simulate_linear, AttnCostModel};
use crate::smooth_gemm::{
    fused_qkv_read, fused_sv_write, gemm_virtual_pad, smooth_shape, GemmError, QkvLayout, QkvSel, TilePrimitive,
    QUANTUM,
};
use crate::spec_decode::{committed_tokens, context_hash, verify_accept, DraftProposer, SpecMask};
use crate::tensor::Matrix;
use crate::{ReqId, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Numeric,
    Simulate,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "numeric" => Ok(Mode::Numeric),
            "simulate" => Ok(Mode::Simulate),
            _ => Err(format!("unknown mode '{s}'")),
        }
    }
}

/// Per-request history.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: ReqId,
    pub arrival: u64,
    pub prompt: Vec<TokenId>,
    pub matched_prefix: usize,
    pub output_len: usize,
    pub generated: Vec<TokenId>,
    /// Clock when each generated token became available.
    pub token_times: Vec<u64>,
    /// Logits that produced each generated token, when recording.
    pub logits: Vec<Vec<f32>>,
    pub finish: Option<u64>,
    pub verify_rounds: usize,
    /// Draft tokens accepted over all verify rounds (root excluded).
    pub accepted_drafts: usize,
}

/// Cost and shape of one executed chunk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkRecord {
    pub start: u64,
    pub end: u64,
    pub tokens: usize,
    pub composition: String,
    pub attention_ticks: u64,
    pub linear_ticks: u64,
    /// Max over mean of per-core attention area.
    pub core_balance: f64,
    pub computed_blocks: usize,
    pub skipped_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: ReqId,
    pub arrival: u64,
    pub prompt_len: usize,
    pub matched_prefix: usize,
    pub generated: usize,
    pub ttft: Option<u64>,
    pub mean_tbt: Option<f64>,
    pub finish: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceStats {
    pub mean: f64,
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyStats {
    pub rounds: usize,
    pub accepted_drafts: usize,
    pub mean_accepted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub requests: usize,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Serving metrics. Field order and map ordering are stable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: Mode,
    pub requests: Vec<RequestMetrics>,
    pub finished: usize,
    pub total_ticks: u64,
    /// Finished requests per 10^6 ticks.
    pub qps: f64,
    pub mean_ttft: f64,
    pub mean_tbt: f64,
    pub chunks: usize,
    pub chunk_histogram: BTreeMap<String, usize>,
    pub core_balance: BalanceStats,
    pub skip_ratio: f64,
    pub verify: VerifyStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Result of one chunk entry before it is applied.
struct EntryResult {
    req_id: ReqId,
    output: StepOutput,
    /// Tokens whose K/V is committed, with `kv_width` floats per token.
    commit_tokens: Vec<TokenId>,
    commit_k: Vec<f32>,
    commit_v: Vec<f32>,
    /// Logits behind each newly generated token, in order.
    logits: Vec<Vec<f32>>,
    verified: Option<usize>,
}

pub struct Engine {
    cfg: Config,
    mode: Mode,
    model: Option<ToyModel>,
    cache: RadixKvCache,
    sched: Scheduler,
    tables: BTreeMap<ReqId, BlockTable>,
    records: BTreeMap<ReqId, RequestRecord>,
    profile: ProfileStore,
    linear_ticks: HashMap<(LinearOp, usize), u64>,
    chunks: Vec<ChunkRecord>,
    clock: u64,
    seed: u64,
    record_logits: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("mode", &self.mode)
            .field("clock", &self.clock)
            .field("active", &self.tables.len())
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Numeric mode needs a model; simulate mode ignores it.
    pub fn new(
        cfg: Config,
        mode: Mode,
        model: Option<ToyModel>,
        proposer: Box<dyn DraftProposer>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut kv = cfg.kv.clone();
        kv.kv_width = match mode {
            Mode::Numeric => cfg.model.kv_width(),
            Mode::Simulate => 0,
        };
        let model = match mode {
            Mode::Numeric => Some(model.unwrap_or_else(|| ToyModel::random(cfg.model, seed))),
            Mode::Simulate => None,
        };
        Ok(Self {
            cache: RadixKvCache::new(kv)?,
            sched: Scheduler::new(cfg.sched.budget, cfg.sched.reserve, proposer)?,
            cfg,
            mode,
            model,
            tables: BTreeMap::new(),
            records: BTreeMap::new(),
            profile: ProfileStore::new(),
            linear_ticks: HashMap::new(),
            chunks: Vec::new(),
            clock: 0,
            seed,
            record_logits: false,
        })
    }

    pub fn set_profile(&mut self, profile: ProfileStore) {
        self.profile = profile;
        self.linear_ticks.clear();
    }

    pub fn set_record_logits(&mut self, on: bool) {
        self.record_logits = on;
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn cache(&self) -> &RadixKvCache {
        &self.cache
    }

    pub fn model(&self) -> Option<&ToyModel> {
        self.model.as_ref()
    }

    pub fn records(&self) -> &BTreeMap<ReqId, RequestRecord> {
        &self.records
    }

    pub fn chunk_log(&self) -> &[ChunkRecord] {
        &self.chunks
    }

    /// Admits a request now, reusing any cached prefix.
    pub fn submit(&mut self, req: Request) -> Result<()> {
        let m = self.cache.match_prefix(&req.prompt);
        let mut table = self.cache.start_sequence(req.id, m);
        if table.total_tokens() >= req.prompt.len() {
            // The last prompt token must run to produce the first output.
            self.cache.truncate(&mut table, req.prompt.len().saturating_sub(1));
        }
        let matched = table.total_tokens();
        if let Err(e) = self.sched.add_request(req.clone(), matched) {
            self.cache.release(table);
            return Err(e.into());
        }
        self.tables.insert(req.id, table);
        self.records.insert(
            req.id,
            RequestRecord {
                id: req.id,
                arrival: req.arrival,
                prompt: req.prompt,
                matched_prefix: matched,
                output_len: req.output_len,
                generated: Vec::new(),
                token_times: Vec::new(),
                logits: Vec::new(),
                finish: None,
                verify_rounds: 0,
                accepted_drafts: 0,
            },
        );
        Ok(())
    }

    /// Serves `requests` by arrival time until all finish.
    pub fn run(&mut self, mut requests: Vec<Request>) -> Result<()> {
        requests.sort_by_key(|r| (r.arrival, r.id));
        let mut pending = requests.into_iter().peekable();
        loop {
            while let Some(r) = pending.next_if(|r| r.arrival <= self.clock) {
                self.submit(r)?;
            }
            if !self.step()? {
                match pending.peek() {
                    Some(r) => self.clock = self.clock.max(r.arrival),
                    None => return Ok(()),
                }
            }
        }
    }

    /// Executes one chunk; false when nothing was schedulable.
    pub fn step(&mut self) -> Result<bool> {
        let Some(chunk) = self.sched.schedule_next() else {
            return Ok(false);
        };
        let mut record = self.chunk_cost(&chunk)?;
        let results = match self.mode {
            Mode::Numeric => self.forward(&chunk)?,
            Mode::Simulate => self.pseudo_outputs(&chunk),
        };
        let mut outputs = BTreeMap::new();
        for r in &results {
            self.commit(r)?;
            outputs.insert(r.req_id, r.output.clone());
        }
        let cost = record.end;
        record.start = self.clock;
        self.clock += cost;
        record.end = self.clock;
        self.chunks.push(record);

        let events = self.sched.complete_chunk(&chunk, &outputs)?;
        let mut logits: BTreeMap<ReqId, Vec<Vec<f32>>> = BTreeMap::new();
        for r in results {
            let rec = self.records.get_mut(&r.req_id).expect("admitted request has a record");
            if let Some(accepted) = r.verified {
                rec.verify_rounds += 1;
                rec.accepted_drafts += accepted.saturating_sub(1);
            }
            logits.insert(r.req_id, r.logits);
        }
        for ev in events {
            let rec = self.records.get_mut(&ev.req_id).expect("admitted request has a record");
            rec.generated.extend_from_slice(&ev.new_tokens);
            rec.token_times
                .extend(std::iter::repeat_n(self.clock, ev.new_tokens.len()));
            if self.record_logits {
                if let Some(l) = logits.remove(&ev.req_id) {
                    rec.logits.extend(l.into_iter().take(ev.new_tokens.len()));
                }
            }
            if ev.finished {
                rec.finish = Some(self.clock);
                if let Some(table) = self.tables.remove(&ev.req_id) {
                    self.cache.release(table);
                }
            }
        }
        Ok(true)
    }

    fn commit(&mut self, r: &EntryResult) -> Result<()> {
        let table = self.tables.get_mut(&r.req_id).expect("scheduled request has a table");
        self.cache
            .commit_tokens(table, &r.commit_tokens, &r.commit_k, &r.commit_v)?;
        Ok(())
    }

    /// Rows of `x` through `op` with the profiled (or default) tiling.
    fn linear(&self, op: LinearOp, a: &Matrix, w: &Matrix) -> Result<Matrix> {
        let (n, k) = (w.cols(), w.rows());
        let fallback = default_prim(n, k)?;
        let key = (self.smoothed_m(a.rows()), n, k);
        let (prim, order) = match self.profile.get(op, key) {
            Some(e) if e.prim.fits(n, k) => (e.prim, e.order),
            _ => (fallback, SwizzleOrder::RowMajor),
        };
        let (rows, cols) = prim.grid(a.rows(), n);
        Ok(gemm_virtual_pad(a, w, prim, &order.visit_order(rows, cols))?)
    }

    fn forward(&self, chunk: &Chunk) -> Result<Vec<EntryResult>> {
        let model = self.model.as_ref().expect("numeric mode has a model");
        let mc = self.cfg.model;
        let (t, hs) = (chunk.total_tokens, mc.head_size);
        let layout = QkvLayout {
            heads: mc.heads,
            kv_heads: mc.kv_heads,
            head_size: hs,
        };
        for e in &chunk.entries {
            let got = self.tables[&e.req_id].total_tokens();
            if got != e.kv_len {
                return Err(AttentionError::InconsistentBlockTable {
                    expected: e.kv_len,
                    got,
                }
                .into());
            }
        }
        let mut x = Matrix::zeros(t, mc.hidden);
        for e in &chunk.entries {
            for (i, &tok) in e.tokens.iter().enumerate() {
                x.row_mut(e.start_pos + i)
                    .copy_from_slice(&model.input_row(tok, e.position(i)));
            }
        }
        let policy = TilePolicy {
            prefill_tile: self.cfg.attn.prefill_tile,
        };
        let hw = self.cfg.hw;
        let tiles = reorder_attention(decompose_attention(chunk, mc.heads, policy)?, hw.core_num)?;
        let masks: Vec<Option<SpecMask>> = chunk
            .entries
            .iter()
            .map(|e| e.tree.as_ref().map(|t| t.tree_mask()))
            .collect();
        let group = mc.heads / mc.kv_heads;
        let bs = self.cfg.kv.block_size;

        let mut layer_qkv = Vec::with_capacity(mc.layers);
        for (l, w) in model.layers.iter().enumerate() {
            let h = map_rows(Matrix::zeros(t, mc.hidden), &x, |r| rms_norm(r, &w.attn_norm));
            let qkv = self.linear(LinearOp::Qkv, &h, &w.w_qkv)?;
            let mut o = vec![0.0f32; t * mc.heads * hs];
            for tile in tiles.per_core.iter().flatten() {
                let e = &chunk.entries[tile.stage_id];
                let first = e.start_pos + tile.q_start;
                let q = fused_qkv_read(qkv.as_slice(), layout, QkvSel::Q, tile.head, first..first + tile.q_len)?;
                let kv_head = tile.head / group;
                let view = PagedKv::new(
                    &self.cache,
                    &self.tables[&e.req_id],
                    (l * mc.kv_heads + kv_head) * hs,
                    hs,
                    kv_head,
                    Some(QkvTail {
                        qkv: qkv.as_slice(),
                        layout,
                        first_row: e.start_pos,
                        len: e.token_num,
                    }),
                )?;
                let job = AttentionTileJob {
                    q,
                    q_start: tile.q_start,
                    kv_len: e.kv_len,
                    mask: masks[tile.stage_id].as_ref().map_or(TileMask::Causal, TileMask::Spec),
                    scale: model.scale(),
                    block_size: bs,
                };
                let split = split_blocks(hw.pipe_depth, tile.q_len, tile.kv_span(), hw.core_num, hw.l2_bytes, bs);
                let out = run_tile(&job, &view, split)?;
                fused_sv_write(&mut o, mc.heads, tile.head, first, &out)?;
            }
            let attn = self.linear(LinearOp::OProj, &Matrix::from_vec(t, mc.heads * hs, o), &w.w_o)?;
            add_into(&mut x, &attn);
            let h = map_rows(Matrix::zeros(t, mc.hidden), &x, |r| rms_norm(r, &w.mlp_norm));
            let gu = self.linear(LinearOp::GateUp, &h, &w.w_gate_up)?;
            let act = Matrix::from_fn(t, mc.ffn, |r, c| silu(gu.get(r, c)) * gu.get(r, mc.ffn + c));
            let down = self.linear(LinearOp::Down, &act, &w.w_down)?;
            add_into(&mut x, &down);
            layer_qkv.push(qkv);
        }

        let logits = |row: usize| -> Vec<f32> {
            let h = rms_norm(x.row(row), &model.final_norm);
            (0..mc.vocab)
                .map(|v| h.iter().enumerate().map(|(i, hi)| hi * model.lm_head.get(i, v)).sum())
                .collect()
        };
        let kv_rows = |rows: &[usize]| -> (Vec<f32>, Vec<f32>) {
            let (mut k, mut v) = (Vec::new(), Vec::new());
            let span = mc.kv_heads * hs;
            for &r in rows {
                for qkv in &layer_qkv {
                    let row = qkv.row(r);
                    let ko = layout.offset(QkvSel::K, 0);
                    let vo = layout.offset(QkvSel::V, 0);
                    k.extend_from_slice(&row[ko..ko + span]);
                    v.extend_from_slice(&row[vo..vo + span]);
                }
            }
            (k, v)
        };

        let mut results = Vec::with_capacity(chunk.entries.len());
        for e in &chunk.entries {
            let rows: Vec<usize> = (e.start_pos..e.start_pos + e.token_num).collect();
            let mut res = EntryResult {
                req_id: e.req_id,
                output: StepOutput::Nothing,
                commit_tokens: e.tokens.clone(),
                commit_k: Vec::new(),
                commit_v: Vec::new(),
                logits: Vec::new(),
                verified: None,
            };
            let commit_rows = match e.stage {
                Stage::Prefill | Stage::Decode => {
                    if e.stage == Stage::Decode || e.last_part {
                        let l = logits(*rows.last().expect("entries are nonempty"));
                        res.output = StepOutput::Token(argmax(&l) as TokenId);
                        res.logits.push(l);
                    }
                    rows
                }
                Stage::Verify => {
                    let tree = e.tree.as_ref().expect("verify entry has a tree");
                    let all: Vec<Vec<f32>> = rows.iter().map(|&r| logits(r)).collect();
                    let target: Vec<TokenId> = all.iter().map(|l| argmax(l) as TokenId).collect();
                    let (output, path) = self.verify_output(e.req_id, tree, &target);
                    res.commit_tokens = path.iter().map(|&n| tree.token(n)).collect();
                    res.logits = path.iter().map(|&n| all[n].clone()).collect();
                    res.verified = Some(path.len());
                    res.output = output;
                    path.iter().map(|&n| e.start_pos + n).collect()
                }
            };
            (res.commit_k, res.commit_v) = kv_rows(&commit_rows);
            results.push(res);
        }
        Ok(results)
    }

    fn smoothed_m(&self, tokens: usize) -> usize {
        smooth_shape(tokens, self.cfg.sched.budget.max(tokens), self.cfg.linear.smooth_step).next_multiple_of(QUANTUM)
    }

    /// Simulated cost of a chunk; `end` holds the duration.
    fn chunk_cost(&mut self, chunk: &Chunk) -> Result<ChunkRecord> {
        let cfg = &self.cfg;
        let hw = cfg.hw;
        let policy = TilePolicy {
            prefill_tile: cfg.attn.prefill_tile,
        };
        let tiles = decompose_attention(chunk, cfg.model.heads, policy)?;
        let (mut computed, mut skipped) = (0, 0);
        for t in &tiles {
            let p = skip_plan(t, cfg.kv.block_size);
            computed += p.computed;
            skipped += p.skipped;
        }
        let table = reorder_attention(tiles, hw.core_num)?;
        let loads = table.area_loads();
        let mean = loads.iter().sum::<u64>() as f64 / loads.len() as f64;
        let max = loads.iter().copied().max().unwrap_or(0) as f64;
        let items = attention_items(
            &table,
            &hw,
            AttnCostModel {
                head_size: cfg.model.head_size,
                block_size: cfg.kv.block_size,
            },
        );
        let attention = simulate_attention_items(&items, auto_schedule(&items))?.makespan;

        let m = self.smoothed_m(chunk.total_tokens);
        let dims = cfg.model.dims();
        let mut linear = 0;
        for op in LinearOp::ALL {
            let (n, k) = op.weight_shape(&dims);
            let ticks = match self.linear_ticks.get(&(op, m)) {
                Some(&t) => t,
                None => {
                    let fallback = default_prim(n, k)?;
                    let (grid, _, tasks) =
                        lookup_linear_tasktable(&self.profile, op, (m, n, k), fallback, hw.core_num)?;
                    let t = simulate_linear(&grid, &tasks, &hw).trace.makespan;
                    self.linear_ticks.insert((op, m), t);
                    t
                }
            };
            linear += ticks;
        }
        let layers = self.cfg.model.layers as u64;
        Ok(ChunkRecord {
            start: 0,
            end: layers * (attention + linear),
            tokens: chunk.total_tokens,
            composition: chunk.composition(),
            attention_ticks: layers * attention,
            linear_ticks: layers * linear,
            core_balance: if mean > 0.0 { max / mean } else { 1.0 },
            computed_blocks: computed,
            skipped_blocks: skipped,
        })
    }

    fn pseudo_next(&self, context: &[TokenId]) -> TokenId {
        (context_hash(self.seed ^ 0x7a3d_91c5, context, 0x51) % self.cfg.model.vocab as u64) as TokenId
    }

    /// Cost-only outputs: the "target model" is a hash of the context.
    fn pseudo_outputs(&self, chunk: &Chunk) -> Vec<EntryResult> {
        chunk
            .entries
            .iter()
            .map(|e| {
                let context = self.sched.context(e.req_id).expect("scheduled request is active");
                let mut res = EntryResult {
                    req_id: e.req_id,
                    output: StepOutput::Nothing,
                    commit_tokens: e.tokens.clone(),
                    commit_k: Vec::new(),
                    commit_v: Vec::new(),
                    logits: Vec::new(),
                    verified: None,
                };
                match e.stage {
                    Stage::Prefill => {
                        if e.last_part {
                            res.output = StepOutput::Token(self.pseudo_next(&context));
                        }
                    }
                    Stage::Decode => res.output = StepOutput::Token(self.pseudo_next(&context)),
                    Stage::Verify => {
                        let tree = e.tree.as_ref().expect("verify entry has a tree");
                        let base = &context[..context.len() - 1];
                        let target: Vec<TokenId> = (0..tree.len())
                            .map(|i| {
                                let mut c = base.to_vec();
                                c.extend(tree.path_to(i).iter().map(|&n| tree.token(n)));
                                self.pseudo_next(&c)
                            })
                            .collect();
                        let (output, path) = self.verify_output(e.req_id, tree, &target);
                        res.commit_tokens = path.iter().map(|&n| tree.token(n)).collect();
                        res.verified = Some(path.len());
                        res.output = output;
                    }
                }
                res
            })
            .collect()
    }

    /// Accepts the longest matching path; returns the scheduler output
    /// (trimmed to the request's remaining length) and the accepted nodes.
    fn verify_output(
        &self,
        id: ReqId,
        tree: &crate::spec_decode::SpecTree,
        target: &[TokenId],
    ) -> (StepOutput, Vec<usize>) {
        // The root is the token the target itself produced last step.
        let root = tree.token(0);
        let path = verify_accept(tree, root, target).expect("target covers the tree");
        let committed = committed_tokens(tree, &path, root, target);
        let rec = &self.records[&id];
        let remaining = rec.output_len - rec.generated.len();
        let tokens: Vec<TokenId> = committed[1..].iter().copied().take(remaining).collect();
        (
            StepOutput::Verified {
                accepted: path.len(),
                tokens,
            },
            path,
        )
    }
}

/// Tolerance of the dense recompute check on logits.
pub const CHECK_TOLERANCE: f64 = 1e-3;

impl Engine {
    pub fn report(&self) -> Report {
        let requests: Vec<RequestMetrics> = self
            .records
            .values()
            .map(|r| RequestMetrics {
                id: r.id,
                arrival: r.arrival,
                prompt_len: r.prompt.len(),
                matched_prefix: r.matched_prefix,
                generated: r.generated.len(),
                ttft: r.token_times.first().map(|t| t - r.arrival),
                mean_tbt: mean_gap(&r.token_times),
                finish: r.finish,
            })
            .collect();
        let finished = requests.iter().filter(|r| r.finish.is_some()).count();
        let ttfts: Vec<f64> = requests.iter().filter_map(|r| r.ttft.map(|t| t as f64)).collect();
        let tbts: Vec<f64> = requests.iter().filter_map(|r| r.mean_tbt).collect();
        let mut chunk_histogram = BTreeMap::new();
        for c in &self.chunks {
            *chunk_histogram.entry(c.composition.clone()).or_insert(0) += 1;
        }
        let balances: Vec<f64> = self.chunks.iter().map(|c| c.core_balance).collect();
        let computed: usize = self.chunks.iter().map(|c| c.computed_blocks).sum();
        let skipped: usize = self.chunks.iter().map(|c| c.skipped_blocks).sum();
        let rounds: usize = self.records.values().map(|r| r.verify_rounds).sum();
        let accepted: usize = self.records.values().map(|r| r.accepted_drafts).sum();
        Report {
            mode: self.mode,
            finished,
            total_ticks: self.clock,
            qps: if self.clock == 0 {
                0.0
            } else {
                finished as f64 * 1e6 / self.clock as f64
            },
            mean_ttft: mean(&ttfts),
            mean_tbt: mean(&tbts),
            chunks: self.chunks.len(),
            chunk_histogram,
            core_balance: BalanceStats {
                mean: mean(&balances),
                worst: balances.iter().copied().fold(0.0, f64::max),
            },
            skip_ratio: if computed + skipped == 0 {
                0.0
            } else {
                skipped as f64 / (computed + skipped) as f64
            },
            verify: VerifyStats {
                rounds,
                accepted_drafts: accepted,
                mean_accepted: if rounds == 0 {
                    0.0
                } else {
                    accepted as f64 / rounds as f64
                },
            },
            requests,
            check: None,
        }
    }

    /// Time series as `ts,metric,value` rows sorted by time then metric.
    pub fn plot_csv(&self) -> String {
        let mut rows: Vec<(u64, &str, String)> = Vec::new();
        for c in &self.chunks {
            rows.push((c.end, "chunk_tokens", c.tokens.to_string()));
            rows.push((c.end, "chunk_ticks", (c.end - c.start).to_string()));
        }
        for r in self.records.values() {
            if let Some(&t) = r.token_times.first() {
                rows.push((t, "ttft", (t - r.arrival).to_string()));
            }
            if let (Some(f), Some(tbt)) = (r.finish, mean_gap(&r.token_times)) {
                rows.push((f, "tbt", format!("{tbt:.3}")));
            }
        }
        rows.sort();
        let mut out = String::from("ts,metric,value\n");
        for (ts, m, v) in rows {
            let _ = writeln!(out, "{ts},{m},{v}");
        }
        out
    }

    /// Compares every recorded logit row with a dense full-sequence
    /// recompute. Needs numeric mode with logit recording.
    pub fn check(&self) -> CheckReport {
        let mut max_abs_err = 0.0f64;
        let mut requests = 0;
        if let Some(model) = &self.model {
            for r in self.records.values().filter(|r| !r.logits.is_empty()) {
                requests += 1;
                let mut seq = r.prompt.clone();
                seq.extend_from_slice(&r.generated[..r.logits.len() - 1]);
                let dense = crate::oracle::dense_forward(model, &seq);
                for (j, got) in r.logits.iter().enumerate() {
                    let want = &dense[r.prompt.len() - 1 + j];
                    for (g, w) in got.iter().zip(want) {
                        max_abs_err = max_abs_err.max((*g as f64 - w).abs());
                    }
                }
            }
        }
        CheckReport {
            requests,
            max_abs_err,
            tolerance: CHECK_TOLERANCE,
            passed: max_abs_err <= CHECK_TOLERANCE,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn mean_gap(times: &[u64]) -> Option<f64> {
    (times.len() >= 2).then(|| (times[times.len() - 1] - times[0]) as f64 / (times.len() - 1) as f64)
}

fn map_rows(mut out: Matrix, x: &Matrix, f: impl Fn(&[f32]) -> Vec<f32>) -> Matrix {
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&f(x.row(r)));
    }
    out
}

fn add_into(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

fn default_prim(n: usize, k: usize) -> Result<TilePrimitive> {
    TilePrimitive::default_for(n, k)
        .ok_or_else(|| GemmError::ShapeMismatch(format!("no tile primitive divides {n}x{k}")).into())
}
