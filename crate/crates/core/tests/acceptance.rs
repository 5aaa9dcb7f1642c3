//! Acceptance suite: one PASS/FAIL line per criterion at fixed tolerances.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenwise_core::config::Config;
use tokenwise_core::engine::{Engine, Mode};
use tokenwise_core::kv_cache::{BlockTable, KvCacheConfig, RadixKvCache};
use tokenwise_core::meta_attention::{causal_valid_len, run_tile, skip_plan, AttentionTileJob, DenseKv, TileMask};
use tokenwise_core::model::ToyModel;
use tokenwise_core::oracle::{
    ancestor_mask, brute_force_accept, brute_force_lcp, causal_mask, dense_attention, dense_attention_probs,
    dense_gemm, tiny_forward, tree_mask, CacheMode, GreedyOracleProposer,
};
use tokenwise_core::planner::{
    contiguous_assignment, decompose_attention, linear_tasktable, reorder_attention, sort_tiles, LinearGrid, LinearOp,
    ProfileStore, SwizzleOrder, TilePolicy,
};
use tokenwise_core::scheduler::{Chunk, ChunkEntry, Request, Scheduler, Stage, StepOutput};
use tokenwise_core::sim::{
    attention_items, auto_schedule, profile_swizzle, simulate_attention, simulate_attention_items, simulate_linear,
    AttnCostModel, AttnItem, HwModel, Schedule, Unit,
};
use tokenwise_core::smooth_gemm::{gemm_virtual_pad_into, TilePrimitive, TILE_MN_SET};
use tokenwise_core::spec_decode::{verify_accept, HashProposer, SpecNode, SpecShape, SpecTree};
use tokenwise_core::{Matrix, TileUnit, TokenId};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> SpecTree {
    let nodes = (0..n)
        .map(|i| SpecNode {
            token: rng.random_range(0..vocab),
            parent: (i > 0).then(|| rng.random_range(0..i)),
        })
        .collect();
    SpecTree::new(nodes).expect("parents precede children")
}

fn dense_kv(rng: &mut ChaCha8Rng, len: usize, hs: usize) -> DenseKv {
    DenseKv {
        keys: Matrix::random(len, hs, rng),
        values: Matrix::random(len, hs, rng),
    }
}

fn max_err(got: &Matrix, want: &[Vec<f64>]) -> f64 {
    let mut e = 0.0f64;
    for (r, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            e = e.max((got.get(r, c) as f64 - w).abs());
        }
    }
    e
}

/// A randomized attention case: the job plus the dense mask and K/V.
struct AttnCase {
    q: Matrix,
    q_start: usize,
    kv_len: usize,
    tree: Option<SpecTree>,
    kv: DenseKv,
    block_size: usize,
    kind: &'static str,
}

impl AttnCase {
    fn random(rng: &mut ChaCha8Rng, i: usize) -> Self {
        let hs = [8, 16, 32][rng.random_range(0..3)];
        let block_size = rng.random_range(1..=16);
        let kind = ["decode", "square", "rect", "chunked", "verify"][i % 5];
        let (kv_len, stage_len, q_start, q_len, tree) = match kind {
            "decode" => (rng.random_range(0..300), 1, 0, 1, None),
            "square" => {
                let n = rng.random_range(1..64);
                (0, n, 0, n, None)
            }
            "rect" => {
                let n = rng.random_range(1..48);
                (rng.random_range(1..200), n, 0, n, None)
            }
            "chunked" => {
                let stage = rng.random_range(2..96);
                let start = rng.random_range(0..stage);
                let len = rng.random_range(1..=stage - start);
                (rng.random_range(0..160), stage, start, len, None)
            }
            _ => {
                let n = rng.random_range(1..=32);
                let tree = random_tree(rng, n, 8);
                let start = rng.random_range(0..n);
                let len = rng.random_range(1..=n - start);
                (rng.random_range(0..200), n, start, len, Some(tree))
            }
        };
        Self {
            q: Matrix::random(q_len, hs, rng),
            q_start,
            kv_len,
            tree,
            kv: dense_kv(rng, kv_len + stage_len, hs),
            block_size,
            kind,
        }
    }

    fn run(&self, split: usize) -> Matrix {
        let mask = self.tree.as_ref().map(SpecTree::tree_mask);
        let job = AttentionTileJob {
            q: self.q.clone(),
            q_start: self.q_start,
            kv_len: self.kv_len,
            mask: mask.as_ref().map_or(TileMask::Causal, TileMask::Spec),
            scale: 1.0 / (self.q.cols() as f32).sqrt(),
            block_size: self.block_size,
        };
        run_tile(&job, &self.kv, split).expect("valid case")
    }

    fn oracle(&self) -> Vec<Vec<f64>> {
        let total = self.kv.keys.rows();
        let mask = match &self.tree {
            Some(t) => tree_mask(self.kv_len, t)[self.q_start..self.q_start + self.q.rows()].to_vec(),
            None => causal_mask(self.q.rows(), total, self.kv_len, self.q_start),
        };
        dense_attention(
            &self.q,
            &self.kv.keys,
            &self.kv.values,
            &mask,
            1.0 / (self.q.cols() as f64).sqrt(),
        )
        .expect("consistent shapes")
    }
}

fn c1_attention_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..500 {
        let case = AttnCase::random(&mut rng, i);
        let split = rng.random_range(1..=8);
        let err = max_err(&case.run(split), &case.oracle());
        *by_kind.entry(case.kind).or_default() += 1;
        ensure(err <= 1e-4, || {
            format!("case {i} ({}) error {err:.3e} > 1e-4", case.kind)
        })?;
        worst = worst.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("500 cases {by_kind:?}, max abs err {worst:.2e}, {secs:.2}s"))
}

fn c2_split_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f32;
    for i in 0..100 {
        let case = AttnCase::random(&mut rng, i);
        let outs: Vec<Matrix> = [1, 2, 7, 16].iter().map(|&s| case.run(s)).collect();
        for a in 0..outs.len() {
            for b in a + 1..outs.len() {
                let d = outs[a].max_abs_diff(&outs[b]);
                ensure(d <= 1e-5, || format!("case {i}: splits differ by {d:.3e}"))?;
                worst = worst.max(d);
            }
        }
    }
    Ok(format!("100 cases, splits {{1,2,7,16}}, max pairwise diff {worst:.2e}"))
}

fn attention_cube_busy(chunk: &Chunk, heads: usize, hw: &HwModel, cost: AttnCostModel) -> u64 {
    let tiles = decompose_attention(chunk, heads, TilePolicy { prefill_tile: 128 }).expect("nonempty chunk");
    let table = reorder_attention(tiles, hw.core_num).expect("cores");
    let items = attention_items(&table, hw, cost);
    simulate_attention(&table, hw, cost, auto_schedule(&items))
        .expect("auto schedule is valid")
        .busy(Unit::Cube)
}

fn prefill_chunk(kv_len: usize, new_tokens: usize) -> Chunk {
    Chunk {
        entries: vec![ChunkEntry {
            req_id: 0,
            stage: Stage::Prefill,
            start_pos: 0,
            token_num: new_tokens,
            kv_len,
            tokens: vec![0; new_tokens],
            last_part: true,
            tree: None,
        }],
        total_tokens: new_tokens,
    }
}

fn c3_skip_soundness_and_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut skipped_total = 0;
    for i in 0..200 {
        let bs = rng.random_range(1..=16);
        let kv_len = rng.random_range(0..200);
        let stage_len = rng.random_range(1..120);
        let q_start = rng.random_range(0..stage_len);
        let q_len = rng.random_range(1..=stage_len - q_start);
        let tile = TileUnit {
            stage_id: 0,
            stage: Stage::Prefill,
            head: 0,
            q_start,
            q_len,
            kv_len,
            stage_len,
        };
        let plan = skip_plan(&tile, bs);
        let total = kv_len + stage_len;
        let expected = causal_valid_len(q_start + q_len - 1, kv_len).div_ceil(bs);
        ensure(plan.computed == expected, || {
            format!("case {i}: computed {} != {expected}", plan.computed)
        })?;
        ensure(plan.total() == total.div_ceil(bs), || {
            format!("case {i}: total blocks {}", plan.total())
        })?;
        let hs = 8;
        let q = Matrix::random(q_len, hs, &mut rng);
        let k = Matrix::random(total, hs, &mut rng);
        let probs =
            dense_attention_probs(&q, &k, &causal_mask(q_len, total, kv_len, q_start), 0.3).expect("consistent shapes");
        for row in &probs {
            let mass: f64 = row[(plan.computed * bs).min(total)..].iter().sum();
            ensure(mass == 0.0, || format!("case {i}: skipped blocks carry mass {mass:e}"))?;
        }
        skipped_total += plan.skipped;
    }

    let hw = HwModel::default();
    let cost = AttnCostModel {
        head_size: 128,
        block_size: 128,
    };
    let mut trend = Vec::new();
    for prompt in [4096usize, 8192] {
        let mut prev = u64::MAX;
        let mut series = Vec::new();
        for prefix in (0..=4096).step_by(256).filter(|&p| p < prompt) {
            let busy = attention_cube_busy(&prefill_chunk(prefix, prompt - prefix), 8, &hw, cost);
            ensure(busy <= prev, || {
                format!("prompt {prompt}: cube busy rose to {busy} at prefix {prefix} (was {prev})")
            })?;
            prev = busy;
            series.push(busy);
        }
        trend.push(format!(
            "L={prompt}: {} -> {} over {} points",
            series[0],
            series[series.len() - 1],
            series.len()
        ));
    }
    Ok(format!(
        "200 cases sound ({skipped_total} blocks skipped); cube busy non-increasing [{}]",
        trend.join("; ")
    ))
}

fn c4_gemm_sweep() -> Outcome {
    const CANARY: u32 = 0x7fc0_dead;
    let mut ms: Vec<usize> = (1..=64).collect();
    ms.extend([100, 511, 512, 4096]);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let k = 128;
    let mut cases = 0;
    let mut worst = 0.0f64;
    for &m in &ms {
        let a = Matrix::random(m, k, &mut rng);
        for &tn in &TILE_MN_SET {
            let n = tn;
            let b = Matrix::random(k, n, &mut rng);
            let want = dense_gemm(&a, &b).expect("shapes agree");
            for &tm in &TILE_MN_SET {
                let prim = TilePrimitive::new(tm, tn, 64).expect("supported primitive");
                let ldc = n + 5;
                let rows_alloc = m.next_multiple_of(tm) + 2;
                let mut out = vec![f32::from_bits(CANARY); rows_alloc * ldc];
                let (gr, gc) = prim.grid(m, n);
                let order = SwizzleOrder::Zigzag(2).visit_order(gr, gc);
                gemm_virtual_pad_into(&a, &b, prim, &order, &mut out, ldc).expect("valid gemm");
                for (idx, v) in out.iter().enumerate() {
                    let (r, c) = (idx / ldc, idx % ldc);
                    if r < m && c < n {
                        let w = want.get(r, c) as f64;
                        let rel = (*v as f64 - w).abs() / w.abs().max(f64::MIN_POSITIVE);
                        ensure(rel <= 1e-6 || *v as f64 == w, || {
                            format!("M={m} tile {prim}: ({r},{c}) rel err {rel:e}")
                        })?;
                        if w != 0.0 {
                            worst = worst.max(rel);
                        }
                    } else {
                        ensure(v.to_bits() == CANARY, || {
                            format!("M={m} tile {prim}: wrote outside at ({r},{c})")
                        })?;
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} (M, tileM, tileN) cases, max rel err {worst:.1e}, canaries intact"
    ))
}

fn c5_planner_balance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let tile = |i: usize, area: usize| TileUnit {
        stage_id: i,
        stage: Stage::Prefill,
        head: 0,
        q_start: 0,
        q_len: 1,
        kv_len: area - 1,
        stage_len: 1,
    };
    for set in 0..1000 {
        let n = rng.random_range(1..64);
        let cores = rng.random_range(1..=16);
        let tiles: Vec<TileUnit> = (0..n).map(|i| tile(i, rng.random_range(1..1000))).collect();
        let table = reorder_attention(tiles.clone(), cores).expect("cores");
        let loads = table.area_loads();
        let max = *loads.iter().max().expect("cores") as f64;
        let mean = loads.iter().sum::<u64>() as f64 / cores as f64;
        let biggest = tiles.iter().map(|t| t.area()).max().expect("nonempty") as f64;
        ensure(max <= mean + biggest, || {
            format!("set {set}: max {max} > mean {mean} + {biggest}")
        })?;
        let mut sorted = tiles;
        sort_tiles(&mut sorted);
        let contiguous = contiguous_assignment(sorted, cores).expect("cores");
        let cmax = *contiguous.area_loads().iter().max().expect("cores") as f64;
        ensure(max <= cmax, || format!("set {set}: snake {max} > contiguous {cmax}"))?;
    }
    let example: Vec<TileUnit> = [8, 7, 6, 5, 4, 3, 2, 1]
        .iter()
        .enumerate()
        .map(|(i, &a)| tile(i, a))
        .collect();
    let loads = reorder_attention(example, 4).expect("cores").area_loads();
    ensure(loads == vec![9, 9, 9, 9], || format!("[8..1]/4 gave {loads:?}"))?;
    Ok("1000 sets within bounds; [8,7,6,5,4,3,2,1]/4 -> [9, 9, 9, 9]".into())
}

fn c6_scheduler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let budget = 64;
    let mut s = Scheduler::new(budget, 16, Box::new(HashProposer::new(6, 32))).map_err(|e| e.to_string())?;
    let mut expected: BTreeMap<u64, Vec<TokenId>> = BTreeMap::new();
    let mut seen: BTreeMap<u64, Vec<TokenId>> = BTreeMap::new();
    let mut next_id = 0u64;
    let mut compositions: BTreeMap<String, usize> = BTreeMap::new();
    let mut steps = 0;
    while steps < 10_000 {
        if rng.random_bool(0.3) || s.is_idle() {
            let len = rng.random_range(1..200);
            let prompt: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..32)).collect();
            let matched = if rng.random_bool(0.3) {
                rng.random_range(0..len)
            } else {
                0
            };
            let spec = rng.random_bool(0.3).then(|| SpecShape {
                width: rng.random_range(1..=3),
                depth: rng.random_range(1..=3),
            });
            let req = Request {
                id: next_id,
                arrival: steps as u64,
                prompt: prompt.clone(),
                output_len: rng.random_range(1..12),
                spec,
            };
            s.add_request(req, matched).map_err(|e| e.to_string())?;
            expected.insert(next_id, prompt[matched..].to_vec());
            next_id += 1;
        }
        let dv = s.queued_dv_tokens();
        let Some(chunk) = s.schedule_next() else {
            continue;
        };
        steps += 1;
        ensure(chunk.total_tokens <= budget, || {
            format!("step {steps}: {} tokens", chunk.total_tokens)
        })?;
        ensure(
            dv == 0 || chunk.has_stage(Stage::Decode) || chunk.has_stage(Stage::Verify),
            || format!("step {steps}: P-only chunk with {dv} D/V tokens queued"),
        )?;
        *compositions.entry(chunk.composition()).or_default() += 1;
        let mut out = BTreeMap::new();
        for e in &chunk.entries {
            match e.stage {
                Stage::Prefill => {
                    seen.entry(e.req_id).or_default().extend_from_slice(&e.tokens);
                    if e.last_part {
                        out.insert(e.req_id, StepOutput::Token(rng.random_range(0..32)));
                    }
                }
                Stage::Decode => {
                    out.insert(e.req_id, StepOutput::Token(rng.random_range(0..32)));
                }
                Stage::Verify => {
                    let tree = e.tree.as_ref().expect("verify has a tree");
                    let target: Vec<TokenId> = (0..tree.len()).map(|_| rng.random_range(0..32)).collect();
                    let path = verify_accept(tree, tree.token(0), &target).map_err(|e| e.to_string())?;
                    let tokens = tokenwise_core::spec_decode::committed_tokens(tree, &path, tree.token(0), &target);
                    out.insert(
                        e.req_id,
                        StepOutput::Verified {
                            accepted: path.len(),
                            tokens: tokens[1..].to_vec(),
                        },
                    );
                }
            }
        }
        s.complete_chunk(&chunk, &out).map_err(|e| e.to_string())?;
    }
    // Drain so every prompt is reassembled in full.
    let mut drain = 0;
    while let Some(chunk) = s.schedule_next() {
        let out = chunk
            .entries
            .iter()
            .filter(|e| e.stage != Stage::Prefill || e.last_part)
            .map(|e| {
                if let Stage::Prefill = e.stage {
                    seen.entry(e.req_id).or_default();
                }
                let o = match &e.tree {
                    Some(_) => StepOutput::Verified {
                        accepted: 1,
                        tokens: vec![0],
                    },
                    None => StepOutput::Token(0),
                };
                (e.req_id, o)
            })
            .collect();
        for e in chunk.entries.iter().filter(|e| e.stage == Stage::Prefill) {
            seen.entry(e.req_id).or_default().extend_from_slice(&e.tokens);
        }
        s.complete_chunk(&chunk, &out).map_err(|e| e.to_string())?;
        drain += 1;
        ensure(drain < 100_000, || "drain did not terminate".into())?;
    }
    ensure(seen == expected, || "prompt reassembly mismatch".into())?;
    Ok(format!(
        "10000 steps, {next_id} requests reassembled exactly, chunk mix {compositions:?}"
    ))
}

fn prefix_row(prefix: &[TokenId], salt: f32) -> [f32; 2] {
    let h = prefix
        .iter()
        .fold(7u64, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
    [(h % 100_003) as f32 + salt, prefix.len() as f32]
}

fn rows_for(table: &BlockTable, new: &[TokenId]) -> (Vec<f32>, Vec<f32>) {
    let mut full = table.tokens().to_vec();
    let (mut k, mut v) = (Vec::new(), Vec::new());
    for &t in new {
        full.push(t);
        k.extend(prefix_row(&full, 0.0));
        v.extend(prefix_row(&full, 0.5));
    }
    (k, v)
}

fn c7_kv_cache() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut cache = RadixKvCache::new(KvCacheConfig {
        block_size: 4,
        pool_blocks: 256,
        cache_cap_blocks: 192,
        kv_width: 2,
    })
    .map_err(|e| e.to_string())?;
    let mut live: Vec<BlockTable> = Vec::new();
    let mut next = 0;
    let mut evictions = 0;
    for op in 0..10_000 {
        match rng.random_range(0..10) {
            0..=2 => {
                let len = rng.random_range(1..24);
                let prompt: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..3)).collect();
                let m = cache.match_prefix(&prompt);
                let mut t = cache.start_sequence(next, m);
                next += 1;
                let rest = prompt[t.total_tokens()..].to_vec();
                let (k, v) = rows_for(&t, &rest);
                match cache.commit_tokens(&mut t, &rest, &k, &v) {
                    Ok(()) => live.push(t),
                    Err(_) => cache.release(t),
                }
            }
            3..=5 if !live.is_empty() => {
                let i = rng.random_range(0..live.len());
                let new: Vec<TokenId> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..3)).collect();
                let (k, v) = rows_for(&live[i], &new);
                if cache.commit_tokens(&mut live[i], &new, &k, &v).is_err() {
                    let t = live.swap_remove(i);
                    cache.release(t);
                }
            }
            6 if !live.is_empty() => {
                let i = rng.random_range(0..live.len());
                let len = rng.random_range(0..=live[i].total_tokens());
                cache.truncate(&mut live[i], len);
            }
            7 if !live.is_empty() => {
                let parent = &live[rng.random_range(0..live.len())];
                let child = cache.fork(parent, next);
                next += 1;
                live.push(child);
            }
            8 if !live.is_empty() => {
                let t = live.swap_remove(rng.random_range(0..live.len()));
                cache.release(t);
            }
            _ => {
                let held: Vec<usize> = live.iter().flat_map(|t| t.blocks().iter().copied()).collect();
                let paths_before = cache.cached_paths();
                let n = cache.evict(rng.random_range(1..8));
                evictions += n;
                for b in &held {
                    ensure(cache.ref_count(*b) > 0, || {
                        format!("op {op}: eviction freed held block {b}")
                    })?;
                }
                for p in cache.cached_paths() {
                    ensure(paths_before.iter().any(|q| q.starts_with(&p)), || {
                        format!("op {op}: eviction created a new path")
                    })?;
                }
            }
        }
        cache.validate().map_err(|e| format!("op {op}: {e}"))?;
        let s = cache.stats();
        ensure(s.free + s.referenced + s.cached == 256, || {
            format!("op {op}: stats {s:?}")
        })?;
        for t in &live {
            for pos in 0..t.total_tokens() {
                let prefix = &t.tokens()[..=pos];
                ensure(
                    cache.key_row(t, pos) == prefix_row(prefix, 0.0)
                        && cache.value_row(t, pos) == prefix_row(prefix, 0.5),
                    || format!("op {op}: sequence {} row {pos} changed", t.seq_id()),
                )?;
            }
        }
    }
    for try_ in 0..1000 {
        let len = rng.random_range(1..30);
        let q: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let want = brute_force_lcp(&cache.cached_paths(), &q);
        let m = cache.match_prefix(&q);
        let got = m.matched_len;
        cache.release_match(m);
        ensure(got == want, || format!("try {try_}: match {got} vs brute force {want}"))?;
    }
    cache.validate().map_err(|e| format!("after LCP tries: {e}"))?;
    Ok(format!(
        "10000 ops isolated ({} live, {evictions} blocks evicted safely), 1000 LCP tries exact",
        live.len()
    ))
}

fn c8_speculation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut accepted_lens = 0;
    for i in 0..500 {
        let n = rng.random_range(1..=12);
        let tree = random_tree(&mut rng, n, 3);
        let mask = tree.tree_mask();
        let anc = ancestor_mask(&tree);
        for (r, row) in anc.iter().enumerate() {
            ensure(mask.row(r) == &row[..], || format!("tree {i}: mask row {r} differs"))?;
        }
        let target: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..3)).collect();
        for context_next in 0..3 {
            let got = verify_accept(&tree, context_next, &target).map_err(|e| e.to_string())?;
            let want = brute_force_accept(&tree, context_next, &target);
            ensure(got == want, || {
                format!("tree {i}: accept {got:?} vs enumeration {want:?}")
            })?;
            accepted_lens += got.len();
        }
    }
    for i in 0..100 {
        let n = rng.random_range(1..=32);
        let kv_len = rng.random_range(0..100);
        let hs = 16;
        let tokens: Vec<TokenId> = (0..n as u32).collect();
        let chain = SpecTree::chain(&tokens).map_err(|e| e.to_string())?;
        let spec = chain.tree_mask();
        let kv = dense_kv(&mut rng, kv_len + n, hs);
        let q = Matrix::random(n, hs, &mut rng);
        let bs = rng.random_range(1..=8);
        let job = |mask| AttentionTileJob {
            q: q.clone(),
            q_start: 0,
            kv_len,
            mask,
            scale: 0.25,
            block_size: bs,
        };
        let a = run_tile(&job(TileMask::Spec(&spec)), &kv, 2).map_err(|e| e.to_string())?;
        let b = run_tile(&job(TileMask::Causal), &kv, 2).map_err(|e| e.to_string())?;
        let same = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("chain {i}: verify and causal paths differ"))?;
    }
    Ok(format!(
        "500 trees: masks and acceptance match brute force ({accepted_lens} accepted nodes); 100 chains bit-identical"
    ))
}

fn c9_end_to_end() -> Outcome {
    let mut worst = 0.0f64;
    let mut rounds = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let budget = rng.random_range(16..40);
        let bs = rng.random_range(2..=8);
        let cfg = Config::parse(&format!(
            "sched.budget = {budget}\nsched.reserve = {}\nkv.block_size = {bs}\nattn.prefill_tile = {}\n",
            budget / 4,
            [4, 8, 16][rng.random_range(0..3)]
        ))
        .map_err(|e| e.to_string())?;
        let model = ToyModel::random(cfg.model, seed);
        let shared: Vec<TokenId> = (0..rng.random_range(2 * bs..6 * bs))
            .map(|_| rng.random_range(0..64))
            .collect();
        let mut first = shared.clone();
        first.extend((0..rng.random_range(1..12)).map(|_| rng.random_range(0..64u32)));
        let mut second = shared.clone();
        second.extend((0..rng.random_range(1..12)).map(|_| rng.random_range(0..64u32)));
        let spec = SpecShape {
            width: rng.random_range(1..=2),
            depth: rng.random_range(1..=3),
        };

        let mut engine = Engine::new(
            cfg.clone(),
            Mode::Numeric,
            Some(model.clone()),
            Box::new(GreedyOracleProposer::new(model.clone(), seed)),
            seed,
        )
        .map_err(|e| e.to_string())?;
        engine.set_record_logits(true);
        engine
            .submit(Request {
                id: 0,
                arrival: 0,
                prompt: first.clone(),
                output_len: 6,
                spec: None,
            })
            .map_err(|e| e.to_string())?;
        // The second request overlaps the first's decode phase.
        while engine.records()[&0].generated.is_empty() {
            engine.step().map_err(|e| e.to_string())?;
        }
        engine
            .submit(Request {
                id: 1,
                arrival: engine.clock(),
                prompt: second.clone(),
                output_len: 5,
                spec: Some(spec),
            })
            .map_err(|e| e.to_string())?;
        while engine.step().map_err(|e| e.to_string())? {}

        let recs = engine.records();
        ensure(recs[&1].matched_prefix >= bs, || {
            format!("seed {seed}: no prefix reuse")
        })?;
        ensure(recs[&1].verify_rounds >= 1, || format!("seed {seed}: no verify round"))?;
        ensure(
            engine
                .chunk_log()
                .iter()
                .any(|c| c.composition.contains('P') && c.composition.len() > 1)
                || first.len() + second.len() > budget,
            || format!("seed {seed}: prefill never chunked"),
        )?;
        rounds += recs[&1].verify_rounds;
        let check = engine.check();
        ensure(check.requests == 2, || {
            format!("seed {seed}: {} requests checked", check.requests)
        })?;
        ensure(check.max_abs_err <= 1e-3, || {
            format!("seed {seed}: engine err {:.3e}", check.max_abs_err)
        })?;
        worst = worst.max(check.max_abs_err);

        let dense = tiny_forward(&model, &second, &CacheMode::None).map_err(|e| e.to_string())?;
        let paged = tiny_forward(
            &model,
            &second,
            &CacheMode::PagedPrefix {
                config: Box::new(cfg),
                warmup: vec![first],
            },
        )
        .map_err(|e| e.to_string())?;
        let err = dense.iter().zip(&paged).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-3, || format!("seed {seed}: tiny_forward err {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!(
        "20 scenarios ({rounds} verify rounds), max abs err {worst:.2e}"
    ))
}

fn c10_pipelines() -> Outcome {
    let n = 16;
    let t = 5;
    let items = vec![(0..n).map(|i| AttnItem::uniform(i, t)).collect::<Vec<_>>()];
    let seq = simulate_attention_items(&items, Schedule::Seq).map_err(|e| e.to_string())?;
    let p4 = simulate_attention_items(&items, Schedule::Pipe4).map_err(|e| e.to_string())?;
    ensure(p4.makespan * 64 == seq.makespan * 34, || {
        format!("Pipe4 {} vs Seq {} is not 34/64", p4.makespan, seq.makespan)
    })?;

    let hw = HwModel::default();
    let cost = AttnCostModel {
        head_size: 64,
        block_size: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for inst in 0..300 {
        let mut chunk = Chunk {
            entries: Vec::new(),
            total_tokens: 0,
        };
        let decode_only = inst % 3 == 0;
        for e in 0..rng.random_range(1..6) {
            let (stage, len, tree) = if decode_only || rng.random_bool(0.3) {
                (Stage::Decode, 1, None)
            } else if rng.random_bool(0.3) {
                let n = rng.random_range(2..12);
                (Stage::Verify, n, Some(random_tree(&mut rng, n, 4)))
            } else {
                (Stage::Prefill, rng.random_range(1..400), None)
            };
            chunk.entries.push(ChunkEntry {
                req_id: e,
                stage,
                start_pos: chunk.total_tokens,
                token_num: len,
                kv_len: rng.random_range(0..20_000),
                tokens: vec![0; len],
                last_part: true,
                tree,
            });
            chunk.total_tokens += len;
        }
        let tiles = decompose_attention(&chunk, 4, TilePolicy { prefill_tile: 128 }).map_err(|e| e.to_string())?;
        let table = reorder_attention(tiles, hw.core_num).map_err(|e| e.to_string())?;
        let items = attention_items(&table, &hw, cost);
        let seq = simulate_attention_items(&items, Schedule::Seq).map_err(|e| e.to_string())?;
        let schedule = auto_schedule(&items);
        let mut candidates = vec![schedule];
        if schedule == Schedule::DecodePipe {
            candidates.push(if items.iter().flatten().any(|i| i.update > 0) {
                Schedule::Pipe4
            } else {
                Schedule::Pipe3
            });
        }
        for sched in candidates {
            let a = simulate_attention_items(&items, sched).map_err(|e| e.to_string())?;
            let b = simulate_attention_items(&items, sched).map_err(|e| e.to_string())?;
            ensure(a.to_json() == b.to_json() && a.to_csv() == b.to_csv(), || {
                format!("instance {inst}: {sched:?} trace not reproducible")
            })?;
            a.check_exclusive().map_err(|e| e.to_string())?;
            if sched != Schedule::Pipe4 {
                ensure(a.makespan <= seq.makespan, || {
                    format!("instance {inst}: {sched:?} {} > Seq {}", a.makespan, seq.makespan)
                })?;
            }
            *counts.entry(format!("{sched:?}")).or_default() += 1;
        }
    }
    Ok(format!(
        "Pipe4/Seq = {}/{} = 34/64; 300 instances {counts:?} <= Seq, traces byte-identical",
        p4.makespan, seq.makespan
    ))
}

fn c11_swizzle() -> Outcome {
    let prim = TilePrimitive::new(16, 16, 64).map_err(|e| e.to_string())?;
    let grid = LinearGrid::new(LinearOp::Down, 128, 128, 64, prim);
    let panel = 16 * 64 * 4;
    let mut lines = Vec::new();
    // Each core holds two panels in flight, so the cores must not exceed
    // what the 4-panel working set can serve for an order to matter.
    for cores in [1usize, 2, 4] {
        for panels in [4usize, 6, 8, 12, 16] {
            let hw = HwModel {
                core_num: cores,
                l2_bytes: panels * panel,
                ..HwModel::default()
            };
            let mut store = ProfileStore::new();
            let (best, _) = profile_swizzle(&mut store, &grid, &hw, &SwizzleOrder::candidates());
            let stored = store.get(grid.op, (grid.m, grid.n, grid.k)).expect("profiled").order;
            ensure(stored == best, || "stored order differs from the reported best".into())?;
            let hbm = |order| simulate_linear(&grid, &linear_tasktable(&grid, order, cores), &hw).hbm_read_bytes;
            let (s, r) = (hbm(stored), hbm(SwizzleOrder::RowMajor));
            // Row-major reaches compulsory traffic once one row panel and
            // every column panel fit; no order can do better from there.
            let covers = panels > grid.cols;
            ensure(s <= r, || {
                format!("{cores}c/{panels}p: stored {stored} reads {s} > row-major {r}")
            })?;
            ensure((s == r) == covers, || {
                format!("{cores}c/{panels}p: stored {stored} {s} vs row-major {r} (covers grid: {covers})")
            })?;
            if panels == 4 {
                lines.push(format!("{cores} core(s) {stored} {s} < {r}"));
            }
        }
    }
    Ok(format!(
        "8x8 grid, 1/2/4 cores: stored < row-major below coverage (4, 6, 8 panels), equal at 12 and 16; 4 panels: {}",
        lines.join(", ")
    ))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("attention oracle equivalence", c1_attention_oracle),
        ("split invariance", c2_split_invariance),
        ("skip soundness and prefix trend", c3_skip_soundness_and_trend),
        ("gemm sweep", c4_gemm_sweep),
        ("planner balance", c5_planner_balance),
        ("scheduler", c6_scheduler),
        ("kv cache", c7_kv_cache),
        ("speculation", c8_speculation),
        ("end to end", c9_end_to_end),
        ("pipeline simulation", c10_pipelines),
        ("swizzle profiler", c11_swizzle),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
