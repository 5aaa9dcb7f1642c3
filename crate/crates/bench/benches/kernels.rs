use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tokenwise_bench::{dense_kv, matrix, mixed_chunk};
use tokenwise_core::meta_attention::{run_tile, AttentionTileJob, TileMask};
use tokenwise_core::planner::{
    decompose_attention, linear_tasktable, reorder_attention, LinearGrid, LinearOp, SwizzleOrder, TilePolicy,
};
use tokenwise_core::sim::{simulate_linear, HwModel};
use tokenwise_core::smooth_gemm::{gemm_virtual_pad, TilePrimitive};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm_virtual_pad");
    let prim = TilePrimitive::new(64, 64, 64).unwrap();
    let b = matrix(256, 256, 2);
    for m in [1, 100, 512] {
        let a = matrix(m, 256, 1);
        let order = SwizzleOrder::Zigzag(2).visit_order(m.div_ceil(64), 4);
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |bench, _| {
            bench.iter(|| gemm_virtual_pad(black_box(&a), black_box(&b), prim, &order).unwrap())
        });
    }
    g.finish();
}

fn attention_tile(c: &mut Criterion) {
    let mut g = c.benchmark_group("run_tile");
    let (hs, q_len, kv_len) = (64, 128, 2048);
    let kv = dense_kv(kv_len + q_len, hs, 3);
    let q = matrix(q_len, hs, 4);
    for split in [1, 4, 16] {
        g.bench_with_input(BenchmarkId::new("prefill_split", split), &split, |bench, &split| {
            bench.iter(|| {
                let job = AttentionTileJob {
                    q: q.clone(),
                    q_start: 0,
                    kv_len,
                    mask: TileMask::Causal,
                    scale: 0.125,
                    block_size: 128,
                };
                run_tile(&job, black_box(&kv), split).unwrap()
            })
        });
    }
    g.finish();
}

fn planner(c: &mut Criterion) {
    let chunk = mixed_chunk(3072, 4096, 256);
    c.bench_function("decompose_and_snake_32_heads", |bench| {
        bench.iter(|| {
            let tiles = decompose_attention(black_box(&chunk), 32, TilePolicy::default()).unwrap();
            reorder_attention(tiles, 8).unwrap()
        })
    });
}

fn linear_sim(c: &mut Criterion) {
    let prim = TilePrimitive::new(128, 128, 64).unwrap();
    let grid = LinearGrid::new(LinearOp::Down, 4096, 4096, 4096, prim);
    let hw = HwModel::default();
    let table = linear_tasktable(&grid, SwizzleOrder::Zigzag(4), hw.core_num);
    c.bench_function("simulate_linear_4096_cubed", |bench| {
        bench.iter(|| simulate_linear(black_box(&grid), &table, &hw))
    });
}

criterion_group!(benches, gemm, attention_tile, planner, linear_sim);
criterion_main!(benches);
