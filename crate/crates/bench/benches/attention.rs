//! Row-grouped cross-view attention vs global attention over the same token
//! budget, across growing row counts. The grouped variant should scale
//! linearly with rows, the global one quadratically.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use geomim_core::model::{block_forward, cva_forward, ModelConfig, ModelParams};
use geomim_core::rng::Rng;
use geomim_core::tensor::{Tape, Tensor};

const VIEWS: usize = 6;
const COLS: usize = 7;
const DIM: usize = 64;

fn bench_attention(c: &mut Criterion) {
    let cfg = ModelConfig {
        dim: DIM,
        heads: 4,
        enc_depth: 0,
        dec_depth: 2,
        patch: 16,
        bins: 4,
        mlp_ratio: 4,
        views: VIEWS,
        cva_positions: vec![1],
        camera_gate: false,
    };
    let params = ModelParams::init(&cfg, 0).unwrap();

    let mut group = c.benchmark_group("attention");
    for rows in [4usize, 8, 16, 32] {
        let tokens = VIEWS * rows * COLS;
        let mut rng = Rng::new(rows as u64);
        let grouped = Tensor::rand_uniform(&mut rng, &[VIEWS, rows * COLS, DIM], -1.0, 1.0);
        let global = Tensor::rand_uniform(&mut rng, &[1, tokens, DIM], -1.0, 1.0);

        group.bench_with_input(BenchmarkId::new("cva_rows", rows), &rows, |b, &rows| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let x = tape.leaf(&grouped);
                let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", rows, COLS).unwrap();
                black_box(tape.value(y).data()[0]);
            })
        });
        group.bench_with_input(BenchmarkId::new("global_rows", rows), &rows, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let x = tape.leaf(&global);
                let y = block_forward(&mut tape, x, &bound, "dec.shared.0").unwrap();
                black_box(tape.value(y).data()[0]);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_attention);
criterion_main!(benches);
