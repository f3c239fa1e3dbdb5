//! Timings for the four paths that dominate wall-clock time: dense matmul,
//! a forward/backward pass through a critic, one full training step, and a
//! greedy evaluation episode.

use criterion::{criterion_group, criterion_main, Criterion};
use qt_bench::{bench_config, bench_dataset, bench_env, bench_state};
use qt_core::rng::stream_rng;
use qt_core::{q_forward, rollout, train_step, Tape, Tensor};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = stream_rng(0, "bench");
    let a = Tensor::randn(&[64, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 64], 1.0, &mut rng);
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(black_box(a.clone())).unwrap();
            let bv = tape.constant(black_box(b.clone())).unwrap();
            let out = tape.matmul(av, bv).unwrap();
            black_box(tape.value(out).clone());
        })
    });
}

fn critic_backward(c: &mut Criterion) {
    let cfg = bench_config();
    let ds = bench_dataset(&cfg);
    let state = bench_state(&cfg, &ds);
    let mut rng = stream_rng(1, "bench");
    let s = Tensor::randn(&[cfg.batch_size, ds.state_dim], 1.0, &mut rng);
    let a = Tensor::randn(&[cfg.batch_size, ds.action_dim], 0.5, &mut rng);
    let y = Tensor::zeros(&[cfg.batch_size]);
    c.bench_function("critic_forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let q1 = qt_core::numerics::nn::bind_mlp(&mut tape, "q1", &state.critics.online.q1)
                .unwrap();
            let sv = tape.constant(s.clone()).unwrap();
            let av = tape.constant(a.clone()).unwrap();
            let q = q_forward(&mut tape, &q1, sv, av).unwrap();
            let target = tape.constant(y.clone()).unwrap();
            let loss = tape.mse(q, target).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    let cfg = bench_config();
    let ds = bench_dataset(&cfg);
    let mut state = bench_state(&cfg, &ds);
    c.bench_function("train_step", |bench| {
        bench.iter(|| black_box(train_step(&mut state, &cfg, &ds).unwrap()))
    });
}

fn eval_episode(c: &mut Criterion) {
    let cfg = bench_config();
    let ds = bench_dataset(&cfg);
    let state = bench_state(&cfg, &ds);
    let mut env = bench_env(&cfg);
    let agent = state.agent(&cfg);
    c.bench_function("rollout_episode", |bench| {
        bench.iter(|| black_box(rollout(&mut env, &agent, 7).unwrap()))
    });
}

criterion_group!(benches, matmul, critic_backward, training_step, eval_episode);
criterion_main!(benches);
