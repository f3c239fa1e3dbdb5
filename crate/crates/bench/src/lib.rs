//! Shared fixtures for the benchmarks: a small corridor task, its offline
//! dataset, and a ready-to-step trainer state. Everything is deterministic
//! so timings compare across runs.

use qt_core::{collect, BehaviorPolicy, Dataset, ToyEnv, TrainConfig, TrainState};

pub fn bench_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.env = "chain-6".into();
    cfg.reward_mode = "dense".into();
    cfg.behavior = "uniform".into();
    cfg.episodes = 32;
    cfg.context_k = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.embed_dim = 32;
    cfg.critic_hidden = 32;
    cfg.critic_layers = 2;
    cfg.batch_size = 16;
    cfg.eval_candidates = 4;
    cfg
}

pub fn bench_env(cfg: &TrainConfig) -> ToyEnv {
    ToyEnv::make(&cfg.env, qt_core::RewardMode::parse(&cfg.reward_mode).unwrap()).unwrap()
}

pub fn bench_dataset(cfg: &TrainConfig) -> Dataset {
    let mut env = bench_env(cfg);
    collect(
        &mut env,
        BehaviorPolicy::parse(&cfg.behavior).unwrap(),
        cfg.episodes,
        cfg.data_seed,
    )
    .unwrap()
}

pub fn bench_state(cfg: &TrainConfig, dataset: &Dataset) -> TrainState {
    let env = bench_env(cfg);
    TrainState::init(cfg, dataset, env.spec()).unwrap()
}
