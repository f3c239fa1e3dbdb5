//! Offline reinforcement learning with a return-conditioned transformer
//! policy regularized by learned Q-values: a self-contained, CPU-sized
//! implementation covering the numeric substrate, toy control environments,
//! offline dataset tooling, the policy and twin critics, the joint training
//! loop, return-candidate inference, and brute-force oracles for testing.

pub mod checkpoint;
pub mod critic;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;
mod wire;

/// Scalar type for all in-memory numerics. The default build uses f64; the
/// `single-precision` feature switches to f32 (on-disk formats stay 64-bit).
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

pub use checkpoint::Checkpoint;
pub use critic::{
    critic_loss, make_targets, make_targets_1step, q_forward, BellmanTargets, CriticConfig,
    CriticPair, TwinCritics,
};
pub use dataset::{collect, sample_segments, stitch_split, BehaviorPolicy, Dataset, SegmentBatch, Trajectory};
pub use envs::{EnvSpec, RewardMode, StepOut, ToyEnv};
pub use error::{Error, Result};
pub use inference::{
    action_lattice, candidate_grid, evaluate, evaluate_greedy, greedy_critic_action,
    greedy_critic_rollout, make_candidates, rollout, select_action, Agent, CandidateSet,
    EvalReport, RolloutTrace, Selection, TraceStep,
};
pub use numerics::nn::{Activation, Linear, Mlp};
pub use oracle::{
    behavior_value, brute_nstep_return, discretized_optimal, random_return, score_anchors,
    ScoreAnchors,
};
pub use numerics::optim::{clip_global_norm, flatten, polyak, AdamState, ParamGroup};
pub use policy::{
    act, bind_policy, bind_policy_frozen, dt_loss, embed_segment, mlp_bc_forward, policy_forward,
    MlpPolicy, PolicyConfig, PolicyModel, PolicyParams, PolicyVars, TargetPolicy,
};
pub use numerics::tape::{GradMap, Tape, Var};
pub use numerics::tensor::Tensor;
pub use trainer::{
    compute_alpha, joint_policy_loss, metrics_csv, train, train_step, PolicyKind, StepMetrics,
    TrainArtifacts, TrainConfig, TrainState,
};
