//! The joint training loop: each step regresses both critics onto n-step
//! targets, then optimizes the policy on reconstruction loss minus a
//! normalized Q bonus, then Polyak-tracks both target networks. Disabling
//! the bonus (eta 0 or `train_with_q` off) reduces the policy update to pure
//! return-conditioned behavior cloning, bit for bit.

use crate::checkpoint::Checkpoint;
use crate::critic::{critic_loss, make_targets, make_targets_1step, q_forward, CriticConfig, CriticPair};
use crate::dataset::{sample_segments, Dataset, SegmentBatch};
use crate::envs::{EnvSpec, ToyEnv};
use crate::error::{Error, Result};
use crate::inference::{evaluate, Agent, EvalReport};
use crate::numerics::nn::{bind_mlp, bind_mlp_frozen, Activation};
use crate::numerics::optim::{clip_global_norm, polyak, AdamState};
use crate::numerics::tape::{Tape, Var};
use crate::policy::{dt_loss, MlpPolicy, PolicyConfig, PolicyModel, PolicyParams};
use crate::rng::stream_rng;
use crate::Real;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Which policy architecture to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Transformer,
    Mlp,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Transformer => "transformer",
            PolicyKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(PolicyKind::Transformer),
            "mlp" => Ok(PolicyKind::Mlp),
            other => Err(Error::Config(format!("unknown policy kind '{other}'"))),
        }
    }
}

/// Every knob of a run, serializable as flat `key=value` lines so a run can
/// be reproduced from its manifest. Unknown keys are rejected, not ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // Task selection (consumed by the command-line driver).
    pub env: String,
    pub reward_mode: String,
    /// Data generation: episode count and behavior spec (see
    /// `BehaviorPolicy::parse`), plus an optional stitch split. The dataset
    /// has its own seed so sweeps can share one dataset across training
    /// seeds.
    pub episodes: usize,
    pub behavior: String,
    pub data_seed: u64,
    pub stitch_split: bool,
    pub stitch_cut: Real,
    // Optimization.
    pub policy_kind: PolicyKind,
    pub eta: Real,
    pub gamma: Real,
    pub rho: Real,
    pub lr_policy: Real,
    pub lr_critic: Real,
    pub batch_size: usize,
    pub context_k: usize,
    pub grad_clip: Real,
    pub total_steps: usize,
    pub seed: u64,
    pub use_nstep: bool,
    pub train_with_q: bool,
    pub eval_with_q: bool,
    /// Score the policy bonus with min(Q1, Q2) instead of Q1 alone.
    pub improve_with_min: bool,
    // Architecture.
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout_keep: Real,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    // Evaluation and logging cadence.
    pub eval_candidates: usize,
    pub eval_episodes: usize,
    pub log_interval: usize,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: minutes per run on one CPU core.
    fn default() -> Self {
        Self {
            env: "umaze".into(),
            reward_mode: "sparse".into(),
            episodes: 200,
            behavior: "scripted:0.3".into(),
            data_seed: 0,
            stitch_split: false,
            stitch_cut: 0.5,
            policy_kind: PolicyKind::Transformer,
            eta: 0.1,
            gamma: 0.99,
            rho: 0.995,
            lr_policy: 3e-4,
            lr_critic: 3e-4,
            batch_size: 64,
            context_k: 20,
            grad_clip: 5.0,
            total_steps: 20_000,
            seed: 0,
            use_nstep: true,
            train_with_q: true,
            eval_with_q: true,
            improve_with_min: false,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 64,
            dropout_keep: 0.9,
            critic_hidden: 64,
            critic_layers: 2,
            eval_candidates: 8,
            eval_episodes: 10,
            log_interval: 100,
            eval_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.eta < 0.0 || !self.eta.is_finite() {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        for (name, lr) in [("lr_policy", self.lr_policy), ("lr_critic", self.lr_critic)] {
            if lr <= 0.0 || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.context_k < 2 {
            return bad(format!(
                "context_k must be >= 2 so Bellman targets have a bootstrap step, got {}",
                self.context_k
            ));
        }
        if self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.dropout_keep) || self.dropout_keep == 0.0 {
            return bad(format!("dropout_keep must lie in (0, 1], got {}", self.dropout_keep));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("embed_dim", self.embed_dim),
            ("critic_hidden", self.critic_hidden),
            ("critic_layers", self.critic_layers),
            ("eval_candidates", self.eval_candidates),
            ("log_interval", self.log_interval),
            ("eval_interval", self.eval_interval),
            ("episodes", self.episodes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.stitch_cut) || self.stitch_cut == 0.0 {
            return bad(format!("stitch_cut must lie in (0, 1), got {}", self.stitch_cut));
        }
        Ok(())
    }

    /// Set one key from its text form; unknown keys and malformed values are
    /// errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad flag '{value}' for key '{key}' (use true/false)"))),
            }
        }
        match key {
            "env" => self.env = value.to_string(),
            "reward_mode" => self.reward_mode = value.to_string(),
            "episodes" => self.episodes = num(key, value)?,
            "behavior" => self.behavior = value.to_string(),
            "data_seed" => self.data_seed = num(key, value)?,
            "stitch_split" => self.stitch_split = flag(key, value)?,
            "stitch_cut" => self.stitch_cut = num(key, value)?,
            "policy" => self.policy_kind = PolicyKind::parse(value)?,
            "eta" => self.eta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "lr_policy" => self.lr_policy = num(key, value)?,
            "lr_critic" => self.lr_critic = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "context_k" => self.context_k = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "use_nstep" => self.use_nstep = flag(key, value)?,
            "train_with_q" => self.train_with_q = flag(key, value)?,
            "eval_with_q" => self.eval_with_q = flag(key, value)?,
            "improve_with_min" => self.improve_with_min = flag(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "dropout_keep" => self.dropout_keep = num(key, value)?,
            "critic_hidden" => self.critic_hidden = num(key, value)?,
            "critic_layers" => self.critic_layers = num(key, value)?,
            "eval_candidates" => self.eval_candidates = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "log_interval" => self.log_interval = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key=value` per line. Feeding the
    /// result back through `from_kv_text` reproduces the config exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let kv = &mut s;
        let _ = writeln!(kv, "env={}", self.env);
        let _ = writeln!(kv, "reward_mode={}", self.reward_mode);
        let _ = writeln!(kv, "episodes={}", self.episodes);
        let _ = writeln!(kv, "behavior={}", self.behavior);
        let _ = writeln!(kv, "data_seed={}", self.data_seed);
        let _ = writeln!(kv, "stitch_split={}", self.stitch_split);
        let _ = writeln!(kv, "stitch_cut={}", self.stitch_cut);
        let _ = writeln!(kv, "policy={}", self.policy_kind.name());
        let _ = writeln!(kv, "eta={}", self.eta);
        let _ = writeln!(kv, "gamma={}", self.gamma);
        let _ = writeln!(kv, "rho={}", self.rho);
        let _ = writeln!(kv, "lr_policy={}", self.lr_policy);
        let _ = writeln!(kv, "lr_critic={}", self.lr_critic);
        let _ = writeln!(kv, "batch_size={}", self.batch_size);
        let _ = writeln!(kv, "context_k={}", self.context_k);
        let _ = writeln!(kv, "grad_clip={}", self.grad_clip);
        let _ = writeln!(kv, "total_steps={}", self.total_steps);
        let _ = writeln!(kv, "seed={}", self.seed);
        let _ = writeln!(kv, "use_nstep={}", self.use_nstep);
        let _ = writeln!(kv, "train_with_q={}", self.train_with_q);
        let _ = writeln!(kv, "eval_with_q={}", self.eval_with_q);
        let _ = writeln!(kv, "improve_with_min={}", self.improve_with_min);
        let _ = writeln!(kv, "n_layers={}", self.n_layers);
        let _ = writeln!(kv, "n_heads={}", self.n_heads);
        let _ = writeln!(kv, "embed_dim={}", self.embed_dim);
        let _ = writeln!(kv, "dropout_keep={}", self.dropout_keep);
        let _ = writeln!(kv, "critic_hidden={}", self.critic_hidden);
        let _ = writeln!(kv, "critic_layers={}", self.critic_layers);
        let _ = writeln!(kv, "eval_candidates={}", self.eval_candidates);
        let _ = writeln!(kv, "eval_episodes={}", self.eval_episodes);
        let _ = writeln!(kv, "log_interval={}", self.log_interval);
        let _ = writeln!(kv, "eval_interval={}", self.eval_interval);
        s
    }

    /// Parse `key=value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped.
    pub fn from_kv_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    /// Parse `key=value` lines on top of the current values.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Live state of a run: online and target networks, optimizer moments, and
/// the named RNG streams that make every step reproducible.
pub struct TrainState {
    pub policy: PolicyModel,
    pub target_policy: PolicyModel,
    pub critics: CriticPair,
    pub opt_policy: AdamState,
    pub opt_critic: AdamState,
    /// Completed `train_step` calls.
    pub step: usize,
    pub state_mean: Vec<Real>,
    pub state_std: Vec<Real>,
    pub max_return: Real,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks sized for the dataset and environment; all init draws
    /// come from the seed's "init" stream, data order from "data", dropout
    /// from "dropout".
    pub fn init(cfg: &TrainConfig, dataset: &Dataset, spec: &EnvSpec) -> Result<TrainState> {
        cfg.validate()?;
        if dataset.state_dim != spec.state_dim || dataset.action_dim != spec.action_dim {
            return Err(Error::Config(format!(
                "dataset dims {}/{} do not match environment dims {}/{}",
                dataset.state_dim, dataset.action_dim, spec.state_dim, spec.action_dim
            )));
        }
        let mut init_rng = stream_rng(cfg.seed, "init");
        let policy = match cfg.policy_kind {
            PolicyKind::Transformer => {
                let pcfg = PolicyConfig {
                    state_dim: spec.state_dim,
                    action_dim: spec.action_dim,
                    context_k: cfg.context_k,
                    n_layers: cfg.n_layers,
                    n_heads: cfg.n_heads,
                    embed_dim: cfg.embed_dim,
                    max_timestep: spec.max_episode_steps,
                    dropout_keep: cfg.dropout_keep,
                    action_low: spec.action_low.clone(),
                    action_high: spec.action_high.clone(),
                };
                PolicyModel::Transformer(PolicyParams::init(pcfg, &mut init_rng)?)
            }
            PolicyKind::Mlp => PolicyModel::Mlp(MlpPolicy::init(
                spec.state_dim,
                spec.action_dim,
                cfg.embed_dim,
                spec.action_low.clone(),
                spec.action_high.clone(),
                &mut init_rng,
            )?),
        };
        let ccfg = CriticConfig {
            hidden_dim: cfg.critic_hidden,
            n_hidden_layers: cfg.critic_layers,
            activation: Activation::Mish,
        };
        let critics = CriticPair::init(ccfg, spec.state_dim, spec.action_dim, &mut init_rng)?;
        Ok(TrainState {
            opt_policy: AdamState::new(&policy),
            opt_critic: AdamState::new(&critics.online),
            target_policy: policy.clone(),
            policy,
            critics,
            step: 0,
            state_mean: dataset.state_mean.clone(),
            state_std: dataset.state_std.clone(),
            max_return: dataset.max_return,
            data_rng: stream_rng(cfg.seed, "data"),
            dropout_rng: stream_rng(cfg.seed, "dropout"),
        })
    }

    /// Borrow the live networks as an inference agent.
    pub fn agent(&self, cfg: &TrainConfig) -> Agent<'_> {
        Agent {
            policy: &self.policy,
            critics: &self.critics,
            state_mean: &self.state_mean,
            state_std: &self.state_std,
            max_return: self.max_return,
            n_candidates: cfg.eval_candidates,
            eval_with_q: cfg.eval_with_q,
        }
    }

    /// Snapshot everything needed to act later.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            policy: self.policy.clone(),
            target_policy: self.target_policy.clone(),
            critics: self.critics.clone(),
            state_mean: self.state_mean.clone(),
            state_std: self.state_std.clone(),
            max_return: self.max_return,
        }
    }
}

/// Bonus weight: eta over the average Q magnitude at the batch's recorded
/// state-action pairs. The mean is a plain number — no gradient flows
/// through the normalizer — and is floored at 1e-8.
pub fn compute_alpha(eta: Real, batch_q_abs: &[Real]) -> Real {
    let mean = if batch_q_abs.is_empty() {
        0.0
    } else {
        batch_q_abs.iter().sum::<Real>() / batch_q_abs.len() as Real
    };
    eta / mean.max(1e-8)
}

/// |Q1| at the batch's valid recorded (state, action) pairs, computed with
/// frozen weights on a scratch tape.
fn data_q_abs(critics: &CriticPair, batch: &SegmentBatch) -> Result<Vec<Real>> {
    let (b, k) = (batch.batch_size(), batch.context());
    let (s, a) = (batch.state.shape()[2], batch.action.shape()[2]);
    let mut tape = Tape::new();
    let q1 = bind_mlp_frozen(&mut tape, &critics.online.q1)?;
    let sv = tape.constant(batch.state.clone().reshaped(&[b * k, s])?)?;
    let av = tape.constant(batch.action.clone().reshaped(&[b * k, a])?)?;
    let q = q_forward(&mut tape, &q1, sv, av)?;
    let q = tape.value(q).data();
    let mask = batch.mask.data();
    Ok((0..b * k).filter(|&i| mask[i] == 1.0).map(|i| q[i].abs()).collect())
}

/// Value breakdown of one policy update, alongside the differentiable loss.
pub struct PolicyLossParts {
    pub loss: Var,
    pub dt_loss: Real,
    pub alpha: Real,
    /// The alpha denominator: mean |Q1| at recorded actions.
    pub mean_abs_q: Real,
    /// Mask-weighted mean Q of the policy's own proposed actions.
    pub improvement: Real,
}

/// Reconstruction loss minus `alpha` times the critic's opinion of the
/// policy's proposed actions. The critic is bound frozen: its parameters
/// receive no gradient here. At `alpha == 0` the bonus branch is skipped and
/// the loss node is exactly the reconstruction loss.
pub fn joint_policy_loss(
    tape: &mut Tape,
    policy: &PolicyModel,
    critics: &CriticPair,
    batch: &SegmentBatch,
    eta: Real,
    improve_with_min: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<PolicyLossParts> {
    let q_abs = data_q_abs(critics, batch)?;
    let mean_abs_q = if q_abs.is_empty() { 0.0 } else { q_abs.iter().sum::<Real>() / q_abs.len() as Real };
    let alpha = compute_alpha(eta, &q_abs);

    let pred = policy.forward_trainable(tape, batch, dropout)?;
    let dt = dt_loss(tape, pred, batch)?;
    let dt_value = tape.value(dt).item();
    if alpha == 0.0 {
        return Ok(PolicyLossParts { loss: dt, dt_loss: dt_value, alpha, mean_abs_q, improvement: 0.0 });
    }

    let (b, k) = (batch.batch_size(), batch.context());
    let (s, a) = (batch.state.shape()[2], batch.action.shape()[2]);
    let valid: Real = batch.mask.data().iter().sum();
    let flat_pred = tape.reshape(pred, &[b * k, a])?;
    let sv = tape.constant(batch.state.clone().reshaped(&[b * k, s])?)?;
    let q1v = bind_mlp_frozen(tape, &critics.online.q1)?;
    let q1 = q_forward(tape, &q1v, sv, flat_pred)?;
    let q = if improve_with_min {
        // min(a, b) = (a + b - |a - b|) / 2, elementwise on the tape.
        let q2v = bind_mlp_frozen(tape, &critics.online.q2)?;
        let q2 = q_forward(tape, &q2v, sv, flat_pred)?;
        let sum = tape.add(q1, q2)?;
        let diff = tape.sub(q1, q2)?;
        let gap = tape.abs(diff)?;
        let spread = tape.sub(sum, gap)?;
        tape.scalar_mul(spread, 0.5)?
    } else {
        q1
    };
    let mask = tape.constant(batch.mask.clone().reshaped(&[b * k])?)?;
    let masked = tape.mul(q, mask)?;
    let avg = tape.mean(masked)?;
    let improvement = tape.scalar_mul(avg, (b * k) as Real / valid)?;
    let improvement_value = tape.value(improvement).item();
    let bonus = tape.scalar_mul(improvement, -alpha)?;
    let loss = tape.add(dt, bonus)?;
    Ok(PolicyLossParts {
        loss,
        dt_loss: dt_value,
        alpha,
        mean_abs_q,
        improvement: improvement_value,
    })
}

/// One logged row of training.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub dt_loss: Real,
    pub q_loss: Real,
    pub policy_loss: Real,
    pub mean_abs_q: Real,
    /// Global gradient norms before clipping.
    pub grad_norm_policy: Real,
    pub grad_norm_critic: Real,
    /// Filled on evaluation steps only.
    pub eval_return_mean: Option<Real>,
    pub eval_return_std: Option<Real>,
}

/// The metrics table as CSV; evaluation columns are blank off-cadence.
pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(
        "step,dt_loss,q_loss,policy_loss,mean_abs_q,grad_norm_policy,grad_norm_critic,eval_return_mean,eval_return_std\n",
    );
    for m in rows {
        let opt = |v: Option<Real>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.step,
            m.dt_loss,
            m.q_loss,
            m.policy_loss,
            m.mean_abs_q,
            m.grad_norm_policy,
            m.grad_norm_critic,
            opt(m.eval_return_mean),
            opt(m.eval_return_std),
        );
    }
    out
}

fn ensure_finite(loss: Real, step: usize, snapshot: String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step: step as u64, snapshot })
    }
}

/// One full optimization step: critic regression, policy update, target
/// tracking, in that order.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, dataset: &Dataset) -> Result<StepMetrics> {
    let batch = sample_segments(dataset, cfg.context_k, cfg.batch_size, &mut state.data_rng)?;

    // Critic regression toward gradient-free Bellman targets.
    let targets = if cfg.use_nstep {
        make_targets(&batch, &state.target_policy, &state.critics, cfg.gamma)?
    } else {
        make_targets_1step(&batch, &state.target_policy, &state.critics, cfg.gamma)?
    };
    let mut tape = Tape::new();
    let q1 = bind_mlp(&mut tape, "q1", &state.critics.online.q1)?;
    let q2 = bind_mlp(&mut tape, "q2", &state.critics.online.q2)?;
    let qloss = critic_loss(&mut tape, &q1, &q2, &batch, &targets)?;
    let q_loss = tape.value(qloss).item();
    ensure_finite(q_loss, state.step, format!(
        "critic loss {q_loss}; {} skipped rows; bootstrap values {:?}",
        targets.skipped_rows,
        &targets.bootstrap_value[..targets.bootstrap_value.len().min(4)]
    ))?;
    let mut grads = tape.backward(qloss)?;
    let grad_norm_critic = clip_global_norm(&mut grads, cfg.grad_clip);
    state.opt_critic.step(&mut state.critics.online, &grads, cfg.lr_critic);

    // Policy update; with the bonus off this is exactly behavior cloning.
    let mut tape = Tape::new();
    let parts = if cfg.train_with_q {
        joint_policy_loss(
            &mut tape,
            &state.policy,
            &state.critics,
            &batch,
            cfg.eta,
            cfg.improve_with_min,
            Some(&mut state.dropout_rng),
        )?
    } else {
        let pred = state.policy.forward_trainable(&mut tape, &batch, Some(&mut state.dropout_rng))?;
        let dt = dt_loss(&mut tape, pred, &batch)?;
        let dt_value = tape.value(dt).item();
        let q_abs = data_q_abs(&state.critics, &batch)?;
        let mean_abs_q =
            if q_abs.is_empty() { 0.0 } else { q_abs.iter().sum::<Real>() / q_abs.len() as Real };
        PolicyLossParts { loss: dt, dt_loss: dt_value, alpha: 0.0, mean_abs_q, improvement: 0.0 }
    };
    let policy_loss = tape.value(parts.loss).item();
    ensure_finite(policy_loss, state.step, format!(
        "policy loss {policy_loss}; reconstruction {}; alpha {}; bonus term {}",
        parts.dt_loss, parts.alpha, parts.improvement
    ))?;
    let mut grads = tape.backward(parts.loss)?;
    let grad_norm_policy = clip_global_norm(&mut grads, cfg.grad_clip);
    state.opt_policy.step(&mut state.policy, &grads, cfg.lr_policy);

    // Targets trail the online networks.
    polyak(&mut state.target_policy, &state.policy, cfg.rho);
    state.critics.polyak(cfg.rho);
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        dt_loss: parts.dt_loss,
        q_loss,
        policy_loss,
        mean_abs_q: parts.mean_abs_q,
        grad_norm_policy,
        grad_norm_critic,
        eval_return_mean: None,
        eval_return_std: None,
    })
}

/// A finished run: final state, the logged metrics, and the last evaluation.
pub struct TrainArtifacts {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub final_eval: Option<EvalReport>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn eval_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x6a09_e667_f3bc_c909)
}

/// Run the full loop: `total_steps` updates with metrics logged every
/// `log_interval`, evaluation rollouts and a checkpoint every
/// `eval_interval`, a final evaluation at the end, and `metrics.csv` plus
/// `checkpoint.qtck` written under `out_dir` when given.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    env: &mut ToyEnv,
    out_dir: Option<&Path>,
) -> Result<TrainArtifacts> {
    let mut state = TrainState::init(cfg, dataset, &env.spec().clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|source| Error::File { path: dir.to_path_buf(), source })?;
    }
    let mut metrics = Vec::new();
    let mut last_eval: Option<(usize, EvalReport)> = None;
    for _ in 0..cfg.total_steps {
        let mut row = train_step(&mut state, cfg, dataset)?;
        let step = state.step;
        if step % cfg.eval_interval == 0 && cfg.eval_episodes > 0 {
            let report =
                evaluate(env, &state.agent(cfg), cfg.eval_episodes, eval_seed(cfg.seed, step), None)?;
            row.eval_return_mean = Some(report.mean);
            row.eval_return_std = Some(report.std);
            last_eval = Some((step, report));
            if let Some(dir) = out_dir {
                write_file(&dir.join("checkpoint.qtck"), &state.checkpoint().to_bytes())?;
            }
        }
        if step % cfg.log_interval == 0 {
            metrics.push(row);
        }
    }
    let final_eval = if cfg.eval_episodes == 0 {
        None
    } else {
        match last_eval {
            Some((step, report)) if step == state.step => Some(report),
            _ => Some(evaluate(
                env,
                &state.agent(cfg),
                cfg.eval_episodes,
                eval_seed(cfg.seed, state.step),
                None,
            )?),
        }
    };
    if let Some(dir) = out_dir {
        write_file(&dir.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
        write_file(&dir.join("checkpoint.qtck"), &state.checkpoint().to_bytes())?;
    }
    Ok(TrainArtifacts { state, metrics, final_eval })
}
