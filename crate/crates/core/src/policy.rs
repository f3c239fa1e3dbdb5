//! Conditional sequence policy: a decoder-only transformer over interleaved
//! (return-to-go, state, action) tokens that predicts an action at every
//! step, plus a plain-MLP behavior-cloning forward pass used by the
//! architecture ablation.
//!
//! One window of K steps becomes the 3K-token stream
//! `r_0 s_0 a_0 r_1 s_1 a_1 ... r_{K-1} s_{K-1} a_{K-1}`. The action
//! prediction for step i is read off the *state* token at stream position
//! 3i + 1, so it can see everything up to and including the current state
//! but never the current action or any later token. Left padding is handled
//! by zeroing pad embeddings and masking pad columns out of the attention,
//! which keeps live outputs bit-identical under arbitrary pad contents.

use crate::dataset::SegmentBatch;
use crate::error::{Error, Result};
use crate::numerics::nn::{linear, Activation, Linear, LinearVars, Mlp, MlpVars};
use crate::numerics::optim::ParamGroup;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::Real;
use rand::{Rng, RngCore};

/// Hyperparameters and environment dims for the sequence policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Window length K in steps (the stream holds 3K tokens).
    pub context_k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Episode timesteps must lie in `0..max_timestep`.
    pub max_timestep: usize,
    /// Keep probability for inverted dropout; 1.0 disables it.
    pub dropout_keep: Real,
    /// Per-dimension action box; the tanh head output is mapped into it.
    pub action_low: Vec<Real>,
    pub action_high: Vec<Real>,
}

impl PolicyConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(
        state_dim: usize,
        action_dim: usize,
        action_low: Vec<Real>,
        action_high: Vec<Real>,
        max_timestep: usize,
    ) -> Self {
        Self {
            state_dim,
            action_dim,
            context_k: 20,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 64,
            max_timestep,
            dropout_keep: 0.9,
            action_low,
            action_high,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive".into());
        }
        if self.context_k == 0 || self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            return bad("context_k, n_layers, n_heads, embed_dim must be positive".into());
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.max_timestep == 0 {
            return bad("max_timestep must be positive".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("dropout_keep {} outside (0, 1]", self.dropout_keep));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return bad(format!(
                "action bounds of lengths {}/{} for action_dim {}",
                self.action_low.len(),
                self.action_high.len(),
                self.action_dim
            ));
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("action bound pair ({lo}, {hi}) is not a finite interval"));
            }
        }
        Ok(())
    }
}

/// One pre-norm transformer block: attention and MLP, each behind a
/// layer-norm and wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// Packed query/key/value projection `[E, 3E]`.
    pub attn_qkv: Linear,
    pub attn_out: Linear,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

/// All weights of the sequence policy.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    /// Scalar return-to-go to embedding.
    pub rtg_embed: Linear,
    pub state_embed: Linear,
    pub action_embed: Linear,
    /// Learned absolute position table `[max_timestep, E]`, indexed by the
    /// episode timestep (not the window position), shared by the three
    /// tokens of a step.
    pub timestep_table: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    /// Embedding to raw action `[E, A]`; a tanh plus an affine map then
    /// squashes the output into the action box.
    pub head: Linear,
}

/// Slow-moving copy of the policy used to pick bootstrap actions for the
/// critic targets; it is never trained directly, only blended toward the
/// online weights (see `polyak`).
pub type TargetPolicy = PolicyParams;

impl PolicyParams {
    pub fn init(cfg: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        const W_STD: Real = 0.02;
        let e = cfg.embed_dim;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockParams {
                ln1_gain: Tensor::full(&[e], 1.0),
                ln1_bias: Tensor::zeros(&[e]),
                attn_qkv: Linear::init(e, 3 * e, W_STD, rng),
                attn_out: Linear::init(e, e, W_STD, rng),
                ln2_gain: Tensor::full(&[e], 1.0),
                ln2_bias: Tensor::zeros(&[e]),
                mlp_fc: Linear::init(e, 4 * e, W_STD, rng),
                mlp_proj: Linear::init(4 * e, e, W_STD, rng),
            });
        }
        Ok(Self {
            rtg_embed: Linear::init(1, e, W_STD, rng),
            state_embed: Linear::init(cfg.state_dim, e, W_STD, rng),
            action_embed: Linear::init(cfg.action_dim, e, W_STD, rng),
            timestep_table: Tensor::randn(&[cfg.max_timestep, e], W_STD, rng),
            blocks,
            ln_f_gain: Tensor::full(&[e], 1.0),
            ln_f_bias: Tensor::zeros(&[e]),
            head: Linear::init(e, cfg.action_dim, W_STD, rng),
            cfg,
        })
    }
}

impl ParamGroup for PolicyParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.rtg_embed.for_each_with("rtg_embed", f);
        self.state_embed.for_each_with("state_embed", f);
        self.action_embed.for_each_with("action_embed", f);
        f("timestep_table", &self.timestep_table);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.ln1.gain"), &b.ln1_gain);
            f(&format!("block{i}.ln1.bias"), &b.ln1_bias);
            b.attn_qkv.for_each_with(&format!("block{i}.attn_qkv"), f);
            b.attn_out.for_each_with(&format!("block{i}.attn_out"), f);
            f(&format!("block{i}.ln2.gain"), &b.ln2_gain);
            f(&format!("block{i}.ln2.bias"), &b.ln2_bias);
            b.mlp_fc.for_each_with(&format!("block{i}.mlp_fc"), f);
            b.mlp_proj.for_each_with(&format!("block{i}.mlp_proj"), f);
        }
        f("ln_f.gain", &self.ln_f_gain);
        f("ln_f.bias", &self.ln_f_bias);
        self.head.for_each_with("head", f);
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.rtg_embed.for_each_mut_with("rtg_embed", f);
        self.state_embed.for_each_mut_with("state_embed", f);
        self.action_embed.for_each_mut_with("action_embed", f);
        f("timestep_table", &mut self.timestep_table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1.gain"), &mut b.ln1_gain);
            f(&format!("block{i}.ln1.bias"), &mut b.ln1_bias);
            b.attn_qkv.for_each_mut_with(&format!("block{i}.attn_qkv"), f);
            b.attn_out.for_each_mut_with(&format!("block{i}.attn_out"), f);
            f(&format!("block{i}.ln2.gain"), &mut b.ln2_gain);
            f(&format!("block{i}.ln2.bias"), &mut b.ln2_bias);
            b.mlp_fc.for_each_mut_with(&format!("block{i}.mlp_fc"), f);
            b.mlp_proj.for_each_mut_with(&format!("block{i}.mlp_proj"), f);
        }
        f("ln_f.gain", &mut self.ln_f_gain);
        f("ln_f.bias", &mut self.ln_f_bias);
        self.head.for_each_mut_with("head", f);
    }
}

pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn_qkv: LinearVars,
    pub attn_out: LinearVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_fc: LinearVars,
    pub mlp_proj: LinearVars,
}

/// The policy weights bound onto a tape, ready for a forward pass.
pub struct PolicyVars {
    pub cfg: PolicyConfig,
    pub rtg_embed: LinearVars,
    pub state_embed: LinearVars,
    pub action_embed: LinearVars,
    pub timestep_table: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
    pub head: LinearVars,
}

enum Binding {
    /// Registered as named parameters; names match `ParamGroup::for_each`
    /// so gradients line up with the optimizer.
    Trainable,
    /// Bound as constants: used in the forward pass, excluded from backward.
    Frozen,
}

impl Binding {
    fn tensor(&self, tape: &mut Tape, name: &str, t: &Tensor) -> Result<Var> {
        match self {
            Binding::Trainable => tape.param(name, t),
            Binding::Frozen => tape.constant(t.clone()),
        }
    }

    fn linear(&self, tape: &mut Tape, name: &str, l: &Linear) -> Result<LinearVars> {
        Ok(LinearVars {
            w: self.tensor(tape, &format!("{name}.w"), &l.w)?,
            b: self.tensor(tape, &format!("{name}.b"), &l.b)?,
        })
    }
}

fn bind_with(tape: &mut Tape, p: &PolicyParams, how: Binding) -> Result<PolicyVars> {
    let mut blocks = Vec::with_capacity(p.blocks.len());
    let rtg_embed = how.linear(tape, "rtg_embed", &p.rtg_embed)?;
    let state_embed = how.linear(tape, "state_embed", &p.state_embed)?;
    let action_embed = how.linear(tape, "action_embed", &p.action_embed)?;
    let timestep_table = how.tensor(tape, "timestep_table", &p.timestep_table)?;
    for (i, b) in p.blocks.iter().enumerate() {
        blocks.push(BlockVars {
            ln1_gain: how.tensor(tape, &format!("block{i}.ln1.gain"), &b.ln1_gain)?,
            ln1_bias: how.tensor(tape, &format!("block{i}.ln1.bias"), &b.ln1_bias)?,
            attn_qkv: how.linear(tape, &format!("block{i}.attn_qkv"), &b.attn_qkv)?,
            attn_out: how.linear(tape, &format!("block{i}.attn_out"), &b.attn_out)?,
            ln2_gain: how.tensor(tape, &format!("block{i}.ln2.gain"), &b.ln2_gain)?,
            ln2_bias: how.tensor(tape, &format!("block{i}.ln2.bias"), &b.ln2_bias)?,
            mlp_fc: how.linear(tape, &format!("block{i}.mlp_fc"), &b.mlp_fc)?,
            mlp_proj: how.linear(tape, &format!("block{i}.mlp_proj"), &b.mlp_proj)?,
        });
    }
    Ok(PolicyVars {
        cfg: p.cfg.clone(),
        rtg_embed,
        state_embed,
        action_embed,
        timestep_table,
        blocks,
        ln_f_gain: how.tensor(tape, "ln_f.gain", &p.ln_f_gain)?,
        ln_f_bias: how.tensor(tape, "ln_f.bias", &p.ln_f_bias)?,
        head: how.linear(tape, "head", &p.head)?,
    })
}

/// Bind the policy for training: every weight becomes a named parameter.
pub fn bind_policy(tape: &mut Tape, p: &PolicyParams) -> Result<PolicyVars> {
    bind_with(tape, p, Binding::Trainable)
}

/// Bind the policy as constants (target networks, evaluation).
pub fn bind_policy_frozen(tape: &mut Tape, p: &PolicyParams) -> Result<PolicyVars> {
    bind_with(tape, p, Binding::Frozen)
}

/// Repeat a `[B, K]` mask along a new trailing feature axis of width `d`.
fn expand_mask(mask: &Tensor, d: usize) -> Result<Tensor> {
    let (b, k) = (mask.shape()[0], mask.shape()[1]);
    let mut data = Vec::with_capacity(b * k * d);
    for &m in mask.data() {
        data.extend(std::iter::repeat(m).take(d));
    }
    Tensor::new(vec![b, k, d], data)
}

/// Attention mask `[B, H, 3K, 3K]`: token i may attend to token j when
/// j <= i and step j/3 is valid. Padded queries keep exactly their own
/// diagonal entry so no softmax row is empty; their outputs are zeroed out
/// of the loss and never read at inference.
fn attention_mask(mask: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, k) = (mask.shape()[0], mask.shape()[1]);
    let t = 3 * k;
    let mut data = vec![0.0; b * heads * t * t];
    for bi in 0..b {
        let valid = &mask.data()[bi * k..(bi + 1) * k];
        for i in 0..t {
            for j in 0..=i {
                if valid[j / 3] != 0.0 || j == i {
                    for h in 0..heads {
                        data[((bi * heads + h) * t + i) * t + j] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, heads, t, t], data)
}

/// Affine map from tanh output in (-1, 1) into the per-dimension action box.
fn into_action_box(tape: &mut Tape, squashed: Var, low: &[Real], high: &[Real]) -> Result<Var> {
    let half: Vec<Real> = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
    let center: Vec<Real> = low.iter().zip(high).map(|(l, h)| 0.5 * (h + l)).collect();
    let half = tape.constant(Tensor::new(vec![low.len()], half)?)?;
    let center = tape.constant(Tensor::new(vec![low.len()], center)?)?;
    let y = tape.mul(squashed, half)?;
    tape.add(y, center)
}

/// Embed one batch of windows into the `[B, 3K, E]` token stream:
/// per-modality linear embeddings, plus the timestep embedding shared by the
/// three tokens of a step, with pad positions forced to exactly zero.
pub fn embed_segment(tape: &mut Tape, v: &PolicyVars, batch: &SegmentBatch) -> Result<Var> {
    let (b, k) = (batch.batch_size(), batch.context());
    let e = v.cfg.embed_dim;
    if batch.state.shape() != [b, k, v.cfg.state_dim] {
        return Err(Error::Shape {
            op: "embed_segment",
            detail: format!(
                "states {:?} for state_dim {}",
                batch.state.shape(),
                v.cfg.state_dim
            ),
        });
    }
    if batch.action.shape() != [b, k, v.cfg.action_dim] {
        return Err(Error::Shape {
            op: "embed_segment",
            detail: format!(
                "actions {:?} for action_dim {}",
                batch.action.shape(),
                v.cfg.action_dim
            ),
        });
    }
    let rtg = tape.constant(batch.rtg.clone().reshaped(&[b, k, 1])?)?;
    let state = tape.constant(batch.state.clone())?;
    let action = tape.constant(batch.action.clone())?;
    let tt = tape.gather(v.timestep_table, &batch.timestep, &[b, k])?;
    let mask_e = tape.constant(expand_mask(&batch.mask, e)?)?;

    let mut tokens = Vec::with_capacity(3);
    for (x, l) in [
        (rtg, &v.rtg_embed),
        (state, &v.state_embed),
        (action, &v.action_embed),
    ] {
        let emb = linear(tape, x, l)?;
        let emb = tape.add(emb, tt)?;
        let emb = tape.mul(emb, mask_e)?;
        tokens.push(tape.reshape(emb, &[b, k, 1, e])?);
    }
    let grid = tape.concat(&tokens, 2)?;
    tape.reshape(grid, &[b, 3 * k, e])
}

/// Full forward pass: `[B, K, action_dim]` action predictions, one per step,
/// each read off that step's state token. Pass an RNG to enable dropout
/// (training); pass `None` for the deterministic evaluation path.
pub fn policy_forward(
    tape: &mut Tape,
    v: &PolicyVars,
    batch: &SegmentBatch,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (b, k) = (batch.batch_size(), batch.context());
    let e = v.cfg.embed_dim;
    let heads = v.cfg.n_heads;
    let dh = v.cfg.head_dim();
    let t = 3 * k;
    let keep = v.cfg.dropout_keep;

    let mut tok = embed_segment(tape, v, batch)?;
    if let Some(r) = rng.as_deref_mut() {
        tok = tape.dropout(tok, keep, &mut &mut *r)?;
    }
    let attn_mask = tape.constant(attention_mask(&batch.mask, heads)?)?;

    for blk in &v.blocks {
        let h = tape.layer_norm(tok, blk.ln1_gain, blk.ln1_bias)?;
        let qkv = linear(tape, h, &blk.attn_qkv)?;
        let q = tape.slice(qkv, 2, 0, e)?;
        let kk = tape.slice(qkv, 2, e, e)?;
        let vv = tape.slice(qkv, 2, 2 * e, e)?;
        let q = tape.reshape(q, &[b, t, heads, dh])?;
        let q = tape.transpose(q, &[0, 2, 1, 3])?; // [B, H, T, dh]
        let kk = tape.reshape(kk, &[b, t, heads, dh])?;
        let kt = tape.transpose(kk, &[0, 2, 3, 1])?; // [B, H, dh, T]
        let vv = tape.reshape(vv, &[b, t, heads, dh])?;
        let vv = tape.transpose(vv, &[0, 2, 1, 3])?; // [B, H, T, dh]
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scalar_mul(scores, 1.0 / (dh as Real).sqrt())?;
        let probs = tape.softmax(scores, Some(attn_mask))?;
        let ctx = tape.matmul(probs, vv)?;
        let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, e])?;
        let mut attn = linear(tape, ctx, &blk.attn_out)?;
        if let Some(r) = rng.as_deref_mut() {
            attn = tape.dropout(attn, keep, &mut &mut *r)?;
        }
        tok = tape.add(tok, attn)?;

        let h2 = tape.layer_norm(tok, blk.ln2_gain, blk.ln2_bias)?;
        let mid = linear(tape, h2, &blk.mlp_fc)?;
        let mid = tape.relu(mid)?;
        let mut out = linear(tape, mid, &blk.mlp_proj)?;
        if let Some(r) = rng.as_deref_mut() {
            out = tape.dropout(out, keep, &mut &mut *r)?;
        }
        tok = tape.add(tok, out)?;
    }

    let tok = tape.layer_norm(tok, v.ln_f_gain, v.ln_f_bias)?;
    let grid = tape.reshape(tok, &[b, k, 3, e])?;
    let state_tok = tape.slice(grid, 2, 1, 1)?;
    let state_tok = tape.reshape(state_tok, &[b, k, e])?;
    let raw = linear(tape, state_tok, &v.head)?;
    let squashed = tape.tanh(raw)?;
    into_action_box(tape, squashed, &v.cfg.action_low, &v.cfg.action_high)
}

/// Mean squared error between predicted and recorded actions, averaged over
/// valid (unmasked) positions and action dimensions. Predictions at padded
/// positions never contribute.
pub fn dt_loss(tape: &mut Tape, pred: Var, batch: &SegmentBatch) -> Result<Var> {
    let (b, k) = (batch.batch_size(), batch.context());
    let a = batch.action.shape()[2];
    if tape.value(pred).shape() != [b, k, a] {
        return Err(Error::Shape {
            op: "dt_loss",
            detail: format!(
                "predictions {:?} vs actions {:?}",
                tape.value(pred).shape(),
                batch.action.shape()
            ),
        });
    }
    let valid: Real = batch.mask.data().iter().sum();
    if valid == 0.0 {
        return Err(Error::AllPositionsMasked);
    }
    let target = tape.constant(batch.action.clone())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let mask_e = tape.constant(expand_mask(&batch.mask, a)?)?;
    let masked = tape.mul(sq, mask_e)?;
    let mean = tape.mean(masked)?;
    // mean() divides by B*K*A; rescale so the denominator is valid*A.
    tape.scalar_mul(mean, (b * k) as Real / valid)
}

/// Predict the next action from a running episode history.
///
/// `rtgs`, `states` (flattened, `n * state_dim`), and `timesteps` cover all
/// `n` steps so far, including the current one; `prev_actions` covers the
/// `n - 1` completed steps. The current action slot is filled with a zero
/// placeholder — the prediction cannot see it, so any placeholder works, and
/// zero keeps replays reproducible. The window is the last `context_k` steps,
/// left-padded when the history is shorter, and dropout is off.
pub fn act(
    params: &PolicyParams,
    rtgs: &[Real],
    states: &[Real],
    prev_actions: &[Real],
    timesteps: &[usize],
) -> Result<Vec<Real>> {
    let cfg = &params.cfg;
    let (s, a, k) = (cfg.state_dim, cfg.action_dim, cfg.context_k);
    let n = rtgs.len();
    if n == 0 {
        return Err(Error::Shape { op: "act", detail: "empty history".into() });
    }
    if states.len() != n * s || prev_actions.len() != (n - 1) * a || timesteps.len() != n {
        return Err(Error::Shape {
            op: "act",
            detail: format!(
                "history of {n} steps with {} state values, {} action values, {} timesteps",
                states.len(),
                prev_actions.len(),
                timesteps.len()
            ),
        });
    }
    let take = n.min(k);
    let pad = k - take;
    let first = n - take;
    let mut rtg = vec![0.0; k];
    let mut state = vec![0.0; k * s];
    let mut action = vec![0.0; k * a];
    let mut ts = vec![0usize; k];
    let mut mask = vec![0.0; k];
    for w in 0..take {
        let src = first + w;
        let dst = pad + w;
        rtg[dst] = rtgs[src];
        state[dst * s..(dst + 1) * s].copy_from_slice(&states[src * s..(src + 1) * s]);
        if src + 1 < n {
            action[dst * a..(dst + 1) * a]
                .copy_from_slice(&prev_actions[src * a..(src + 1) * a]);
        }
        ts[dst] = timesteps[src];
        mask[dst] = 1.0;
    }
    let batch = SegmentBatch {
        rtg: Tensor::new(vec![1, k], rtg)?,
        state: Tensor::new(vec![1, k, s], state)?,
        action: Tensor::new(vec![1, k, a], action)?,
        reward: Tensor::zeros(&[1, k]),
        timestep: ts,
        mask: Tensor::new(vec![1, k], mask)?,
    };
    let mut tape = Tape::new();
    let vars = bind_policy_frozen(&mut tape, params)?;
    let pred = policy_forward(&mut tape, &vars, &batch, None)?;
    let data = tape.value(pred).data();
    Ok(data[(k - 1) * a..].to_vec())
}

/// Behavior-cloning baseline: a plain MLP (ReLU hidden layers) from the
/// current state straight to an action, with the same tanh-plus-affine
/// squashing as the transformer head.
pub fn mlp_bc_forward(
    tape: &mut Tape,
    vars: &MlpVars,
    states: Var,
    low: &[Real],
    high: &[Real],
) -> Result<Var> {
    let raw = crate::numerics::nn::mlp_forward(tape, states, vars)?;
    let squashed = tape.tanh(raw)?;
    into_action_box(tape, squashed, low, high)
}

/// The MLP baseline packaged as a standalone policy (three weight layers,
/// ReLU between them), predicting each action from that step's state alone.
#[derive(Clone, Debug)]
pub struct MlpPolicy {
    pub mlp: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<Real>,
    pub action_high: Vec<Real>,
}

impl MlpPolicy {
    pub fn init(
        state_dim: usize,
        action_dim: usize,
        hidden_dim: usize,
        action_low: Vec<Real>,
        action_high: Vec<Real>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("MLP policy dims must be positive".into()));
        }
        if action_low.len() != action_dim || action_high.len() != action_dim {
            return Err(Error::Config(format!(
                "action bounds of lengths {}/{} for action_dim {action_dim}",
                action_low.len(),
                action_high.len()
            )));
        }
        let mlp = Mlp::init(&[state_dim, hidden_dim, hidden_dim, action_dim], Activation::Relu, rng);
        Ok(Self { mlp, state_dim, action_dim, action_low, action_high })
    }
}

/// Either policy architecture behind one interface, so the critic targets,
/// the trainer, and the evaluator are written once.
#[derive(Clone, Debug)]
pub enum PolicyModel {
    Transformer(PolicyParams),
    Mlp(MlpPolicy),
}

impl ParamGroup for PolicyModel {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            PolicyModel::Transformer(p) => p.for_each(f),
            PolicyModel::Mlp(p) => p.mlp.for_each_with("bc", f),
        }
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            PolicyModel::Transformer(p) => p.for_each_mut(f),
            PolicyModel::Mlp(p) => p.mlp.for_each_mut_with("bc", f),
        }
    }
}

impl PolicyModel {
    /// Window length in steps; the MLP ignores history, so 1.
    pub fn context_k(&self) -> usize {
        match self {
            PolicyModel::Transformer(p) => p.cfg.context_k,
            PolicyModel::Mlp(_) => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            PolicyModel::Transformer(p) => p.cfg.state_dim,
            PolicyModel::Mlp(p) => p.state_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            PolicyModel::Transformer(p) => p.cfg.action_dim,
            PolicyModel::Mlp(p) => p.action_dim,
        }
    }

    /// Per-step action predictions `[B, K, A]` with the weights bound as
    /// constants (no gradients, dropout off).
    pub fn forward_frozen(&self, tape: &mut Tape, batch: &SegmentBatch) -> Result<Var> {
        match self {
            PolicyModel::Transformer(p) => {
                let vars = bind_policy_frozen(tape, p)?;
                policy_forward(tape, &vars, batch, None)
            }
            PolicyModel::Mlp(p) => {
                let vars = crate::numerics::nn::bind_mlp_frozen(tape, &p.mlp)?;
                let states = tape.constant(batch.state.clone())?;
                mlp_bc_forward(tape, &vars, states, &p.action_low, &p.action_high)
            }
        }
    }

    /// Per-step action predictions `[B, K, A]` with the weights registered
    /// as named parameters. The RNG drives dropout (transformer only).
    pub fn forward_trainable(
        &self,
        tape: &mut Tape,
        batch: &SegmentBatch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        match self {
            PolicyModel::Transformer(p) => {
                let vars = bind_policy(tape, p)?;
                policy_forward(tape, &vars, batch, rng)
            }
            PolicyModel::Mlp(p) => {
                let vars = crate::numerics::nn::bind_mlp(tape, "bc", &p.mlp)?;
                let states = tape.constant(batch.state.clone())?;
                mlp_bc_forward(tape, &vars, states, &p.action_low, &p.action_high)
            }
        }
    }

    /// Next-action prediction from a running history; see [`act`].
    pub fn act(
        &self,
        rtgs: &[Real],
        states: &[Real],
        prev_actions: &[Real],
        timesteps: &[usize],
    ) -> Result<Vec<Real>> {
        match self {
            PolicyModel::Transformer(p) => act(p, rtgs, states, prev_actions, timesteps),
            PolicyModel::Mlp(p) => {
                let (s, n) = (p.state_dim, rtgs.len());
                if n == 0 {
                    return Err(Error::Shape { op: "act", detail: "empty history".into() });
                }
                if states.len() != n * s {
                    return Err(Error::Shape {
                        op: "act",
                        detail: format!("history of {n} steps with {} state values", states.len()),
                    });
                }
                let mut tape = Tape::new();
                let vars = crate::numerics::nn::bind_mlp_frozen(&mut tape, &p.mlp)?;
                let current = Tensor::new(vec![1, s], states[(n - 1) * s..].to_vec())?;
                let x = tape.constant(current)?;
                let out = mlp_bc_forward(&mut tape, &vars, x, &p.action_low, &p.action_high)?;
                Ok(tape.value(out).data().to_vec())
            }
        }
    }
}
