//! Twin Q-critics with slow-moving target copies: scalar value heads over
//! concat(state, action), n-step discounted regression targets bootstrapped
//! by the target policy at the window's final valid step, and the critic
//! regression loss.
//!
//! Targets are built entirely outside the training tape, so they are plain
//! numbers by the time the loss sees them: no gradient ever reaches a target
//! network or leaks through the bootstrap term.

use crate::dataset::SegmentBatch;
use crate::error::{Error, Result};
use crate::numerics::nn::{bind_mlp_frozen, mlp_forward, Activation, Mlp, MlpVars};
use crate::numerics::optim::{polyak, ParamGroup};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::policy::PolicyModel;
use crate::Real;
use rand::Rng;

/// Architecture of one critic MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    pub hidden_dim: usize,
    pub n_hidden_layers: usize,
    pub activation: Activation,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, n_hidden_layers: 3, activation: Activation::Mish }
    }
}

impl CriticConfig {
    /// Smaller network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self { hidden_dim: 64, n_hidden_layers: 2, activation: Activation::Mish }
    }

    fn dims(&self, state_dim: usize, action_dim: usize) -> Vec<usize> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend(std::iter::repeat(self.hidden_dim).take(self.n_hidden_layers));
        dims.push(1);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_hidden_layers == 0 {
            return Err(Error::Config(
                "critic hidden_dim and n_hidden_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The two online critics as one parameter group (`q1.*` / `q2.*`), so a
/// single optimizer and a single backward pass can update both.
#[derive(Clone, Debug)]
pub struct TwinCritics {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl ParamGroup for TwinCritics {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q1.for_each_with("q1", f);
        self.q2.for_each_with("q2", f);
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q1.for_each_mut_with("q1", f);
        self.q2.for_each_mut_with("q2", f);
    }
}

/// Online twins plus their frozen target copies.
#[derive(Clone, Debug)]
pub struct CriticPair {
    pub cfg: CriticConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub online: TwinCritics,
    pub targets: TwinCritics,
}

impl CriticPair {
    pub fn init(
        cfg: CriticConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims(state_dim, action_dim);
        let online = TwinCritics {
            q1: Mlp::init(&dims, cfg.activation, rng),
            q2: Mlp::init(&dims, cfg.activation, rng),
        };
        let targets = online.clone();
        Ok(Self { cfg, state_dim, action_dim, online, targets })
    }

    /// Blend the targets toward the online weights:
    /// target = rho * target + (1 - rho) * online.
    pub fn polyak(&mut self, rho: Real) {
        polyak(&mut self.targets, &self.online, rho);
    }
}

/// Q(s, a): concat the trailing feature axes and run the MLP, dropping the
/// singleton value axis (`[.., S]` + `[.., A]` -> `[..]`).
pub fn q_forward(tape: &mut Tape, critic: &MlpVars, state: Var, action: Var) -> Result<Var> {
    let rank = tape.value(state).rank();
    if rank < 2 || tape.value(action).rank() != rank {
        return Err(Error::Shape {
            op: "q_forward",
            detail: format!(
                "state {:?} vs action {:?}",
                tape.value(state).shape(),
                tape.value(action).shape()
            ),
        });
    }
    let x = tape.concat(&[state, action], rank - 1)?;
    let q = mlp_forward(tape, x, critic)?;
    let shape = tape.value(q).shape().to_vec();
    tape.reshape(q, &shape[..shape.len() - 1])
}

/// Discounted regression targets for one batch of windows.
#[derive(Clone, Debug)]
pub struct BellmanTargets {
    /// `[B, K-1]` target values; zero where `mask` is zero.
    pub targets: Tensor,
    /// `[B, K-1]` — 1 at positions that received a target (valid, interior).
    pub mask: Tensor,
    /// `[B, A]` action chosen by the target policy at each row's final valid
    /// step (zeros for skipped rows).
    pub bootstrap_action: Tensor,
    /// `[B]` min over the two target critics at (final state, bootstrap
    /// action); zero for skipped rows.
    pub bootstrap_value: Vec<Real>,
    pub gamma: Real,
    /// Rows left without any target because they had fewer than two valid
    /// steps.
    pub skipped_rows: usize,
}

/// Build n-step targets for every valid interior position of each window.
///
/// For a row whose valid steps end at position t, the target at position m is
/// the discounted reward sum from m through t-1 plus `gamma^(t-m)` times the
/// bootstrap value: the min over the two *target* critics evaluated at the
/// final state with the *target* policy's action. Rows with fewer than two
/// valid steps are skipped. Everything is computed on a scratch tape and
/// returned as plain tensors, so the result is gradient-free by construction.
pub fn make_targets(
    batch: &SegmentBatch,
    target_policy: &PolicyModel,
    critics: &CriticPair,
    gamma: Real,
) -> Result<BellmanTargets> {
    let prep = TargetPrep::build(batch, target_policy, critics, gamma)?;
    let (b, k) = (batch.batch_size(), batch.context());
    let km1 = k.saturating_sub(1);

    let mut targets = vec![0.0; b * km1];
    let mut mask = vec![0.0; b * km1];
    for row in 0..b {
        let Some(t) = prep.finals[row] else { continue };
        let boot = prep.bootstrap_value[row];
        let rewards = &batch.reward.data()[row * k..(row + 1) * k];
        let row_mask = &batch.mask.data()[row * k..(row + 1) * k];
        for m in 0..t {
            if row_mask[m] == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            let mut g = 1.0;
            for &r in &rewards[m..t] {
                acc += g * r;
                g *= gamma;
            }
            targets[row * km1 + m] = acc + g * boot;
            mask[row * km1 + m] = 1.0;
        }
    }
    prep.finish(targets, mask, gamma)
}

/// One-step variant: the target at position m bootstraps from the very next
/// step, Q̂_m = r_m + gamma * min target-Q(s_{m+1}, target-policy action at
/// m+1), instead of discounting rewards all the way to the window's end.
pub fn make_targets_1step(
    batch: &SegmentBatch,
    target_policy: &PolicyModel,
    critics: &CriticPair,
    gamma: Real,
) -> Result<BellmanTargets> {
    let prep = TargetPrep::build(batch, target_policy, critics, gamma)?;
    let (b, k) = (batch.batch_size(), batch.context());
    let km1 = k.saturating_sub(1);

    let mut targets = vec![0.0; b * km1];
    let mut mask = vec![0.0; b * km1];
    for row in 0..b {
        let Some(t) = prep.finals[row] else { continue };
        let rewards = &batch.reward.data()[row * k..(row + 1) * k];
        let row_mask = &batch.mask.data()[row * k..(row + 1) * k];
        for m in 0..t {
            if row_mask[m] == 0.0 || row_mask[m + 1] == 0.0 {
                continue;
            }
            targets[row * km1 + m] = rewards[m] + gamma * prep.min_q[row * k + m + 1];
            mask[row * km1 + m] = 1.0;
        }
    }
    prep.finish(targets, mask, gamma)
}

/// Shared gradient-free preparation for both target constructions: the
/// target policy's action at every window position, the min of the two
/// target critics at every (state, predicted action), each row's final valid
/// position, and the bootstrap bookkeeping for diagnostics.
struct TargetPrep {
    finals: Vec<Option<usize>>,
    /// `[B * K]` min target-critic value at (s_w, target-policy action at w).
    min_q: Vec<Real>,
    bootstrap_action: Vec<Real>,
    bootstrap_value: Vec<Real>,
    skipped_rows: usize,
    b: usize,
    a: usize,
    km1: usize,
}

impl TargetPrep {
    fn build(
        batch: &SegmentBatch,
        target_policy: &PolicyModel,
        critics: &CriticPair,
        gamma: Real,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        let (b, k) = (batch.batch_size(), batch.context());
        let a = critics.action_dim;

        let mut finals: Vec<Option<usize>> = Vec::with_capacity(b);
        for row in 0..b {
            let m = &batch.mask.data()[row * k..(row + 1) * k];
            let last = (0..k).rev().find(|&w| m[w] != 0.0);
            let count = m.iter().filter(|&&v| v != 0.0).count();
            finals.push(match last {
                Some(t) if count >= 2 => Some(t),
                _ => None,
            });
        }
        let skipped_rows = finals.iter().filter(|f| f.is_none()).count();

        // Target policy actions at every position, and the min target-critic
        // value there, on a throwaway tape.
        let mut tape = Tape::new();
        let pred = target_policy.forward_frozen(&mut tape, batch)?;
        let sv = tape.constant(batch.state.clone())?;
        let q1v = bind_mlp_frozen(&mut tape, &critics.targets.q1)?;
        let q2v = bind_mlp_frozen(&mut tape, &critics.targets.q2)?;
        let q1 = q_forward(&mut tape, &q1v, sv, pred)?;
        let q2 = q_forward(&mut tape, &q2v, sv, pred)?;
        let min_q: Vec<Real> = tape
            .value(q1)
            .data()
            .iter()
            .zip(tape.value(q2).data())
            .map(|(&x, &y)| x.min(y))
            .collect();
        let pred = tape.value(pred).data();

        let mut bootstrap_action = vec![0.0; b * a];
        let mut bootstrap_value = vec![0.0; b];
        for (row, f) in finals.iter().enumerate() {
            if let Some(t) = f {
                bootstrap_action[row * a..(row + 1) * a]
                    .copy_from_slice(&pred[(row * k + t) * a..(row * k + t + 1) * a]);
                bootstrap_value[row] = min_q[row * k + t];
            }
        }
        Ok(Self {
            finals,
            min_q,
            bootstrap_action,
            bootstrap_value,
            skipped_rows,
            b,
            a,
            km1: k.saturating_sub(1),
        })
    }

    fn finish(self, targets: Vec<Real>, mask: Vec<Real>, gamma: Real) -> Result<BellmanTargets> {
        Ok(BellmanTargets {
            targets: Tensor::new(vec![self.b, self.km1], targets)?,
            mask: Tensor::new(vec![self.b, self.km1], mask)?,
            bootstrap_action: Tensor::new(vec![self.b, self.a], self.bootstrap_action)?,
            bootstrap_value: self.bootstrap_value,
            gamma,
            skipped_rows: self.skipped_rows,
        })
    }
}

/// Sum over the two online critics of the mask-weighted mean squared error
/// between Q_i at the recorded (state, action) pairs and the targets. When
/// every position is masked (all rows skipped) the loss is the constant 0.
pub fn critic_loss(
    tape: &mut Tape,
    q1: &MlpVars,
    q2: &MlpVars,
    batch: &SegmentBatch,
    targets: &BellmanTargets,
) -> Result<Var> {
    let (b, k) = (batch.batch_size(), batch.context());
    let km1 = k.saturating_sub(1);
    let s = batch.state.shape()[2];
    let a = batch.action.shape()[2];
    let valid: Real = targets.mask.data().iter().sum();
    if valid == 0.0 {
        return tape.constant(Tensor::scalar(0.0));
    }

    // Interior slice [B, K-1, .] of the window, host-side.
    let mut st = vec![0.0; b * km1 * s];
    let mut ac = vec![0.0; b * km1 * a];
    for row in 0..b {
        for m in 0..km1 {
            st[(row * km1 + m) * s..(row * km1 + m + 1) * s]
                .copy_from_slice(&batch.state.data()[(row * k + m) * s..(row * k + m + 1) * s]);
            ac[(row * km1 + m) * a..(row * km1 + m + 1) * a]
                .copy_from_slice(&batch.action.data()[(row * k + m) * a..(row * k + m + 1) * a]);
        }
    }
    let st = tape.constant(Tensor::new(vec![b, km1, s], st)?)?;
    let ac = tape.constant(Tensor::new(vec![b, km1, a], ac)?)?;
    let tgt = tape.constant(targets.targets.clone())?;
    let mask = tape.constant(targets.mask.clone())?;

    let scale = (b * km1) as Real / valid;
    let mut total = None;
    for critic in [q1, q2] {
        let q = q_forward(tape, critic, st, ac)?;
        let diff = tape.sub(q, tgt)?;
        let sq = tape.mul(diff, diff)?;
        let masked = tape.mul(sq, mask)?;
        let mean = tape.mean(masked)?;
        let term = tape.scalar_mul(mean, scale)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("two critics processed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::bind_mlp;
    use crate::oracle::brute_nstep_return;
    use crate::policy::{PolicyConfig, PolicyParams};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn tiny_policy(rng: &mut impl Rng) -> PolicyModel {
        let cfg = PolicyConfig {
            state_dim: 2,
            action_dim: 2,
            context_k: 4,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            max_timestep: 32,
            dropout_keep: 1.0,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
        };
        PolicyModel::Transformer(PolicyParams::init(cfg, rng).unwrap())
    }

    fn tiny_pair(rng: &mut impl Rng) -> CriticPair {
        let cfg = CriticConfig { hidden_dim: 8, n_hidden_layers: 2, activation: Activation::Mish };
        CriticPair::init(cfg, 2, 2, rng).unwrap()
    }

    /// Make an MLP output the constant `c` regardless of input.
    fn force_constant(mlp: &mut Mlp, c: Real) {
        for l in &mut mlp.layers {
            for v in l.w.data_mut() {
                *v = 0.0;
            }
            for v in l.b.data_mut() {
                *v = 0.0;
            }
        }
        let last = mlp.layers.len() - 1;
        mlp.layers[last].b.data_mut()[0] = c;
    }

    fn batch_with(
        rewards: &[&[Real]],
        valid: &[usize],
        rng: &mut impl Rng,
    ) -> SegmentBatch {
        let b = rewards.len();
        let k = rewards[0].len();
        let (s, a) = (2, 2);
        let mut state = vec![0.0; b * k * s];
        let mut action = vec![0.0; b * k * a];
        let mut rtg = vec![0.0; b * k];
        let mut reward = vec![0.0; b * k];
        let mut ts = vec![0usize; b * k];
        let mut mask = vec![0.0; b * k];
        for row in 0..b {
            let pad = k - valid[row];
            for w in 0..k {
                reward[row * k + w] = rewards[row][w];
                rtg[row * k + w] = rng.gen_range(-1.0..1.0);
                for d in 0..s {
                    state[(row * k + w) * s + d] = rng.gen_range(-1.0..1.0);
                }
                for d in 0..a {
                    action[(row * k + w) * a + d] = rng.gen_range(-1.0..1.0);
                }
                if w >= pad {
                    ts[row * k + w] = w - pad;
                    mask[row * k + w] = 1.0;
                }
            }
        }
        SegmentBatch {
            rtg: Tensor::new(vec![b, k], rtg).unwrap(),
            state: Tensor::new(vec![b, k, s], state).unwrap(),
            action: Tensor::new(vec![b, k, a], action).unwrap(),
            reward: Tensor::new(vec![b, k], reward).unwrap(),
            timestep: ts,
            mask: Tensor::new(vec![b, k], mask).unwrap(),
        }
    }

    #[test]
    fn zero_weight_critics_score_zero_everywhere() {
        let mut rng = stream_rng(20, "critic-test");
        let mut pair = tiny_pair(&mut rng);
        force_constant(&mut pair.online.q1, 0.0);
        let mut tape = Tape::new();
        let v = bind_mlp_frozen(&mut tape, &pair.online.q1).unwrap();
        let s = tape.constant(Tensor::randn(&[5, 2], 1.0, &mut rng)).unwrap();
        let a = tape.constant(Tensor::randn(&[5, 2], 1.0, &mut rng)).unwrap();
        let q = q_forward(&mut tape, &v, s, a).unwrap();
        assert_eq!(tape.value(q).shape(), &[5]);
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_forward_is_deterministic_and_checks_ranks() {
        let mut rng = stream_rng(21, "critic-test");
        let pair = tiny_pair(&mut rng);
        let st = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let ac = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let v = bind_mlp_frozen(&mut tape, &pair.online.q1).unwrap();
            let s = tape.constant(st.clone()).unwrap();
            let a = tape.constant(ac.clone()).unwrap();
            let q = q_forward(&mut tape, &v, s, a).unwrap();
            tape.value(q).data().to_vec()
        };
        assert_eq!(run(), run());

        let mut tape = Tape::new();
        let v = bind_mlp_frozen(&mut tape, &pair.online.q1).unwrap();
        let s = tape.constant(Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
        let a = tape.constant(ac.clone()).unwrap();
        assert!(q_forward(&mut tape, &v, s, a).is_err());
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut rng = stream_rng(22, "critic-test");
        let pair = tiny_pair(&mut rng);
        let st = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let ac = Tensor::randn(&[4, 2], 1.0, &mut rng);

        let loss_of = |mlp: &Mlp| {
            let mut tape = Tape::new();
            let v = bind_mlp_frozen(&mut tape, mlp).unwrap();
            let s = tape.constant(st.clone()).unwrap();
            let a = tape.constant(ac.clone()).unwrap();
            let q = q_forward(&mut tape, &v, s, a).unwrap();
            let sq = tape.mul(q, q).unwrap();
            let loss = tape.mean(sq).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let v = bind_mlp(&mut tape, "q1", &pair.online.q1).unwrap();
        let s = tape.constant(st.clone()).unwrap();
        let a = tape.constant(ac.clone()).unwrap();
        let q = q_forward(&mut tape, &v, s, a).unwrap();
        let sq = tape.mul(q, q).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        let mut checked = 0;
        for (li, layer) in pair.online.q1.layers.iter().enumerate() {
            for (tag, tensor) in [("w", &layer.w), ("b", &layer.b)] {
                let n = tensor.numel();
                for &idx in [0, n - 1].iter().take(n.min(2)) {
                    let nudge = |h: Real| {
                        let mut m = pair.online.q1.clone();
                        let t = if tag == "w" {
                            &mut m.layers[li].w
                        } else {
                            &mut m.layers[li].b
                        };
                        t.data_mut()[idx] += h;
                        loss_of(&m)
                    };
                    let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
                    let an = grads.get(&format!("q1.{li}.{tag}")).unwrap().data()[idx];
                    let denom = fd.abs().max(an.abs());
                    if denom < 1e-8 {
                        continue;
                    }
                    assert!(
                        (fd - an).abs() / denom < 1e-5,
                        "q1.{li}.{tag}[{idx}]: fd {fd} vs backward {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 8, "only {checked} coordinates checked");
    }

    #[test]
    fn targets_match_the_hand_computed_example() {
        let mut rng = stream_rng(23, "critic-test");
        let policy = tiny_policy(&mut rng);
        let mut pair = tiny_pair(&mut rng);
        force_constant(&mut pair.targets.q1, 4.0);
        force_constant(&mut pair.targets.q2, 7.0);
        // One row, three valid steps, rewards [1, 2, <unused>].
        let batch = batch_with(&[&[1.0, 2.0, 9.0]], &[3], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.5).unwrap();
        assert_eq!(t.targets.data(), &[3.0, 4.0]);
        assert_eq!(t.mask.data(), &[1.0, 1.0]);
        assert_eq!(t.bootstrap_value, &[4.0]);
        assert_eq!(t.skipped_rows, 0);
    }

    #[test]
    fn gamma_zero_keeps_only_the_immediate_reward() {
        let mut rng = stream_rng(24, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let rewards = [0.3, -1.7, 2.5, 0.9];
        let batch = batch_with(&[&rewards], &[4], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.0).unwrap();
        assert_eq!(t.targets.data(), &rewards[..3]);
    }

    #[test]
    fn identical_target_critics_make_the_min_a_no_op() {
        let mut rng = stream_rng(25, "critic-test");
        let policy = tiny_policy(&mut rng);
        let mut pair = tiny_pair(&mut rng);
        pair.targets.q2 = pair.targets.q1.clone();
        let batch = batch_with(&[&[1.0, -0.5, 0.25]], &[3], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.9).unwrap();

        let mut tape = Tape::new();
        let v = bind_mlp_frozen(&mut tape, &pair.targets.q1).unwrap();
        let s = tape
            .constant(Tensor::new(vec![1, 2], batch.state.data()[4..6].to_vec()).unwrap())
            .unwrap();
        let a = tape.constant(t.bootstrap_action.clone()).unwrap();
        let q = q_forward(&mut tape, &v, s, a).unwrap();
        assert_eq!(t.bootstrap_value[0], tape.value(q).data()[0]);
    }

    #[test]
    fn the_double_q_bootstrap_never_exceeds_either_critic() {
        let mut rng = stream_rng(26, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(
            &[&[0.1, 0.2, 0.3, 0.4], &[1.0, -1.0, 0.5, 0.0]],
            &[4, 4],
            &mut rng,
        );
        let t = make_targets(&batch, &policy, &pair, 0.99).unwrap();
        for (mlp, _) in [(&pair.targets.q1, "q1"), (&pair.targets.q2, "q2")] {
            let mut tape = Tape::new();
            let v = bind_mlp_frozen(&mut tape, mlp).unwrap();
            let mut st = vec![0.0; 2 * 2];
            for row in 0..2 {
                st[row * 2..(row + 1) * 2]
                    .copy_from_slice(&batch.state.data()[(row * 4 + 3) * 2..(row * 4 + 4) * 2]);
            }
            let s = tape.constant(Tensor::new(vec![2, 2], st).unwrap()).unwrap();
            let a = tape.constant(t.bootstrap_action.clone()).unwrap();
            let q = q_forward(&mut tape, &v, s, a).unwrap();
            for (boot, &qv) in t.bootstrap_value.iter().zip(tape.value(q).data()) {
                assert!(boot <= &qv);
            }
        }
    }

    #[test]
    fn rows_with_one_valid_step_are_skipped() {
        let mut rng = stream_rng(27, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(&[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]], &[3, 1], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.5).unwrap();
        assert_eq!(t.skipped_rows, 1);
        assert_eq!(&t.mask.data()[2..], &[0.0, 0.0]);
        assert_eq!(&t.targets.data()[2..], &[0.0, 0.0]);
        assert_eq!(t.bootstrap_value[1], 0.0);
    }

    #[test]
    fn targets_agree_with_the_brute_force_sum_digit_for_digit() {
        let mut rng = stream_rng(28, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        for gamma in [0.0, 0.5, 0.99] {
            for trial in 0..20 {
                let k = 4;
                let valid = 2 + (trial % 3);
                let rewards: Vec<Real> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let batch = batch_with(&[&rewards], &[valid], &mut rng);
                let t = make_targets(&batch, &policy, &pair, gamma).unwrap();
                let pad = k - valid;
                for m in pad..k - 1 {
                    let expect =
                        brute_nstep_return(&rewards[m..k - 1], gamma, t.bootstrap_value[0]);
                    assert_eq!(t.targets.data()[m].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn loss_is_zero_at_the_targets_and_two_delta_squared_off_them() {
        let mut rng = stream_rng(29, "critic-test");
        let policy = tiny_policy(&mut rng);
        let mut pair = tiny_pair(&mut rng);
        force_constant(&mut pair.online.q1, 0.0);
        force_constant(&mut pair.online.q2, 0.0);
        force_constant(&mut pair.targets.q1, 0.0);
        force_constant(&mut pair.targets.q2, 0.0);
        let batch = batch_with(&[&[0.0, 0.0, 0.0]], &[3], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.5).unwrap();
        assert_eq!(t.targets.data(), &[0.0, 0.0]);

        let loss_of = |pair: &CriticPair| {
            let mut tape = Tape::new();
            let q1 = bind_mlp_frozen(&mut tape, &pair.online.q1).unwrap();
            let q2 = bind_mlp_frozen(&mut tape, &pair.online.q2).unwrap();
            let loss = critic_loss(&mut tape, &q1, &q2, &batch, &t).unwrap();
            tape.value(loss).item()
        };
        assert_eq!(loss_of(&pair), 0.0);

        // Shift both online critics by 0.5: loss = 2 * 0.5^2.
        force_constant(&mut pair.online.q1, 0.5);
        force_constant(&mut pair.online.q2, 0.5);
        assert_eq!(loss_of(&pair), 0.5);
    }

    #[test]
    fn gradients_reach_online_critics_only() {
        let mut rng = stream_rng(30, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(&[&[1.0, 0.5, -0.5, 0.2]], &[4], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.99).unwrap();

        let mut tape = Tape::new();
        let q1 = bind_mlp(&mut tape, "q1", &pair.online.q1).unwrap();
        let q2 = bind_mlp(&mut tape, "q2", &pair.online.q2).unwrap();
        let loss = critic_loss(&mut tape, &q1, &q2, &batch, &t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let expected: usize = crate::numerics::optim::flatten(&pair.online).len();
        assert_eq!(grads.len(), expected);
        assert!(grads.iter().all(|(n, _)| n.starts_with("q1.") || n.starts_with("q2.")));
        assert!(grads
            .iter()
            .any(|(_, g)| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn an_all_skipped_batch_produces_the_constant_zero_loss() {
        let mut rng = stream_rng(31, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(&[&[1.0, 1.0, 1.0]], &[1], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.5).unwrap();
        assert_eq!(t.skipped_rows, 1);
        let mut tape = Tape::new();
        let q1 = bind_mlp(&mut tape, "q1", &pair.online.q1).unwrap();
        let q2 = bind_mlp(&mut tape, "q2", &pair.online.q2).unwrap();
        let loss = critic_loss(&mut tape, &q1, &q2, &batch, &t).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert!(tape.backward(loss).unwrap().iter().all(|(_, g)| g
            .data()
            .iter()
            .all(|&v| v == 0.0)));
    }

    #[test]
    fn polyak_walks_targets_toward_the_online_weights() {
        let mut rng = stream_rng(32, "critic-test");
        let mut pair = tiny_pair(&mut rng);
        // Separate the copies first.
        for l in &mut pair.online.q1.layers {
            for v in l.w.data_mut() {
                *v += 1.0;
            }
        }
        let dist = |pair: &CriticPair| {
            let mut d: Real = 0.0;
            let online = crate::numerics::optim::flatten(&pair.online);
            let targets = crate::numerics::optim::flatten(&pair.targets);
            for ((_, o), (_, t)) in online.iter().zip(targets.iter()) {
                for (a, b) in o.data().iter().zip(t.data()) {
                    d += (a - b) * (a - b);
                }
            }
            d.sqrt()
        };
        let before = dist(&pair);
        assert!(before > 0.0);
        let mut last = before;
        for _ in 0..5 {
            pair.polyak(0.9);
            let now = dist(&pair);
            assert!(now < last);
            last = now;
        }
        // rho = 1 freezes, rho = 0 copies.
        let frozen = dist(&pair);
        pair.polyak(1.0);
        assert_eq!(dist(&pair), frozen);
        pair.polyak(0.0);
        assert_eq!(dist(&pair), 0.0);
    }

    #[test]
    fn one_step_targets_bootstrap_from_the_very_next_position() {
        let mut rng = stream_rng(34, "critic-test");
        let policy = tiny_policy(&mut rng);
        let mut pair = tiny_pair(&mut rng);
        force_constant(&mut pair.targets.q1, 4.0);
        force_constant(&mut pair.targets.q2, 7.0);
        let batch = batch_with(&[&[1.0, 2.0, 9.0]], &[3], &mut rng);
        let one = make_targets_1step(&batch, &policy, &pair, 0.25).unwrap();
        // Constant min target-Q of 4 at every position.
        assert_eq!(one.targets.data(), &[1.0 + 0.25 * 4.0, 2.0 + 0.25 * 4.0]);
        let n = make_targets(&batch, &policy, &pair, 0.25).unwrap();
        assert_eq!(n.targets.data(), &[1.0 + 0.25 * 2.0 + 0.0625 * 4.0, 2.0 + 0.25 * 4.0]);
        assert_ne!(one.targets.data()[0], n.targets.data()[0]);
        // Skipping rules match.
        let short = batch_with(&[&[1.0, 1.0]], &[1], &mut rng);
        assert_eq!(make_targets_1step(&short, &policy, &pair, 0.25).unwrap().skipped_rows, 1);
    }

    #[test]
    fn an_mlp_target_policy_supplies_bounded_bootstrap_actions() {
        use crate::policy::MlpPolicy;
        let mut rng = stream_rng(35, "critic-test");
        let policy = PolicyModel::Mlp(
            MlpPolicy::init(2, 2, 8, vec![-1.0, -1.0], vec![1.0, 1.0], &mut rng).unwrap(),
        );
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(&[&[0.5, -0.5, 1.5]], &[3], &mut rng);
        let t = make_targets(&batch, &policy, &pair, 0.9).unwrap();
        assert!(t.targets.data().iter().all(|v| v.is_finite()));
        assert!(t.bootstrap_action.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn out_of_range_gamma_is_rejected() {
        let mut rng = stream_rng(33, "critic-test");
        let policy = tiny_policy(&mut rng);
        let pair = tiny_pair(&mut rng);
        let batch = batch_with(&[&[1.0, 1.0]], &[2], &mut rng);
        assert!(matches!(
            make_targets(&batch, &policy, &pair, 1.0),
            Err(Error::Config(_))
        ));
        assert!(make_targets(&batch, &policy, &pair, -0.1).is_err());
    }
}
