//! Offline-data pipeline: behavior policies, trajectory collection,
//! return-to-go suffix sums, left-padded context-window sampling, state
//! normalization, the stitch split that removes end-to-end demonstrations,
//! and a checksummed binary file format.

use crate::envs::{EnvSpec, RewardMode, ToyEnv};
use crate::error::{Error, Result};
use crate::wire::{push_f64s, push_str, Reader};
use crate::numerics::tensor::Tensor;
use crate::rng::stream_rng;
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How offline data gets generated. The scripted controller is the env's
/// hand-written goal-seeker; epsilon mixes in uniform-random actions per
/// step, and `Mixture` flips a weighted coin per episode between the noisy
/// scripted policy and fully random actions (a replay-buffer stand-in).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorPolicy {
    Uniform,
    EpsScripted { eps: Real },
    Mixture { eps: Real, scripted: Real },
}

impl BehaviorPolicy {
    /// Accepts `uniform`, `scripted`, `scripted:EPS`, `mixture`,
    /// `mixture:EPS`, `mixture:EPS:FRAC`. The default noise level is 0.3;
    /// FRAC is the fraction of episodes driven by the scripted controller
    /// (default 0.5).
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let num = |field: &str, text: Option<&str>, default: Real| -> Result<Real> {
            let v = match text {
                Some(t) => t
                    .parse()
                    .map_err(|_| Error::Config(format!("bad {field} in behavior '{s}'")))?,
                None => default,
            };
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("behavior {field} {v} outside [0,1]")));
            }
            Ok(v)
        };
        let eps = num("epsilon", parts.next(), 0.3)?;
        let scripted = num("scripted fraction", parts.next(), 0.5)?;
        if parts.next().is_some() {
            return Err(Error::Config(format!("too many ':' fields in behavior '{s}'")));
        }
        match kind {
            "uniform" => Ok(BehaviorPolicy::Uniform),
            "scripted" => Ok(BehaviorPolicy::EpsScripted { eps }),
            "mixture" => Ok(BehaviorPolicy::Mixture { eps, scripted }),
            other => Err(Error::Config(format!("unknown behavior policy '{other}'"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            BehaviorPolicy::Uniform => "uniform".into(),
            BehaviorPolicy::EpsScripted { eps } => format!("scripted:{eps}"),
            BehaviorPolicy::Mixture { eps, scripted } if *scripted == 0.5 => {
                format!("mixture:{eps}")
            }
            BehaviorPolicy::Mixture { eps, scripted } => format!("mixture:{eps}:{scripted}"),
        }
    }
}

/// One episode: aligned per-step arrays plus the suffix-sum returns.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Row-major `[T, state_dim]` observations (state before each action).
    pub states: Vec<Real>,
    /// Row-major `[T, action_dim]`.
    pub actions: Vec<Real>,
    pub rewards: Vec<Real>,
    /// rtgs[t] = rewards[t] + rtgs[t+1], accumulated back-to-front so the
    /// recurrence holds bitwise.
    pub rtgs: Vec<Real>,
    pub timesteps: Vec<usize>,
    pub reached_goal: bool,
}

impl Trajectory {
    pub fn new(
        states: Vec<Real>,
        actions: Vec<Real>,
        rewards: Vec<Real>,
        timesteps: Vec<usize>,
        reached_goal: bool,
    ) -> Trajectory {
        let rtgs = suffix_sums(&rewards);
        Trajectory { states, actions, rewards, rtgs, timesteps, reached_goal }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> Real {
        self.rtgs.first().copied().unwrap_or(0.0)
    }

    pub fn state(&self, t: usize, state_dim: usize) -> &[Real] {
        &self.states[t * state_dim..(t + 1) * state_dim]
    }

    pub fn action(&self, t: usize, action_dim: usize) -> &[Real] {
        &self.actions[t * action_dim..(t + 1) * action_dim]
    }
}

/// Back-to-front cumulative sums: out[t] = rewards[t] + out[t+1].
fn suffix_sums(rewards: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

/// An immutable offline dataset with its normalization statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub env_id: String,
    pub reward_mode: RewardMode,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    /// Per-dimension mean over every stored state.
    pub state_mean: Vec<Real>,
    /// Per-dimension standard deviation, floored at 1e-6.
    pub state_std: Vec<Real>,
    pub max_return: Real,
    pub min_return: Real,
}

const STD_FLOOR: Real = 1e-6;

impl Dataset {
    /// Builds a dataset and fits normalization statistics and return bounds.
    pub fn from_trajectories(
        env_id: &str,
        reward_mode: RewardMode,
        state_dim: usize,
        action_dim: usize,
        trajectories: Vec<Trajectory>,
    ) -> Dataset {
        let mut mean = vec![0.0; state_dim];
        let mut count = 0usize;
        for traj in &trajectories {
            for row in traj.states.chunks_exact(state_dim) {
                for (m, &x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            count += traj.len();
        }
        if count > 0 {
            for m in &mut mean {
                *m /= count as Real;
            }
        }
        let mut var = vec![0.0; state_dim];
        for traj in &trajectories {
            for row in traj.states.chunks_exact(state_dim) {
                for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std: Vec<Real> = var
            .iter()
            .map(|&v| {
                let s = if count > 0 { (v / count as Real).sqrt() } else { 1.0 };
                s.max(STD_FLOOR)
            })
            .collect();
        let mut max_return = Real::NEG_INFINITY;
        let mut min_return = Real::INFINITY;
        for traj in &trajectories {
            max_return = max_return.max(traj.episode_return());
            min_return = min_return.min(traj.episode_return());
        }
        if trajectories.is_empty() {
            max_return = 0.0;
            min_return = 0.0;
        }
        Dataset {
            env_id: env_id.to_string(),
            reward_mode,
            state_dim,
            action_dim,
            trajectories,
            state_mean: mean,
            state_std: std,
            max_return,
            min_return,
        }
    }

    /// Composite identifier, e.g. `umaze/sparse`.
    pub fn spec_id(&self) -> String {
        format!("{}/{}", self.env_id, self.reward_mode.name())
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn normalize_into(&self, raw: &[Real], out: &mut [Real]) {
        for i in 0..self.state_dim {
            out[i] = (raw[i] - self.state_mean[i]) / self.state_std[i];
        }
    }

    pub fn unnormalize(&self, normed: &[Real]) -> Vec<Real> {
        (0..self.state_dim)
            .map(|i| normed[i] * self.state_std[i] + self.state_mean[i])
            .collect()
    }

    /// Per-trajectory summary: index, return, length, goal flag.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("trajectory,episode_return,length,reached_goal\n");
        for (i, t) in self.trajectories.iter().enumerate() {
            out.push_str(&format!(
                "{i},{ret},{len},{goal}\n",
                ret = t.episode_return(),
                len = t.len(),
                goal = t.reached_goal as u8
            ));
        }
        out
    }
}

fn uniform_action(rng: &mut ChaCha8Rng, spec: &EnvSpec) -> Vec<Real> {
    spec.action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
        .collect()
}

/// Rolls out the behavior policy for `n_episodes` and packages the result.
/// Deterministic in `seed`: action noise comes from one named stream and
/// each episode's reset jitter from a per-episode derivation of the seed.
pub fn collect(
    env: &mut ToyEnv,
    behavior: BehaviorPolicy,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    assert!(n_episodes >= 1, "collect needs at least one episode");
    let spec = env.spec().clone();
    let mut rng = stream_rng(seed, "behavior");
    let mut trajectories = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut obs = env.reset(seed ^ (ep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let episode_uniform = match behavior {
            BehaviorPolicy::Uniform => true,
            BehaviorPolicy::EpsScripted { .. } => false,
            BehaviorPolicy::Mixture { scripted, .. } => rng.gen_bool(1.0 - scripted),
        };
        let eps = match behavior {
            BehaviorPolicy::Uniform => 0.0,
            BehaviorPolicy::EpsScripted { eps } | BehaviorPolicy::Mixture { eps, .. } => eps,
        };
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut timesteps = Vec::new();
        for t in 0..spec.max_episode_steps {
            let action = if episode_uniform || (eps > 0.0 && rng.gen::<Real>() < eps) {
                uniform_action(&mut rng, &spec)
            } else {
                env.scripted_action()
            };
            let out = env.step(&action)?;
            states.extend_from_slice(&obs);
            actions.extend_from_slice(&action);
            rewards.push(out.reward);
            timesteps.push(t);
            obs = out.obs;
            if out.done {
                break;
            }
        }
        trajectories.push(Trajectory::new(
            states,
            actions,
            rewards,
            timesteps,
            env.reached_goal(),
        ));
    }
    Ok(Dataset::from_trajectories(
        &spec.id,
        spec.reward_mode,
        spec.state_dim,
        spec.action_dim,
        trajectories,
    ))
}

/// Removes end-to-end demonstrations: every goal-reaching trajectory is cut
/// at `cut_fraction` of its length and only one half is retained, prefixes
/// and suffixes alternating, so solving the task requires composing behavior
/// across trajectories. Unsuccessful trajectories are kept whole. Returns
/// and statistics are recomputed on the pieces.
pub fn stitch_split(dataset: &Dataset, cut_fraction: Real) -> Result<Dataset> {
    if !(cut_fraction > 0.0 && cut_fraction < 1.0) {
        return Err(Error::Config(format!("cut fraction {cut_fraction} outside (0,1)")));
    }
    if !dataset.trajectories.iter().any(|t| t.reached_goal && t.len() >= 2) {
        return Err(Error::NoGoalTrajectories);
    }
    let (s, a) = (dataset.state_dim, dataset.action_dim);
    let mut pieces = Vec::with_capacity(dataset.trajectories.len());
    let mut keep_prefix = true;
    for traj in &dataset.trajectories {
        if !(traj.reached_goal && traj.len() >= 2) {
            pieces.push(traj.clone());
            continue;
        }
        let t = traj.len();
        let cut = ((cut_fraction * t as Real).round() as usize).clamp(1, t - 1);
        let (lo, hi, goal) = if keep_prefix { (0, cut, false) } else { (cut, t, true) };
        keep_prefix = !keep_prefix;
        pieces.push(Trajectory::new(
            traj.states[lo * s..hi * s].to_vec(),
            traj.actions[lo * a..hi * a].to_vec(),
            traj.rewards[lo..hi].to_vec(),
            traj.timesteps[lo..hi].to_vec(),
            goal,
        ));
    }
    Ok(Dataset::from_trajectories(
        &dataset.env_id,
        dataset.reward_mode,
        s,
        a,
        pieces,
    ))
}

/// A minibatch of fixed-length context windows, left-padded with zeros.
/// `mask` rows are a (possibly empty) run of 0s followed by 1s; every tensor
/// entry under a 0 is exactly zero. States are normalized.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    /// `[B, K]` return-to-go at each position.
    pub rtg: Tensor,
    /// `[B, K, state_dim]`, normalized by the dataset statistics.
    pub state: Tensor,
    /// `[B, K, action_dim]`.
    pub action: Tensor,
    /// `[B, K]` per-step rewards.
    pub reward: Tensor,
    /// Row-major `[B * K]` episode timesteps (0 at padding).
    pub timestep: Vec<usize>,
    /// `[B, K]` validity mask.
    pub mask: Tensor,
}

impl SegmentBatch {
    pub fn batch_size(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn context(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// Draws `batch_size` windows ending at positions sampled uniformly over all
/// (trajectory, end index) pairs, which weights trajectories by length.
/// Windows reaching past the episode start are left-padded.
pub fn sample_segments(
    dataset: &Dataset,
    k: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentBatch> {
    assert!(k >= 1 && batch_size >= 1);
    let total = dataset.total_steps();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let (s, a) = (dataset.state_dim, dataset.action_dim);
    let mut rtg = vec![0.0; batch_size * k];
    let mut state = vec![0.0; batch_size * k * s];
    let mut action = vec![0.0; batch_size * k * a];
    let mut reward = vec![0.0; batch_size * k];
    let mut timestep = vec![0usize; batch_size * k];
    let mut mask = vec![0.0; batch_size * k];
    for b in 0..batch_size {
        let mut g = rng.gen_range(0..total);
        let mut traj = &dataset.trajectories[0];
        for t in &dataset.trajectories {
            if g < t.len() {
                traj = t;
                break;
            }
            g -= t.len();
        }
        let end = g;
        let len = (end + 1).min(k);
        let start = end + 1 - len;
        for j in 0..len {
            let pos = k - len + j;
            let t = start + j;
            rtg[b * k + pos] = traj.rtgs[t];
            reward[b * k + pos] = traj.rewards[t];
            timestep[b * k + pos] = traj.timesteps[t];
            mask[b * k + pos] = 1.0;
            dataset.normalize_into(
                traj.state(t, s),
                &mut state[(b * k + pos) * s..(b * k + pos + 1) * s],
            );
            action[(b * k + pos) * a..(b * k + pos + 1) * a]
                .copy_from_slice(traj.action(t, a));
        }
    }
    Ok(SegmentBatch {
        rtg: Tensor::new(vec![batch_size, k], rtg)?,
        state: Tensor::new(vec![batch_size, k, s], state)?,
        action: Tensor::new(vec![batch_size, k, a], action)?,
        reward: Tensor::new(vec![batch_size, k], reward)?,
        timestep,
        mask: Tensor::new(vec![batch_size, k], mask)?,
    })
}

// ---- binary format ----
//
// magic "QTDS" | version u16 | env id str | reward mode str | state_dim u32
// | action_dim u32 | max_return f64 | min_return f64 | mean f64s | std f64s
// | trajectory count u64 | per trajectory six length-prefixed f64 arrays
// (states, actions, rewards, rtgs, timesteps, flags) | crc32 of everything
// above. All integers little-endian; strings are u32 length + UTF-8; f64
// arrays are u64 count + raw little-endian doubles.

const MAGIC: [u8; 4] = *b"QTDS";
const VERSION: u16 = 1;

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        push_str(&mut buf, &self.env_id);
        push_str(&mut buf, self.reward_mode.name());
        buf.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.max_return as f64).to_le_bytes());
        buf.extend_from_slice(&(self.min_return as f64).to_le_bytes());
        let as_f64 = |xs: &[Real]| xs.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        push_f64s(&mut buf, &as_f64(&self.state_mean));
        push_f64s(&mut buf, &as_f64(&self.state_std));
        buf.extend_from_slice(&(self.trajectories.len() as u64).to_le_bytes());
        for traj in &self.trajectories {
            push_f64s(&mut buf, &as_f64(&traj.states));
            push_f64s(&mut buf, &as_f64(&traj.actions));
            push_f64s(&mut buf, &as_f64(&traj.rewards));
            push_f64s(&mut buf, &as_f64(&traj.rtgs));
            let ts: Vec<f64> = traj.timesteps.iter().map(|&t| t as f64).collect();
            push_f64s(&mut buf, &ts);
            push_f64s(&mut buf, &[traj.reached_goal as u8 as f64]);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::BadVersion { expected: VERSION, found: version });
        }
        // Structure is validated while parsing (truncation errors); the
        // trailing checksum is verified over the parsed span afterwards, so
        // a cut-off file reports truncation and a flipped byte reports the
        // checksum.
        let env_id = r.string("env id")?;
        let mode = RewardMode::parse(&r.string("reward mode")?)?;
        let state_dim = r.u32("state dim")? as usize;
        let action_dim = r.u32("action dim")? as usize;
        let max_return = r.f64("max return")? as Real;
        let min_return = r.f64("min return")? as Real;
        let to_real = |xs: Vec<f64>| xs.into_iter().map(|x| x as Real).collect::<Vec<Real>>();
        let state_mean = to_real(r.f64s("state mean")?);
        let state_std = to_real(r.f64s("state std")?);
        let n_traj = r.u64("trajectory count")? as usize;
        let mut trajectories = Vec::with_capacity(n_traj.min(1 << 20));
        for _ in 0..n_traj {
            let states = to_real(r.f64s("states")?);
            let actions = to_real(r.f64s("actions")?);
            let rewards = to_real(r.f64s("rewards")?);
            let rtgs = to_real(r.f64s("rtgs")?);
            let ts = r.f64s("timesteps")?;
            let flags = r.f64s("flags")?;
            let t = rewards.len();
            if states.len() != t * state_dim
                || actions.len() != t * action_dim
                || rtgs.len() != t
                || ts.len() != t
                || flags.is_empty()
            {
                return Err(Error::Corrupt("trajectory array lengths disagree".into()));
            }
            trajectories.push(Trajectory {
                states,
                actions,
                rewards,
                rtgs,
                timesteps: ts.into_iter().map(|x| x as usize).collect(),
                reached_goal: flags[0] != 0.0,
            });
        }
        let body_len = r.pos;
        let stored = u32::from_le_bytes(r.take(4, "checksum")?.try_into().unwrap());
        if r.pos != buf.len() {
            return Err(Error::Corrupt("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(&buf[..body_len]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(Dataset {
            env_id,
            reward_mode: mode,
            state_dim,
            action_dim,
            trajectories,
            state_mean,
            state_std,
            max_return,
            min_return,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| Error::File { path: path.to_path_buf(), source })
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)
            .map_err(|source| Error::File { path: path.to_path_buf(), source })?;
        Dataset::from_bytes(&bytes)
    }
}
