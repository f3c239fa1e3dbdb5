//! Agent checkpoints: everything needed to act again — both policy networks
//! (online and target), both critic pairs, the state normalizer, and the
//! dataset's best return (which anchors inference RTG candidates) — in one
//! self-describing binary file.
//!
//! Layout ("QTCK" container): magic | version u16 | policy kind string |
//! architecture fields | normalizer arrays | six named-tensor sections
//! (policy, policy target, critic online q1/q2, critic target q1/q2) |
//! crc32 of everything above. Floats are little-endian f64 on disk
//! regardless of the in-memory scalar type; tensors are length-prefixed and
//! carry their names and shapes.

use crate::critic::{CriticConfig, CriticPair};
use crate::error::{Error, Result};
use crate::inference::Agent;
use crate::numerics::nn::Activation;
use crate::numerics::optim::ParamGroup;
use crate::policy::{MlpPolicy, PolicyConfig, PolicyModel, PolicyParams};
use crate::rng::stream_rng;
use crate::wire::{push_f64s, push_str, Reader};
use crate::Real;
use std::path::Path;

const MAGIC: [u8; 4] = *b"QTCK";
const VERSION: u16 = 1;

/// A frozen agent plus the statistics needed to drive it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: PolicyModel,
    pub target_policy: PolicyModel,
    pub critics: CriticPair,
    pub state_mean: Vec<Real>,
    pub state_std: Vec<Real>,
    pub max_return: Real,
}

impl Checkpoint {
    /// Borrow this checkpoint as an inference agent.
    pub fn agent(&self, n_candidates: usize, eval_with_q: bool) -> Agent<'_> {
        Agent {
            policy: &self.policy,
            critics: &self.critics,
            state_mean: &self.state_mean,
            state_std: &self.state_std,
            max_return: self.max_return,
            n_candidates,
            eval_with_q,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let as_f64 = |xs: &[Real]| xs.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        match &self.policy {
            PolicyModel::Transformer(p) => {
                push_str(&mut buf, "transformer");
                let c = &p.cfg;
                for v in [c.state_dim, c.action_dim, c.context_k, c.n_layers, c.n_heads, c.embed_dim, c.max_timestep] {
                    buf.extend_from_slice(&(v as u32).to_le_bytes());
                }
                buf.extend_from_slice(&(c.dropout_keep as f64).to_le_bytes());
                push_f64s(&mut buf, &as_f64(&c.action_low));
                push_f64s(&mut buf, &as_f64(&c.action_high));
            }
            PolicyModel::Mlp(p) => {
                push_str(&mut buf, "mlp");
                let hidden = p.mlp.layers[0].b.numel();
                for v in [p.state_dim, p.action_dim, hidden] {
                    buf.extend_from_slice(&(v as u32).to_le_bytes());
                }
                push_f64s(&mut buf, &as_f64(&p.action_low));
                push_f64s(&mut buf, &as_f64(&p.action_high));
            }
        }
        let cc = &self.critics.cfg;
        buf.extend_from_slice(&(cc.hidden_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(cc.n_hidden_layers as u32).to_le_bytes());
        push_str(&mut buf, cc.activation.name());
        push_f64s(&mut buf, &as_f64(&self.state_mean));
        push_f64s(&mut buf, &as_f64(&self.state_std));
        buf.extend_from_slice(&(self.max_return as f64).to_le_bytes());
        push_params(&mut buf, &self.policy);
        push_params(&mut buf, &self.target_policy);
        push_params(&mut buf, &self.critics.online);
        push_params(&mut buf, &self.critics.targets);
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::BadVersion { expected: VERSION, found: version });
        }
        let to_real = |xs: Vec<f64>| xs.into_iter().map(|x| x as Real).collect::<Vec<Real>>();
        let kind = r.string("policy kind")?;
        // Fresh networks of the recorded architecture, overwritten below.
        // The init draws are discarded, so any fixed seed works.
        let mut rng = stream_rng(0, "checkpoint-load");
        let (mut policy, mut target_policy, state_dim, action_dim) = match kind.as_str() {
            "transformer" => {
                let mut dims = [0usize; 7];
                for d in &mut dims {
                    *d = r.u32("policy dims")? as usize;
                }
                let dropout_keep = r.f64("dropout keep")? as Real;
                let action_low = to_real(r.f64s("action low")?);
                let action_high = to_real(r.f64s("action high")?);
                let cfg = PolicyConfig {
                    state_dim: dims[0],
                    action_dim: dims[1],
                    context_k: dims[2],
                    n_layers: dims[3],
                    n_heads: dims[4],
                    embed_dim: dims[5],
                    max_timestep: dims[6],
                    dropout_keep,
                    action_low,
                    action_high,
                };
                let p = PolicyModel::Transformer(PolicyParams::init(cfg.clone(), &mut rng)?);
                (p.clone(), p, dims[0], dims[1])
            }
            "mlp" => {
                let mut dims = [0usize; 3];
                for d in &mut dims {
                    *d = r.u32("policy dims")? as usize;
                }
                let action_low = to_real(r.f64s("action low")?);
                let action_high = to_real(r.f64s("action high")?);
                let p = PolicyModel::Mlp(MlpPolicy::init(
                    dims[0], dims[1], dims[2], action_low, action_high, &mut rng,
                )?);
                (p.clone(), p, dims[0], dims[1])
            }
            other => return Err(Error::Corrupt(format!("unknown policy kind '{other}'"))),
        };
        let cfg = CriticConfig {
            hidden_dim: r.u32("critic hidden")? as usize,
            n_hidden_layers: r.u32("critic layers")? as usize,
            activation: Activation::parse(&r.string("critic activation")?)?,
        };
        let mut critics = CriticPair::init(cfg, state_dim, action_dim, &mut rng)?;
        let state_mean = to_real(r.f64s("state mean")?);
        let state_std = to_real(r.f64s("state std")?);
        let max_return = r.f64("max return")? as Real;
        fill_params(&mut policy, &mut r, "policy")?;
        fill_params(&mut target_policy, &mut r, "policy target")?;
        fill_params(&mut critics.online, &mut r, "critic online")?;
        fill_params(&mut critics.targets, &mut r, "critic target")?;
        let body_len = r.pos;
        let stored = r.u32("checksum")?;
        let computed = crc32fast::hash(&buf[..body_len]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(Checkpoint { policy, target_policy, critics, state_mean, state_std, max_return })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| Error::File { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|source| Error::File { path: path.to_path_buf(), source })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Write a parameter group as a count-prefixed list of named shaped tensors.
fn push_params(buf: &mut Vec<u8>, group: &impl ParamGroup) {
    let mut n = 0u32;
    group.for_each(&mut |_, _| n += 1);
    buf.extend_from_slice(&n.to_le_bytes());
    group.for_each(&mut |name, t| {
        push_str(buf, name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        push_f64s(buf, &t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>());
    });
}

/// Overwrite a freshly initialized group from the stream, insisting that
/// names, shapes, and tensor count all line up with the recorded
/// architecture.
fn fill_params(group: &mut impl ParamGroup, r: &mut Reader, what: &'static str) -> Result<()> {
    let n = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let data = r.f64s("tensor data")?;
        entries.push((name, shape, data));
    }
    let mut cursor = 0usize;
    let mut mismatch: Option<String> = None;
    group.for_each_mut(&mut |name, t| {
        if mismatch.is_some() {
            return;
        }
        let Some((e_name, e_shape, e_data)) = entries.get(cursor) else {
            mismatch = Some(format!("{what}: missing tensor '{name}'"));
            return;
        };
        if e_name != name || e_shape != t.shape() {
            mismatch = Some(format!(
                "{what}: expected tensor '{name}' of shape {:?}, found '{e_name}' of shape {e_shape:?}",
                t.shape()
            ));
            return;
        }
        for (dst, &src) in t.data_mut().iter_mut().zip(e_data) {
            *dst = src as Real;
        }
        cursor += 1;
    });
    if let Some(detail) = mismatch {
        return Err(Error::Corrupt(detail));
    }
    if cursor != entries.len() {
        return Err(Error::Corrupt(format!(
            "{what}: file carries {} tensors, model wants {cursor}",
            entries.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticConfig;
    use crate::numerics::optim::flatten;
    use crate::policy::PolicyConfig;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = stream_rng(3, "checkpoint-test");
        let cfg = PolicyConfig {
            state_dim: 3,
            action_dim: 2,
            context_k: 4,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            max_timestep: 64,
            dropout_keep: 0.9,
            action_low: vec![-1.0, -2.0],
            action_high: vec![1.0, 2.0],
        };
        let policy = PolicyModel::Transformer(PolicyParams::init(cfg, &mut rng).unwrap());
        let mut target_policy = policy.clone();
        // Make the target distinguishable from the online net.
        target_policy.for_each_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += 0.125;
            }
        });
        let ccfg = CriticConfig { hidden_dim: 8, n_hidden_layers: 2, activation: Activation::Mish };
        let mut critics = CriticPair::init(ccfg, 3, 2, &mut rng).unwrap();
        critics.polyak(0.5);
        Checkpoint {
            policy,
            target_policy,
            critics,
            state_mean: vec![0.1, -0.2, 0.3],
            state_std: vec![1.0, 2.0, 0.5],
            max_return: 17.25,
        }
    }

    fn assert_groups_equal(a: &impl ParamGroup, b: &impl ParamGroup) {
        let (fa, fb) = (flatten(a), flatten(b));
        assert_eq!(fa.len(), fb.len());
        for ((na, ta), (nb, tb)) in fa.iter().zip(&fb) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data(), "tensor {na} changed across a save/load");
        }
    }

    #[test]
    fn save_load_round_trips_every_tensor_exactly() {
        let ck = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_groups_equal(&ck.policy, &back.policy);
        assert_groups_equal(&ck.target_policy, &back.target_policy);
        assert_groups_equal(&ck.critics.online, &back.critics.online);
        assert_groups_equal(&ck.critics.targets, &back.critics.targets);
        assert_eq!(ck.state_mean, back.state_mean);
        assert_eq!(ck.state_std, back.state_std);
        assert_eq!(ck.max_return, back.max_return);
        // The round trip is bitwise, so re-encoding reproduces the file.
        assert_eq!(ck.to_bytes(), back.to_bytes());
    }

    #[test]
    fn mlp_policies_round_trip_too() {
        let mut ck = sample_checkpoint();
        let mut rng = stream_rng(4, "checkpoint-test");
        let p = PolicyModel::Mlp(
            MlpPolicy::init(3, 2, 8, vec![-1.0, -2.0], vec![1.0, 2.0], &mut rng).unwrap(),
        );
        ck.policy = p.clone();
        ck.target_policy = p;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_groups_equal(&ck.policy, &back.policy);
        assert_eq!(back.policy.context_k(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = sample_checkpoint();
        let good = ck.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::BadMagic { .. })));

        // Any single flipped byte either breaks parsing or fails the
        // trailing checksum; it can never load silently.
        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&flipped).is_err());

        let truncated = &good[..good.len() - 7];
        assert!(Checkpoint::from_bytes(truncated).is_err());
    }

    #[test]
    fn files_travel_through_disk_and_expose_an_agent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.qtck");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let agent = back.agent(8, true);
        assert_eq!(agent.max_return, 17.25);
        assert_eq!(agent.n_candidates, 8);
        assert!(agent.eval_with_q);
    }
}
