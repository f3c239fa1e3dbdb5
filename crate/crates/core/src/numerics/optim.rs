//! Parameter traversal, Adam, gradient clipping, and Polyak averaging.

use super::tape::GradMap;
use super::tensor::Tensor;
use crate::Real;

/// Anything holding named trainable tensors. Traversal order must be stable
/// and names unique; optimizer state, checkpoints, and target-network updates
/// all key off the names.
pub trait ParamGroup {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }
}

/// Clone out (name, tensor) pairs in traversal order.
pub fn flatten(group: &impl ParamGroup) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    group.for_each(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// allocated from the group's current shapes.
pub struct AdamState {
    step: u64,
    beta1: Real,
    beta2: Real,
    eps: Real,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &impl ParamGroup) -> Self {
        let mut moments = Vec::new();
        params.for_each(&mut |name, t| {
            moments.push((name.to_string(), Tensor::zeros(t.shape()), Tensor::zeros(t.shape())));
        });
        Self { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: p -= lr * m_hat / (sqrt(v_hat) + eps). Parameters missing
    /// from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut impl ParamGroup, grads: &GradMap, lr: Real) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut cursor = 0;
        params.for_each_mut(&mut |name, t| {
            let (slot_name, m, v) = &mut self.moments[cursor];
            assert_eq!(slot_name, name, "parameter order changed under the optimizer");
            cursor += 1;
            let zero;
            let g = match grads.get(name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; t.numel()];
                    &zero
                }
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for ((p, m), (v, &gv)) in t
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g))
            {
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. Applying this twice is a no-op the second time.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: Real) -> Real {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Target-network update: target = rho * target + (1 - rho) * online.
pub fn polyak(target: &mut impl ParamGroup, online: &impl ParamGroup, rho: Real) {
    let online_flat = flatten(online);
    let mut cursor = 0;
    target.for_each_mut(&mut |name, t| {
        let (src_name, src) = &online_flat[cursor];
        assert_eq!(src_name, name, "target/online parameter mismatch at {name}");
        cursor += 1;
        for (tv, &sv) in t.data_mut().iter_mut().zip(src.data()) {
            *tv = rho * *tv + (1.0 - rho) * sv;
        }
    });
    assert_eq!(cursor, online_flat.len());
}
