//! Reverse-mode automatic differentiation on a tape of operation records.
//!
//! Building a forward computation appends nodes to a `Tape`; `backward` walks
//! the records in reverse, applying each op's local gradient rule and
//! accumulating into per-node adjoints. Parameters are leaves registered by
//! name, and `backward` returns a name -> gradient map covering every
//! registered parameter (zeros for parameters the loss never touched).

use super::tensor::{mish, mish_grad, mm_accum, mm_nt_accum, mm_tn_accum, softmax_row, strides, Tensor};
use crate::error::{Error, Result};
use crate::Real;
use rand::Rng;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, c: Real },
    MatMul { a: usize, b: usize },
    Transpose { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    // The mask id is kept as part of the record even though the backward
    // rule never reads it: masked outputs are exactly zero, which already
    // zeroes their gradient term.
    Softmax { a: usize, #[allow(dead_code)] mask: Option<usize> },
    LayerNorm { a: usize, gain: usize, bias: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Mish { a: usize },
    Abs { a: usize },
    Gather { table: usize, indices: Vec<usize> },
    Dropout { a: usize, mask: Vec<Real> },
    Mse { pred: usize, target: usize },
    Mean { a: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// sqrt of the summed squared entries across all gradients.
    pub fn global_norm(&self) -> Real {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|&v| v * v)
            .sum::<Real>()
            .sqrt()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Checks that `small` is a trailing suffix of `big` (the broadcast rule used
/// by add/mul: biases and per-feature scales repeat over leading axes).
fn suffix_of(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, context: &'static str) -> Result<Var> {
        value.check_finite(context)?;
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Insert a non-differentiable input (batch data, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false, "constant")
    }

    /// Insert a trainable leaf. Names must be unique per tape; `backward`
    /// reports one gradient per registered name.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        let var = self.push(Op::Leaf, value.clone(), true, "param")?;
        self.params.push((name.to_string(), var.0));
        Ok(var)
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !suffix_of(ta.shape(), tb.shape()) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} + {:?}", ta.shape(), tb.shape()),
            });
        }
        let bn = tb.numel();
        let data: Vec<Real> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % bn])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Op::Add { a: a.0, b: b.0 }, value, ng, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !suffix_of(ta.shape(), tb.shape()) {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} * {:?}", ta.shape(), tb.shape()),
            });
        }
        let bn = tb.numel();
        let data: Vec<Real> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tb.data()[i % bn])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Op::Mul { a: a.0, b: b.0 }, value, ng, "mul")
    }

    pub fn scalar_mul(&mut self, a: Var, c: Real) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<Real> = ta.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::ScalarMul { a: a.0, c }, value, ng, "scalar_mul")
    }

    /// a - b, under the same broadcast rule as add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scalar_mul(b, -1.0)?;
        self.add(a, nb)
    }

    // ---- linear algebra ----

    /// Matrix product over the two trailing axes. `a` is `[.., m, k]`;
    /// `b` is either `[k, n]` (shared across the batch) or `[.., k, n]`
    /// with leading axes equal to `a`'s.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::Shape {
            op: "matmul",
            detail: format!("{:?} x {:?}", sa, sb),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut data = vec![0.0; batch * m * n];
        for s in 0..batch {
            let a_slab = &ta.data()[s * m * k..(s + 1) * m * k];
            let b_slab = if b_batched {
                &tb.data()[s * k * n..(s + 1) * k * n]
            } else {
                tb.data()
            };
            mm_accum(a_slab, b_slab, m, k, n, &mut data[s * m * n..(s + 1) * m * n]);
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Op::MatMul { a: a.0, b: b.0 }, value, ng, "matmul")
    }

    /// Permute axes. `perm` lists, for each output axis, the source axis.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("perm {:?} on shape {:?}", perm, ta.shape()),
            });
        }
        let value = permute(ta, perm)?;
        let ng = self.needs(a.0);
        self.push(Op::Transpose { a: a.0, perm: perm.to_vec() }, value, ng, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let ng = self.needs(a.0);
        self.push(Op::Reshape { a: a.0 }, value, ng, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no inputs".into() });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} on rank {}", first.len()),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (&d, &f))| i == axis || d == f);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?} along axis {axis}", s, first),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let ax = t.shape()[axis];
            let row_in = ax * inner;
            for o in 0..outer {
                let src = &t.data()[o * row_in..(o + 1) * row_in];
                data[o * row_out + offset..o * row_out + offset + row_in].copy_from_slice(src);
            }
            offset += row_in;
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = parts.iter().any(|p| self.needs(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Op::Concat { parts: ids, axis }, value, ng, "concat")
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}..{}) along axis {axis} of {:?}", start + len, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let row_in = shape[axis] * inner;
        let row_out = len * inner;
        for o in 0..outer {
            let src = &ta.data()[o * row_in + start * inner..o * row_in + (start + len) * inner];
            data[o * row_out..(o + 1) * row_out].copy_from_slice(src);
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(a.0);
        self.push(Op::Slice { a: a.0, axis, start }, value, ng, "slice")
    }

    // ---- nonlinearities and normalizers ----

    /// Softmax over the last axis. With `mask` (same shape, entries 0/1,
    /// non-differentiable), masked entries get probability exactly 0 and the
    /// normalization covers unmasked entries only. Each row must keep at
    /// least one unmasked entry.
    pub fn softmax(&mut self, a: Var, mask: Option<Var>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let row = *ta.shape().last().ok_or(Error::Shape { op: "softmax", detail: "rank 0".into() })?;
        if let Some(m) = mask {
            let tm = &self.nodes[m.0].value;
            if tm.shape() != ta.shape() {
                return Err(Error::Shape {
                    op: "softmax",
                    detail: format!("mask {:?} vs input {:?}", tm.shape(), ta.shape()),
                });
            }
            if self.needs(m.0) {
                return Err(Error::Shape { op: "softmax", detail: "mask must be constant".into() });
            }
            for chunk in tm.data().chunks_exact(row) {
                if chunk.iter().all(|&v| v == 0.0) {
                    return Err(Error::AllPositionsMasked);
                }
            }
        }
        let mut data = vec![0.0; ta.numel()];
        let mask_data = mask.map(|m| self.nodes[m.0].value.data().to_vec());
        for (i, chunk) in ta.data().chunks_exact(row).enumerate() {
            let mrow = mask_data.as_ref().map(|md| &md[i * row..(i + 1) * row]);
            softmax_row(chunk, mrow, &mut data[i * row..(i + 1) * row]);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Softmax { a: a.0, mask: mask.map(|m| m.0) }, value, ng, "softmax")
    }

    /// Layer normalization over the last axis with learnable gain and bias
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ta, tg, tb) =
            (&self.nodes[a.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = *ta.shape().last().ok_or(Error::Shape { op: "layer_norm", detail: "rank 0".into() })?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("gain {:?} bias {:?} for feature dim {d}", tg.shape(), tb.shape()),
            });
        }
        let mut data = vec![0.0; ta.numel()];
        for (chunk, out) in ta.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let (mean, inv_std) = row_moments(chunk);
            for i in 0..d {
                out[i] = (chunk[i] - mean) * inv_std * tg.data()[i] + tb.data()[i];
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0 }, value, ng, "layer_norm")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Relu { a: a.0 }, value, ng, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Tanh { a: a.0 }, value, ng, "tanh")
    }

    pub fn mish(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&v| mish(v)).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Mish { a: a.0 }, value, ng, "mish")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&v| v.abs()).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Abs { a: a.0 }, value, ng, "abs")
    }

    /// Row lookup: `table` is `[vocab, d]`, `indices` selects one row per
    /// entry, and the result is `[prefix.., d]` with `prefix` supplied by the
    /// caller (it must multiply out to `indices.len()`).
    pub fn gather(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("table must be rank 2, got {:?}", tt.shape()),
            });
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        if prefix.iter().product::<usize>() != indices.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("prefix {:?} vs {} indices", prefix, indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::TimestepOutOfRange { t: bad, max: vocab - 1 });
        }
        let mut data = vec![0.0; indices.len() * d];
        for (i, &idx) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&tt.data()[idx * d..(idx + 1) * d]);
        }
        let mut out_shape = prefix.to_vec();
        out_shape.push(d);
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(table.0);
        self.push(Op::Gather { table: table.0, indices: indices.to_vec() }, value, ng, "gather")
    }

    /// Inverted dropout driven by a dedicated RNG stream: each entry is kept
    /// with probability `keep` and scaled by 1/keep, so the expectation is
    /// the identity. `keep = 1` is exactly the identity (no node recorded).
    pub fn dropout(&mut self, a: Var, keep: Real, rng: &mut impl Rng) -> Result<Var> {
        assert!(keep > 0.0 && keep <= 1.0, "keep probability {keep} out of (0, 1]");
        if keep == 1.0 {
            return Ok(a);
        }
        let inv = 1.0 / keep;
        let mask: Vec<Real> = (0..self.nodes[a.0].value.numel())
            .map(|_| if rng.gen::<Real>() < keep { inv } else { 0.0 })
            .collect();
        let data: Vec<Real> =
            self.nodes[a.0].value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        self.push(Op::Dropout { a: a.0, mask }, value, ng, "dropout")
    }

    // ---- reductions ----

    /// Mean squared error between two same-shaped tensors, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if tp.shape() != tt.shape() || tp.numel() == 0 {
            return Err(Error::Shape {
                op: "mse",
                detail: format!("{:?} vs {:?}", tp.shape(), tt.shape()),
            });
        }
        let n = tp.numel() as Real;
        let sum: Real = tp.data().iter().zip(tt.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(sum / n);
        let ng = self.needs(pred.0) || self.needs(target.0);
        self.push(Op::Mse { pred: pred.0, target: target.0 }, value, ng, "mse")
    }

    /// Mean over all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.numel() == 0 {
            return Err(Error::Shape { op: "mean", detail: "empty tensor".into() });
        }
        let value = Tensor::scalar(ta.data().iter().sum::<Real>() / ta.numel() as Real);
        let ng = self.needs(a.0);
        self.push(Op::Mean { a: a.0 }, value, ng, "mean")
    }

    // ---- reverse pass ----

    /// Accumulate dloss/dnode for every node, then report gradients for all
    /// registered parameters. Parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.apply_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let shape = self.nodes[*id].value.shape().to_vec();
                let t = match &grads[*id] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect();
        Ok(GradMap { entries })
    }

    fn apply_backward(&self, id: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let add_to = |grads: &mut [Option<Vec<Real>>], target: usize, n: usize, f: &mut dyn FnMut(&mut [Real])| {
            let slot = grads[target].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    add_to(grads, a, g.len(), &mut |ga| {
                        for (x, &gv) in ga.iter_mut().zip(g) {
                            *x += gv;
                        }
                    });
                }
                if self.needs(b) {
                    let bn = self.nodes[b].value.numel();
                    add_to(grads, b, bn, &mut |gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % bn] += gv;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let bn = tb.len();
                if self.needs(a) {
                    add_to(grads, a, ta.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i] += gv * tb[i % bn];
                        }
                    });
                }
                if self.needs(b) {
                    add_to(grads, b, bn, &mut |gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % bn] += gv * ta[i];
                        }
                    });
                }
            }
            Op::ScalarMul { a, c } => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    add_to(grads, a, g.len(), &mut |ga| {
                        for (x, &gv) in ga.iter_mut().zip(g) {
                            *x += c * gv;
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *tb.shape().last().unwrap();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let b_batched = tb.rank() > 2;
                if self.needs(a) {
                    add_to(grads, a, ta.numel(), &mut |ga| {
                        for s in 0..batch {
                            let g_slab = &g[s * m * n..(s + 1) * m * n];
                            let b_slab = if b_batched {
                                &tb.data()[s * k * n..(s + 1) * k * n]
                            } else {
                                tb.data()
                            };
                            mm_nt_accum(g_slab, b_slab, m, n, k, &mut ga[s * m * k..(s + 1) * m * k]);
                        }
                    });
                }
                if self.needs(b) {
                    add_to(grads, b, tb.numel(), &mut |gb| {
                        for s in 0..batch {
                            let a_slab = &ta.data()[s * m * k..(s + 1) * m * k];
                            let g_slab = &g[s * m * n..(s + 1) * m * n];
                            let gb_slab = if b_batched {
                                &mut gb[s * k * n..(s + 1) * k * n]
                            } else {
                                &mut gb[..]
                            };
                            mm_tn_accum(a_slab, g_slab, m, k, n, gb_slab);
                        }
                    });
                }
            }
            Op::Transpose { a, perm } => {
                let a = *a;
                if self.needs(a) {
                    // The adjoint flows through the inverse permutation.
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gt = Tensor::new(self.nodes[id].value.shape().to_vec(), g.to_vec()).unwrap();
                    let back = permute(&gt, &inv).unwrap();
                    add_to(grads, a, back.numel(), &mut |ga| {
                        for (x, &gv) in ga.iter_mut().zip(back.data()) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.needs(a) {
                    add_to(grads, a, g.len(), &mut |ga| {
                        for (x, &gv) in ga.iter_mut().zip(g) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row_out = out_shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let row_in = t.shape()[axis] * inner;
                    if self.needs(p) {
                        add_to(grads, p, t.numel(), &mut |gp| {
                            for o in 0..outer {
                                let src = &g[o * row_out + offset..o * row_out + offset + row_in];
                                for (x, &gv) in gp[o * row_in..(o + 1) * row_in].iter_mut().zip(src) {
                                    *x += gv;
                                }
                            }
                        });
                    }
                    offset += row_in;
                }
            }
            Op::Slice { a, axis, start } => {
                let (a, axis, start) = (*a, *axis, *start);
                if self.needs(a) {
                    let in_shape = self.nodes[a].value.shape();
                    let out_shape = self.nodes[id].value.shape();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let row_in = in_shape[axis] * inner;
                    let row_out = out_shape[axis] * inner;
                    add_to(grads, a, self.nodes[a].value.numel(), &mut |ga| {
                        for o in 0..outer {
                            let dst = &mut ga[o * row_in + start * inner..o * row_in + start * inner + row_out];
                            for (x, &gv) in dst.iter_mut().zip(&g[o * row_out..(o + 1) * row_out]) {
                                *x += gv;
                            }
                        }
                    });
                }
            }
            Op::Softmax { a, .. } => {
                let a = *a;
                if self.needs(a) {
                    let y = self.nodes[id].value.data();
                    let row = *self.nodes[id].value.shape().last().unwrap();
                    add_to(grads, a, y.len(), &mut |ga| {
                        for r in 0..y.len() / row {
                            let ys = &y[r * row..(r + 1) * row];
                            let gs = &g[r * row..(r + 1) * row];
                            let dot: Real = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                            for i in 0..row {
                                // Masked entries have y = 0, so they get 0.
                                ga[r * row + i] += ys[i] * (gs[i] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let x = self.nodes[a].value.data();
                let gw = self.nodes[gain].value.data();
                let d = gw.len();
                let rows = x.len() / d;
                if self.needs(a) {
                    add_to(grads, a, x.len(), &mut |ga| {
                        for r in 0..rows {
                            let xs = &x[r * d..(r + 1) * d];
                            let gs = &g[r * d..(r + 1) * d];
                            let (mean, inv_std) = row_moments(xs);
                            // dL/dx via the standard three-term layer-norm rule.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for i in 0..d {
                                let xhat = (xs[i] - mean) * inv_std;
                                let dxhat = gs[i] * gw[i];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let nd = d as Real;
                            for i in 0..d {
                                let xhat = (xs[i] - mean) * inv_std;
                                let dxhat = gs[i] * gw[i];
                                ga[r * d + i] +=
                                    inv_std * (dxhat - sum_dxhat / nd - xhat * sum_dxhat_xhat / nd);
                            }
                        }
                    });
                }
                if self.needs(gain) {
                    add_to(grads, gain, d, &mut |gg| {
                        for r in 0..rows {
                            let xs = &x[r * d..(r + 1) * d];
                            let gs = &g[r * d..(r + 1) * d];
                            let (mean, inv_std) = row_moments(xs);
                            for i in 0..d {
                                gg[i] += gs[i] * (xs[i] - mean) * inv_std;
                            }
                        }
                    });
                }
                if self.needs(bias) {
                    add_to(grads, bias, d, &mut |gb| {
                        for r in 0..rows {
                            for i in 0..d {
                                gb[i] += g[r * d + i];
                            }
                        }
                    });
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.needs(a) {
                    let x = self.nodes[a].value.data();
                    add_to(grads, a, x.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            if x[i] > 0.0 {
                                ga[i] += gv;
                            }
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                let a = *a;
                if self.needs(a) {
                    let y = self.nodes[id].value.data();
                    add_to(grads, a, y.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i] += gv * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Mish { a } => {
                let a = *a;
                if self.needs(a) {
                    let x = self.nodes[a].value.data();
                    add_to(grads, a, x.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i] += gv * mish_grad(x[i]);
                        }
                    });
                }
            }
            Op::Abs { a } => {
                let a = *a;
                if self.needs(a) {
                    let x = self.nodes[a].value.data();
                    add_to(grads, a, x.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            // Subgradient 0 at the kink.
                            ga[i] += gv * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
            }
            Op::Gather { table, indices } => {
                let table = *table;
                if self.needs(table) {
                    let d = self.nodes[table].value.shape()[1];
                    add_to(grads, table, self.nodes[table].value.numel(), &mut |gt| {
                        for (i, &idx) in indices.iter().enumerate() {
                            for j in 0..d {
                                gt[idx * d + j] += g[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                if self.needs(a) {
                    add_to(grads, a, mask.len(), &mut |ga| {
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i] += gv * mask[i];
                        }
                    });
                }
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let (tp, tt) = (self.nodes[pred].value.data(), self.nodes[target].value.data());
                let scale = g[0] * 2.0 / tp.len() as Real;
                if self.needs(pred) {
                    add_to(grads, pred, tp.len(), &mut |gp| {
                        for i in 0..tp.len() {
                            gp[i] += scale * (tp[i] - tt[i]);
                        }
                    });
                }
                if self.needs(target) {
                    add_to(grads, target, tt.len(), &mut |gt| {
                        for i in 0..tt.len() {
                            gt[i] -= scale * (tp[i] - tt[i]);
                        }
                    });
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = self.nodes[a].value.numel();
                    let gv = g[0] / n as Real;
                    add_to(grads, a, n, &mut |ga| {
                        for x in ga.iter_mut() {
                            *x += gv;
                        }
                    });
                }
            }
        }
    }
}

/// Mean and 1/sqrt(var + eps) of one feature row. The epsilon is tiny so a
/// normalized row really does have unit variance to ~1e-10, at the cost of
/// assuming rows are not exactly constant (true for randomly initialized
/// nets; a constant row would still be finite, just with a large inv_std).
fn row_moments(row: &[Real]) -> (Real, Real) {
    #[cfg(not(feature = "single-precision"))]
    const EPS: Real = 1e-12;
    #[cfg(feature = "single-precision")]
    const EPS: Real = 1e-6;
    let n = row.len() as Real;
    let mean = row.iter().sum::<Real>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut data = vec![0.0; t.numel()];
    // Walk the output in order, mapping each index back to the source.
    let rank = in_shape.len();
    let mut idx = vec![0usize; rank];
    for out_pos in 0..t.numel() {
        let mut rem = out_pos;
        for (axis, &os) in out_strides.iter().enumerate() {
            idx[axis] = rem / os;
            rem %= os;
        }
        let mut src = 0;
        for (axis, &p) in perm.iter().enumerate() {
            src += idx[axis] * in_strides[p];
        }
        data[out_pos] = t.data()[src];
    }
    Tensor::new(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn close(a: Real, b: Real) -> bool {
        (a - b).abs() <= 1e-10 * (1.0 as Real).max(a.abs()).max(b.abs())
    }

    #[test]
    fn mean_of_squares_gradient() {
        // loss = mean(x*x) with x = [1, 2] gives dloss/dx = 2x/2 = x.
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq).unwrap();
        assert!(close(tape.value(loss).item(), 2.5));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(3.0)).unwrap();
        let _unused = tape.param("y", &Tensor::new(vec![2], vec![5.0, 6.0]).unwrap()).unwrap();
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("y").unwrap().data(), &[0.0, 0.0]);
        assert!(close(grads.get("x").unwrap().data()[0], 6.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn bias_broadcast_gradient_sums_over_rows() {
        // y = x + b with x [2,3], b [3]; loss = mean(y) -> db = 2/6 each.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
        let b = tape.param("b", &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = tape.add(x, b).unwrap();
        let loss = tape.mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &gv in grads.get("b").unwrap().data() {
            assert!(close(gv, 2.0 / 6.0));
        }
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = mean(a @ b), a [1,2] = [1, 2], b [2,1] = [3, 4].
        // loss = 1*3 + 2*4 = 11; da = b^T, db = a^T.
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.param("b", &Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.mean(y).unwrap();
        assert!(close(tape.value(loss).item(), 11.0));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn batched_matmul_with_shared_rhs_accumulates() {
        // Two batch rows sharing one weight; dW sums both contributions.
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let w = tape.param("w", &Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap()).unwrap();
        let y = tape.matmul(a, w).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let loss = tape.mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_gradient_hand_case() {
        // y = softmax([0, 0]) = [0.5, 0.5]; pick g = [1, 0] via mean trick:
        // loss = mean(y * sel) with sel = [2, 0] so dL/dy = [1, 0].
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let sel = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap()).unwrap();
        let picked = tape.mul(y, sel).unwrap();
        let loss = tape.mean(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get("x").unwrap().data();
        assert!(close(gx[0], 0.25));
        assert!(close(gx[1], -0.25));
    }

    #[test]
    fn masked_softmax_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![3], vec![1.0, 9.0, 2.0]).unwrap()).unwrap();
        let mask = tape.constant(Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        let y = tape.softmax(x, Some(mask)).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        let loss = tape.mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[1], 0.0);
    }

    #[test]
    fn fully_masked_softmax_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mask = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(tape.softmax(x, Some(mask)), Err(Error::AllPositionsMasked)));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut tape = Tape::new();
        let mut rng = stream_rng(3, "ln-test");
        let x = tape.constant(Tensor::randn(&[4, 16], 2.5, &mut rng)).unwrap();
        let g = tape.constant(Tensor::full(&[16], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[16])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks_exact(16) {
            let mean: Real = row.iter().sum::<Real>() / 16.0;
            let var: Real = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / 16.0;
            assert!(mean.abs() < 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "row var {var}");
        }
    }

    #[test]
    fn concat_then_slice_round_trips_gradients() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.param("b", &Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        // Slice picks only b's first column; a must get zero gradient.
        let sl = tape.slice(cat, 1, 1, 1).unwrap();
        assert_eq!(tape.value(sl).data(), &[3.0, 5.0]);
        let loss = tape.mean(sl).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn transpose_reverses_itself_in_backward() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::new(vec![2, 3], (0..6).map(|v| v as Real).collect()).unwrap()).unwrap();
        let t = tape.transpose(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(t).shape(), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let loss = tape.mean(t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("a").unwrap().data().iter().all(|&v| close(v, 1.0 / 6.0)));
    }

    #[test]
    fn gather_scatters_gradients_to_rows() {
        let mut tape = Tape::new();
        let table = tape
            .param("t", &Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let out = tape.gather(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 2]);
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.mean(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Row 2 was looked up twice, row 1 never.
        assert_eq!(grads.get("t").unwrap().data(), &[1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0, 2.0 / 6.0, 2.0 / 6.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            tape.gather(table, &[3], &[1]),
            Err(Error::TimestepOutOfRange { t: 3, max: 2 })
        ));
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, "dropout");
        let x = tape.param("x", &Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = tape.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_entries_are_zero_or_inverse_keep() {
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, "dropout");
        let x = tape.constant(Tensor::full(&[1000], 1.0)).unwrap();
        let y = tape.dropout(x, 0.8, &mut rng).unwrap();
        let mut kept = 0;
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || close(v, 1.25));
            if v != 0.0 {
                kept += 1;
            }
        }
        // Rough binomial bounds for keep = 0.8, n = 1000.
        assert!((700..900).contains(&kept), "kept {kept}");
    }

    #[test]
    fn mse_gradient_hand_case() {
        let mut tape = Tape::new();
        let p = tape.param("p", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let t = tape.constant(Tensor::zeros(&[2])).unwrap();
        let loss = tape.mse(p, t).unwrap();
        assert!(close(tape.value(loss).item(), 2.5));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_across_shared_use() {
        // y = x * x reuses x twice; d/dx = 2x must come from both paths.
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(4.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(close(grads.get("x").unwrap().data()[0], 8.0));
    }

    #[test]
    fn non_finite_op_output_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::full(&[2], Real::MAX)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn global_norm_matches_hand_value() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()).unwrap();
        let y = tape.param("y", &Tensor::scalar(4.0)).unwrap();
        let xs = tape.mean(x).unwrap();
        let xs2 = tape.scalar_mul(xs, 2.0).unwrap();
        let prod = tape.mul(xs2, y).unwrap();
        // loss = (mean(x) * 2) * y -> dx = y = [4, 4] each * 1/2 ... compute:
        // mean(x) = 1.5, d mean/dx_i = 0.5; dloss/dx_i = 2 * y * 0.5 = 4.
        // dloss/dy = 2 * mean(x) = 3.
        let grads = tape.backward(prod).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[4.0, 4.0]);
        assert_eq!(grads.get("y").unwrap().data(), &[3.0]);
        let norm = grads.global_norm();
        assert!(close(norm, (16.0 as Real + 16.0 + 9.0).sqrt()));
    }
}
