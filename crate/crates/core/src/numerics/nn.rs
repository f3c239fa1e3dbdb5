//! Small building blocks shared by the policy and the critics: linear layers
//! and plain MLPs, with helpers to bind them onto a tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Mish,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Mish => tape.mish(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Mish => "mish",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "mish" => Ok(Activation::Mish),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// y = x W + b with W stored `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Gaussian weights with the given std, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, std: Real, rng: &mut impl Rng) -> Self {
        Self { w: Tensor::randn(&[fan_in, fan_out], std, rng), b: Tensor::zeros(&[fan_out]) }
    }

    /// Fan-in scaled init, the usual choice for the critic MLPs.
    pub fn kaiming(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::init(fan_in, fan_out, (1.0 / fan_in as Real).sqrt(), rng)
    }

    pub fn for_each_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn for_each_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn bind_linear(tape: &mut Tape, prefix: &str, l: &Linear) -> Result<LinearVars> {
    Ok(LinearVars {
        w: tape.param(&format!("{prefix}.w"), &l.w)?,
        b: tape.param(&format!("{prefix}.b"), &l.b)?,
    })
}

/// Bind a linear layer as constants: it participates in the forward pass but
/// receives no gradient (used when the critic scores policy actions).
pub fn bind_linear_frozen(tape: &mut Tape, l: &Linear) -> Result<LinearVars> {
    Ok(LinearVars { w: tape.constant(l.w.clone())?, b: tape.constant(l.b.clone())? })
}

pub fn linear(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    tape.add(y, l.b)
}

/// Fully connected stack: activation between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::kaiming(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn for_each_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.for_each_with(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn for_each_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut_with(&format!("{prefix}.{i}"), f);
        }
    }
}

pub struct MlpVars {
    pub layers: Vec<LinearVars>,
    pub activation: Activation,
}

pub fn bind_mlp(tape: &mut Tape, prefix: &str, mlp: &Mlp) -> Result<MlpVars> {
    let layers = mlp
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| bind_linear(tape, &format!("{prefix}.{i}"), l))
        .collect::<Result<_>>()?;
    Ok(MlpVars { layers, activation: mlp.activation })
}

pub fn bind_mlp_frozen(tape: &mut Tape, mlp: &Mlp) -> Result<MlpVars> {
    let layers = mlp.layers.iter().map(|l| bind_linear_frozen(tape, l)).collect::<Result<_>>()?;
    Ok(MlpVars { layers, activation: mlp.activation })
}

pub fn mlp_forward(tape: &mut Tape, x: Var, vars: &MlpVars) -> Result<Var> {
    let mut h = x;
    let last = vars.layers.len() - 1;
    for (i, l) in vars.layers.iter().enumerate() {
        h = linear(tape, h, l)?;
        if i < last {
            h = vars.activation.apply(tape, h)?;
        }
    }
    Ok(h)
}
