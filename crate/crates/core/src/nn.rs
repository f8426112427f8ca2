//! Dense layers shared by the flow subnetworks and the energy networks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LipSwish,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::LipSwish => tape.lipswish(x),
        }
    }
}

/// Xavier/Glorot uniform initialization for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Parameter handles for one forward pass.
///
/// `trainable` decides whether parameters are recorded as differentiable leaves
/// or as constants; the order always follows the owning model's parameter list.
pub fn bind(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf((*p).clone())
            } else {
                tape.constant((*p).clone())
            }
        })
        .collect()
}

/// Runs a stack of linear layers whose parameter handles are laid out as
/// `[w0, b0, w1, b1, ...]`, applying `act` between layers but not after the last.
pub fn mlp_forward(
    tape: &mut Tape,
    handles: &[Var],
    x: Var,
    act: Activation,
) -> Result<Var, TensorError> {
    let layers = handles.len() / 2;
    let mut h = x;
    for (i, wb) in handles.chunks_exact(2).enumerate() {
        h = tape.affine(h, wb[0], wb[1])?;
        if i + 1 < layers {
            h = act.apply(tape, h);
        }
    }
    Ok(h)
}
