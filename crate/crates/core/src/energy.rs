//! The correction network `f` and the tilted densities it induces on top of a
//! frozen flow:
//!
//! * data space: `log p(x) = f(x) + log q(x) + const`
//! * latent space: `log p(z) = f(g(z)) + log N(z; 0, I) + const`
//!
//! The latent form needs neither the flow inverse nor its Jacobian, which is
//! what makes it cheap to sample with gradient-based MCMC.

use rand::Rng;

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{log_standard_normal_tape, FlowModel};
use crate::nn::{bind, mlp_forward, xavier_uniform, Activation};
use crate::samplers::LogDensity;
use crate::tensor::Tensor;

/// Shape of the energy network.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyArch {
    /// `f ≡ 0`.
    Zero,
    /// `f(x) = w·x + c`.
    Linear,
    /// `f(x) = w·x + q·(x ⊙ x) + c`, the exponential family with Gaussian statistics.
    Quadratic,
    /// Perceptron with LipSwish activations and a scalar linear readout.
    Mlp { hidden: Vec<usize> },
    /// Strided convolution stack for `height × width × channels` images
    /// (flattened height-width-channel), LipSwish activations, then a dense readout.
    Conv {
        height: usize,
        width: usize,
        channels: usize,
        filters: usize,
    },
}

impl EnergyArch {
    /// Three hidden layers of 128 units.
    pub fn default_mlp() -> Self {
        EnergyArch::Mlp {
            hidden: vec![128, 128, 128],
        }
    }

    fn conv_geometries(&self) -> Vec<(ConvGeometry, usize)> {
        let EnergyArch::Conv {
            height,
            width,
            channels,
            filters,
        } = *self
        else {
            return Vec::new();
        };
        let first = ConvGeometry {
            in_h: height,
            in_w: width,
            in_c: channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut out = vec![(first, filters)];
        let mut prev = (first, filters);
        for mult in [2, 4] {
            let g = ConvGeometry {
                in_h: prev.0.out_h(),
                in_w: prev.0.out_w(),
                in_c: prev.1,
                kernel: 4,
                stride: 2,
                pad: 1,
            };
            out.push((g, filters * mult));
            prev = (g, filters * mult);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    arch: EnergyArch,
    dim: usize,
    params: Vec<Tensor>,
}

impl EnergyModel {
    pub fn new<R: Rng + ?Sized>(arch: EnergyArch, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("energy input dimension must be positive".into()));
        }
        let params = match &arch {
            EnergyArch::Zero => Vec::new(),
            EnergyArch::Linear => vec![Tensor::zeros(&[dim, 1]), Tensor::zeros(&[1, 1])],
            EnergyArch::Quadratic => vec![
                Tensor::zeros(&[dim, 1]),
                Tensor::zeros(&[dim, 1]),
                Tensor::zeros(&[1, 1]),
            ],
            EnergyArch::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::InvalidParameter("hidden widths must be positive".into()));
                }
                let mut sizes = vec![dim];
                sizes.extend(hidden);
                sizes.push(1);
                sizes
                    .windows(2)
                    .flat_map(|w| [xavier_uniform(w[0], w[1], rng), Tensor::zeros(&[1, w[1]])])
                    .collect()
            }
            EnergyArch::Conv {
                height,
                width,
                channels,
                filters,
            } => {
                if height * width * channels != dim || *filters == 0 {
                    return Err(Error::InvalidParameter(format!(
                        "conv energy expects {height}x{width}x{channels} = {dim} inputs"
                    )));
                }
                let geoms = arch.conv_geometries();
                if geoms.iter().any(|(g, _)| g.out_h() == 0 || g.out_w() == 0) {
                    return Err(Error::InvalidParameter("image too small for conv stack".into()));
                }
                let mut p = Vec::new();
                for (g, out_c) in &geoms {
                    p.push(xavier_uniform(g.patch_len(), *out_c, rng));
                    p.push(Tensor::zeros(&[1, *out_c]));
                }
                let (last, c) = geoms[geoms.len() - 1];
                let flat = last.out_h() * last.out_w() * c;
                p.push(xavier_uniform(flat, 1, rng));
                p.push(Tensor::zeros(&[1, 1]));
                p
            }
        };
        Ok(Self { arch, dim, params })
    }

    pub fn arch(&self) -> &EnergyArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        match self.arch {
            EnergyArch::Zero => Vec::new(),
            EnergyArch::Linear => vec!["energy.weight".into(), "energy.bias".into()],
            EnergyArch::Quadratic => vec![
                "energy.weight".into(),
                "energy.quadratic".into(),
                "energy.bias".into(),
            ],
            EnergyArch::Mlp { .. } | EnergyArch::Conv { .. } => (0..self.params.len() / 2)
                .flat_map(|i| [format!("energy.layer{i}.weight"), format!("energy.layer{i}.bias")])
                .collect(),
        }
    }

    /// The readout bias; adding to it shifts `f` by a constant.
    pub fn output_bias_mut(&mut self) -> Option<&mut f64> {
        self.params.last_mut().map(|t| &mut t.data_mut()[0])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(tape, &self.parameters(), trainable)
    }

    /// `f(x)` as `[n, 1]`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let out = match &self.arch {
            EnergyArch::Zero => tape.constant(Tensor::zeros(&[n, 1])),
            EnergyArch::Linear => tape.affine(x, params[0], params[1])?,
            EnergyArch::Quadratic => {
                let lin = tape.affine(x, params[0], params[2])?;
                let sq = tape.mul(x, x)?;
                let quad = tape.matmul(sq, params[1])?;
                tape.add(lin, quad)?
            }
            EnergyArch::Mlp { .. } => mlp_forward(tape, params, x, Activation::LipSwish)?,
            EnergyArch::Conv { .. } => {
                let mut h = x;
                for ((g, out_c), wb) in self.arch.conv_geometries().into_iter().zip(params.chunks(2))
                {
                    let patches = tape.im2col(h, g)?;
                    let y = tape.affine(patches, wb[0], wb[1])?;
                    let y = tape.lipswish(y);
                    h = tape.reshape(y, vec![n, g.out_h() * g.out_w() * out_c])?;
                }
                let k = params.len();
                tape.affine(h, params[k - 2], params[k - 1])?
            }
        };
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `f(x)` per row.
    pub fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_tape(&mut tape, &params, xv)?;
        let f = tape.value(f).data().to_vec();
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("energy output", "evaluate"));
        }
        Ok(f)
    }

    /// `f(x)` per row and `∇_x f` as `[n, d]`.
    pub fn grad_x(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone());
        let f = self.forward_tape(&mut tape, &params, xv)?;
        let values = tape.value(f).data().to_vec();
        let root = tape.sum(f);
        let g = tape.backward(root)?.wrt(xv);
        if !g.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("energy gradient", "grad_x"));
        }
        Ok((values, g))
    }
}

/// An energy network tilting a frozen flow.
#[derive(Clone, Copy, Debug)]
pub struct TiltedModel<'a> {
    pub flow: &'a FlowModel,
    pub energy: &'a EnergyModel,
}

impl<'a> TiltedModel<'a> {
    pub fn new(flow: &'a FlowModel, energy: &'a EnergyModel) -> Result<Self> {
        if flow.dim() != energy.dim() {
            return Err(Error::Dimension {
                expected: flow.dim(),
                got: energy.dim(),
            });
        }
        Ok(Self { flow, energy })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn check(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.rank() != 2 || t.cols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: t.cols(),
            });
        }
        if !t.is_finite() {
            return Err(Error::non_finite(what.to_string(), "tilted model input"));
        }
        Ok(())
    }

    /// Builds `f(g(z)) + log q0(z)` on `tape` with `z` either a leaf or constant.
    fn latent_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let fp = self.flow.bind(tape, false);
        let ep = self.energy.bind(tape, false);
        let (x, _) = self.flow.forward_tape(tape, &fp, z)?;
        let f = self.energy.forward_tape(tape, &ep, x)?;
        let prior = log_standard_normal_tape(tape, z);
        Ok(tape.add(f, prior)?)
    }

    fn data_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let fp = self.flow.bind(tape, false);
        let ep = self.energy.bind(tape, false);
        let logq = self.flow.log_prob_tape(tape, &fp, x)?;
        let f = self.energy.forward_tape(tape, &ep, x)?;
        Ok(tape.add(f, logq)?)
    }

    /// Unnormalized `log p(z) = f(g(z)) + log q0(z)` per row.
    pub fn log_p_z_unnorm(&self, z: &Tensor) -> Result<Vec<f64>> {
        self.check(z, "z")?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.latent_tape(&mut tape, zv)?;
        finite_rows(tape.value(out), "log p(z)")
    }

    /// Unnormalized `log p(x) = f(x) + log q(x)` per row.
    pub fn log_p_x_unnorm(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check(x, "x")?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.data_tape(&mut tape, xv)?;
        finite_rows(tape.value(out), "log p(x)")
    }

    /// `log p(z)` per row and `∇_z log p(z)` as `[n, d]`.
    pub fn grad_z_log_p(&self, z: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check(z, "z")?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let out = self.latent_tape(&mut tape, zv)?;
        value_and_grad(&mut tape, out, zv, "grad_z log p")
    }

    /// `log p(x)` per row and `∇_x log p(x)` as `[n, d]`.
    pub fn grad_x_log_p(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check(x, "x")?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.data_tape(&mut tape, xv)?;
        value_and_grad(&mut tape, out, xv, "grad_x log p")
    }

    /// Sampling target `p(z)` in the flow's latent space.
    pub fn latent(self) -> LatentTarget<'a> {
        LatentTarget(self)
    }

    /// Sampling target `p(x)` directly in data space.
    pub fn data(self) -> DataTarget<'a> {
        DataTarget(self)
    }
}

fn finite_rows(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    if !t.is_finite() {
        return Err(Error::non_finite(what.to_string(), "network output"));
    }
    Ok(t.data().to_vec())
}

fn value_and_grad(tape: &mut Tape, out: Var, wrt: Var, what: &str) -> Result<(Vec<f64>, Tensor)> {
    let values = finite_rows(tape.value(out), what)?;
    let root = tape.sum(out);
    let g = tape.backward(root)?.wrt(wrt);
    if !g.is_finite() {
        return Err(Error::non_finite(what.to_string(), "gradient"));
    }
    Ok((values, g))
}

#[derive(Clone, Copy, Debug)]
pub struct LatentTarget<'a>(pub TiltedModel<'a>);

#[derive(Clone, Copy, Debug)]
pub struct DataTarget<'a>(pub TiltedModel<'a>);

impl LogDensity for LatentTarget<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density_and_grad(&self, positions: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.0.grad_z_log_p(positions)
    }
}

impl LogDensity for DataTarget<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density_and_grad(&self, positions: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.0.grad_x_log_p(positions)
    }
}
