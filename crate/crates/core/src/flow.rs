//! Affine-coupling normalizing flow `x = g(z)` with a standard normal prior.
//!
//! The layer stack is stored in the normalizing direction (data to latent):
//! each step is an actnorm followed by an affine coupling. Coupling masks
//! alternate between even and odd coordinates from step to step, so every
//! coordinate is transformed conditioned on the other half at least every
//! second step. Log-scales of the couplings pass through `tanh`, which keeps
//! each layer's per-coordinate scale inside `(e^-1, e)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, mlp_forward, Activation, Linear};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::Tensor;

/// Named size presets for the flow backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSize {
    Small,
    Medium,
    Large,
}

impl FlowSize {
    /// `(depth, width)` for the preset.
    pub fn depth_width(self) -> (usize, usize) {
        match self {
            FlowSize::Small => (4, 128),
            FlowSize::Medium => (8, 128),
            FlowSize::Large => (16, 256),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "small" => Some(FlowSize::Small),
            "medium" => Some(FlowSize::Medium),
            "large" => Some(FlowSize::Large),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowSize::Small => "small",
            FlowSize::Medium => "medium",
            FlowSize::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    pub width: usize,
}

impl FlowConfig {
    pub fn preset(dim: usize, size: FlowSize) -> Self {
        let (depth, width) = size.depth_width();
        Self { dim, depth, width }
    }
}

/// Per-coordinate affine layer; normalizing direction `u = (x + bias) * exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    pub log_scale: Tensor,
    pub bias: Tensor,
    pub initialized: bool,
}

impl ActNorm {
    fn identity(dim: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(&[1, dim]),
            bias: Tensor::zeros(&[1, dim]),
            initialized: false,
        }
    }

    /// Sets bias and scale so that `batch` maps to zero mean, unit (population) variance.
    fn initialize_from(&mut self, batch: &Tensor) {
        let n = batch.rows() as f64;
        let d = batch.cols();
        for j in 0..d {
            let mean = (0..batch.rows()).map(|i| batch.row_slice(i)[j]).sum::<f64>() / n;
            let var = (0..batch.rows())
                .map(|i| (batch.row_slice(i)[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            self.bias.data_mut()[j] = -mean;
            self.log_scale.data_mut()[j] = -var.max(1e-12).sqrt().ln();
        }
        self.initialized = true;
    }
}

/// Affine coupling; coordinates with `mask = 1` pass through and condition the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub mask: Tensor,
    pub hidden: [Linear; 2],
    pub scale_head: Linear,
    pub shift_head: Linear,
}

impl Coupling {
    fn new<R: Rng + ?Sized>(dim: usize, width: usize, parity: usize, rng: &mut R) -> Self {
        let mask = (0..dim)
            .map(|j| if j % 2 == parity { 1.0 } else { 0.0 })
            .collect::<Vec<_>>();
        Self {
            mask: Tensor::row(&mask),
            hidden: [Linear::xavier(dim, width, rng), Linear::xavier(width, width, rng)],
            // Zero heads make every fresh coupling the identity map.
            scale_head: Linear::zeros(width, dim),
            shift_head: Linear::zeros(width, dim),
        }
    }

    fn params(&self) -> [&Tensor; 8] {
        [
            &self.hidden[0].weight,
            &self.hidden[0].bias,
            &self.hidden[1].weight,
            &self.hidden[1].bias,
            &self.scale_head.weight,
            &self.scale_head.bias,
            &self.shift_head.weight,
            &self.shift_head.bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 8] {
        let [h0, h1] = &mut self.hidden;
        [
            &mut h0.weight,
            &mut h0.bias,
            &mut h1.weight,
            &mut h1.bias,
            &mut self.scale_head.weight,
            &mut self.scale_head.bias,
            &mut self.shift_head.weight,
            &mut self.shift_head.bias,
        ]
    }

    /// Masked `(log_scale, shift)` computed from the pass-through half of `x`.
    fn scale_shift(&self, tape: &mut Tape, h: &[Var], x: Var) -> Result<(Var, Var)> {
        let mask = tape.constant(self.mask.clone());
        let inv_mask = tape.constant(self.mask.map(|m| 1.0 - m));
        let xa = tape.mul(x, mask)?;
        let hidden = mlp_forward(tape, &h[..4], xa, Activation::Tanh)?;
        let hidden = tape.tanh(hidden);
        let raw_s = tape.affine(hidden, h[4], h[5])?;
        let s = tape.tanh(raw_s);
        let s = tape.mul(s, inv_mask)?;
        let t = tape.affine(hidden, h[6], h[7])?;
        let t = tape.mul(t, inv_mask)?;
        Ok((s, t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub coupling: Coupling,
}

const PARAMS_PER_STEP: usize = 10;

impl FlowStep {
    /// One normalizing step; the log-det is `[n, 1]` (or `[1, 1]` broadcastable).
    fn inverse_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let (ls, bias) = (p[0], p[1]);
        let shifted = tape.add(x, bias)?;
        let scale = tape.exp(ls);
        let h = tape.mul(shifted, scale)?;
        let actnorm_ld = tape.row_sum(ls);

        let (s, t) = self.coupling.scale_shift(tape, &p[2..], h)?;
        let es = tape.exp(s);
        let scaled = tape.mul(h, es)?;
        let out = tape.add(scaled, t)?;
        let coupling_ld = tape.row_sum(s);
        Ok((out, tape.add(coupling_ld, actnorm_ld)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    pub steps: Vec<FlowStep>,
}

/// `log N(z; 0, I)` for one row.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// Tape version of [`log_standard_normal`], `[n, d] -> [n, 1]`.
pub fn log_standard_normal_tape(tape: &mut Tape, z: Var) -> Var {
    let d = tape.value(z).cols() as f64;
    let sq = tape.row_sq_norm(z);
    let half = tape.scale(sq, -0.5);
    tape.add_scalar(half, -0.5 * d * (2.0 * PI).ln())
}

impl FlowModel {
    /// Identity-initialized flow: actnorm scale 1 and bias 0, zero coupling heads.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::InvalidParameter("flow dimension must be positive".into()));
        }
        if config.depth > 0 && config.width == 0 {
            return Err(Error::InvalidParameter("flow width must be positive".into()));
        }
        let steps = (0..config.depth)
            .map(|k| FlowStep {
                actnorm: ActNorm::identity(config.dim),
                coupling: Coupling::new(config.dim, config.width, k % 2, rng),
            })
            .collect();
        Ok(Self { config, steps })
    }

    pub fn config(&self) -> FlowConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.steps.len() * PARAMS_PER_STEP);
        for s in &self.steps {
            out.push(&s.actnorm.log_scale);
            out.push(&s.actnorm.bias);
            out.extend(s.coupling.params());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.steps.len() * PARAMS_PER_STEP);
        for s in &mut self.steps {
            out.push(&mut s.actnorm.log_scale);
            out.push(&mut s.actnorm.bias);
            out.extend(s.coupling.params_mut());
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        const SUFFIX: [&str; PARAMS_PER_STEP] = [
            "actnorm.log_scale",
            "actnorm.bias",
            "coupling.hidden0.weight",
            "coupling.hidden0.bias",
            "coupling.hidden1.weight",
            "coupling.hidden1.bias",
            "coupling.scale.weight",
            "coupling.scale.bias",
            "coupling.shift.weight",
            "coupling.shift.bias",
        ];
        (0..self.steps.len())
            .flat_map(|k| SUFFIX.iter().map(move |s| format!("flow.step{k}.{s}")))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(tape, &self.parameters(), trainable)
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        if t.rank() != 2 || t.cols() != self.config.dim {
            return Err(Error::Dimension {
                expected: self.config.dim,
                got: t.cols(),
            });
        }
        Ok(())
    }

    /// Normalizing direction on a tape: returns `z = g^-1(x)` and per-row
    /// `log|det dg^-1/dx|` as `[n, 1]`.
    pub fn inverse_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).rows();
        let mut logdet = tape.constant(Tensor::zeros(&[n, 1]));
        let mut h = x;
        for (step, p) in self.steps.iter().zip(params.chunks_exact(PARAMS_PER_STEP)) {
            let (out, ld) = step.inverse_tape(tape, p, h)?;
            h = out;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }

    /// Generative direction on a tape: returns `x = g(z)` and per-row
    /// `log|det dg/dz|` as `[n, 1]`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], z: Var) -> Result<(Var, Var)> {
        let n = tape.value(z).rows();
        let mut logdet = tape.constant(Tensor::zeros(&[n, 1]));
        let mut h = z;
        for (step, p) in self
            .steps
            .iter()
            .zip(params.chunks_exact(PARAMS_PER_STEP))
            .rev()
        {
            let (s, t) = step.coupling.scale_shift(tape, &p[2..], h)?;
            let centered = tape.sub(h, t)?;
            let neg_s = tape.neg(s);
            let inv_scale = tape.exp(neg_s);
            h = tape.mul(centered, inv_scale)?;
            let ld = tape.row_sum(neg_s);
            logdet = tape.add(logdet, ld)?;

            let (ls, bias) = (p[0], p[1]);
            let neg_ls = tape.neg(ls);
            let inv = tape.exp(neg_ls);
            let unscaled = tape.mul(h, inv)?;
            h = tape.sub(unscaled, bias)?;
            let ld = tape.row_sum(neg_ls);
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }

    /// `log q(x)` on a tape, `[n, 1]`.
    pub fn log_prob_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let (z, logdet) = self.inverse_tape(tape, params, x)?;
        let prior = log_standard_normal_tape(tape, z);
        Ok(tape.add(prior, logdet)?)
    }

    /// `x = g(z)` with per-row `log|det dg/dz|`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(z)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (x, ld) = self.forward_tape(&mut tape, &params, zv)?;
        let x = tape.value(x).clone();
        x.check_finite("flow forward")?;
        Ok((x, tape.value(ld).data().to_vec()))
    }

    /// `z = g^-1(x)` with per-row `log|det dg^-1/dx|`.
    pub fn inverse(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(x)?;
        x.check_finite("flow inverse input")?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (z, ld) = self.inverse_tape(&mut tape, &params, xv)?;
        let z = tape.value(z).clone();
        let ld = tape.value(ld).data().to_vec();
        if !z.is_finite() || ld.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("latent code", "flow inverse (exploded scales?)"));
        }
        Ok((z, ld))
    }

    /// `log q(x) = log q0(g^-1(x)) + log|det dg^-1/dx|` per row.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(x)?;
        Ok((0..z.rows())
            .map(|i| log_standard_normal(z.row_slice(i)) + ld[i])
            .collect())
    }

    /// Ancestral sampling: `z ~ N(0, I)`, `x = g(z)`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        if count == 0 {
            return Err(Error::InvalidParameter("sample count must be positive".into()));
        }
        let z = standard_normal(count, self.config.dim, rng);
        let (x, _) = self.forward(&z)?;
        Ok((z, x))
    }

    /// Data-dependent actnorm initialization: each uninitialized actnorm is
    /// fitted to the batch as it arrives at that layer.
    pub fn initialize_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for k in 0..self.steps.len() {
            if !self.steps[k].actnorm.initialized {
                self.steps[k].actnorm.initialize_from(&h);
            }
            let mut tape = Tape::new();
            let params = bind(
                &mut tape,
                &self.parameters()[k * PARAMS_PER_STEP..(k + 1) * PARAMS_PER_STEP],
                false,
            );
            let hv = tape.constant(h);
            let (out, _) = self.steps[k].inverse_tape(&mut tape, &params, hv)?;
            h = tape.value(out).clone();
        }
        Ok(())
    }

    pub fn mark_initialized(&mut self) {
        for s in &mut self.steps {
            s.actnorm.initialized = true;
        }
    }
}

/// `[count, dim]` matrix of i.i.d. standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..count * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![count, dim], data).expect("standard_normal shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 256,
            adam: AdamConfig::with_lr(1e-3),
            clip_norm: Some(100.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowTrainReport {
    /// Mean negative log-likelihood of each minibatch.
    pub losses: Vec<f64>,
}

impl FlowTrainReport {
    /// Mean loss over consecutive windows of `window` iterations.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Maximum-likelihood fit of the flow, minimizing the minibatch NLL with Adam.
/// Minibatches are drawn uniformly with replacement.
pub fn train_flow_mle<R: Rng + ?Sized>(
    model: &mut FlowModel,
    data: &Tensor,
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<FlowTrainReport> {
    model.check_input(data)?;
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let n = data.rows();
    let draw = |rng: &mut R| -> Tensor {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        data.gather_rows(&idx)
    };

    let first = draw(rng);
    model.initialize_actnorm(&first)?;
    let mut adam = Adam::new(config.adam, &model.parameters());
    let mut report = FlowTrainReport::default();
    let mut batch = Some(first);

    for it in 0..config.iterations {
        let x = batch.take().unwrap_or_else(|| draw(rng));
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let logq = model.log_prob_tape(&mut tape, &params, xv)?;
        let mean = tape.mean(logq);
        let loss = tape.neg(mean);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::non_finite("flow NLL", format!("batch {it}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = params.iter().map(|&p| grads.take(p)).collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::non_finite("flow gradient", format!("batch {it}")));
        }
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut g, c);
        }
        adam.step(&mut model.parameters_mut(), &g)?;
        report.losses.push(loss_value);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Flow with random (non-identity) parameters everywhere.
    pub(crate) fn random_flow(dim: usize, depth: usize, width: usize, seed: u64) -> FlowModel {
        let mut r = rng(seed);
        let mut f = FlowModel::new(FlowConfig { dim, depth, width }, &mut r).unwrap();
        for p in f.parameters_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.5..0.5);
            }
        }
        f.mark_initialized();
        f
    }

    #[test]
    fn identity_init_is_identity() {
        let f = FlowModel::new(FlowConfig::preset(2, FlowSize::Small), &mut rng(1)).unwrap();
        let (z, x) = f.sample(5, &mut rng(2)).unwrap();
        assert_eq!(z, x);
        let (z2, ld) = f.inverse(&x).unwrap();
        assert_eq!(z2, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        let lp = f.log_prob(&x).unwrap();
        for i in 0..5 {
            assert!((lp[i] - log_standard_normal(x.row_slice(i))).abs() < 1e-15);
        }
    }

    #[test]
    fn masks_alternate() {
        let f = FlowModel::new(FlowConfig { dim: 4, depth: 3, width: 8 }, &mut rng(0)).unwrap();
        let m: Vec<_> = f.steps.iter().map(|s| s.coupling.mask.data().to_vec()).collect();
        assert_eq!(m[0], vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m[1], vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m[2], m[0]);
    }

    #[test]
    fn round_trip_and_logdet_consistency() {
        let f = random_flow(3, 4, 16, 7);
        let z = standard_normal(20, 3, &mut rng(3));
        let (x, ld_fwd) = f.forward(&z).unwrap();
        let (z2, ld_inv) = f.inverse(&x).unwrap();
        assert!(z.max_abs_diff(&z2) <= 1e-9);
        for (a, b) in ld_fwd.iter().zip(&ld_inv) {
            assert!((a + b).abs() <= 1e-9);
        }
        let (x2, _) = f.forward(&z2).unwrap();
        assert!(x.max_abs_diff(&x2) <= 1e-9);
    }

    #[test]
    fn pure_scaling_change_of_variable() {
        // Single actnorm with scale c = 2 in the generative direction, zero coupling.
        let mut f = FlowModel::new(FlowConfig { dim: 2, depth: 1, width: 4 }, &mut rng(0)).unwrap();
        let c: f64 = 2.0;
        f.steps[0].actnorm.log_scale = Tensor::row(&[-c.ln(), -c.ln()]);
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let lp = f.log_prob(&x).unwrap();
        for i in 0..2 {
            let r = x.row_slice(i);
            let expected = log_standard_normal(&[r[0] / c, r[1] / c]) - 2.0 * c.ln();
            assert!((lp[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn actnorm_data_init_standardizes_batch() {
        let mut r = rng(5);
        let mut f = FlowModel::new(FlowConfig { dim: 2, depth: 1, width: 4 }, &mut r).unwrap();
        let raw = standard_normal(500, 2, &mut r);
        let batch = Tensor::new(
            vec![500, 2],
            raw.data()
                .chunks(2)
                .flat_map(|p| [3.0 * p[0] + 5.0, 0.2 * p[1] - 1.0])
                .collect(),
        )
        .unwrap();
        f.initialize_actnorm(&batch).unwrap();
        let (z, _) = f.inverse(&batch).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..500).map(|i| z.row_slice(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        let expected_ld: f64 = f.steps[0].actnorm.log_scale.data().iter().sum();
        let (_, ld) = f.inverse(&batch).unwrap();
        assert!((ld[0] - expected_ld).abs() < 1e-12);
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let f = random_flow(2, 2, 8, 11);
        let count = 4000;
        let (z, _) = f.sample(count, &mut rng(9)).unwrap();
        for j in 0..2 {
            let m = (0..count).map(|i| z.row_slice(i)[j]).sum::<f64>() / count as f64;
            assert!(m.abs() < 4.0 / (count as f64).sqrt());
        }
        assert!(f.sample(0, &mut rng(9)).is_err());
    }

    #[test]
    fn inverse_rejects_non_finite_and_wrong_dim() {
        let f = random_flow(2, 2, 8, 11);
        assert!(f.inverse(&Tensor::row(&[f64::NAN, 0.0])).is_err());
        assert!(matches!(
            f.inverse(&Tensor::row(&[0.0, 0.0, 0.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn standard_normal_data_keeps_prior_entropy() {
        let mut r = rng(21);
        let mut f = FlowModel::new(FlowConfig { dim: 2, depth: 2, width: 16 }, &mut r).unwrap();
        let data = standard_normal(4000, 2, &mut r);
        let cfg = FlowTrainConfig {
            iterations: 200,
            batch_size: 128,
            ..Default::default()
        };
        let report = train_flow_mle(&mut f, &data, &cfg, &mut r).unwrap();
        let entropy = 1.0 + (2.0 * PI).ln(); // d/2 * (1 + ln 2pi) with d = 2
        let tail = report.losses[150..].iter().sum::<f64>() / 50.0;
        assert!((tail - entropy).abs() < 0.1, "tail NLL {tail}");
    }
}
