//! Learning the correction network `f` on top of a frozen flow: maximum
//! likelihood with persistent latent-space HMC chains, and noise-contrastive
//! estimation against flow samples.

use rand::Rng;

use crate::autodiff::Tape;
use crate::energy::{EnergyModel, TiltedModel};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::samplers::{hmc_step_batch, ChainState, HmcConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NtTrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Data and synthesized batch size (also the number of persistent chains).
    pub batch_size: usize,
    pub hmc: HmcConfig,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
}

impl Default for NtTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40_000,
            adam: AdamConfig::with_lr(5e-5),
            batch_size: 64,
            hmc: HmcConfig::default(),
            clip_norm: Some(100.0),
            weight_decay: 0.0,
        }
    }
}

impl NtTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("iterations and batch size must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("weight decay must be non-negative".into()));
        }
        self.hmc.validate()
    }
}

/// Per-iteration training traces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NtTrace {
    /// `mean f(data) − mean f(synthesized)` before the update.
    pub energy_gap: Vec<f64>,
    /// Fraction of accepted proposals during the iteration's sampling phase.
    pub acceptance: Vec<f64>,
    /// Mean step size over chains after the sampling phase.
    pub step_size: Vec<f64>,
    pub divergences: Vec<u64>,
}

pub struct NtTrainReport {
    pub trace: NtTrace,
    /// Persistent chains after the last iteration.
    pub chains: Vec<ChainState>,
}

/// Gradient of `mean f(data) − mean f(synth)` with respect to the energy
/// parameters, and the value of that difference.
pub fn ebm_grad_estimate(energy: &EnergyModel, data: &Tensor, synth: &Tensor) -> Result<(Vec<Tensor>, f64)> {
    for b in [data, synth] {
        if b.rank() != 2 || b.cols() != energy.dim() {
            return Err(Error::Dimension {
                expected: energy.dim(),
                got: b.cols(),
            });
        }
    }
    let mut tape = Tape::new();
    let params = energy.bind(&mut tape, true);
    let xd = tape.constant(data.clone());
    let xs = tape.constant(synth.clone());
    let fd = energy.forward_tape(&mut tape, &params, xd)?;
    let fs = energy.forward_tape(&mut tape, &params, xs)?;
    let md = tape.mean(fd);
    let ms = tape.mean(fs);
    let gap = tape.sub(md, ms)?;
    let gap_value = tape.value(gap).item();
    if !gap_value.is_finite() {
        return Err(Error::non_finite("energy gap", "ebm_grad_estimate"));
    }
    let mut grads = tape.backward(gap)?;
    Ok((params.iter().map(|&p| grads.take(p)).collect(), gap_value))
}

fn check_data(data: &Tensor, dim: usize) -> Result<()> {
    if data.rank() != 2 || data.cols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: data.cols(),
        });
    }
    Ok(())
}

fn minibatch<R: Rng + ?Sized>(data: &Tensor, size: usize, rng: &mut R) -> Tensor {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.rows())).collect();
    data.gather_rows(&idx)
}

/// Ascends the log-likelihood by Adam on `−L(θ)` with optional clipping and decay.
fn apply_update(
    adam: &mut Adam,
    params: &mut [&mut Tensor],
    ascent: Vec<Tensor>,
    config_clip: Option<f64>,
    weight_decay: f64,
    iteration: usize,
) -> Result<()> {
    let mut descent: Vec<Tensor> = ascent
        .into_iter()
        .zip(params.iter())
        .map(|(g, p)| {
            let data = g
                .data()
                .iter()
                .zip(p.data())
                .map(|(gi, pi)| -gi + weight_decay * pi)
                .collect();
            Tensor::new(g.shape().to_vec(), data)
        })
        .collect::<std::result::Result<_, _>>()?;
    if descent.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("energy gradient", format!("iteration {iteration}")));
    }
    if let Some(c) = config_clip {
        clip_global_norm(&mut descent, c);
    }
    adam.step(params, &descent)?;
    Ok(())
}

/// Maximum-likelihood learning with neural-transport HMC.
///
/// Every iteration advances the persistent latent chains `K` HMC steps on
/// the current tilted target, pushes them through the flow, draws a data
/// minibatch and takes one Adam step along `E_data[∇f] − E_model[∇f]`.
/// Chains start from `N(0, I)` and the step size adapts throughout.
pub fn nt_ebm_train<R: Rng + ?Sized>(
    flow: &FlowModel,
    energy: &mut EnergyModel,
    data: &Tensor,
    config: &NtTrainConfig,
    rng: &mut R,
) -> Result<NtTrainReport> {
    config.validate()?;
    check_data(data, flow.dim())?;
    TiltedModel::new(flow, energy)?;
    let chain_seed: u64 = rng.random();
    let mut chains = ChainState::from_prior(
        config.batch_size,
        flow.dim(),
        config.hmc.initial_step_size,
        chain_seed,
    )?;
    let mut adam = Adam::new(config.adam, &energy.parameters());
    let mut trace = NtTrace::default();

    for it in 0..config.iterations {
        let before: (u64, u64, u64) = chains.iter().fold((0, 0, 0), |a, c| {
            (a.0 + c.proposals, a.1 + c.accepts, a.2 + c.divergences)
        });
        {
            let target = TiltedModel::new(flow, energy)?.latent();
            for c in chains.iter_mut() {
                c.invalidate();
            }
            for _ in 0..config.hmc.steps_per_call {
                hmc_step_batch(&mut chains, &target, &config.hmc, true)
                    .map_err(|e| Error::non_finite("HMC sampling", format!("iteration {it}: {e}")))?;
            }
        }
        let after: (u64, u64, u64) = chains.iter().fold((0, 0, 0), |a, c| {
            (a.0 + c.proposals, a.1 + c.accepts, a.2 + c.divergences)
        });

        let z = Tensor::new(
            vec![chains.len(), flow.dim()],
            chains.iter().flat_map(|c| c.position.iter().copied()).collect(),
        )?;
        let (synth, _) = flow.forward(&z)?;
        let batch = minibatch(data, config.batch_size, rng);
        let (grads, gap) = ebm_grad_estimate(energy, &batch, &synth)
            .map_err(|e| Error::non_finite("energy gradient", format!("iteration {it}: {e}")))?;
        apply_update(
            &mut adam,
            &mut energy.parameters_mut(),
            grads,
            config.clip_norm,
            config.weight_decay,
            it,
        )?;

        trace.energy_gap.push(gap);
        trace
            .acceptance
            .push((after.1 - before.1) as f64 / (after.0 - before.0).max(1) as f64);
        trace
            .step_size
            .push(chains.iter().map(|c| c.step_size).sum::<f64>() / chains.len() as f64);
        trace.divergences.push(after.2 - before.2);
    }
    for c in chains.iter_mut() {
        c.invalidate();
    }
    Ok(NtTrainReport { trace, chains })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceTrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Fraction of each batch drawn from the data.
    pub positive_fraction: f64,
    pub initial_bias: f64,
    pub clip_norm: Option<f64>,
}

impl Default for NceTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 80_000,
            adam: AdamConfig::with_lr(1e-5),
            batch_size: 128,
            positive_fraction: 0.5,
            initial_bias: 0.0,
            clip_norm: Some(100.0),
        }
    }
}

impl NceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size < 2 {
            return Err(Error::InvalidParameter(
                "NCE needs at least one iteration and a batch of at least 2".into(),
            ));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::InvalidParameter("positive fraction must lie in (0, 1)".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// `(positives, negatives)` per batch.
    pub fn split(&self) -> (usize, usize) {
        let pos = ((self.batch_size as f64 * self.positive_fraction).round() as usize)
            .clamp(1, self.batch_size - 1);
        (pos, self.batch_size - pos)
    }
}

pub struct NceTrainReport {
    /// Learned logit offset `b`; the classifier logit is `b + f(x)`.
    pub bias: f64,
    /// Per-sample binary cross-entropy of each batch.
    pub losses: Vec<f64>,
}

/// Noise-contrastive estimation: logistic regression of data (positives)
/// against flow samples (negatives) with logit `b + f(x)`.
pub fn nce_train<R: Rng + ?Sized>(
    flow: &FlowModel,
    energy: &mut EnergyModel,
    data: &Tensor,
    config: &NceTrainConfig,
    rng: &mut R,
) -> Result<NceTrainReport> {
    config.validate()?;
    check_data(data, flow.dim())?;
    TiltedModel::new(flow, energy)?;
    let (n_pos, n_neg) = config.split();
    let total = config.batch_size as f64;
    let mut bias = Tensor::full(&[1, 1], config.initial_bias);
    let mut adam = {
        let mut p = energy.parameters();
        p.push(&bias);
        Adam::new(config.adam, &p)
    };
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let pos = minibatch(data, n_pos, rng);
        let (_, neg) = flow.sample(n_neg, rng)?;

        let mut tape = Tape::new();
        let mut params = energy.bind(&mut tape, true);
        let b = tape.leaf(bias.clone());
        params.push(b);
        let energy_params = &params[..params.len() - 1];
        let xp = tape.constant(pos);
        let xn = tape.constant(neg);
        let fp = energy.forward_tape(&mut tape, energy_params, xp)?;
        let fn_ = energy.forward_tape(&mut tape, energy_params, xn)?;
        let lp = tape.add(fp, b)?;
        let ln = tape.add(fn_, b)?;
        // −log σ(l) on positives, −log(1 − σ(l)) = softplus(l) on negatives.
        let pos_term = tape.log_sigmoid(lp);
        let pos_sum = tape.sum(pos_term);
        let neg_term = tape.softplus(ln);
        let neg_sum = tape.sum(neg_term);
        let diff = tape.sub(neg_sum, pos_sum)?;
        let loss = tape.scale(diff, 1.0 / total);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::non_finite("NCE loss", format!("iteration {it}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = params.iter().map(|&p| grads.take(p)).collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::non_finite("NCE gradient", format!("iteration {it}")));
        }
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut g, c);
        }
        let mut targets = energy.parameters_mut();
        targets.push(&mut bias);
        adam.step(&mut targets, &g)?;
        losses.push(loss_value);
    }
    Ok(NceTrainReport {
        bias: bias.item(),
        losses,
    })
}
