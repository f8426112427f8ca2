//! MCMC kernels for differentiable log-densities.
//!
//! Chains are advanced in lock-step so that one batched gradient evaluation
//! serves all of them, but every chain owns its RNG stream and step size.
//! Because the networks evaluate each row independently, running chains
//! together or one at a time yields bitwise-identical trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::ChainEnsemble;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unnormalized log-density with gradient, evaluated on a batch `[n, d]`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Per-row `log p̃` and `∇ log p̃` as `[n, d]`.
    fn log_density_and_grad(&self, positions: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// A log-density given by a per-point closure returning `(log p̃, ∇ log p̃)`.
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F> FnDensity<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, positions: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut values = Vec::with_capacity(positions.rows());
        let mut grads = Vec::with_capacity(positions.numel());
        for i in 0..positions.rows() {
            let (v, g) = (self.f)(positions.row_slice(i));
            values.push(v);
            grads.extend(g);
        }
        Ok((values, Tensor::new(positions.shape().to_vec(), grads)?))
    }
}

/// Standard normal `N(0, I_d)`.
pub fn standard_normal_density(dim: usize) -> FnDensity<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
    FnDensity::new(dim, |z: &[f64]| {
        (
            -0.5 * z.iter().map(|v| v * v).sum::<f64>(),
            z.iter().map(|v| -v).collect(),
        )
    })
}

pub const MIN_STEP_SIZE: f64 = 1e-6;
pub const MAX_STEP_SIZE: f64 = 1e2;

#[derive(Clone, Debug, PartialEq)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    /// MCMC transitions per sampling call during learning.
    pub steps_per_call: usize,
    pub initial_step_size: f64,
    pub target_accept: f64,
    /// Gain `κ` of the multiplicative rule `ε ← ε·exp(κ·(accepted − target))`.
    pub adapt_gain: f64,
    pub adapt: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 3,
            steps_per_call: 20,
            initial_step_size: 0.15,
            target_accept: 0.651,
            adapt_gain: 0.01,
            adapt: true,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 || self.steps_per_call == 0 {
            return Err(Error::InvalidParameter(
                "leapfrog steps and MCMC steps must be at least 1".into(),
            ));
        }
        if !(self.initial_step_size > 0.0) {
            return Err(Error::InvalidParameter("initial step size must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidParameter("target acceptance must lie in (0, 1)".into()));
        }
        if !(self.adapt_gain >= 0.0) {
            return Err(Error::InvalidParameter("adaptation gain must be non-negative".into()));
        }
        Ok(())
    }
}

/// State of one persistent chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub step_size: f64,
    pub proposals: u64,
    pub accepts: u64,
    pub divergences: u64,
    pub rng: ChaCha8Rng,
    /// `(log p̃, ∇ log p̃)` at `position` for the current target.
    cached: Option<(f64, Vec<f64>)>,
}

impl ChainState {
    /// Chain `index` draws from stream `index` of the generator seeded by `seed`.
    pub fn new(position: Vec<f64>, step_size: f64, seed: u64, index: usize) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        Ok(Self {
            position,
            step_size,
            proposals: 0,
            accepts: 0,
            divergences: 0,
            rng,
            cached: None,
        })
    }

    /// `count` chains started from `N(0, I_dim)`, each drawing its start from its own stream.
    pub fn from_prior(count: usize, dim: usize, step_size: f64, seed: u64) -> Result<Vec<Self>> {
        (0..count)
            .map(|i| {
                let mut s = Self::new(Vec::new(), step_size, seed, i)?;
                s.position = (0..dim).map(|_| s.rng.sample(StandardNormal)).collect();
                Ok(s)
            })
            .collect()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }

    /// Must be called whenever the target changes (e.g. after a parameter update).
    pub fn invalidate(&mut self) {
        self.cached = None;
    }

    pub fn set_position(&mut self, position: Vec<f64>) {
        self.position = position;
        self.cached = None;
    }
}

/// Result of one transition of one chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    pub divergent: bool,
    /// `log p̃` at the chain's position after the transition.
    pub log_density: f64,
}

fn stack(rows: &[&[f64]], dim: usize) -> Result<Tensor> {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

/// Evaluates the target on every row; a row that fails (non-finite input or
/// output) yields `None` instead of poisoning the batch.
fn evaluate_rows(target: &dyn LogDensity, rows: &[&[f64]]) -> Vec<Option<(f64, Vec<f64>)>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let dim = target.dim();
    let all_finite = rows.iter().all(|r| r.iter().all(|v| v.is_finite()));
    if all_finite {
        if let Ok(batch) = stack(rows, dim) {
            if let Ok((v, g)) = target.log_density_and_grad(&batch) {
                if v.iter().all(|x| x.is_finite()) && g.is_finite() {
                    return (0..rows.len())
                        .map(|i| Some((v[i], g.row_slice(i).to_vec())))
                        .collect();
                }
            }
        }
    }
    rows.iter()
        .map(|r| {
            if !r.iter().all(|v| v.is_finite()) {
                return None;
            }
            let t = stack(&[r], dim).ok()?;
            let (v, g) = target.log_density_and_grad(&t).ok()?;
            (v[0].is_finite() && g.is_finite()).then(|| (v[0], g.data().to_vec()))
        })
        .collect()
}

fn ensure_cached(states: &mut [ChainState], target: &dyn LogDensity) -> Result<()> {
    let missing: Vec<usize> = (0..states.len())
        .filter(|&i| states[i].cached.is_none())
        .collect();
    let rows: Vec<&[f64]> = missing.iter().map(|&i| states[i].position.as_slice()).collect();
    let evals = evaluate_rows(target, &rows);
    for (&i, e) in missing.iter().zip(evals) {
        match e {
            Some(c) => states[i].cached = Some(c),
            None => {
                return Err(Error::Chain {
                    chain: i,
                    source: Box::new(Error::non_finite(
                        "log-density at current position",
                        format!("{:?}", states[i].position),
                    )),
                })
            }
        }
    }
    Ok(())
}

fn check_dims(states: &[ChainState], target: &dyn LogDensity) -> Result<()> {
    for (i, s) in states.iter().enumerate() {
        if s.position.len() != target.dim() {
            return Err(Error::Chain {
                chain: i,
                source: Box::new(Error::Dimension {
                    expected: target.dim(),
                    got: s.position.len(),
                }),
            });
        }
    }
    Ok(())
}

/// One Metropolis-adjusted HMC transition for each chain (identity mass).
///
/// A proposal with a non-finite Hamiltonian is rejected and counted as a divergence.
pub fn hmc_step_batch(
    states: &mut [ChainState],
    target: &dyn LogDensity,
    config: &HmcConfig,
    adapt: bool,
) -> Result<Vec<StepOutcome>> {
    check_dims(states, target)?;
    ensure_cached(states, target)?;
    let m = states.len();
    let d = target.dim();

    let start: Vec<Vec<f64>> = states.iter().map(|s| s.position.clone()).collect();
    let momentum0: Vec<Vec<f64>> = states
        .iter_mut()
        .map(|s| (0..d).map(|_| s.rng.sample(StandardNormal)).collect())
        .collect();
    let eps: Vec<f64> = states.iter().map(|s| s.step_size).collect();

    let mut q = start.clone();
    let mut p = momentum0.clone();
    let mut grad: Vec<Vec<f64>> = states
        .iter()
        .map(|s| s.cached.as_ref().expect("cached").1.clone())
        .collect();
    let mut logp = vec![f64::NAN; m];
    let mut alive = vec![true; m];

    for l in 0..config.leapfrog_steps {
        for i in 0..m {
            if !alive[i] {
                continue;
            }
            let half = if l == 0 { 0.5 * eps[i] } else { eps[i] };
            for j in 0..d {
                p[i][j] += half * grad[i][j];
                q[i][j] += eps[i] * p[i][j];
            }
        }
        let live: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
        let rows: Vec<&[f64]> = live.iter().map(|&i| q[i].as_slice()).collect();
        let evals = evaluate_rows(target, &rows);
        for (&i, e) in live.iter().zip(evals) {
            match e {
                Some((v, g)) => {
                    logp[i] = v;
                    grad[i] = g;
                }
                None => alive[i] = false,
            }
        }
    }
    for i in 0..m {
        if alive[i] {
            for j in 0..d {
                p[i][j] += 0.5 * eps[i] * grad[i][j];
            }
        }
    }

    let mut outcomes = Vec::with_capacity(m);
    for (i, s) in states.iter_mut().enumerate() {
        let (logp0, _) = s.cached.as_ref().expect("cached");
        let kinetic = |v: &[f64]| 0.5 * v.iter().map(|x| x * x).sum::<f64>();
        let h_old = -logp0 + kinetic(&momentum0[i]);
        let h_new = -logp[i] + kinetic(&p[i]);
        let delta = h_old - h_new;
        let divergent = !alive[i] || !delta.is_finite();
        let accept_prob = if divergent { 0.0 } else { delta.exp().min(1.0) };
        let u: f64 = s.rng.random();
        let accepted = !divergent && u < accept_prob;

        s.proposals += 1;
        if divergent {
            s.divergences += 1;
        }
        if accepted {
            s.accepts += 1;
            s.position = std::mem::take(&mut q[i]);
            s.cached = Some((logp[i], std::mem::take(&mut grad[i])));
        }
        if adapt && config.adapt {
            let indicator = if accepted { 1.0 } else { 0.0 };
            s.step_size = (s.step_size * (config.adapt_gain * (indicator - config.target_accept)).exp())
                .clamp(MIN_STEP_SIZE, MAX_STEP_SIZE);
        }
        outcomes.push(StepOutcome {
            accepted,
            accept_prob,
            divergent,
            log_density: s.cached.as_ref().expect("cached").0,
        });
    }
    Ok(outcomes)
}

/// Single-chain form of [`hmc_step_batch`].
pub fn hmc_step(state: &mut ChainState, target: &dyn LogDensity, config: &HmcConfig) -> Result<StepOutcome> {
    Ok(hmc_step_batch(std::slice::from_mut(state), target, config, true)?[0])
}

/// Runs `steps` transitions of every chain (e.g. one learning iteration's worth).
pub fn hmc_sweep(
    states: &mut [ChainState],
    target: &dyn LogDensity,
    config: &HmcConfig,
    steps: usize,
    adapt: bool,
) -> Result<Vec<StepOutcome>> {
    let mut last = Vec::new();
    for _ in 0..steps {
        last = hmc_step_batch(states, target, config, adapt)?;
    }
    Ok(last)
}

/// Unadjusted overdamped Langevin: `z ← z + (ε²/2)·∇log p̃(z) + ε·ξ`.
pub fn langevin_step_batch(
    states: &mut [ChainState],
    target: &dyn LogDensity,
    step_size: f64,
) -> Result<Vec<StepOutcome>> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidParameter("Langevin step size must be positive".into()));
    }
    check_dims(states, target)?;
    ensure_cached(states, target)?;
    let d = target.dim();
    let drift = 0.5 * step_size * step_size;
    for s in states.iter_mut() {
        let g = &s.cached.as_ref().expect("cached").1;
        let next: Vec<f64> = (0..d)
            .map(|j| {
                let xi: f64 = s.rng.sample(StandardNormal);
                s.position[j] + drift * g[j] + step_size * xi
            })
            .collect();
        s.position = next;
        s.step_size = step_size;
        s.proposals += 1;
        s.accepts += 1;
        s.cached = None;
    }
    for (i, s) in states.iter().enumerate() {
        if s.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::Chain {
                chain: i,
                source: Box::new(Error::non_finite(
                    "Langevin update",
                    format!("position {:?}", s.position),
                )),
            });
        }
    }
    ensure_cached(states, target)?;
    Ok(states
        .iter()
        .map(|s| StepOutcome {
            accepted: true,
            accept_prob: 1.0,
            divergent: false,
            log_density: s.cached.as_ref().expect("cached").0,
        })
        .collect())
}

pub fn langevin_step(state: &mut ChainState, target: &dyn LogDensity, step_size: f64) -> Result<StepOutcome> {
    Ok(langevin_step_batch(std::slice::from_mut(state), target, step_size)?[0])
}

/// Transition kernel used by [`run_chains`].
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Hmc(HmcConfig),
    Langevin { step_size: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub record_every: usize,
    /// Steps discarded by diagnostics; HMC adaptation is frozen from here on.
    pub burn_in: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            record_every: 1,
            burn_in: 400,
        }
    }
}

/// Advances every chain `options.steps` times, recording the state after
/// every `record_every`-th step (`steps / record_every` records per chain).
pub fn run_chains(
    states: &mut [ChainState],
    target: &dyn LogDensity,
    kernel: &Kernel,
    options: &RunOptions,
) -> Result<ChainEnsemble> {
    if states.is_empty() {
        return Err(Error::InvalidParameter("need at least one chain".into()));
    }
    if options.record_every == 0 || options.steps < options.record_every {
        return Err(Error::InvalidParameter(
            "record_every must be in 1..=steps".into(),
        ));
    }
    if let Kernel::Hmc(c) = kernel {
        c.validate()?;
    }
    let m = states.len();
    let d = target.dim();
    let records = options.steps / options.record_every;
    let mut ensemble = ChainEnsemble::with_capacity(m, records, d, options.record_every);
    ensemble.burn_in = (options.burn_in / options.record_every).min(records.saturating_sub(1));

    let mut rows: Vec<Vec<(Vec<f64>, StepOutcome, f64)>> = vec![Vec::with_capacity(records); m];
    for step in 1..=options.steps {
        let outcomes = match kernel {
            Kernel::Hmc(c) => hmc_step_batch(states, target, c, step <= options.burn_in)?,
            Kernel::Langevin { step_size } => langevin_step_batch(states, target, *step_size)?,
        };
        if step % options.record_every == 0 {
            for (i, (s, o)) in states.iter().zip(outcomes).enumerate() {
                rows[i].push((s.position.clone(), o, s.step_size));
            }
        }
    }
    for (i, chain) in rows.into_iter().enumerate() {
        for (pos, o, eps) in chain {
            ensemble.push(i, &pos, o.accepted, eps, -o.log_density);
        }
    }
    Ok(ensemble)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnetizedConfig {
    /// Constant pull strength towards the anchor.
    pub gamma: f64,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for MagnetizedConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            steps: 1000,
            dt: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MagnetizedPath {
    /// Positions `z_0 = z1, z_1, ..., z_n`.
    pub positions: Vec<Vec<f64>>,
    /// `U(z_t) = log p̃(z_t)` along the path.
    pub log_density: Vec<f64>,
    pub distance_to_anchor: Vec<f64>,
}

/// Discretized Langevin dynamics on `U_γ(z) = U(z) − γ‖z − z*‖` with anchor
/// `z* = z2`, started at `z1`:
/// `z ← z + dt·(∇U(z) − γ·(z − z*)/‖z − z*‖) + √(2·dt)·ξ`.
///
/// The magnetization term is dropped for a step when `‖z − z*‖ < 1e-8`.
pub fn magnetized_path(
    z1: &[f64],
    z2: &[f64],
    target: &dyn LogDensity,
    config: &MagnetizedConfig,
) -> Result<MagnetizedPath> {
    let d = target.dim();
    if z1.len() != d || z2.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if z1.len() != d { z1.len() } else { z2.len() },
        });
    }
    if !(config.gamma >= 0.0) || config.steps == 0 || !(config.dt > 0.0) {
        return Err(Error::InvalidParameter(
            "magnetized path needs gamma >= 0, steps >= 1, dt > 0".into(),
        ));
    }
    let noise = (2.0 * config.dt).sqrt();
    let mut state = ChainState::new(z1.to_vec(), noise, config.seed, 0)?;
    let mut path = MagnetizedPath::default();
    let distance = |z: &[f64]| {
        z.iter()
            .zip(z2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for _ in 0..=config.steps {
        ensure_cached(std::slice::from_mut(&mut state), target)?;
        let (u, grad) = state.cached.clone().expect("cached");
        let dist = distance(&state.position);
        path.positions.push(state.position.clone());
        path.log_density.push(u);
        path.distance_to_anchor.push(dist);
        if path.positions.len() > config.steps {
            break;
        }
        let pull = if dist < 1e-8 { 0.0 } else { config.gamma / dist };
        let next: Vec<f64> = (0..d)
            .map(|j| {
                let xi: f64 = state.rng.sample(StandardNormal);
                let drift = grad[j] - pull * (state.position[j] - z2[j]);
                state.position[j] + config.dt * drift + noise * xi
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("magnetized update", format!("{:?}", state.position)));
        }
        state.set_position(next);
    }
    Ok(path)
}

/// Leapfrog integration of `L` steps from `(q, p)` with step `eps` (exposed for
/// reversibility and volume-preservation checks).
pub fn leapfrog(
    target: &dyn LogDensity,
    q: &[f64],
    p: &[f64],
    eps: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = q.len();
    let grad_at = |x: &[f64]| -> Result<Vec<f64>> {
        let (_, g) = target.log_density_and_grad(&Tensor::new(vec![1, d], x.to_vec())?)?;
        Ok(g.into_data())
    };
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut g = grad_at(&q)?;
    for _ in 0..steps {
        for j in 0..d {
            p[j] += 0.5 * eps * g[j];
            q[j] += eps * p[j];
        }
        g = grad_at(&q)?;
        for j in 0..d {
            p[j] += 0.5 * eps * g[j];
        }
    }
    Ok((q, p))
}
