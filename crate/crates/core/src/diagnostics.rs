//! Mixing diagnostics for ensembles of Markov chains and density comparisons on 2-D grids.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// `m` chains × `n` recorded steps × `d` coordinates, with per-step scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainEnsemble {
    dim: usize,
    /// Sampler steps between consecutive records.
    stride: usize,
    /// Number of leading records discarded by the diagnostics.
    pub burn_in: usize,
    positions: Vec<Vec<f64>>,
    energies: Vec<Vec<f64>>,
    accepted: Vec<Vec<bool>>,
    step_sizes: Vec<Vec<f64>>,
}

impl ChainEnsemble {
    pub fn with_capacity(chains: usize, records: usize, dim: usize, stride: usize) -> Self {
        Self {
            dim,
            stride,
            burn_in: 0,
            positions: (0..chains).map(|_| Vec::with_capacity(records * dim)).collect(),
            energies: (0..chains).map(|_| Vec::with_capacity(records)).collect(),
            accepted: (0..chains).map(|_| Vec::with_capacity(records)).collect(),
            step_sizes: (0..chains).map(|_| Vec::with_capacity(records)).collect(),
        }
    }

    /// Ensemble with unit stride and no per-step metadata (energies 0, all accepted).
    pub fn from_positions(chains: Vec<Vec<Vec<f64>>>, burn_in: usize) -> Result<Self> {
        let dim = chains
            .first()
            .and_then(|c| c.first())
            .map(|p| p.len())
            .ok_or_else(|| Error::Diagnostics("empty ensemble".into()))?;
        let mut e = Self::with_capacity(chains.len(), chains[0].len(), dim, 1);
        for (i, chain) in chains.iter().enumerate() {
            for p in chain {
                if p.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: p.len(),
                    });
                }
                e.push(i, p, true, 0.0, 0.0);
            }
        }
        e.burn_in = burn_in;
        e.validate()?;
        Ok(e)
    }

    pub fn push(&mut self, chain: usize, position: &[f64], accepted: bool, step_size: f64, energy: f64) {
        debug_assert_eq!(position.len(), self.dim);
        self.positions[chain].extend_from_slice(position);
        self.accepted[chain].push(accepted);
        self.step_sizes[chain].push(step_size);
        self.energies[chain].push(energy);
    }

    /// Checks that chains are equally long and that burn-in leaves at least one record.
    pub fn validate(&self) -> Result<()> {
        if self.chains() == 0 {
            return Err(Error::Diagnostics("empty ensemble".into()));
        }
        let n = self.energies[0].len();
        if self.energies.iter().any(|c| c.len() != n) {
            return Err(Error::Diagnostics("chains have different lengths".into()));
        }
        if self.burn_in >= n {
            return Err(Error::Diagnostics(format!(
                "burn-in {} leaves no records out of {n}",
                self.burn_in
            )));
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.energies.len()
    }

    /// Records per chain.
    pub fn len(&self) -> usize {
        self.energies.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn position(&self, chain: usize, record: usize) -> &[f64] {
        &self.positions[chain][record * self.dim..(record + 1) * self.dim]
    }

    pub fn energy(&self, chain: usize) -> &[f64] {
        &self.energies[chain]
    }

    pub fn accepted(&self, chain: usize) -> &[bool] {
        &self.accepted[chain]
    }

    pub fn step_size(&self, chain: usize) -> &[f64] {
        &self.step_sizes[chain]
    }

    /// Post-burn-in trace of one coordinate of one chain.
    pub fn coordinate(&self, chain: usize, coord: usize) -> Vec<f64> {
        (self.burn_in..self.len())
            .map(|t| self.positions[chain][t * self.dim + coord])
            .collect()
    }

    /// All post-burn-in positions of all chains, chain-major.
    pub fn samples(&self) -> Vec<Vec<f64>> {
        (0..self.chains())
            .flat_map(|c| (self.burn_in..self.len()).map(move |t| self.position(c, t).to_vec()))
            .collect()
    }

    /// Post-burn-in positions of one chain.
    pub fn chain_samples(&self, chain: usize) -> Vec<Vec<f64>> {
        (self.burn_in..self.len())
            .map(|t| self.position(chain, t).to_vec())
            .collect()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let total: usize = self.accepted.iter().map(Vec::len).sum();
        let acc: usize = self
            .accepted
            .iter()
            .map(|c| c.iter().filter(|&&a| a).count())
            .sum();
        if total == 0 {
            0.0
        } else {
            acc as f64 / total as f64
        }
    }

    /// Same ensemble with every position replaced by `f(position)`
    /// (e.g. pushing latent chains forward to data space).
    pub fn map_positions<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut out = Self::with_capacity(self.chains(), self.len(), 0, self.stride);
        out.burn_in = self.burn_in;
        out.energies = self.energies.clone();
        out.accepted = self.accepted.clone();
        out.step_sizes = self.step_sizes.clone();
        for c in 0..self.chains() {
            for t in 0..self.len() {
                let mapped = f(self.position(c, t))?;
                if out.dim == 0 {
                    out.dim = mapped.len();
                } else if mapped.len() != out.dim {
                    return Err(Error::Dimension {
                        expected: out.dim,
                        got: mapped.len(),
                    });
                }
                out.positions[c].extend(mapped);
            }
        }
        Ok(out)
    }

    /// Keeps every `every`-th record (records `every-1, 2·every-1, ...`).
    pub fn thin(&self, every: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::InvalidParameter("thinning factor must be positive".into()));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|t| (t + 1) % every == 0).collect();
        let mut out = Self::with_capacity(self.chains(), keep.len(), self.dim, self.stride * every);
        for c in 0..self.chains() {
            for &t in &keep {
                out.push(
                    c,
                    self.position(c, t),
                    self.accepted[c][t],
                    self.step_sizes[c][t],
                    self.energies[c][t],
                );
            }
        }
        out.burn_in = self.burn_in / every;
        Ok(out)
    }

    /// Ensemble with chains reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            dim: self.dim,
            stride: self.stride,
            burn_in: self.burn_in,
            positions: order.iter().map(|&i| self.positions[i].clone()).collect(),
            energies: order.iter().map(|&i| self.energies[i].clone()).collect(),
            accepted: order.iter().map(|&i| self.accepted[i].clone()).collect(),
            step_sizes: order.iter().map(|&i| self.step_sizes[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrCoordinate {
    pub within: f64,
    pub between: f64,
    pub pooled: f64,
    /// `+∞` when the within-chain variance is zero.
    pub r_hat: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrReport {
    pub coordinates: Vec<GrCoordinate>,
    pub mean: f64,
    pub max: f64,
}

impl GrReport {
    pub fn any_degenerate(&self) -> bool {
        self.coordinates.iter().any(|c| c.degenerate)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gelman-Rubin statistic for one scalar quantity given `m` chains of equal length `n`.
pub fn gelman_rubin_scalar(chains: &[Vec<f64>]) -> Result<GrCoordinate> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Diagnostics(format!("Gelman-Rubin needs at least 2 chains, got {m}")));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics(
            "Gelman-Rubin needs equal-length chains of at least 2 records".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let between = nf / (m as f64 - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let pooled = (nf - 1.0) / nf * within + between / nf;
    let degenerate = within == 0.0;
    let r_hat = if degenerate {
        f64::INFINITY
    } else {
        (pooled / within).sqrt()
    };
    Ok(GrCoordinate {
        within,
        between,
        pooled,
        r_hat,
        degenerate,
    })
}

/// Per-coordinate Gelman-Rubin on the post-burn-in segment, with mean and max.
pub fn gelman_rubin(ensemble: &ChainEnsemble) -> Result<GrReport> {
    ensemble.validate()?;
    let coordinates = (0..ensemble.dim())
        .map(|j| {
            let chains: Vec<Vec<f64>> = (0..ensemble.chains()).map(|c| ensemble.coordinate(c, j)).collect();
            gelman_rubin_scalar(&chains)
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = coordinates.iter().map(|c| c.r_hat).collect();
    Ok(GrReport {
        mean: mean(&values),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        coordinates,
    })
}

/// Biased sample autocorrelation `ρ̂(0..=max_lag)`; `None` for a constant series.
pub fn autocorrelation_series(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let mu = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return None;
    }
    Some(
        (0..=max_lag)
            .map(|lag| {
                centered[..x.len() - lag]
                    .iter()
                    .zip(&centered[lag..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / denom
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutocorrReport {
    /// Lags in sampler steps (record lag × stride).
    pub lags: Vec<usize>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// `(chain, coordinate)` pairs skipped for having zero variance.
    pub degenerate: Vec<(usize, usize)>,
}

/// Autocorrelation per chain and coordinate, aggregated into mean/min/max per lag.
/// `max_lag` counts records.
pub fn autocorrelation(ensemble: &ChainEnsemble, max_lag: usize) -> Result<AutocorrReport> {
    ensemble.validate()?;
    let n = ensemble.len() - ensemble.burn_in;
    if max_lag >= n {
        return Err(Error::Diagnostics(format!(
            "max lag {max_lag} must be below the post-burn-in length {n}"
        )));
    }
    let mut sum = vec![0.0; max_lag + 1];
    let mut min = vec![f64::INFINITY; max_lag + 1];
    let mut max = vec![f64::NEG_INFINITY; max_lag + 1];
    let mut count = 0usize;
    let mut degenerate = Vec::new();
    for c in 0..ensemble.chains() {
        for j in 0..ensemble.dim() {
            match autocorrelation_series(&ensemble.coordinate(c, j), max_lag) {
                Some(rho) => {
                    count += 1;
                    for (k, r) in rho.into_iter().enumerate() {
                        sum[k] += r;
                        min[k] = min[k].min(r);
                        max[k] = max[k].max(r);
                    }
                }
                None => degenerate.push((c, j)),
            }
        }
    }
    if count == 0 {
        return Err(Error::Diagnostics("every chain coordinate is constant".into()));
    }
    Ok(AutocorrReport {
        lags: (0..=max_lag).map(|k| k * ensemble.stride()).collect(),
        mean: sum.into_iter().map(|s| s / count as f64).collect(),
        min,
        max,
        degenerate,
    })
}

/// Mean absolute autocorrelation at one record lag over all chains and coordinates.
pub fn mean_abs_autocorrelation(ensemble: &ChainEnsemble, lag: usize) -> Result<f64> {
    ensemble.validate()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ensemble.chains() {
        for j in 0..ensemble.dim() {
            let x = ensemble.coordinate(c, j);
            if lag >= x.len() {
                return Err(Error::Diagnostics(format!("lag {lag} exceeds chain length {}", x.len())));
            }
            if let Some(rho) = autocorrelation_series(&x, lag) {
                total += rho[lag].abs();
                count += 1;
            } else {
                // A chain stuck at one point is maximally correlated.
                total += 1.0;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    /// Samples farther than the radius from every center.
    pub unassigned: usize,
    /// Shannon entropy (nats) of the visit distribution over centers.
    pub entropy: f64,
    /// Entropy divided by `ln(#centers)` (1 for a single center).
    pub normalized_entropy: f64,
}

impl ModeCoverage {
    pub fn modes_visited(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Assigns each sample to its nearest center if it lies within `radius`.
pub fn mode_coverage(samples: &[Vec<f64>], centers: &[Vec<f64>], radius: f64) -> Result<ModeCoverage> {
    if centers.is_empty() {
        return Err(Error::InvalidParameter("mode centers must be nonempty".into()));
    }
    let mut counts = vec![0usize; centers.len()];
    let mut unassigned = 0;
    for s in samples {
        let (best, dist) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let d2: f64 = c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
                (k, d2.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        if dist <= radius {
            counts[best] += 1;
        } else {
            unassigned += 1;
        }
    }
    let assigned: usize = counts.iter().sum();
    let entropy = if assigned == 0 {
        0.0
    } else {
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / assigned as f64;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let normalized_entropy = if centers.len() > 1 {
        entropy / (centers.len() as f64).ln()
    } else {
        1.0
    };
    Ok(ModeCoverage {
        counts,
        unassigned,
        entropy,
        normalized_entropy,
    })
}

/// Square grid of cell centers over `[lo, hi]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2d {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Default for Grid2d {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            cells: 200,
        }
    }
}

impl Grid2d {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing().powi(2)
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.cells).map(|i| self.lo + (i as f64 + 0.5) * h).collect()
    }

    /// Cell centers in row-major order (first coordinate varies fastest).
    pub fn points(&self) -> Vec<[f64; 2]> {
        let axis = self.axis();
        axis.iter()
            .flat_map(|&y| axis.iter().map(move |&x| [x, y]))
            .collect()
    }

    /// `log ∫ exp(log_density)` by the midpoint rule.
    pub fn log_normalizer(&self, log_density: &[f64]) -> f64 {
        let peak = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = log_density.iter().map(|v| (v - peak).exp()).sum();
        peak + (s * self.cell_area()).ln()
    }

    /// Normalized cell probabilities.
    pub fn probabilities(&self, log_density: &[f64]) -> Vec<f64> {
        let log_z = self.log_normalizer(log_density);
        let area = self.cell_area();
        log_density.iter().map(|v| (v - log_z).exp() * area).collect()
    }
}

/// `KL(target ∥ model)` between two unnormalized log-densities evaluated on the
/// same grid, each normalized by quadrature.
pub fn grid_kl(grid: &Grid2d, target_log: &[f64], model_log: &[f64]) -> Result<f64> {
    if target_log.len() != model_log.len() || target_log.len() != grid.cells * grid.cells {
        return Err(Error::Diagnostics("grid sizes differ".into()));
    }
    if target_log.iter().chain(model_log).any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::non_finite("grid log-density", "grid_kl"));
    }
    let lz_t = grid.log_normalizer(target_log);
    let lz_m = grid.log_normalizer(model_log);
    let area = grid.cell_area();
    let mut kl = 0.0;
    for (t, m) in target_log.iter().zip(model_log) {
        let lt = t - lz_t;
        let p = lt.exp() * area;
        if p > 0.0 {
            kl += p * (lt - (m - lz_m));
        }
    }
    Ok(kl)
}

fn mean_pairwise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` (V-statistic form).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) - mean_pairwise_distance(b, b)
}

/// Permutation p-value for the two-sample energy-distance test.
pub fn energy_distance_test<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Diagnostics("energy-distance test needs nonempty samples".into()));
    }
    let observed = energy_distance(a, b);
    let mut pooled: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let mut exceed = 0usize;
    for _ in 0..permutations {
        pooled.shuffle(rng);
        let (pa, pb) = pooled.split_at(a.len());
        if energy_distance(pa, pb) >= observed {
            exceed += 1;
        }
    }
    Ok((exceed + 1) as f64 / (permutations + 1) as f64)
}
