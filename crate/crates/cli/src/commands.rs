//! Subcommand implementations. Each takes a resolved config, writes its
//! outputs under `config.out` and returns the in-memory results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiltflow::datasets::{load_idx, SyntheticTarget};
use tiltflow::diagnostics::{
    autocorrelation, gelman_rubin, grid_kl, mean_abs_autocorrelation, mode_coverage, AutocorrReport,
    ChainEnsemble, GrReport, Grid2d, ModeCoverage,
};
use tiltflow::energy::{EnergyModel, TiltedModel};
use tiltflow::flow::{standard_normal, train_flow_mle, FlowModel, FlowTrainConfig};
use tiltflow::io::{
    dump_chains, energy_checkpoint, energy_from_checkpoint, flow_checkpoint, flow_from_checkpoint,
    load_chains_with_prefix, load_checkpoint, save_checkpoint, write_table,
};
use tiltflow::optim::AdamConfig;
use tiltflow::samplers::{magnetized_path, run_chains, ChainState, Kernel, MagnetizedConfig, MagnetizedPath, RunOptions};
use tiltflow::trainers::{nce_train, nt_ebm_train, NtTrace};
use tiltflow::Tensor;

use crate::config::{RunConfig, SamplerKind};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

/// Independent random streams for the phases of a run, so that e.g. the
/// EBM trainer regenerates exactly the data the flow was fitted to.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Phase {
    Data = 1,
    FlowTrain = 2,
    EnergyInit = 3,
    EbmTrain = 4,
    NceTrain = 5,
    Sample = 6,
    Interpolate = 7,
}

pub fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase as u64);
    rng
}

pub const FLOW_CHECKPOINT: &str = "flow.febm";
pub const ENERGY_CHECKPOINT: &str = "energy.febm";

pub struct Dataset {
    pub data: Tensor,
    pub target: Option<SyntheticTarget>,
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match cfg.target.spec()? {
        Some(spec) => {
            let target = spec.build()?;
            let data = target.sample(cfg.target.samples, &mut phase_rng(cfg.seed, Phase::Data));
            Ok(Dataset {
                data,
                target: Some(target),
            })
        }
        None => {
            let path = cfg
                .target
                .idx_path
                .as_ref()
                .ok_or_else(|| CliError::Config("target.idx_path is required".into()))?;
            let mut images = load_idx(path)?;
            if cfg.target.downscale > 1 {
                images = images.downscale(cfg.target.downscale)?;
            }
            Ok(Dataset {
                data: images.pixels,
                target: None,
            })
        }
    }
}

/// Creates the output directory and echoes the resolved config into it.
pub fn prepare_out(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let path = cfg.out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(path, e))
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn iterations(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

pub fn load_flow(cfg: &RunConfig) -> CliResult<FlowModel> {
    let path = out(cfg, FLOW_CHECKPOINT);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "flow checkpoint {} not found; run train-flow first",
            path.display()
        )));
    }
    Ok(flow_from_checkpoint(&load_checkpoint(&path)?)?)
}

pub fn load_energy(cfg: &RunConfig) -> CliResult<(EnergyModel, Option<f64>)> {
    let path = out(cfg, ENERGY_CHECKPOINT);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "energy checkpoint {} not found; run train-ebm or train-nce first",
            path.display()
        )));
    }
    Ok(energy_from_checkpoint(&load_checkpoint(&path)?)?)
}

pub struct FlowRun {
    pub flow: FlowModel,
    pub losses: Vec<f64>,
}

pub fn cmd_train_flow(cfg: &RunConfig) -> CliResult<FlowRun> {
    prepare_out(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut rng = phase_rng(cfg.seed, Phase::FlowTrain);
    let mut flow = FlowModel::new(cfg.flow.flow_config(ds.data.cols())?, &mut rng)?;
    let train = FlowTrainConfig {
        iterations: cfg.flow.iterations,
        batch_size: cfg.flow.batch_size,
        adam: AdamConfig::with_lr(cfg.flow.learning_rate),
        clip_norm: Some(cfg.flow.clip_norm),
    };
    let report = train_flow_mle(&mut flow, &ds.data, &train, &mut rng)?;
    save_checkpoint(&out(cfg, FLOW_CHECKPOINT), &flow_checkpoint(&flow))?;
    write_table(
        &out(cfg, "flow_trace.csv"),
        &["iteration", "nll"],
        &[&iterations(report.losses.len()), &report.losses],
    )?;
    Ok(FlowRun {
        flow,
        losses: report.losses,
    })
}

pub struct EbmRun {
    pub energy: EnergyModel,
    pub trace: NtTrace,
}

fn new_energy(cfg: &RunConfig, dim: usize) -> CliResult<EnergyModel> {
    Ok(EnergyModel::new(
        cfg.energy.arch()?,
        dim,
        &mut phase_rng(cfg.seed, Phase::EnergyInit),
    )?)
}

pub fn cmd_train_ebm(cfg: &RunConfig) -> CliResult<EbmRun> {
    prepare_out(cfg)?;
    let flow = load_flow(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut energy = new_energy(cfg, flow.dim())?;
    let report = nt_ebm_train(
        &flow,
        &mut energy,
        &ds.data,
        &cfg.nt_config(),
        &mut phase_rng(cfg.seed, Phase::EbmTrain),
    )?;
    save_checkpoint(&out(cfg, ENERGY_CHECKPOINT), &energy_checkpoint(&energy, None))?;
    let t = &report.trace;
    let div: Vec<f64> = t.divergences.iter().map(|&d| d as f64).collect();
    write_table(
        &out(cfg, "ebm_trace.csv"),
        &["iteration", "energy_gap", "acceptance", "step_size", "divergences"],
        &[&iterations(t.energy_gap.len()), &t.energy_gap, &t.acceptance, &t.step_size, &div],
    )?;
    Ok(EbmRun {
        energy,
        trace: report.trace,
    })
}

pub struct NceRun {
    pub energy: EnergyModel,
    pub bias: f64,
    pub losses: Vec<f64>,
}

pub fn cmd_train_nce(cfg: &RunConfig) -> CliResult<NceRun> {
    prepare_out(cfg)?;
    let flow = load_flow(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut energy = new_energy(cfg, flow.dim())?;
    let report = nce_train(
        &flow,
        &mut energy,
        &ds.data,
        &cfg.nce_config(),
        &mut phase_rng(cfg.seed, Phase::NceTrain),
    )?;
    save_checkpoint(
        &out(cfg, ENERGY_CHECKPOINT),
        &energy_checkpoint(&energy, Some(report.bias)),
    )?;
    write_table(
        &out(cfg, "nce_trace.csv"),
        &["iteration", "loss"],
        &[&iterations(report.losses.len()), &report.losses],
    )?;
    Ok(NceRun {
        energy,
        bias: report.bias,
        losses: report.losses,
    })
}

/// Applies a batched map to every position of an ensemble, chain by chain.
pub fn map_ensemble(
    e: &ChainEnsemble,
    f: impl Fn(&Tensor) -> tiltflow::Result<Tensor>,
) -> CliResult<ChainEnsemble> {
    let mut outputs = Vec::with_capacity(e.chains());
    for c in 0..e.chains() {
        let data = (0..e.len()).flat_map(|t| e.position(c, t).iter().copied()).collect();
        outputs.push(f(&Tensor::new(vec![e.len(), e.dim()], data).map_err(tiltflow::Error::from)?)?);
    }
    let dim = outputs.first().map_or(e.dim(), |t| t.cols());
    let mut mapped = ChainEnsemble::with_capacity(e.chains(), e.len(), dim, e.stride());
    mapped.burn_in = e.burn_in;
    for (c, t) in outputs.iter().enumerate() {
        for r in 0..e.len() {
            mapped.push(c, t.row_slice(r), e.accepted(c)[r], e.step_size(c)[r], e.energy(c)[r]);
        }
    }
    Ok(mapped)
}

/// Chains in both coordinate systems.
pub struct SampleRun {
    pub kind: SamplerKind,
    pub z: ChainEnsemble,
    pub x: ChainEnsemble,
}

/// Runs the configured sampler on the tilted model without touching the disk.
pub fn sample_chains(
    cfg: &RunConfig,
    flow: &FlowModel,
    energy: &EnergyModel,
    kind: SamplerKind,
) -> CliResult<SampleRun> {
    let model = TiltedModel::new(flow, energy)?;
    let s = &cfg.sample;
    let mut rng = phase_rng(cfg.seed, Phase::Sample);
    let chain_seed: u64 = rng.random();
    let step = match kind {
        SamplerKind::DataLangevin => s.langevin_step_size,
        _ => cfg.hmc.initial_step_size,
    };
    let mut chains = ChainState::from_prior(s.chains, flow.dim(), step, chain_seed)?;
    let options = RunOptions {
        steps: s.steps,
        record_every: s.record_every,
        burn_in: s.burn_in,
    };
    let hmc = Kernel::Hmc(cfg.hmc.hmc_config());
    let forward = |z: &Tensor| flow.forward(z).map(|(x, _)| x);
    let inverse = |x: &Tensor| flow.inverse(x).map(|(z, _)| z);
    let (z, x) = match kind {
        SamplerKind::LatentHmc => {
            let z = run_chains(&mut chains, &model.latent(), &hmc, &options)?;
            let x = map_ensemble(&z, forward)?;
            (z, x)
        }
        SamplerKind::DataLangevin | SamplerKind::DataHmc => {
            // Start data-space chains at flow samples so both samplers begin from q.
            let (_, x0) = flow.sample(s.chains, &mut rng)?;
            for (i, c) in chains.iter_mut().enumerate() {
                c.set_position(x0.row_slice(i).to_vec());
            }
            let kernel = if kind == SamplerKind::DataHmc {
                hmc
            } else {
                Kernel::Langevin {
                    step_size: s.langevin_step_size,
                }
            };
            let x = run_chains(&mut chains, &model.data(), &kernel, &options)?;
            let z = map_ensemble(&x, inverse)?;
            (z, x)
        }
    };
    Ok(SampleRun { kind, z, x })
}

pub fn cmd_sample(cfg: &RunConfig) -> CliResult<SampleRun> {
    prepare_out(cfg)?;
    let flow = load_flow(cfg)?;
    let (energy, _) = load_energy(cfg)?;
    let run = sample_chains(cfg, &flow, &energy, cfg.sample.kind()?)?;
    dump_chains(&out(cfg, "chains_z.csv"), &run.z, "z")?;
    dump_chains(&out(cfg, "chains_x.csv"), &run.x, "x")?;
    Ok(run)
}

#[derive(Clone, Debug)]
pub struct DiagnoseReport {
    /// `None` when fewer than two chains are available.
    pub gelman_rubin: Option<GrReport>,
    pub autocorrelation: AutocorrReport,
    /// Mean |autocorrelation| at a lag of 200 sampler steps, if the chains are long enough.
    pub abs_autocorr_200: Option<f64>,
    pub acceptance_rate: f64,
    pub coverage: Option<ModeCoverage>,
    /// Per-chain mode-visit entropy averaged over chains.
    pub mean_chain_entropy: Option<f64>,
    pub summary: String,
}

/// Diagnostics for one ensemble; mode coverage needs x-space chains and a mixture target.
pub fn diagnose_ensemble(
    cfg: &RunConfig,
    e: &ChainEnsemble,
    target: Option<&SyntheticTarget>,
) -> CliResult<DiagnoseReport> {
    let mut e = e.clone();
    e.burn_in = cfg.sample.burn_in / e.stride();
    if e.burn_in >= e.len() {
        return Err(CliError::Usage(format!(
            "ensemble of {} records is too short for a burn-in of {} steps",
            e.len(),
            cfg.sample.burn_in
        )));
    }
    let post = e.len() - e.burn_in;
    if post < 2 {
        return Err(CliError::Usage("ensemble too short for diagnostics".into()));
    }
    let max_lag = (cfg.diagnose.max_lag / e.stride()).min(post - 1);
    let gr = if e.chains() >= 2 { Some(gelman_rubin(&e)?) } else { None };
    let ac = autocorrelation(&e, max_lag)?;
    let lag200 = 200 / e.stride();
    let ac200 = if 200 % e.stride() == 0 && lag200 < post {
        Some(mean_abs_autocorrelation(&e, lag200)?)
    } else {
        None
    };
    let (coverage, chain_entropy) = match target {
        Some(t) if t.dim() == e.dim() => {
            let radius = cfg.diagnose.coverage_sigmas * t.scales.iter().copied().fold(0.0, f64::max);
            let all = mode_coverage(&e.samples(), &t.centers, radius)?;
            let mut h = 0.0;
            for c in 0..e.chains() {
                h += mode_coverage(&e.chain_samples(c), &t.centers, radius)?.entropy;
            }
            (Some(all), Some(h / e.chains() as f64))
        }
        _ => (None, None),
    };

    let mut s = String::new();
    let _ = writeln!(s, "chains {}  records {}  stride {}  burn-in records {}", e.chains(), e.len(), e.stride(), e.burn_in);
    let _ = writeln!(s, "acceptance rate {:.4}", e.acceptance_rate());
    match &gr {
        Some(g) => {
            let pass = if g.mean < cfg.diagnose.r_hat_threshold { "PASS" } else { "FAIL" };
            let _ = writeln!(
                s,
                "R-hat mean {:.4}  max {:.4}  threshold {}  {pass}",
                g.mean, g.max, cfg.diagnose.r_hat_threshold
            );
            if g.any_degenerate() {
                let _ = writeln!(s, "warning: degenerate (constant) chains");
            }
        }
        None => {
            let _ = writeln!(s, "R-hat not computed: needs at least 2 chains");
        }
    }
    if let Some(a) = ac200 {
        let _ = writeln!(s, "mean |autocorrelation| at lag 200: {a:.4}");
    }
    if let Some(c) = &coverage {
        let _ = writeln!(
            s,
            "modes visited {}/{}  entropy {:.4} (normalized {:.4})  unassigned {}",
            c.modes_visited(),
            c.counts.len(),
            c.entropy,
            c.normalized_entropy,
            c.unassigned
        );
    }
    if let Some(h) = chain_entropy {
        let _ = writeln!(s, "mean per-chain mode entropy {h:.4}");
    }
    Ok(DiagnoseReport {
        gelman_rubin: gr,
        autocorrelation: ac,
        abs_autocorr_200: ac200,
        acceptance_rate: e.acceptance_rate(),
        coverage,
        mean_chain_entropy: chain_entropy,
        summary: s,
    })
}

fn write_diagnostics(cfg: &RunConfig, stem: &str, r: &DiagnoseReport) -> CliResult<()> {
    if let Some(g) = &r.gelman_rubin {
        let coords: Vec<f64> = (0..g.coordinates.len()).map(|j| j as f64).collect();
        let col = |f: fn(&tiltflow::diagnostics::GrCoordinate) -> f64| -> Vec<f64> {
            g.coordinates.iter().map(f).collect()
        };
        write_table(
            &out(cfg, &format!("{stem}_rhat.csv")),
            &["coordinate", "r_hat", "within", "between", "pooled"],
            &[&coords, &col(|c| c.r_hat), &col(|c| c.within), &col(|c| c.between), &col(|c| c.pooled)],
        )?;
    }
    let a = &r.autocorrelation;
    let lags: Vec<f64> = a.lags.iter().map(|&l| l as f64).collect();
    write_table(
        &out(cfg, &format!("{stem}_autocorr.csv")),
        &["lag", "mean", "min", "max"],
        &[&lags, &a.mean, &a.min, &a.max],
    )?;
    let path = out(cfg, &format!("{stem}_summary.txt"));
    std::fs::write(&path, &r.summary).map_err(|e| CliError::io(path, e))
}

/// Diagnoses chain dumps; defaults to the sampler output in the run directory.
pub fn cmd_diagnose(cfg: &RunConfig, paths: &[PathBuf]) -> CliResult<Vec<DiagnoseReport>> {
    prepare_out(cfg)?;
    let default = vec![out(cfg, "chains_z.csv"), out(cfg, "chains_x.csv")];
    let paths: Vec<PathBuf> = if paths.is_empty() {
        default.into_iter().filter(|p| p.exists()).collect()
    } else {
        paths.to_vec()
    };
    if paths.is_empty() {
        return Err(CliError::Usage("no chain files to diagnose; run sample first".into()));
    }
    let target = cfg.target.spec()?.map(|s| s.build()).transpose()?;
    let mut reports = Vec::new();
    for p in &paths {
        let (e, prefix) = load_chains_with_prefix(p)?;
        let t = if prefix == "x" { target.as_ref() } else { None };
        let r = diagnose_ensemble(cfg, &e, t)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("chains");
        write_diagnostics(cfg, stem, &r)?;
        reports.push(r);
    }
    Ok(reports)
}

pub struct InterpolateRun {
    pub path: MagnetizedPath,
    /// Path pushed through the flow.
    pub x: Vec<Vec<f64>>,
    pub energy_band: f64,
    pub summary: String,
}

/// Magnetized Langevin path from `z1` towards `z2` on the tilted latent target.
pub fn interpolate(
    cfg: &RunConfig,
    flow: &FlowModel,
    energy: &EnergyModel,
    z1: &[f64],
    z2: &[f64],
) -> CliResult<InterpolateRun> {
    let model = TiltedModel::new(flow, energy)?;
    let c = &cfg.interpolate;
    let mcfg = MagnetizedConfig {
        gamma: c.gamma,
        steps: c.steps,
        dt: c.dt,
        seed: phase_rng(cfg.seed, Phase::Interpolate).random(),
    };
    let path = magnetized_path(z1, z2, &model.latent(), &mcfg)?;
    let d = flow.dim();
    let zs = Tensor::new(
        vec![path.positions.len(), d],
        path.positions.iter().flatten().copied().collect(),
    )
    .map_err(tiltflow::Error::from)?;
    let (xs, _) = flow.forward(&zs)?;
    let x: Vec<Vec<f64>> = (0..xs.rows()).map(|i| xs.row_slice(i).to_vec()).collect();
    let hi = path.log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = path.log_density.iter().copied().fold(f64::INFINITY, f64::min);
    let band = hi - lo;
    let mut summary = String::new();
    let _ = writeln!(summary, "steps {}  gamma {}  dt {}", c.steps, c.gamma, c.dt);
    let _ = writeln!(
        summary,
        "final distance to anchor {:.4}",
        path.distance_to_anchor.last().copied().unwrap_or(f64::NAN)
    );
    let pass = if band < c.energy_band { "PASS" } else { "FAIL" };
    let _ = writeln!(summary, "energy band {band:.4}  threshold {}  {pass}", c.energy_band);
    Ok(InterpolateRun {
        path,
        x,
        energy_band: band,
        summary,
    })
}

fn write_path(cfg: &RunConfig, run: &InterpolateRun) -> CliResult<()> {
    let p = &run.path;
    let d = p.positions.first().map_or(0, Vec::len);
    let steps: Vec<f64> = iterations(p.positions.len());
    let mut names = vec!["step".to_string()];
    let mut cols = vec![steps];
    for j in 0..d {
        names.push(format!("z{j}"));
        cols.push(p.positions.iter().map(|z| z[j]).collect());
    }
    for j in 0..run.x.first().map_or(0, Vec::len) {
        names.push(format!("x{j}"));
        cols.push(run.x.iter().map(|x| x[j]).collect());
    }
    names.push("log_density".into());
    cols.push(p.log_density.clone());
    names.push("distance".into());
    cols.push(p.distance_to_anchor.clone());
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    write_table(&out(cfg, "path.csv"), &header, &col_refs)?;
    let sp = out(cfg, "path_summary.txt");
    std::fs::write(&sp, &run.summary).map_err(|e| CliError::io(sp, e))
}

fn endpoints(cfg: &RunConfig, dim: usize) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut rng = phase_rng(cfg.seed, Phase::Interpolate);
    let _: u64 = rng.random();
    let mut pick = |given: &Option<Vec<f64>>| -> CliResult<Vec<f64>> {
        match given {
            Some(z) if z.len() == dim => Ok(z.clone()),
            Some(z) => Err(CliError::Config(format!(
                "interpolation endpoint has {} coordinates, model has {dim}",
                z.len()
            ))),
            None => Ok(standard_normal(1, dim, &mut rng).into_data()),
        }
    };
    let z1 = pick(&cfg.interpolate.z1)?;
    let z2 = pick(&cfg.interpolate.z2)?;
    Ok((z1, z2))
}

pub fn cmd_interpolate(cfg: &RunConfig) -> CliResult<InterpolateRun> {
    prepare_out(cfg)?;
    let flow = load_flow(cfg)?;
    let (energy, _) = load_energy(cfg)?;
    let (z1, z2) = endpoints(cfg, flow.dim())?;
    let run = interpolate(cfg, &flow, &energy, &z1, &z2)?;
    write_path(cfg, &run)?;
    Ok(run)
}

/// Unnormalized log-densities on a 2-D grid, evaluated in batches.
pub fn grid_log_density(
    grid: &Grid2d,
    f: impl Fn(&Tensor) -> tiltflow::Result<Vec<f64>>,
) -> CliResult<Vec<f64>> {
    let points = grid.points();
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(4096) {
        let t = Tensor::new(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect())
            .map_err(tiltflow::Error::from)?;
        out.extend(f(&t)?);
    }
    Ok(out)
}

fn write_grid(path: &Path, grid: &Grid2d, log_density: &[f64]) -> CliResult<()> {
    let pts = grid.points();
    let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
    Ok(write_table(path, &["x", "y", "log_density"], &[&xs, &ys, log_density])?)
}

pub struct Demo2dReport {
    pub flow: FlowModel,
    pub energy: EnergyModel,
    pub target: SyntheticTarget,
    pub kl_flow: f64,
    pub kl_model: f64,
    pub latent: SampleRun,
    pub latent_diag: DiagnoseReport,
    pub latent_x_diag: DiagnoseReport,
    pub data: SampleRun,
    pub data_diag: DiagnoseReport,
    pub data_x_diag: DiagnoseReport,
    pub interpolation: InterpolateRun,
    pub summary: String,
}

/// End-to-end 2-D experiment: fit the flow, learn the tilt, sample in latent
/// and data space, diagnose, interpolate and emit density grids.
pub fn cmd_demo2d(cfg: &RunConfig) -> CliResult<Demo2dReport> {
    let spec = cfg
        .target
        .spec()?
        .ok_or_else(|| CliError::Config("demo2d needs a synthetic 2-D target".into()))?;
    let target = spec.build()?;
    let flow = cmd_train_flow(cfg)?.flow;
    let energy = cmd_train_ebm(cfg)?.energy;
    let model = TiltedModel::new(&flow, &energy)?;

    let grid = Grid2d {
        lo: cfg.grid.lo,
        hi: cfg.grid.hi,
        cells: cfg.grid.cells,
    };
    let target_log = grid_log_density(&grid, |t| Ok(target.log_density_batch(t)))?;
    let flow_log = grid_log_density(&grid, |t| flow.log_prob(t))?;
    let model_log = grid_log_density(&grid, |t| model.log_p_x_unnorm(t))?;
    let kl_flow = grid_kl(&grid, &target_log, &flow_log)?;
    let kl_model = grid_kl(&grid, &target_log, &model_log)?;
    write_grid(&out(cfg, "grid_target.csv"), &grid, &target_log)?;
    write_grid(&out(cfg, "grid_flow.csv"), &grid, &flow_log)?;
    write_grid(&out(cfg, "grid_model.csv"), &grid, &model_log)?;
    let names = ["target", "flow", "model"];
    let lz: Vec<f64> = [&target_log, &flow_log, &model_log]
        .iter()
        .map(|l| grid.log_normalizer(l))
        .collect();
    let kls = [0.0, kl_flow, kl_model];
    {
        let path = out(cfg, "grid_summary.csv");
        let mut w = String::from("density,log_normalizer,kl_from_target\n");
        for k in 0..3 {
            let _ = writeln!(w, "{},{},{}", names[k], lz[k], kls[k]);
        }
        std::fs::write(&path, w).map_err(|e| CliError::io(path, e))?;
    }

    let latent = sample_chains(cfg, &flow, &energy, SamplerKind::LatentHmc)?;
    dump_chains(&out(cfg, "chains_z.csv"), &latent.z, "z")?;
    dump_chains(&out(cfg, "chains_x.csv"), &latent.x, "x")?;
    let latent_diag = diagnose_ensemble(cfg, &latent.z, None)?;
    let latent_x_diag = diagnose_ensemble(cfg, &latent.x, Some(&target))?;
    write_diagnostics(cfg, "chains_z", &latent_diag)?;
    write_diagnostics(cfg, "chains_x", &latent_x_diag)?;

    let data = sample_chains(cfg, &flow, &energy, SamplerKind::DataLangevin)?;
    dump_chains(&out(cfg, "chains_data_langevin_x.csv"), &data.x, "x")?;
    let data_diag = diagnose_ensemble(cfg, &data.z, None)?;
    let data_x_diag = diagnose_ensemble(cfg, &data.x, Some(&target))?;
    write_diagnostics(cfg, "chains_data_langevin_x", &data_x_diag)?;

    let (z1, z2) = endpoints(cfg, 2)?;
    let interpolation = interpolate(cfg, &flow, &energy, &z1, &z2)?;
    write_path(cfg, &interpolation)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "grid KL(target || flow)  {kl_flow:.4}");
    let _ = writeln!(summary, "grid KL(target || model) {kl_model:.4}");
    let _ = writeln!(summary, "\n[latent HMC, z coordinates]\n{}", latent_diag.summary);
    let _ = writeln!(summary, "[latent HMC, x coordinates]\n{}", latent_x_diag.summary);
    let _ = writeln!(summary, "[data-space Langevin, x coordinates]\n{}", data_x_diag.summary);
    let _ = writeln!(summary, "[interpolation]\n{}", interpolation.summary);
    let sp = out(cfg, "summary.txt");
    std::fs::write(&sp, &summary).map_err(|e| CliError::io(sp, e))?;

    Ok(Demo2dReport {
        flow,
        energy,
        target,
        kl_flow,
        kl_model,
        latent,
        latent_diag,
        latent_x_diag,
        data,
        data_diag,
        data_x_diag,
        interpolation,
        summary,
    })
}
