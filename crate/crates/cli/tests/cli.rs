use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiltflow::diagnostics::energy_distance_test;
use tiltflow::energy::{EnergyArch, EnergyModel};
use tiltflow::flow::{FlowConfig, FlowModel};
use tiltflow::io::{load_chains, read_table};
use tiltflow_cli::commands::{diagnose_ensemble, sample_chains};
use tiltflow_cli::config::SamplerKind;
use tiltflow_cli::RunConfig;

const TINY: &str = r#"
seed = 3

[target]
samples = 2000

[flow]
depth = 2
width = 16
iterations = 60
batch_size = 128

[ebm]
iterations = 20
batch_size = 32

[nce]
iterations = 400
learning_rate = 0.01

[hmc]
steps_per_call = 3

[sample]
chains = 4
steps = 200
burn_in = 50
record_every = 2

[diagnose]
max_lag = 40
"#;

fn tiltflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiltflow")).args(args).output().expect("spawn binary")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = tiltflow(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// Trains flow and tilt, then samples, under `out`.
fn pipeline(config: &Path, out: &Path, seed: &str) {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    for cmd in ["train-flow", "train-ebm", "sample"] {
        run_ok(&[cmd, "--config", c, "--out", o, "--seed", seed]);
    }
}

#[test]
fn exit_codes() {
    assert_eq!(tiltflow(&["--help"]).status.code(), Some(0));
    assert_eq!(tiltflow(&["--version"]).status.code(), Some(0));
    assert_eq!(tiltflow(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tiltflow(&["sample", "--sampler", "gibbs"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[flow]\nnot_a_key = 1\n");
    assert_eq!(tiltflow(&["train-flow", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    let missing = dir.path().join("empty");
    assert_eq!(tiltflow(&["sample", "--out", missing.to_str().unwrap()]).status.code(), Some(1));

    let blowup = write_config(
        dir.path(),
        "[target]\nsamples = 500\n[flow]\ndepth = 2\nwidth = 8\niterations = 200\nlearning_rate = 1e12\nclip_norm = 1e300\n",
    );
    let o = tiltflow(&[
        "train-flow",
        "--config",
        blowup.to_str().unwrap(),
        "--out",
        dir.path().join("blowup").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_outputs_parse_and_echoed_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let first = dir.path().join("first");
    pipeline(&config, &first, "3");

    let (header, cols) = read_table(&first.join("ebm_trace.csv")).unwrap();
    assert_eq!(header, ["iteration", "energy_gap", "acceptance", "step_size", "divergences"]);
    assert_eq!(cols[0].len(), 20);
    let (_, flow_cols) = read_table(&first.join("flow_trace.csv")).unwrap();
    assert_eq!(flow_cols[1].len(), 60);
    let z = load_chains(&first.join("chains_z.csv")).unwrap();
    assert_eq!((z.chains(), z.len(), z.dim(), z.stride()), (4, 100, 2, 2));

    let o = run_ok(&["diagnose", "--config", config.to_str().unwrap(), "--out", first.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("R-hat"));
    for f in ["chains_z_rhat.csv", "chains_z_autocorr.csv", "chains_x_rhat.csv", "chains_x_autocorr.csv"] {
        read_table(&first.join(f)).unwrap();
    }

    // The echoed config.toml alone reproduces every artifact bit for bit.
    let echo = first.join("config.toml");
    let second = dir.path().join("second");
    let (c, o) = (echo.to_str().unwrap(), second.to_str().unwrap());
    for cmd in ["train-flow", "train-ebm", "sample"] {
        run_ok(&[cmd, "--config", c, "--out", o]);
    }
    for f in ["flow.febm", "energy.febm", "flow_trace.csv", "ebm_trace.csv", "chains_z.csv", "chains_x.csv"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_controls_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let c = config.to_str().unwrap();
    let trace = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        run_ok(&["train-flow", "--config", c, "--out", out.to_str().unwrap(), "--seed", seed]);
        std::fs::read(out.join("flow_trace.csv")).unwrap()
    };
    let a = trace("5", "a");
    assert_eq!(a, trace("5", "b"));
    assert_ne!(a, trace("6", "c"));
}

#[test]
fn identity_flow_nll_is_gaussian_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[target]\nsamples = 5000\n[flow]\ndepth = 0\niterations = 200\n");
    let out = dir.path().join("out");
    run_ok(&["train-flow", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let (_, cols) = read_table(&out.join("flow_trace.csv")).unwrap();
    let mean = cols[1].iter().sum::<f64>() / cols[1].len() as f64;
    // Ring of radius 4 with σ = 0.3: E|x|² = 16 + 2σ².
    let expected = (2.0 * std::f64::consts::PI).ln() + 0.5 * (16.0 + 2.0 * 0.09);
    assert!((mean - expected).abs() < 0.05, "{mean} vs {expected}");
}

#[test]
fn nce_loss_falls_below_chance() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let (c, o) = (config.to_str().unwrap(), dir.path().join("nce"));
    run_ok(&["train-flow", "--config", c, "--out", o.to_str().unwrap()]);
    run_ok(&["train-nce", "--config", c, "--out", o.to_str().unwrap()]);
    let (_, cols) = read_table(&o.join("nce_trace.csv")).unwrap();
    let tail = &cols[1][cols[1].len() - 50..];
    assert!(tail.iter().sum::<f64>() / 50.0 < std::f64::consts::LN_2);
}

fn small_flow() -> FlowModel {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut f = FlowModel::new(FlowConfig { dim: 2, depth: 2, width: 8 }, &mut r).unwrap();
    for p in f.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.3 * (rand::Rng::random::<f64>(&mut r) - 0.5);
        }
    }
    f.mark_initialized();
    f
}

#[test]
fn zero_energy_samples_match_the_flow() {
    let flow = small_flow();
    let zero = EnergyModel::new(EnergyArch::Zero, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.sample.chains = 100;
    cfg.sample.steps = 300;
    cfg.sample.burn_in = 100;
    cfg.sample.record_every = 100;
    let run = sample_chains(&cfg, &flow, &zero, SamplerKind::LatentHmc).unwrap();
    let chain_x = run.x.samples();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (_, q) = flow.sample(chain_x.len(), &mut r).unwrap();
    let q: Vec<Vec<f64>> = (0..q.rows()).map(|i| q.row_slice(i).to_vec()).collect();
    let p = energy_distance_test(&chain_x, &q, 200, &mut r).unwrap();
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn single_chain_diagnostics() {
    let flow = small_flow();
    let zero = EnergyModel::new(EnergyArch::Zero, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.sample.chains = 1;
    cfg.sample.steps = 600;
    cfg.sample.burn_in = 100;
    cfg.diagnose.max_lag = 50;
    let run = sample_chains(&cfg, &flow, &zero, SamplerKind::LatentHmc).unwrap();
    let report = diagnose_ensemble(&cfg, &run.z, None).unwrap();
    assert!(report.gelman_rubin.is_none());
    assert_eq!(report.autocorrelation.lags.len(), 51);
    assert_eq!(report.autocorrelation.mean[0], 1.0);
}

#[test]
fn chain_dump_has_one_row_per_chain_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[target]\nsamples = 1000\n[flow]\ndepth = 1\nwidth = 8\niterations = 20\n\
         [energy]\narch = \"zero\"\n[ebm]\niterations = 1\n\
         [sample]\nchains = 64\nsteps = 2000\nrecord_every = 5\nburn_in = 400\n",
    );
    let out = dir.path().join("out");
    pipeline(&config, &out, "0");
    let text = std::fs::read_to_string(out.join("chains_z.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 64 * 400);
    let e = load_chains(&out.join("chains_z.csv")).unwrap();
    assert_eq!((e.chains(), e.len(), e.stride()), (64, 400, 5));
}
