//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (bypassing the test harness capture) before asserting.
//!
//! Criteria 1, 2, 3 and 9 share one trained 2-D ring demo.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use tiltflow::autodiff::Tape;
use tiltflow::datasets::{parse_idx_images, parse_idx_labels, SyntheticTarget};
use tiltflow::diagnostics::{autocorrelation_series, gelman_rubin_scalar, grid_kl, ChainEnsemble, Grid2d};
use tiltflow::energy::{EnergyArch, EnergyModel, TiltedModel};
use tiltflow::flow::{FlowConfig, FlowModel};
use tiltflow::io::{
    dump_chains, energy_checkpoint, energy_from_checkpoint, flow_checkpoint, flow_from_checkpoint, load_chains,
    Checkpoint,
};
use tiltflow::optim::AdamConfig;
use tiltflow::samplers::{leapfrog, run_chains, ChainState, FnDensity, HmcConfig, Kernel, RunOptions};
use tiltflow::trainers::{ebm_grad_estimate, nce_train, nt_ebm_train, NceTrainConfig, NtTrainConfig};
use tiltflow::Tensor;
use tiltflow_cli::commands::{cmd_demo2d, cmd_train_flow, grid_log_density, interpolate, Demo2dReport};
use tiltflow_cli::RunConfig;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n:>2} [{name}]: {verdict} ({detail})");
    assert!(pass, "criterion {n} [{name}] failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn work_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

struct Demo {
    cfg: RunConfig,
    report: Demo2dReport,
}

fn demo() -> &'static Demo {
    static DEMO: OnceLock<Demo> = OnceLock::new();
    DEMO.get_or_init(|| {
        let cfg = RunConfig {
            out: work_dir("acceptance-demo"),
            ..RunConfig::default()
        };
        let report = cmd_demo2d(&cfg).expect("demo pipeline");
        Demo { cfg, report }
    })
}

#[test]
fn criterion_01_latent_hmc_mixes() {
    let d = demo();
    let gr = d.report.latent_diag.gelman_rubin.as_ref().expect("64 chains");
    let e = &d.report.latent.z;
    let shape_ok = e.chains() == 64 && e.len() == 2000 && d.cfg.sample.burn_in == 400;
    report(
        1,
        "Gelman-Rubin, latent HMC",
        shape_ok && gr.mean < 1.2,
        &format!(
            "m={} n={} burn-in {}: mean R-hat {:.4} (max {:.4}) < 1.2",
            e.chains(),
            e.len(),
            d.cfg.sample.burn_in,
            gr.mean,
            gr.max
        ),
    );
}

#[test]
fn criterion_02_data_space_langevin_mixes_worse() {
    let r = &demo().report;
    let r_latent = r.latent_diag.gelman_rubin.as_ref().unwrap().mean;
    let r_data = r.data_diag.gelman_rubin.as_ref().unwrap().mean;
    let a_latent = r.latent_diag.abs_autocorr_200.unwrap();
    let a_data = r.data_diag.abs_autocorr_200.unwrap();
    let rx_latent = r.latent_x_diag.gelman_rubin.as_ref().unwrap().mean;
    let rx_data = r.data_x_diag.gelman_rubin.as_ref().unwrap().mean;
    let ax_latent = r.latent_x_diag.abs_autocorr_200.unwrap();
    let ax_data = r.data_x_diag.abs_autocorr_200.unwrap();
    let pass = r_data > r_latent && a_data > a_latent && rx_data > rx_latent && ax_data > ax_latent;
    report(
        2,
        "mixing ordering",
        pass,
        &format!(
            "z: R-hat {r_data:.3} > {r_latent:.3}, |acf(200)| {a_data:.3} > {a_latent:.3}; \
             x: R-hat {rx_data:.3} > {rx_latent:.3}, |acf(200)| {ax_data:.3} > {ax_latent:.3}"
        ),
    );
}

#[test]
fn criterion_03_tilting_improves_density() {
    let d = demo();
    let r = &d.report;
    let ratio = r.kl_model / r.kl_flow;

    // Ablation: both presets with an equal, longer budget so the comparison is not seed noise
    // from under-trained flows.
    let grid = Grid2d {
        lo: d.cfg.grid.lo,
        hi: d.cfg.grid.hi,
        cells: d.cfg.grid.cells,
    };
    let target_log = grid_log_density(&grid, |t| Ok(r.target.log_density_batch(t))).unwrap();
    let ablation_kl = |size: &str| {
        let cfg = RunConfig {
            out: work_dir(&format!("acceptance-ablation-{size}")),
            flow: tiltflow_cli::config::FlowSection {
                size: size.into(),
                iterations: 1500,
                ..d.cfg.flow.clone()
            },
            ..d.cfg.clone()
        };
        let flow = cmd_train_flow(&cfg).expect("ablation flow").flow;
        let log_q = grid_log_density(&grid, |t| flow.log_prob(t)).unwrap();
        grid_kl(&grid, &target_log, &log_q).unwrap()
    };
    let (kl_small, kl_medium) = (ablation_kl("small"), ablation_kl("medium"));
    report(
        3,
        "tilting improves density",
        ratio <= 0.8 && kl_medium < kl_small,
        &format!(
            "KL(target||p) {:.4} <= 0.8 x KL(target||q) {:.4} (ratio {ratio:.3}); \
             ablation at 1500 iterations: small {kl_small:.4} > medium {kl_medium:.4}",
            r.kl_model, r.kl_flow
        ),
    );
}

/// Asymptotic Kolmogorov distribution tail with the Stephens small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let en = (n as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
    }
    (2.0 * p).clamp(0.0, 1.0)
}

fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn gaussian_density(dim: usize) -> FnDensity<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
    FnDensity::new(dim, |z: &[f64]| {
        (-0.5 * z.iter().map(|v| v * v).sum::<f64>(), z.iter().map(|v| -v).collect())
    })
}

#[test]
fn criterion_04_hmc_is_exact_on_gaussian() {
    let target = gaussian_density(2);
    let mut chains = ChainState::from_prior(10, 2, 0.15, 41).unwrap();
    let options = RunOptions {
        steps: 11_000,
        record_every: 10,
        burn_in: 1_000,
    };
    let e = run_chains(&mut chains, &target, &Kernel::Hmc(HmcConfig::default()), &options).unwrap();
    let samples = e.samples();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut p_values = Vec::new();
    for j in 0..2 {
        let mut xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let d = ks_statistic(&mut xs, |x| normal.cdf(x));
        p_values.push(ks_p_value(d, xs.len()));
    }
    // Step sizes are frozen after burn-in, so post-burn-in flags measure the adapted rate.
    let post: Vec<bool> = (0..e.chains())
        .flat_map(|c| e.accepted(c)[e.burn_in..].to_vec())
        .collect();
    let rate = post.iter().filter(|&&a| a).count() as f64 / post.len() as f64;
    report(
        4,
        "HMC exactness",
        samples.len() == 10_000 && p_values.iter().all(|&p| p > 0.01) && (rate - 0.651).abs() <= 0.05,
        &format!(
            "{} thinned samples, KS p-values {:.3}/{:.3} > 0.01, adapted acceptance {rate:.4} in 0.651 +/- 0.05",
            samples.len(),
            p_values[0],
            p_values[1]
        ),
    );
}

#[test]
fn criterion_05_analytic_tilt() {
    let a = [1.0, -1.0];
    let identity = FlowModel::new(FlowConfig { dim: 2, depth: 0, width: 1 }, &mut rng(0)).unwrap();
    let mut tilt = EnergyModel::new(EnergyArch::Linear, 2, &mut rng(0)).unwrap();
    tilt.parameters_mut()[0].data_mut().copy_from_slice(&a);
    let model = TiltedModel::new(&identity, &tilt).unwrap();
    let mut chains = ChainState::from_prior(10, 2, 0.15, 5).unwrap();
    let options = RunOptions {
        steps: 11_000,
        record_every: 10,
        burn_in: 1_000,
    };
    let e = run_chains(&mut chains, &model.latent(), &Kernel::Hmc(HmcConfig::default()), &options).unwrap();
    let s = e.samples();
    let mean: Vec<f64> = (0..2).map(|j| s.iter().map(|p| p[j]).sum::<f64>() / s.len() as f64).collect();
    let sample_ok = (0..2).all(|j| (mean[j] - a[j]).abs() <= 0.05);

    let mut r = rng(6);
    let data = SyntheticTarget::gaussian(a.to_vec(), 1.0).unwrap().sample(20_000, &mut r);
    let mut learned = EnergyModel::new(EnergyArch::Linear, 2, &mut r).unwrap();
    let cfg = NtTrainConfig {
        iterations: 2000,
        adam: AdamConfig::with_lr(2e-3),
        batch_size: 256,
        hmc: HmcConfig {
            steps_per_call: 10,
            ..HmcConfig::default()
        },
        ..NtTrainConfig::default()
    };
    nt_ebm_train(&identity, &mut learned, &data, &cfg, &mut r).unwrap();
    let w = learned.parameters()[0].data().to_vec();
    let learn_ok = (0..2).all(|j| (w[j] - a[j]).abs() <= 0.05);
    report(
        5,
        "analytic tilt",
        sample_ok && learn_ok,
        &format!(
            "HMC mean ({:.4}, {:.4}) vs a = (1, -1) within 0.05; NT-learned weight ({:.4}, {:.4}) within 0.05",
            mean[0], mean[1], w[0], w[1]
        ),
    );
}

#[test]
fn criterion_06_nce_recovers_log_ratio() {
    let mut r = rng(7);
    let noise = FlowModel::new(FlowConfig { dim: 1, depth: 0, width: 1 }, &mut r).unwrap();
    let data = SyntheticTarget::gaussian(vec![1.0], 1.0).unwrap().sample(50_000, &mut r);
    let mut energy = EnergyModel::new(EnergyArch::Quadratic, 1, &mut r).unwrap();
    let cfg = NceTrainConfig {
        iterations: 20_000,
        adam: AdamConfig::with_lr(5e-4),
        batch_size: 512,
        ..NceTrainConfig::default()
    };
    let fit = nce_train(&noise, &mut energy, &data, &cfg, &mut r).unwrap();
    let xs: Vec<f64> = (0..=500).map(|i| -2.0 + 0.01 * i as f64).collect();
    let f = energy.evaluate(&Tensor::new(vec![xs.len(), 1], xs.clone()).unwrap()).unwrap();
    // log N(x; 1, 1) − log N(x; 0, 1) = x − 1/2, and log(ρ/(1−ρ)) = 0 at ρ = 1/2.
    let err = xs
        .iter()
        .zip(&f)
        .map(|(x, fx)| (fx + fit.bias - (x - 0.5)).abs())
        .fold(0.0, f64::max);
    report(
        6,
        "NCE consistency",
        err <= 0.1,
        &format!("max |b + f(x) - (x - 1/2)| on [-2, 3] = {err:.4} <= 0.1"),
    );
}

fn perturbed_flow(dim: usize, depth: usize, width: usize, seed: u64, amount: f64) -> FlowModel {
    let mut r = rng(seed);
    let mut f = FlowModel::new(FlowConfig { dim, depth, width }, &mut r).unwrap();
    for p in f.parameters_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-amount..amount);
        }
    }
    f.mark_initialized();
    f
}

fn perturbed_energy(arch: EnergyArch, dim: usize, seed: u64) -> EnergyModel {
    let mut r = rng(seed);
    let mut e = EnergyModel::new(arch, dim, &mut r).unwrap();
    for p in e.parameters_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    e
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Worst relative error of `grad` against central differences of `f` around `x`.
fn fd_check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        worst = worst.max(rel_err(grad[i], (f(&xp) - f(&xm)) / (2.0 * h)));
    }
    worst
}

fn log_abs_det(mut m: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a * n + c].abs().total_cmp(&m[b * n + c].abs())).unwrap();
        if p != c {
            for k in 0..n {
                m.swap(c * n + k, p * n + k);
            }
        }
        let pivot = m[c * n + c];
        acc += pivot.abs().ln();
        for r in c + 1..n {
            let factor = m[r * n + c] / pivot;
            for k in c..n {
                m[r * n + k] -= factor * m[c * n + k];
            }
        }
    }
    acc
}

#[test]
fn criterion_07_numerical_infrastructure() {
    let mut worst_grad: f64 = 0.0;

    // Latent and data-space scores of a random tilted model.
    let flow = perturbed_flow(3, 3, 8, 11, 0.4);
    let energy = perturbed_energy(EnergyArch::Mlp { hidden: vec![8, 8] }, 3, 12);
    let model = TiltedModel::new(&flow, &energy).unwrap();
    let point = [0.3, -0.7, 1.1];
    let t = |v: &[f64]| Tensor::new(vec![1, 3], v.to_vec()).unwrap();
    let (_, gz) = model.grad_z_log_p(&t(&point)).unwrap();
    worst_grad = worst_grad.max(fd_check(&point, gz.data(), |v| model.log_p_z_unnorm(&t(v)).unwrap()[0]));
    let (_, gx) = model.grad_x_log_p(&t(&point)).unwrap();
    worst_grad = worst_grad.max(fd_check(&point, gx.data(), |v| model.log_p_x_unnorm(&t(v)).unwrap()[0]));

    // Energy parameter gradients, dense and convolutional.
    for (arch, dim) in [
        (EnergyArch::Mlp { hidden: vec![6, 5] }, 3),
        (
            EnergyArch::Conv {
                height: 4,
                width: 4,
                channels: 1,
                filters: 2,
            },
            16,
        ),
    ] {
        let e = perturbed_energy(arch, dim, 13);
        let mut r = rng(14);
        let data = Tensor::new(vec![4, dim], (0..4 * dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let synth = Tensor::new(vec![3, dim], (0..3 * dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (grads, _) = ebm_grad_estimate(&e, &data, &synth).unwrap();
        for (k, g) in grads.iter().enumerate() {
            let base: Vec<f64> = e.parameters()[k].data().to_vec();
            worst_grad = worst_grad.max(fd_check(&base, g.data(), |v| {
                let mut e2 = e.clone();
                e2.parameters_mut()[k].data_mut().copy_from_slice(v);
                ebm_grad_estimate(&e2, &data, &synth).unwrap().1
            }));
        }
    }

    // Flow NLL parameter gradients through the tape.
    let small = perturbed_flow(2, 2, 4, 15, 0.3);
    let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap();
    let nll = |f: &FlowModel| -> f64 { -f.log_prob(&x).unwrap().iter().sum::<f64>() / 3.0 };
    let mut tape = Tape::new();
    let params = small.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let lp = small.log_prob_tape(&mut tape, &params, xv).unwrap();
    let m = tape.mean(lp);
    let loss = tape.neg(m);
    let grads = tape.backward(loss).unwrap();
    for (k, &p) in params.iter().enumerate() {
        let base: Vec<f64> = small.parameters()[k].data().to_vec();
        worst_grad = worst_grad.max(fd_check(&base, grads.wrt(p).data(), |v| {
            let mut f2 = small.clone();
            f2.parameters_mut()[k].data_mut().copy_from_slice(v);
            nll(&f2)
        }));
    }

    // Elementwise ops not covered by the models.
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.8, 1.2, 0.5]).unwrap());
    let a = tape.exp(u);
    let b = tape.add_scalar(a, 1.0);
    let c = tape.log(b).unwrap();
    let s = tape.sigmoid(u);
    let sp = tape.softplus(u);
    let ls = tape.log_sigmoid(u);
    let cs = tape.mul(c, s).unwrap();
    let d = tape.sub(sp, ls).unwrap();
    let e = tape.add(cs, d).unwrap();
    let q = tape.row_sq_norm(e);
    let rs = tape.row_sum(u);
    let qs = tape.mul(q, rs).unwrap();
    let root = tape.sum(qs);
    let g = tape.backward(root).unwrap().wrt(u);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let scalar = |v: &[f64]| -> f64 {
        (0..2)
            .map(|r| {
                let row = &v[2 * r..2 * r + 2];
                let e: Vec<f64> = row
                    .iter()
                    .map(|&w| (w.exp() + 1.0).ln() * sig(w) + (1.0 + w.exp()).ln() - sig(w).ln())
                    .collect();
                e.iter().map(|t| t * t).sum::<f64>() * row.iter().sum::<f64>()
            })
            .sum()
    };
    worst_grad = worst_grad.max(fd_check(&[0.3, -0.8, 1.2, 0.5], g.data(), scalar));

    // Round trip and log-determinant against a numeric Jacobian.
    let flow4 = perturbed_flow(4, 4, 8, 16, 0.4);
    let mut r = rng(17);
    let z = Tensor::new(vec![5, 4], (0..20).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let (xz, ld) = flow4.forward(&z).unwrap();
    let (z_back, _) = flow4.inverse(&xz).unwrap();
    let round_trip = z.max_abs_diff(&z_back);
    let mut worst_ld: f64 = 0.0;
    let h = 1e-6;
    for i in 0..5 {
        let z0 = z.row_slice(i).to_vec();
        let mut jac = vec![0.0; 16];
        for k in 0..4 {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[k] += h;
            zm[k] -= h;
            let fp = flow4.forward(&Tensor::new(vec![1, 4], zp).unwrap()).unwrap().0;
            let fm = flow4.forward(&Tensor::new(vec![1, 4], zm).unwrap()).unwrap().0;
            for j in 0..4 {
                jac[j * 4 + k] = (fp.data()[j] - fm.data()[j]) / (2.0 * h);
            }
        }
        worst_ld = worst_ld.max((log_abs_det(jac, 4) - ld[i]).abs());
    }

    // Leapfrog reversibility on the random tilted latent target.
    let latent = model.latent();
    let (q1, p1) = leapfrog(&latent, &point, &[0.4, -0.2, 0.9], 0.1, 3).unwrap();
    let flipped: Vec<f64> = p1.iter().map(|v| -v).collect();
    let (q2, p2) = leapfrog(&latent, &q1, &flipped, 0.1, 3).unwrap();
    let reversal = (0..3)
        .map(|j| (q2[j] - point[j]).abs().max((p2[j] + [0.4, -0.2, 0.9][j]).abs()))
        .fold(0.0, f64::max);

    report(
        7,
        "numerical infrastructure",
        worst_grad <= 1e-5 && round_trip <= 1e-9 && worst_ld <= 1e-5 && reversal <= 1e-10,
        &format!(
            "gradient rel err {worst_grad:.2e} <= 1e-5, round trip {round_trip:.2e} <= 1e-9, \
             log-det err {worst_ld:.2e} <= 1e-5, leapfrog reversal {reversal:.2e} <= 1e-10"
        ),
    );
}

#[test]
fn criterion_08_diagnostics_oracles() {
    let g = gelman_rubin_scalar(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
    let hand_ok =
        g.between == 0.0 && g.within == 1.0 && g.pooled == 2.0 / 3.0 && g.r_hat == (2.0f64 / 3.0).sqrt();

    let n = 50_000;
    let phi: f64 = 0.5;
    let mut r = rng(18);
    let mut x = Vec::with_capacity(n);
    let mut v: f64 = r.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
    for _ in 0..n {
        x.push(v);
        v = phi * v + r.sample::<f64, _>(StandardNormal);
    }
    let rho = autocorrelation_series(&x, 10).unwrap();
    let tol = 3.0 / (n as f64).sqrt();
    let worst = rho
        .iter()
        .enumerate()
        .map(|(k, &r)| (r - phi.powi(k as i32)).abs())
        .fold(0.0, f64::max);
    report(
        8,
        "diagnostics oracles",
        hand_ok && worst <= tol,
        &format!(
            "hand example R-hat {:.15} = sqrt(2/3) exactly: {hand_ok}; AR(1) phi=0.5 max |rho - phi^k| {worst:.4} <= {tol:.4}",
            g.r_hat
        ),
    );
}

#[test]
fn criterion_09_magnetized_interpolation() {
    let d = demo();
    let r = &d.report;
    let centers = &r.target.centers;
    let latent_of = |k: usize| {
        r.flow
            .inverse(&Tensor::new(vec![1, 2], centers[k].clone()).unwrap())
            .unwrap()
            .0
            .into_data()
    };
    let (z1, z2) = (latent_of(0), latent_of(4));
    let run = interpolate(&d.cfg, &r.flow, &r.energy, &z1, &z2).unwrap();
    let x2 = r.flow.forward(&Tensor::new(vec![1, 2], z2.clone()).unwrap()).unwrap().0.into_data();
    let mode = r.target.nearest_component(&x2);
    let end = run.x.last().unwrap();
    let dist = ((end[0] - centers[mode][0]).powi(2) + (end[1] - centers[mode][1]).powi(2)).sqrt();
    let sigma = r.target.scales[mode];
    let band_limit = d.cfg.interpolate.energy_band;
    report(
        9,
        "magnetized interpolation",
        run.path.positions.len() == 1001 && dist <= 3.0 * sigma && run.energy_band < band_limit,
        &format!(
            "n=1000: endpoint {dist:.3} from mode {mode} (<= 3 sigma = {:.2}); energy band {:.3} < {band_limit}",
            3.0 * sigma,
            run.energy_band
        ),
    );
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn criterion_10_lossless_io() {
    let dir = tempfile::tempdir().unwrap();
    let cases = PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    };

    let mut runner = TestRunner::new(cases.clone());
    let checkpoints = runner.run(
        &(1usize..4, 0usize..4, 1usize..6, any::<u64>(), 0usize..3),
        |(dim, depth, width, seed, arch)| {
            let flow = perturbed_flow(dim, depth, width, seed, 1.0);
            let ck = flow_checkpoint(&flow);
            let bytes = ck.encode().unwrap();
            let back = flow_from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            for (a, b) in flow.parameters().iter().zip(back.parameters()) {
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(flow_checkpoint(&back).encode().unwrap(), bytes);

            let arch = match arch {
                0 => EnergyArch::Linear,
                1 => EnergyArch::Quadratic,
                _ => EnergyArch::Mlp { hidden: vec![width, 3] },
            };
            let energy = perturbed_energy(arch, dim, seed ^ 1);
            let bias = f64::from_bits(seed >> 2);
            let ck = energy_checkpoint(&energy, Some(bias));
            let bytes = ck.encode().unwrap();
            let (back, b) = energy_from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            prop_assert_eq!(b.map(f64::to_bits), Some(bias.to_bits()));
            prop_assert_eq!(energy_checkpoint(&back, b).encode().unwrap(), bytes);
            Ok(())
        },
    );

    let mut runner = TestRunner::new(cases.clone());
    let path = dir.path().join("chains.csv");
    let chain_dumps = runner.run(
        &(1usize..4, 1usize..12, 1usize..4, 1usize..5, any::<u64>()),
        |(m, n, d, stride, seed)| {
            let mut r = rng(seed);
            let mut e = ChainEnsemble::with_capacity(m, n, d, stride);
            let wild = |r: &mut ChaCha8Rng| -> f64 {
                loop {
                    let v = f64::from_bits(r.random());
                    if v.is_finite() {
                        return v;
                    }
                }
            };
            for c in 0..m {
                for _ in 0..n {
                    let pos: Vec<f64> = (0..d).map(|_| wild(&mut r)).collect();
                    let acc = r.random::<bool>();
                    let (eps, en) = (wild(&mut r), wild(&mut r));
                    e.push(c, &pos, acc, eps, en);
                }
            }
            dump_chains(&path, &e, "z").unwrap();
            let back = load_chains(&path).unwrap();
            prop_assert_eq!((back.chains(), back.len(), back.dim(), back.stride()), (m, n, d, stride));
            for c in 0..m {
                prop_assert_eq!(back.accepted(c), e.accepted(c));
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(back.energy(c)), bits(e.energy(c)));
                prop_assert_eq!(bits(back.step_size(c)), bits(e.step_size(c)));
                for t in 0..n {
                    prop_assert_eq!(bits(back.position(c, t)), bits(e.position(c, t)));
                }
            }
            Ok(())
        },
    );

    let mut runner = TestRunner::new(cases);
    let idx = runner.run(
        &(1u32..4, 1u32..6, 1u32..6, prop::collection::vec(any::<u8>(), 100)),
        |(count, h, w, pool)| {
            let len = (count * h * w) as usize;
            let payload: Vec<u8> = pool.iter().cycle().take(len).copied().collect();
            let bytes = idx_bytes(0x0000_0803, &[count, h, w], &payload);
            let parsed = parse_idx_images(&bytes, std::path::Path::new("crafted")).unwrap();
            // Byte-walk oracle: header is 16 bytes, then pixels row-major, one byte each.
            prop_assert_eq!(parsed.pixels.shape(), &[count as usize, (h * w) as usize]);
            for i in 0..len {
                prop_assert_eq!(parsed.pixels.data()[i], bytes[16 + i] as f64 / 127.5 - 1.0);
            }
            let labels = idx_bytes(0x0000_0801, &[count], &payload[..count as usize]);
            prop_assert_eq!(
                parse_idx_labels(&labels, std::path::Path::new("crafted")).unwrap(),
                labels[8..].to_vec()
            );
            prop_assert!(parse_idx_images(&labels, std::path::Path::new("crafted")).is_err());
            prop_assert!(parse_idx_images(&bytes[..bytes.len() - 1], std::path::Path::new("crafted")).is_err());
            Ok(())
        },
    );

    let outcomes = [
        checkpoints.map_err(|e| e.to_string()),
        chain_dumps.map_err(|e| e.to_string()),
        idx.map_err(|e| e.to_string()),
    ];
    let status = |r: &Result<(), String>| if r.is_ok() { "ok" } else { "failed" };
    report(
        10,
        "lossless IO",
        outcomes.iter().all(Result::is_ok),
        &(format!(
            "100 random checkpoints {}, 100 random chain dumps {}, 100 crafted IDX files vs byte-walk oracle {}",
            status(&outcomes[0]),
            status(&outcomes[1]),
            status(&outcomes[2])
        ) + &outcomes.iter().filter_map(|r| r.as_ref().err()).map(|e| format!("; {e}")).collect::<String>()),
    );
}
