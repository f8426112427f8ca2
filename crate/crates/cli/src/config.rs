//! Run configuration: TOML with one table per phase. Every key has a default
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiltflow::datasets::TargetSpec;
use tiltflow::energy::EnergyArch;
use tiltflow::flow::{FlowConfig, FlowSize};
use tiltflow::io::arch_from_string;
use tiltflow::optim::AdamConfig;
use tiltflow::samplers::HmcConfig;
use tiltflow::trainers::{NceTrainConfig, NtTrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub target: TargetSection,
    pub flow: FlowSection,
    pub energy: EnergySection,
    pub ebm: EbmSection,
    pub nce: NceSection,
    pub hmc: HmcSection,
    pub sample: SampleSection,
    pub diagnose: DiagnoseSection,
    pub interpolate: InterpolateSection,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            target: TargetSection::default(),
            flow: FlowSection::default(),
            energy: EnergySection::default(),
            ebm: EbmSection::default(),
            nce: NceSection::default(),
            hmc: HmcSection::default(),
            sample: SampleSection::default(),
            diagnose: DiagnoseSection::default(),
            interpolate: InterpolateSection::default(),
            grid: GridSection::default(),
        }
    }
}

/// Training data: a synthetic 2-D mixture or an IDX image file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// `ring`, `grid`, `two-moons` or `idx`.
    pub kind: String,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub side: usize,
    pub spacing: f64,
    pub per_moon: usize,
    /// Number of training points drawn from a synthetic target.
    pub samples: usize,
    pub idx_path: Option<PathBuf>,
    /// Block-averaging factor for IDX images (1 keeps full resolution).
    pub downscale: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: "ring".into(),
            modes: 8,
            radius: 4.0,
            sigma: 0.3,
            side: 3,
            spacing: 3.0,
            per_moon: 8,
            samples: 20_000,
            idx_path: None,
            downscale: 1,
        }
    }
}

impl TargetSection {
    pub fn spec(&self) -> Result<Option<TargetSpec>, CliError> {
        Ok(Some(match self.kind.as_str() {
            "ring" => TargetSpec::Ring {
                modes: self.modes,
                radius: self.radius,
                sigma: self.sigma,
            },
            "grid" => TargetSpec::Grid {
                side: self.side,
                spacing: self.spacing,
                sigma: self.sigma,
            },
            "two-moons" => TargetSpec::TwoMoons {
                per_moon: self.per_moon,
                sigma: self.sigma,
            },
            "idx" => return Ok(None),
            other => return Err(CliError::Config(format!("unknown target kind {other:?}"))),
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// `small`, `medium` or `large`; `depth`/`width` override the preset.
    pub size: String,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            size: "small".into(),
            depth: None,
            width: None,
            iterations: 600,
            batch_size: 256,
            learning_rate: 1e-3,
            clip_norm: 100.0,
        }
    }
}

impl FlowSection {
    pub fn flow_config(&self, dim: usize) -> Result<FlowConfig, CliError> {
        let size = FlowSize::parse(&self.size)
            .ok_or_else(|| CliError::Config(format!("unknown flow size {:?}", self.size)))?;
        let mut c = FlowConfig::preset(dim, size);
        if let Some(d) = self.depth {
            c.depth = d;
        }
        if let Some(w) = self.width {
            c.width = w;
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    /// `zero`, `linear`, `quadratic`, `mlp:W1,W2,...` or `conv:H,W,C,F`.
    pub arch: String,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            arch: "mlp:64,64".into(),
        }
    }
}

impl EnergySection {
    pub fn arch(&self) -> Result<EnergyArch, CliError> {
        arch_from_string(&self.arch).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl Default for EbmSection {
    fn default() -> Self {
        Self {
            iterations: 800,
            learning_rate: 3e-3,
            batch_size: 64,
            clip_norm: 100.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub initial_bias: f64,
    pub clip_norm: f64,
}

impl Default for NceSection {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1e-3,
            batch_size: 128,
            positive_fraction: 0.5,
            initial_bias: 0.0,
            clip_norm: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcSection {
    pub leapfrog_steps: usize,
    /// HMC transitions per learning iteration.
    pub steps_per_call: usize,
    pub initial_step_size: f64,
    pub target_accept: f64,
    pub adapt_gain: f64,
}

impl Default for HmcSection {
    fn default() -> Self {
        Self {
            leapfrog_steps: 3,
            steps_per_call: 5,
            initial_step_size: 0.15,
            target_accept: 0.651,
            adapt_gain: 0.01,
        }
    }
}

impl HmcSection {
    pub fn hmc_config(&self) -> HmcConfig {
        HmcConfig {
            leapfrog_steps: self.leapfrog_steps,
            steps_per_call: self.steps_per_call,
            initial_step_size: self.initial_step_size,
            target_accept: self.target_accept,
            adapt_gain: self.adapt_gain,
            adapt: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    LatentHmc,
    DataLangevin,
    DataHmc,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "latent-hmc" => Some(Self::LatentHmc),
            "data-langevin" => Some(Self::DataLangevin),
            "data-hmc" => Some(Self::DataHmc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LatentHmc => "latent-hmc",
            Self::DataLangevin => "data-langevin",
            Self::DataHmc => "data-hmc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    /// `latent-hmc`, `data-langevin` or `data-hmc`.
    pub sampler: String,
    pub chains: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub record_every: usize,
    pub langevin_step_size: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            sampler: "latent-hmc".into(),
            chains: 64,
            steps: 2000,
            burn_in: 400,
            record_every: 1,
            langevin_step_size: 0.05,
        }
    }
}

impl SampleSection {
    pub fn kind(&self) -> Result<SamplerKind, CliError> {
        SamplerKind::parse(&self.sampler)
            .ok_or_else(|| CliError::Config(format!("unknown sampler {:?}", self.sampler)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Largest autocorrelation lag, in sampler steps.
    pub max_lag: usize,
    pub r_hat_threshold: f64,
    /// Mode-coverage radius in units of the component scale.
    pub coverage_sigmas: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            max_lag: 1000,
            r_hat_threshold: 1.2,
            coverage_sigmas: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateSection {
    pub gamma: f64,
    pub steps: usize,
    pub dt: f64,
    /// Latent endpoints; drawn from `N(0, I)` when absent.
    pub z1: Option<Vec<f64>>,
    pub z2: Option<Vec<f64>>,
    /// Upper bound on `max U − min U` along the path reported in the summary.
    pub energy_band: f64,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        Self {
            gamma: 20.0,
            steps: 1000,
            dt: 1e-3,
            z1: None,
            z2: None,
            energy_band: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            cells: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks cross-field constraints that the types cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.target.spec()?;
        if self.target.kind == "idx" && self.target.idx_path.is_none() {
            return bad("target.kind = \"idx\" requires target.idx_path");
        }
        if self.target.samples == 0 {
            return bad("target.samples must be positive");
        }
        self.flow.flow_config(2)?;
        self.energy.arch()?;
        self.sample.kind()?;
        if self.flow.iterations == 0 || self.flow.batch_size == 0 {
            return bad("flow.iterations and flow.batch_size must be positive");
        }
        if self.sample.chains == 0 || self.sample.record_every == 0 || self.sample.steps < self.sample.record_every {
            return bad("sample needs chains >= 1 and 1 <= record_every <= steps");
        }
        if self.sample.burn_in >= self.sample.steps {
            return bad("sample.burn_in must be below sample.steps");
        }
        if self.grid.cells == 0 || !(self.grid.hi > self.grid.lo) {
            return bad("grid needs cells >= 1 and hi > lo");
        }
        self.nt_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.nce_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.interpolate.gamma >= 0.0) || self.interpolate.steps == 0 || !(self.interpolate.dt > 0.0) {
            return bad("interpolate needs gamma >= 0, steps >= 1, dt > 0");
        }
        Ok(())
    }

    pub fn nt_config(&self) -> NtTrainConfig {
        NtTrainConfig {
            iterations: self.ebm.iterations,
            adam: AdamConfig::with_lr(self.ebm.learning_rate),
            batch_size: self.ebm.batch_size,
            hmc: self.hmc.hmc_config(),
            clip_norm: Some(self.ebm.clip_norm),
            weight_decay: self.ebm.weight_decay,
        }
    }

    pub fn nce_config(&self) -> NceTrainConfig {
        NceTrainConfig {
            iterations: self.nce.iterations,
            adam: AdamConfig::with_lr(self.nce.learning_rate),
            batch_size: self.nce.batch_size,
            positive_fraction: self.nce.positive_fraction,
            initial_bias: self.nce.initial_bias,
            clip_norm: Some(self.nce.clip_norm),
        }
    }
}
