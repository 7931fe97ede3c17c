//! Experiment configuration, loadable from TOML and echoed into summaries.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::SweepOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mvt,
    Ts,
    Gsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Naive,
    Blocked,
    Collapsed,
    Ep,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "blocked" => Ok(Self::Blocked),
            "collapsed" => Ok(Self::Collapsed),
            "ep" => Ok(Self::Ep),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Naive => "naive",
            Self::Blocked => "blocked",
            Self::Collapsed => "collapsed",
            Self::Ep => "ep",
        };
        write!(f, "{name}")
    }
}

/// Wall-clock recording mode for trace rows. `Off` zeroes the per-iteration
/// column, making the whole trace file byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    #[default]
    Wall,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsDatasetConfig {
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub a: f64,
    pub lambda: f64,
}

impl Default for TsDatasetConfig {
    /// Reference synthetic settings: T = 200, K = 20, sigma_x2 = 0.01,
    /// sigma_y2 = 1, a = 0.95, lambda = 1.
    fn default() -> Self {
        Self {
            n: 300,
            t: 200,
            k: 20,
            sigma_x2: 0.01,
            sigma_y2: 1.0,
            a: 0.95,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvtDatasetConfig {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub dof: f64,
    /// Scales the location spread of the sampled cluster means; larger is
    /// easier (higher SNR).
    pub mean_scale: f64,
}

impl Default for MvtDatasetConfig {
    /// Reference synthetic settings: nu = 5, K = 20, N = 600.
    fn default() -> Self {
        Self {
            n: 600,
            k: 20,
            d: 3,
            dof: 5.0,
            mean_scale: 8.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsmDatasetConfig {
    pub n: usize,
    /// Scale ratio of the wide mixture component.
    pub c: f64,
    /// Proportion of the wide component; 0 is the conjugate case.
    pub r: f64,
    /// Mean difference in units of the emission variance.
    pub delta: f64,
    pub sigma2: f64,
}

impl Default for GsmDatasetConfig {
    fn default() -> Self {
        Self {
            n: 100,
            c: 5.0,
            r: 0.2,
            delta: 0.5,
            sigma2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Ts(TsDatasetConfig),
    Mvt(MvtDatasetConfig),
    Gsm(GsmDatasetConfig),
}

fn default_damping() -> f64 {
    1.0
}

fn default_quad_m() -> usize {
    64
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub sampler: SamplerKind,
    pub dataset: DatasetConfig,
    pub sweeps: usize,
    #[serde(default)]
    pub burn_in: usize,
    /// Full-EP refresh cadence in sweeps; 0 disables the periodic pass.
    #[serde(default)]
    pub refresh_every: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_quad_m")]
    pub quad_m: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep_order: SweepOrder,
    #[serde(default)]
    pub sample_hyperparams: bool,
    /// Concurrent candidate evaluation within each visit.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub timing: TimingMode,
    /// Record the joint log-likelihood each iteration (skipped in
    /// benchmark mode, where it would distort the timing).
    #[serde(default = "default_true")]
    pub trace_loglik: bool,
    /// Load the dataset from files instead of generating it from the
    /// dataset parameters.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub truth_path: Option<PathBuf>,
    /// Override the matched NIW prior kappa for the MVT experiment.
    #[serde(default)]
    pub prior_kappa: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 && self.burn_in > 0 {
            return Err(Error::Config("burn_in exceeds sweeps".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping must be in (0, 1], got {}",
                self.damping
            )));
        }
        if self.quad_m == 0 {
            return Err(Error::Config("quad_m must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        let matches = matches!(
            (self.model, &self.dataset),
            (ModelKind::Ts, DatasetConfig::Ts(_))
                | (ModelKind::Mvt, DatasetConfig::Mvt(_))
                | (ModelKind::Gsm, DatasetConfig::Gsm(_))
        );
        if !matches {
            return Err(Error::Config("dataset kind does not match model".into()));
        }
        Ok(())
    }
}
