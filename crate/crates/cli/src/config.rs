//! Run configuration read from TOML. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use rhotomo::field::FieldConfig;
use rhotomo::geometry::ScanGeometry;
use rhotomo::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub prior: PriorBlock,
    #[serde(default)]
    pub field: FieldConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub paths: PathsBlock,
}

/// Scanner and grid; the view angles come from the simulation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub dso: f64,
    pub dsd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_spacing_u: f64,
    pub det_spacing_v: f64,
    pub vol_dims: [usize; 3],
    pub vol_spacing: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    None,
    EvenOdd,
}

fn default_split() -> Split {
    Split::EvenOdd
}

/// `views` angles at `angle_start + i·(angle_end − angle_start)/views`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub views: usize,
    #[serde(default)]
    pub angle_start: f64,
    #[serde(default = "default_angle_end")]
    pub angle_end: f64,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
    /// Samples per ray for the forward projector.
    pub samples_per_ray: usize,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_angle_end() -> f64 {
    std::f64::consts::PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fdk,
    Cgls,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fdk => "fdk",
            Algorithm::Cgls => "cgls",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fdk" => Ok(Algorithm::Fdk),
            "cgls" => Ok(Algorithm::Cgls),
            other => Err(format!("unknown algorithm '{other}' (expected fdk or cgls)")),
        }
    }
}

/// Classical reconstruction used as the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorBlock {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub tol: f64,
    /// Samples per ray for the reconstruction operators; 0 picks `2·max(dims)`.
    pub samples_per_ray: usize,
}

impl Default for PriorBlock {
    fn default() -> Self {
        PriorBlock {
            algorithm: Algorithm::Fdk,
            iterations: 30,
            tol: 1e-6,
            samples_per_ray: 0,
        }
    }
}

/// Input files; anything left out falls back to the standard name in the
/// output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsBlock {
    pub volume: Option<PathBuf>,
    pub projections: Option<PathBuf>,
    pub train_projections: Option<PathBuf>,
    pub test_projections: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let s = &self.simulation;
        if s.views == 0 || s.samples_per_ray == 0 {
            return bad("simulation.views and simulation.samples_per_ray must be >= 1".into());
        }
        if !(s.noise_level >= 0.0 && s.noise_level.is_finite()) {
            return bad("simulation.noise_level must be >= 0".into());
        }
        if !(s.angle_end > s.angle_start) {
            return bad("simulation.angle_end must exceed angle_start".into());
        }
        if self.prior.iterations == 0 || !(self.prior.tol >= 0.0) {
            return bad("prior.iterations must be >= 1 and prior.tol >= 0".into());
        }
        self.scan_geometry().validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.field.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.training.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        let s = &self.simulation;
        let step = (s.angle_end - s.angle_start) / s.views as f64;
        (0..s.views).map(|i| s.angle_start + i as f64 * step).collect()
    }

    pub fn scan_geometry(&self) -> ScanGeometry {
        let g = &self.geometry;
        ScanGeometry {
            dso: g.dso,
            dsd: g.dsd,
            det_rows: g.det_rows,
            det_cols: g.det_cols,
            det_spacing_u: g.det_spacing_u,
            det_spacing_v: g.det_spacing_v,
            vol_dims: g.vol_dims,
            vol_spacing: g.vol_spacing,
            angles: self.angles(),
        }
    }

    pub fn recon_samples(&self) -> usize {
        match self.prior.samples_per_ray {
            0 => 2 * self.geometry.vol_dims.iter().copied().max().unwrap_or(1),
            m => m,
        }
    }

    /// `--seed` replaces both the simulation and the training seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.simulation.seed = seed;
        self.training.seed = seed;
    }
}
