//! JSON experiment configuration.

use std::path::Path;

use boxcar_core::control::Control;
use boxcar_core::cost::CostSpec;
use boxcar_core::ebt::{Discretization, InitialDatum, Placement};
use boxcar_core::measure::DiscreteMeasure;
use boxcar_core::model::{welfare_initial_density, welfare_model, ControlBox, ModelSpec, Profile, RateFunction, WelfareParams};
use boxcar_core::optimizer::{OptimizerSettings, RefineLevel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Age-structured welfare model; omitted fields take the demo defaults.
    Welfare(WelfareParams<f64>),
    Custom {
        growth: RateFunction<f64>,
        mortality: RateFunction<f64>,
        birth: RateFunction<f64>,
        control_box: ControlBox<f64>,
        /// Defaults to the analytic bound of the rate families.
        #[serde(default)]
        declared_lipschitz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    Atoms { points: Vec<f64>, masses: Vec<f64> },
    Density { density: Profile<f64>, support: f64 },
    /// One mass per initial cell, placed at the cell midpoints.
    Histogram { masses: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub schedule: Vec<Discretization<f64>>,
    pub reference: Discretization<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Snapshot every this many windows.
    pub save_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { save_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Required for custom models; the welfare model supplies its own.
    #[serde(default)]
    pub cost: Option<CostSpec<f64>>,
    /// Defaults to the welfare initial density for the welfare model.
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    /// Defaults to the welfare horizon for the welfare model.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub discretization: Option<Discretization<f64>>,
    /// Fixed control for simulate/gradient-check/convergence; defaults to the
    /// lower box corner.
    #[serde(default)]
    pub control: Option<Control<f64>>,
    /// Piece count for optimize.
    #[serde(default)]
    pub pieces: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub refine: Vec<RefineLevel<f64>>,
    #[serde(default)]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_fd_step() -> f64 {
    1e-5
}

/// Fully resolved inputs shared by the commands.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelSpec<f64>,
    pub cost: Option<CostSpec<f64>>,
    pub datum: InitialDatum<f64>,
    pub horizon: f64,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Default welfare demonstration: schedule `(n, Δt, M)` = (100, 1, 10),
    /// (200, 0.5, 10), (400, 0.25, 10) with `Δx = Δt`.
    pub fn welfare_demo() -> Self {
        let level = |n: usize, dt: f64| RefineLevel {
            disc: Discretization::new(n, dt, 1),
            pieces: 10,
        };
        Self {
            model: ModelConfig::Welfare(WelfareParams::default()),
            cost: None,
            initial: None,
            horizon: None,
            discretization: Some(Discretization::new(100, 1.0, 1)),
            control: None,
            pieces: Some(10),
            optimizer: OptimizerSettings::default(),
            refine: vec![level(100, 1.0), level(200, 0.5), level(400, 0.25)],
            convergence: None,
            fd_step: default_fd_step(),
            output: OutputConfig::default(),
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys), hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut warnings = Vec::new();
        let (model, welfare_cost, default_horizon) = match &self.model {
            ModelConfig::Welfare(params) => {
                let (m, c) = welfare_model(params)?;
                (m, Some(c), Some(params.horizon))
            }
            ModelConfig::Custom {
                growth,
                mortality,
                birth,
                control_box,
                declared_lipschitz,
            } => {
                let mut m = ModelSpec {
                    growth: growth.clone(),
                    mortality: mortality.clone(),
                    birth: birth.clone(),
                    control_box: control_box.clone(),
                    declared_lipschitz: 0.0,
                };
                m.check()?;
                m.declared_lipschitz = declared_lipschitz.unwrap_or_else(|| m.lipschitz_bound());
                (m, None, None)
            }
        };
        let cost = self.cost.clone().or(welfare_cost);
        if let Some(c) = &cost {
            c.check(model.control_dims())?;
        }
        let horizon = self
            .horizon
            .or(default_horizon)
            .ok_or_else(|| CliError::Config("horizon is required for custom models".into()))?;
        if !(horizon > 0.0) {
            return Err(CliError::Config("horizon must be positive".into()));
        }
        let datum = match &self.initial {
            Some(InitialConfig::Atoms { points, masses }) => {
                InitialDatum::atoms(DiscreteMeasure::normalize(points, masses)?)
            }
            Some(InitialConfig::Density { density, support }) => InitialDatum::Density {
                density: density.clone(),
                support: *support,
            },
            Some(InitialConfig::Histogram { masses }) => {
                let disc = self.discretization()?;
                if masses.len() != disc.cells {
                    return Err(CliError::Config(format!(
                        "histogram has {} masses for {} cells",
                        masses.len(),
                        disc.cells
                    )));
                }
                let dx = disc.cell_width();
                let points: Vec<f64> = (0..masses.len()).map(|i| (i as f64 + 0.5) * dx).collect();
                InitialDatum::atoms(DiscreteMeasure::normalize(&points, masses)?)
            }
            None => match &self.model {
                ModelConfig::Welfare(_) => InitialDatum::Density {
                    density: welfare_initial_density(),
                    support: 100.0,
                },
                ModelConfig::Custom { .. } => {
                    return Err(CliError::Config("initial measure is required for custom models".into()))
                }
            },
        };
        if let Some(d) = &self.discretization {
            if d.placement == Placement::GridLeft && matches!(self.initial, Some(InitialConfig::Histogram { .. })) {
                warnings.push("histogram masses sit at cell midpoints; grid-left placement moves them to the left edges".into());
            }
        }
        Ok(Resolved {
            model,
            cost,
            datum,
            horizon,
            warnings,
        })
    }

    pub fn discretization(&self) -> Result<Discretization<f64>, CliError> {
        let d = self
            .discretization
            .clone()
            .ok_or_else(|| CliError::Config("discretization section is required".into()))?;
        d.check()?;
        Ok(d)
    }
}

impl Resolved {
    pub fn cost(&self) -> Result<&CostSpec<f64>, CliError> {
        self.cost
            .as_ref()
            .ok_or_else(|| CliError::Config("cost section is required for custom models".into()))
    }

    /// The configured control, or the lower box corner on `[0, horizon]`.
    pub fn control(&self, configured: Option<&Control<f64>>) -> Result<Control<f64>, CliError> {
        match configured {
            Some(c) => Ok(c.clone()),
            None => Ok(Control::constant(self.horizon, self.model.control_box.lower.clone())?),
        }
    }
}
