//! Run configuration: one versioned JSON document describing the system,
//! schemes, grids, training setup, tolerances, and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nnrk_core::enhanced::NormKind;
use nnrk_core::nn::{AdamWConfig, PlateauConfig};
use nnrk_core::ode::{system_by_name, ParamVec};
use nnrk_core::rk::{grid_stride, step_count, tableau_by_name, ButcherTableau};

use crate::AppError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// Names the output subdirectory; outputs land in `output_dir/run_id/`.
    pub run_id: String,
    pub system: String,
    /// Base scheme whose local error the network learns.
    pub tableau: String,
    /// Embedded pair for hybrid runs; its lower order must equal the base
    /// tableau's order.
    #[serde(default)]
    pub tableau_embedded: Option<String>,
    pub h: f64,
    pub h_ref: f64,
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub params: ParamsConfig,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub optimizer: Option<AdamWConfig>,
    #[serde(default)]
    pub scheduler: Option<PlateauConfig>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub hybrid: Option<HybridToleranceConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    /// Training parameter grid (one vector per grid point).
    #[serde(default)]
    pub train: Vec<Vec<f64>>,
    /// Held-out validation grid.
    #[serde(default)]
    pub validation: Vec<Vec<f64>>,
    /// In-distribution interval benchmark runs sample from.
    #[serde(default)]
    pub test_interval: Option<(f64, f64)>,
    /// Out-of-distribution interval for the mixed benchmark sweep.
    #[serde(default)]
    pub ood_interval: Option<(f64, f64)>,
    #[serde(default = "default_ood_ratio")]
    pub ood_ratio: f64,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
}

fn default_ood_ratio() -> f64 {
    0.25
}

fn default_n_runs() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden layer widths; input/output widths come from the data.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridToleranceConfig {
    pub atol: Vec<f64>,
    pub rtol: Vec<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub norm_kind: NormKind,
}

fn default_kappa() -> f64 {
    1.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub h_list: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_timing_calls")]
    pub timing_calls: usize,
    /// Any of "plain", "rk3", "richardson", "enhanced", "hybrid";
    /// "rk3" is the embedded pair run as a plain third-order method.
    #[serde(default = "default_solvers")]
    pub solvers: Vec<String>,
}

fn default_timing_calls() -> usize {
    1_000_000
}

fn default_solvers() -> Vec<String> {
    ["plain", "richardson", "enhanced", "hybrid"]
        .map(String::from)
        .to_vec()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Parameter vector for single-trajectory runs.
    pub param: Vec<f64>,
}

/// Scheme fingerprint stored next to a trained model so later commands can
/// refuse to combine a model with the wrong system, scheme, or step size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub system: String,
    pub tableau: String,
    pub h: f64,
    pub base_order: u32,
    pub state_dim: usize,
    pub param_dim: usize,
}

/// Calibrated acceptance threshold with the settings it was computed under.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdFile {
    pub delta_max: f64,
    pub kappa: f64,
    pub norm_kind: NormKind,
    pub atol: Vec<f64>,
    pub rtol: Vec<f64>,
}

pub fn load_config(path: &Path) -> Result<RunConfig, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("config {}: {e}", path.display())))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), AppError> {
    if cfg.config_version != 1 {
        return Err(AppError::config(format!(
            "unsupported config_version {}, expected 1",
            cfg.config_version
        )));
    }
    if cfg.run_id.is_empty() || cfg.run_id.contains(['/', '\\']) {
        return Err(AppError::config(format!(
            "run_id must be a plain directory name, got '{}'",
            cfg.run_id
        )));
    }
    let sys = system_by_name(&cfg.system)?;
    let base = tableau_by_name(&cfg.tableau)?;
    if cfg.x0.len() != sys.state_dim() {
        return Err(AppError::config(format!(
            "x0 has {} components but system '{}' has state dimension {}",
            cfg.x0.len(),
            cfg.system,
            sys.state_dim()
        )));
    }
    grid_stride(cfg.h, cfg.h_ref)
        .map_err(|e| AppError::config(format!("h/h_ref: {e}")))?;
    step_count(cfg.t_end, cfg.h)
        .map_err(|e| AppError::config(format!("t_end/h: {e}")))?;
    for grid_name in ["train", "validation"] {
        let grid = if grid_name == "train" {
            &cfg.params.train
        } else {
            &cfg.params.validation
        };
        for (i, p) in grid.iter().enumerate() {
            if p.len() != sys.param_dim() {
                return Err(AppError::config(format!(
                    "params.{grid_name}[{i}] has {} components but system '{}' has {} parameters",
                    p.len(),
                    cfg.system,
                    sys.param_dim()
                )));
            }
        }
    }
    if let Some(name) = &cfg.tableau_embedded {
        let pair = tableau_by_name(name)?;
        if pair.order_embedded() != Some(base.order()) {
            return Err(AppError::config(format!(
                "tableau_embedded '{name}' does not embed an order-{} scheme",
                base.order()
            )));
        }
    }
    if let Some(h) = &cfg.hybrid {
        if h.atol.len() != sys.state_dim() || h.rtol.len() != sys.state_dim() {
            return Err(AppError::config(format!(
                "hybrid.atol/rtol must have one entry per state component ({})",
                sys.state_dim()
            )));
        }
    }
    if let Some(b) = &cfg.bench {
        for h in &b.h_list {
            grid_stride(*h, cfg.h_ref)
                .map_err(|e| AppError::config(format!("bench.h_list/h_ref: {e}")))?;
            step_count(cfg.t_end, *h)
                .map_err(|e| AppError::config(format!("t_end/bench.h_list: {e}")))?;
        }
        for s in &b.solvers {
            if !["plain", "rk3", "richardson", "enhanced", "hybrid"].contains(&s.as_str()) {
                return Err(AppError::config(format!("unknown bench solver '{s}'")));
            }
        }
    }
    if let Some(s) = &cfg.simulate {
        if s.param.len() != sys.param_dim() {
            return Err(AppError::config(format!(
                "simulate.param has {} components but system '{}' has {} parameters",
                s.param.len(),
                cfg.system,
                sys.param_dim()
            )));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn base_tableau(&self) -> ButcherTableau {
        tableau_by_name(&self.tableau).expect("validated")
    }

    pub fn embedded_tableau(&self) -> Result<ButcherTableau, AppError> {
        let name = self.tableau_embedded.as_ref().ok_or_else(|| {
            AppError::config("this command needs 'tableau_embedded' in the config".to_string())
        })?;
        Ok(tableau_by_name(name).expect("validated"))
    }

    pub fn train_grid(&self) -> Result<Vec<ParamVec>, AppError> {
        grid_from(&self.params.train, "params.train")
    }

    pub fn validation_grid(&self) -> Result<Vec<ParamVec>, AppError> {
        grid_from(&self.params.validation, "params.validation")
    }
}

fn grid_from(raw: &[Vec<f64>], field: &str) -> Result<Vec<ParamVec>, AppError> {
    if raw.is_empty() {
        return Err(AppError::config(format!("{field} must not be empty")));
    }
    raw.iter()
        .map(|p| ParamVec::new(p.clone()).map_err(AppError::from))
        .collect()
}
