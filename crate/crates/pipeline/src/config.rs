//! Experiment configuration: one TOML file drives every command.
//!
//! Unknown keys are rejected so typos fail fast. Two presets ship with
//! the binary: `toy` (16x16, minutes on a CPU) and `paper` (64x64 full
//! scale, long-running).

use serde::{Deserialize, Serialize};

use geogan_core::darcy::{SolveMethod, SolverConfig};
use geogan_core::inpaint::InpaintConfig;
use geogan_core::kl::{CovarianceKind, CovarianceSpec};
use geogan_core::nn::NetworkConfig;
use geogan_core::sobel::PhysicsLossConfig;
use geogan_core::wgan::TrainConfig;
use geogan_core::{BoundarySpec, Field, GridSpec};

use crate::error::{PipelineError, Result};

pub const TOY_TOML: &str = include_str!("../../../configs/toy.toml");
pub const PAPER_TOML: &str = include_str!("../../../configs/paper.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    pub mu: f64,
    pub sigma2: f64,
    pub l1: f64,
    pub l2: f64,
    pub kernel: CovarianceKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    pub left_h: f64,
    pub right_h: f64,
    pub top_flux: f64,
    pub bottom_flux: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSection {
    pub truncation: usize,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

fn default_max_cells() -> usize {
    geogan_core::kl::DEFAULT_CELL_CAP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: SolveMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub z_dim: usize,
    pub base_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_kernel() -> usize {
    4
}
fn default_stride() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub gp_lambda: f64,
    pub lambda_r: f64,
    pub lambda_b: f64,
    pub d_steps_per_g: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub interior_crop: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintSection {
    pub lambda_p: f64,
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

fn default_lr_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub consistency_samples: usize,
    pub spectrum_k_lnk: usize,
    pub spectrum_k_h: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub truth_seed: u64,
    pub cases: Vec<[usize; 2]>,
    pub zdim_dims: Vec<usize>,
    pub zdim_case: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub covariance: CovarianceSection,
    pub boundary: BoundarySection,
    pub kl: KlSection,
    pub solver: SolverSection,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub physics: PhysicsSection,
    pub inpaint: InpaintSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn toy() -> Self {
        Self::from_toml(TOY_TOML).expect("bundled toy config is valid")
    }

    pub fn paper() -> Self {
        Self::from_toml(PAPER_TOML).expect("bundled paper config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        self.covariance_spec()?;
        self.network_config()?;
        self.solver_config().validate()?;
        self.train_config().validate()?;
        self.inpaint_config().validate()?;
        self.physics_config().validate()?;
        let cells = self.grid.nx * self.grid.ny;
        if self.kl.truncation < 1 || self.kl.truncation > cells {
            return Err(PipelineError::Config(format!(
                "kl.truncation {} outside [1, {cells}]",
                self.kl.truncation
            )));
        }
        for dim in &self.experiment.zdim_dims {
            if *dim < 1 || *dim > self.kl.truncation {
                return Err(PipelineError::Config(format!(
                    "zdim_dims entry {dim} outside [1, truncation {}]",
                    self.kl.truncation
                )));
            }
        }
        for case in &self.experiment.cases {
            if case[0] + case[1] == 0 {
                return Err(PipelineError::Config(
                    "a case must request at least one measurement".into(),
                ));
            }
            if case[0] > cells || case[1] > cells {
                return Err(PipelineError::Config(format!(
                    "case ({}, {}) exceeds the grid pixel count {cells}",
                    case[0], case[1]
                )));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn covariance_spec(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(
            self.covariance.mu,
            self.covariance.sigma2,
            self.covariance.l1,
            self.covariance.l2,
            self.covariance.kernel,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn boundary_spec(&self) -> BoundarySpec {
        BoundarySpec::darcy(
            self.boundary.left_h,
            self.boundary.right_h,
            self.boundary.top_flux,
            self.boundary.bottom_flux,
        )
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            method: self.solver.method,
            tolerance: self.solver.tolerance,
            max_iterations: self.solver.max_iterations,
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let grid = self.grid_spec()?;
        let cfg = NetworkConfig {
            grid,
            z_dim: self.network.z_dim,
            base_channels: self.network.base_channels,
            kernel_size: self.network.kernel_size,
            stride: self.network.stride,
            dropout_rate: self.network.dropout_rate,
        };
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gp_lambda: self.train.gp_lambda,
            lambda_r: self.train.lambda_r,
            lambda_b: self.train.lambda_b,
            d_steps_per_g: self.train.d_steps_per_g,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            total_g_iterations: self.train.iterations,
            seed: self.train.seed,
        }
    }

    pub fn physics_config(&self) -> PhysicsLossConfig {
        PhysicsLossConfig {
            lambda_r: self.train.lambda_r,
            lambda_b: self.train.lambda_b,
            interior_crop: self.physics.interior_crop,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            lambda_p: self.inpaint.lambda_p,
            learning_rate: self.inpaint.learning_rate,
            lr_decay: self.inpaint.lr_decay,
            max_iterations: self.inpaint.max_iterations,
            restarts: self.inpaint.restarts,
            seed: self.inpaint.seed,
        }
    }

    /// Zero source field on the configured grid.
    pub fn source_field(&self) -> Result<Field> {
        Ok(Field::constant(self.grid_spec()?, 0.0))
    }
}
