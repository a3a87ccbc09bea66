//! Core library for physics-informed generative modeling of groundwater
//! fields: Gaussian-process priors with truncated Karhunen-Loève sampling,
//! a finite-volume Darcy flow solver, Sobel-discretized physics losses,
//! a WGAN-GP trained from scratch on the CPU, and latent-space inpainting
//! from sparse point measurements.

pub mod autodiff;
pub mod darcy;
pub mod error;
pub mod grid;
pub mod inpaint;
pub mod kl;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod norm;
pub mod sobel;
pub mod wgan;

pub use error::{Error, Result};
pub use grid::{
    make_grid, BoundarySpec, Field, FieldStack, GridSpec, Side, SideBc, CH_F1, CH_F2, CH_H,
    CH_LNK, N_CHANNELS,
};
pub use kl::{
    build_covariance, eigendecompose, CovarianceKind, CovarianceSpec, EnergyDenominator, KlBasis,
};
