//! Evaluation metrics: RMSE, global SSIM, coefficient of determination,
//! sample-covariance spectra and the generator/solver consistency check.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::darcy::{assemble, solve, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{BoundarySpec, Field, FieldStack, GridSpec, CH_H, CH_LNK};
use crate::kl::EnergyDenominator;
use crate::linalg::sym_eigen_desc;
use crate::wgan::TrainedModel;

const SSIM_C1: f64 = 0.01;
const SSIM_C2: f64 = 0.03;

pub fn rmse(u: &Field, v: &Field) -> Result<f64> {
    u.same_grid(v)?;
    let n = u.grid().cells() as f64;
    let ss: f64 = u
        .values()
        .iter()
        .zip(v.values().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// Whole-image SSIM with stabilizers C1 = 0.01, C2 = 0.03 and population
/// (divide-by-N) moments; no windowing, no dynamic-range rescaling.
pub fn ssim(u: &Field, v: &Field) -> Result<f64> {
    u.same_grid(v)?;
    let n = u.grid().cells() as f64;
    let mu_u = u.values().sum() / n;
    let mu_v = v.values().sum() / n;
    let mut var_u = 0.0;
    let mut var_v = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in u.values().iter().zip(v.values().iter()) {
        var_u += (a - mu_u) * (a - mu_u);
        var_v += (b - mu_v) * (b - mu_v);
        cov += (a - mu_u) * (b - mu_v);
    }
    var_u /= n;
    var_v /= n;
    cov /= n;
    Ok(((2.0 * mu_u * mu_v + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_u * mu_u + mu_v * mu_v + SSIM_C1) * (var_u + var_v + SSIM_C2)))
}

pub fn r_squared(truth: &Field, pred: &Field) -> Result<f64> {
    truth.same_grid(pred)?;
    let n = truth.grid().cells() as f64;
    let mean = truth.values().sum() / n;
    let tss: f64 = truth.values().iter().map(|&t| (t - mean) * (t - mean)).sum();
    if tss == 0.0 {
        return Err(Error::ConstantTruth);
    }
    let rss: f64 = truth
        .values()
        .iter()
        .zip(pred.values().iter())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - rss / tss)
}

/// Leading spectrum of a dataset channel's sample covariance.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Top-k sample eigenvalues, nonincreasing, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Trace of the full sample covariance (total energy).
    pub trace: f64,
    /// Optional reference spectrum for side-by-side reporting.
    pub reference: Option<Vec<f64>>,
}

impl SpectrumReport {
    /// Cumulative retained-energy curve under either normalization.
    pub fn cumulative(&self, denominator: EnergyDenominator) -> Vec<f64> {
        let denom = match denominator {
            EnergyDenominator::FullTrace => self.trace,
            EnergyDenominator::TruncatedTotal => self.eigenvalues.iter().sum(),
        };
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|&l| {
                acc += l;
                acc / denom
            })
            .collect()
    }
}

/// Eigen-spectrum of the mean-centered sample covariance (divisor n-1) of
/// one channel across a dataset.
pub fn dataset_spectrum(data: &FieldStack, channel: usize, k: usize) -> Result<SpectrumReport> {
    let n = data.n_samples();
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let grid = data.grid();
    let cells = grid.cells();
    if k < 1 || k > cells {
        return Err(Error::InvalidParameter(format!(
            "spectrum k = {k} outside [1, {cells}]"
        )));
    }
    let mut x = Array2::zeros((n, cells));
    for s in 0..n {
        let ch = data.channel(s, channel);
        for (p, &v) in ch.iter().enumerate() {
            x[[s, p]] = v;
        }
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for mut row in x.axis_iter_mut(ndarray::Axis(0)) {
        row -= &mean;
    }
    let cov = x.t().dot(&x) / (n as f64 - 1.0);
    let trace = cov.diag().sum();
    let (values, _) = sym_eigen_desc(&cov)?;
    let eigenvalues: Vec<f64> = values[..k].iter().map(|&v| v.max(0.0)).collect();
    Ok(SpectrumReport {
        eigenvalues,
        trace,
        reference: None,
    })
}

/// Per-sample physics agreement of a generator: RMSE/SSIM between the
/// generated head channel and the solver's head for the generated
/// conductivity.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub rmse: Vec<f64>,
    pub ssim: Vec<f64>,
    /// (sample index, error) for solves that failed; excluded from means.
    pub failures: Vec<(usize, String)>,
}

impl ConsistencyReport {
    pub fn mean_rmse(&self) -> f64 {
        mean(&self.rmse)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Compare the h channel of physical-unit samples against the Darcy
/// solver run on their own lnK channel.
pub fn consistency_of_samples(
    samples: &Array4<f64>,
    grid: GridSpec,
    bc: &BoundarySpec,
    q: &Field,
    solver: &SolverConfig,
) -> Result<ConsistencyReport> {
    let n = samples.dim().0;
    let results: Vec<std::result::Result<(f64, f64), String>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let lnk = samples
                .index_axis(ndarray::Axis(0), s)
                .index_axis_move(ndarray::Axis(0), CH_LNK)
                .to_owned();
            let h_gen = samples
                .index_axis(ndarray::Axis(0), s)
                .index_axis_move(ndarray::Axis(0), CH_H)
                .to_owned();
            let run = || -> Result<(f64, f64)> {
                let k = Field::from_values(grid, lnk.mapv(f64::exp))?;
                let h_gen = Field::from_values(grid, h_gen)?;
                let sys = assemble(&k, bc, q)?;
                let h_sol = solve(&sys, solver)?;
                Ok((rmse(&h_gen, &h_sol)?, ssim(&h_gen, &h_sol)?))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let mut report = ConsistencyReport {
        rmse: Vec::new(),
        ssim: Vec::new(),
        failures: Vec::new(),
    };
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok((a, b)) => {
                report.rmse.push(a);
                report.ssim.push(b);
            }
            Err(e) => report.failures.push((s, e)),
        }
    }
    Ok(report)
}

/// Draw `n` latent samples from a trained model and run the consistency
/// comparison on its outputs.
pub fn consistency_check(
    model: &TrainedModel,
    n: usize,
    bc: &BoundarySpec,
    q: &Field,
    solver: &SolverConfig,
    seed: u64,
) -> Result<ConsistencyReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = Array2::from_shape_fn((n, model.cfg.z_dim), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let samples = model.generate(&z);
    consistency_of_samples(&samples, model.cfg.grid, bc, q, solver)
}
