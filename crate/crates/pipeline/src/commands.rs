//! End-to-end commands: dataset generation, training, unconditional
//! evaluation, conditional inpainting cases and the latent-dimension
//! study. Every command is a deterministic function of (config, inputs,
//! seeds); artifacts land under an output directory as binary containers,
//! TSV tables and PGM images.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use geogan_core::darcy::{flux_divergence, generate_dataset, generate_pair};
use geogan_core::inpaint::{
    inpaint, sample_measurements, GanLatentModel, MeasurementSet, RestartResult,
};
use geogan_core::kl::{eigendecompose, EnergyDenominator, KlBasis};
use geogan_core::metrics::{consistency_of_samples, dataset_spectrum, r_squared, rmse};
use geogan_core::norm::ChannelStats;
use geogan_core::sobel::residual_loss;
use geogan_core::wgan::{train_with_snapshots, LogRow, TrainedModel};
use geogan_core::{
    Field, FieldStack, CH_F1, CH_F2, CH_H, CH_LNK,
};

use crate::checkpoint::{load_model, save_model};
use crate::config::ExperimentConfig;
use crate::dataset::{DatasetFile, DatasetManifest};
use crate::error::{PipelineError, Result};
use crate::report::{fmt_f, write_pgm, write_tsv};

/// Covariance assembly + truncated eigendecomposition for the configured
/// grid and prior.
pub fn build_basis(cfg: &ExperimentConfig) -> Result<KlBasis> {
    let grid = cfg.grid_spec()?;
    let cov = cfg.covariance_spec()?;
    let matrix = geogan_core::kl::build_covariance_capped(grid, &cov, cfg.kl.max_cells)?;
    Ok(eigendecompose(grid, &matrix, cfg.kl.truncation)?)
}

/// Generate the paired dataset and write `dataset.bin` (+ manifest).
pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let grid = cfg.grid_spec()?;
    let cov = cfg.covariance_spec()?;
    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let solver = cfg.solver_config();
    let n = cfg.dataset.size;

    let (stack, stats) = if n == 0 {
        (FieldStack::empty(grid), None)
    } else {
        let basis = build_basis(cfg)?;
        let stack = generate_dataset(&basis, &cov, &bc, &q, n, cfg.dataset.seed, &solver)?;
        let stats = ChannelStats::compute(&stack)?;
        (stack, Some(stats))
    };
    let path = out_dir.join("dataset.bin");
    DatasetFile::new(stack, stats).save(&path)?;
    DatasetManifest {
        grid,
        covariance: cov,
        boundary: bc,
        kl_truncation: cfg.kl.truncation,
        seed: cfg.dataset.seed,
        size: n,
    }
    .save(&path)?;
    Ok(path)
}

fn log_rows(log: &[LogRow]) -> Vec<Vec<String>> {
    log.iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt_f(r.d_loss),
                fmt_f(r.g_loss),
                fmt_f(r.g_adversarial),
                fmt_f(r.residual),
                fmt_f(r.boundary),
                fmt_f(r.penalty),
            ]
        })
        .collect()
}

const LOG_HEADER: [&str; 7] = [
    "iteration",
    "d_loss",
    "g_loss",
    "g_adversarial",
    "residual_loss",
    "boundary_loss",
    "gradient_penalty",
];

/// Train on a dataset file; writes periodic and final checkpoints plus the
/// per-iteration metrics log. `resume_from` continues from a saved model
/// (optimizer state restarts).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset_path: &Path,
    resume_from: Option<&Path>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let (file, _manifest) = DatasetFile::load_with_manifest(dataset_path)?;
    let grid = cfg.grid_spec()?;
    if file.grid != grid {
        return Err(PipelineError::Numeric(geogan_core::Error::ShapeMismatch {
            expected: format!("{}x{}", grid.nx, grid.ny),
            got: format!("{}x{}", file.grid.nx, file.grid.ny),
        }));
    }
    let net_cfg = cfg.network_config()?;
    let train_cfg = cfg.train_config();
    let physics = cfg.physics_config();
    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let resume = match resume_from {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    if let Some(model) = &resume {
        if model.cfg.grid != grid {
            return Err(PipelineError::Numeric(geogan_core::Error::ShapeMismatch {
                expected: format!("{}x{}", grid.nx, grid.ny),
                got: format!("{}x{}", model.cfg.grid.nx, model.cfg.grid.ny),
            }));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let final_path = out_dir.join("checkpoint.bin");
    let out = out_dir.to_path_buf();
    // periodic snapshots survive a later divergence abort
    let result = train_with_snapshots(
        &file.stack,
        &train_cfg,
        &net_cfg,
        &physics,
        &bc,
        &q,
        resume.as_ref(),
        cfg.train.checkpoint_every,
        |model, log| {
            let p = out.join(format!("checkpoint_{:07}.bin", model.iteration));
            save_model(model, &p).map_err(|e| {
                geogan_core::Error::InvalidParameter(format!("snapshot write failed: {e}"))
            })?;
            write_tsv(&out.join("metrics.tsv"), &LOG_HEADER, &log_rows(log)).map_err(|e| {
                geogan_core::Error::InvalidParameter(format!("metrics write failed: {e}"))
            })?;
            Ok(())
        },
    );
    let (model, log) = result?;
    save_model(&model, &final_path)?;
    write_tsv(&out_dir.join("metrics.tsv"), &LOG_HEADER, &log_rows(&log))?;
    Ok(final_path)
}

fn draw_samples(model: &TrainedModel, n: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let grid = model.cfg.grid;
    let mut out = Array4::zeros((n, 4, grid.ny, grid.nx));
    let chunk = 128usize;
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let z = Array2::from_shape_fn((b, model.cfg.z_dim), |_| rng.sample(StandardNormal));
        let phys = model.generate(&z);
        out.slice_mut(ndarray::s![done..done + b, .., .., ..])
            .assign(&phys);
        done += b;
    }
    out
}

fn spectrum_rows(
    gen: &geogan_core::metrics::SpectrumReport,
    data: Option<&geogan_core::metrics::SpectrumReport>,
) -> Vec<Vec<String>> {
    let g_full = gen.cumulative(EnergyDenominator::FullTrace);
    let g_trunc = gen.cumulative(EnergyDenominator::TruncatedTotal);
    let mut rows = Vec::new();
    for i in 0..gen.eigenvalues.len() {
        let mut row = vec![
            (i + 1).to_string(),
            fmt_f(gen.eigenvalues[i]),
            fmt_f(g_full[i]),
            fmt_f(g_trunc[i]),
        ];
        if let Some(d) = data {
            let d_full = d.cumulative(EnergyDenominator::FullTrace);
            let d_trunc = d.cumulative(EnergyDenominator::TruncatedTotal);
            row.push(fmt_f(d.eigenvalues[i]));
            row.push(fmt_f(d_full[i]));
            row.push(fmt_f(d_trunc[i]));
        }
        rows.push(row);
    }
    rows
}

/// Unconditional evaluation: spectra of generated lnK/h (against the
/// training data when a dataset is supplied), solver-consistency
/// distributions and per-sample physics residuals.
pub fn cmd_eval_uncond(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    n_override: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let grid = model.cfg.grid;
    let n = n_override.unwrap_or(cfg.eval.samples).max(1);
    let samples = draw_samples(&model, n, cfg.eval.seed);
    let stack = FieldStack::from_data(grid, samples.clone()).map_err(PipelineError::Numeric)?;

    let data_file = match dataset {
        Some(p) => Some(DatasetFile::load_with_manifest(p)?.0),
        None => None,
    };

    std::fs::create_dir_all(out_dir)?;
    for (channel, k, name) in [
        (CH_LNK, cfg.eval.spectrum_k_lnk, "spectrum_lnk.tsv"),
        (CH_H, cfg.eval.spectrum_k_h, "spectrum_h.tsv"),
    ] {
        let k = k.min(grid.cells());
        let gen_spec = if n >= 2 {
            Some(dataset_spectrum(&stack, channel, k)?)
        } else {
            None
        };
        let data_spec = match &data_file {
            Some(f) if f.stack.n_samples() >= 2 => {
                Some(dataset_spectrum(&f.stack, channel, k)?)
            }
            _ => None,
        };
        if let Some(gen_spec) = gen_spec {
            let mut header = vec!["rank", "gen_eigenvalue", "gen_cum_full", "gen_cum_trunc"];
            if data_spec.is_some() {
                header.extend(["data_eigenvalue", "data_cum_full", "data_cum_trunc"]);
            }
            write_tsv(
                &out_dir.join(name),
                &header,
                &spectrum_rows(&gen_spec, data_spec.as_ref()),
            )?;
        }
    }

    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let solver = cfg.solver_config();
    let n_cons = cfg.eval.consistency_samples.min(n).max(1);
    let cons_slice = samples.slice(ndarray::s![..n_cons, .., .., ..]).to_owned();
    let report = consistency_of_samples(&cons_slice, grid, &bc, &q, &solver)?;
    let mut rows: Vec<Vec<String>> = report
        .rmse
        .iter()
        .zip(&report.ssim)
        .enumerate()
        .map(|(i, (r, s))| vec![i.to_string(), fmt_f(*r), fmt_f(*s)])
        .collect();
    for (idx, err) in &report.failures {
        rows.push(vec![idx.to_string(), "failed".into(), err.clone()]);
    }
    write_tsv(
        &out_dir.join("consistency.tsv"),
        &["sample", "rmse", "ssim"],
        &rows,
    )?;

    let physics = cfg.physics_config();
    let mut res_rows = Vec::with_capacity(n);
    for s in 0..n {
        let sample: Array3<f64> = samples.index_axis(Axis(0), s).to_owned();
        let (lr, _) = residual_loss(&sample, grid, &q, &physics)?;
        res_rows.push(vec![s.to_string(), fmt_f(lr)]);
    }
    write_tsv(
        &out_dir.join("residuals.tsv"),
        &["sample", "residual_loss"],
        &res_rows,
    )?;

    let mean_res =
        res_rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / n as f64;
    write_tsv(
        &out_dir.join("summary.tsv"),
        &["metric", "value"],
        &[
            vec!["samples".into(), n.to_string()],
            vec!["mean_consistency_rmse".into(), fmt_f(report.mean_rmse())],
            vec!["mean_consistency_ssim".into(), fmt_f(report.mean_ssim())],
            vec!["mean_residual_loss".into(), fmt_f(mean_res)],
            vec!["solver_failures".into(), report.failures.len().to_string()],
        ],
    )?;

    for s in 0..n.min(4) {
        for (c, tag) in [(CH_LNK, "lnk"), (CH_H, "h")] {
            write_pgm(
                &out_dir.join(format!("sample{s}_{tag}.pgm")),
                samples.index_axis(Axis(0), s).index_axis(Axis(0), c),
            )?;
        }
    }
    Ok(())
}

/// A held-out ground-truth sample: a fresh KL draw solved by the native
/// solver, seeded by `experiment.truth_seed + index`.
pub fn held_out_truth(cfg: &ExperimentConfig, index: u64) -> Result<Array3<f64>> {
    let basis = build_basis(cfg)?;
    let cov = cfg.covariance_spec()?;
    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let solver = cfg.solver_config();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.experiment.truth_seed.wrapping_add(index));
    let z = geogan_core::kl::draw_z(&mut rng, basis.truncation());
    Ok(generate_pair(&basis, &cov, &bc, &q, &z, &solver)?)
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub n_k: usize,
    pub n_h: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub mean_pred_rmse: f64,
    pub mean_pred_r2: f64,
    pub failed_restarts: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Run one measurement case against a truth sample: per-restart lnK
/// reconstruction metrics and the mean-prediction metrics.
pub fn run_case(
    model: &TrainedModel,
    truth: &Array3<f64>,
    meas: &MeasurementSet,
    icfg: &geogan_core::inpaint::InpaintConfig,
) -> Result<CaseOutcome> {
    let grid = model.cfg.grid;
    let latent = GanLatentModel { model };
    let result = inpaint(&latent, meas, icfg)?;
    let truth_lnk = Field::from_values(grid, truth.index_axis(Axis(0), CH_LNK).to_owned())
        .map_err(PipelineError::Numeric)?;
    let mut rmses = Vec::new();
    let mut r2s = Vec::new();
    let mut failed = 0usize;
    for r in &result.restarts {
        match r {
            RestartResult::Done { sample, .. } => {
                let rec = Field::from_values(grid, sample.index_axis(Axis(0), CH_LNK).to_owned())
                    .map_err(PipelineError::Numeric)?;
                rmses.push(rmse(&truth_lnk, &rec)?);
                r2s.push(r_squared(&truth_lnk, &rec)?);
            }
            RestartResult::Failed(_) => failed += 1,
        }
    }
    let mean_rec = Field::from_values(grid, result.mean.index_axis(Axis(0), CH_LNK).to_owned())
        .map_err(PipelineError::Numeric)?;
    let (rm, rs) = mean_std(&rmses);
    let (qm, qs) = mean_std(&r2s);
    Ok(CaseOutcome {
        n_k: meas.n_k(),
        n_h: meas.n_h(),
        rmse_mean: rm,
        rmse_std: rs,
        r2_mean: qm,
        r2_std: qs,
        mean_pred_rmse: rmse(&truth_lnk, &mean_rec)?,
        mean_pred_r2: r_squared(&truth_lnk, &mean_rec)?,
        failed_restarts: failed,
    })
}

/// Conditional-reconstruction experiment over the configured case list.
pub fn cmd_inpaint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    truth_from: Option<(&Path, usize)>,
    measurements: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<CaseOutcome>> {
    let model = load_model(checkpoint)?;
    let grid = model.cfg.grid;
    let truth = match truth_from {
        Some((path, index)) => {
            let (file, _) = DatasetFile::load_with_manifest(path)?;
            if index >= file.stack.n_samples() {
                return Err(PipelineError::Config(format!(
                    "truth index {index} outside dataset of {}",
                    file.stack.n_samples()
                )));
            }
            file.stack.sample(index).to_owned()
        }
        None => held_out_truth(cfg, 0)?,
    };
    if truth.dim() != (4, grid.ny, grid.nx) {
        return Err(PipelineError::Numeric(geogan_core::Error::ShapeMismatch {
            expected: format!("[4, {}, {}]", grid.ny, grid.nx),
            got: format!("{:?}", truth.dim()),
        }));
    }
    std::fs::create_dir_all(out_dir)?;
    for (c, tag) in [(CH_LNK, "lnk"), (CH_H, "h")] {
        write_pgm(
            &out_dir.join(format!("truth_{tag}.pgm")),
            truth.index_axis(Axis(0), c),
        )?;
    }
    let icfg = cfg.inpaint_config();
    let cases: Vec<MeasurementSet> = match measurements {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            vec![MeasurementSet::from_text(&text).map_err(PipelineError::Numeric)?]
        }
        None => cfg
            .experiment
            .cases
            .iter()
            .enumerate()
            .map(|(idx, case)| {
                sample_measurements(
                    &truth,
                    grid,
                    case[0],
                    case[1],
                    icfg.seed.wrapping_add(1000 * idx as u64),
                )
                .map_err(PipelineError::Numeric)
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    for (idx, meas) in cases.iter().enumerate() {
        std::fs::write(
            out_dir.join(format!("case{idx}_measurements.txt")),
            meas.to_text(),
        )?;
        let outcome = run_case(&model, &truth, meas, &icfg)?;
        let latent = GanLatentModel { model: &model };
        let res = inpaint(&latent, meas, &icfg)?;
        write_pgm(
            &out_dir.join(format!("case{idx}_mean_lnk.pgm")),
            res.mean.index_axis(Axis(0), CH_LNK),
        )?;
        rows.push(vec![
            (idx + 1).to_string(),
            outcome.n_k.to_string(),
            outcome.n_h.to_string(),
            fmt_f(outcome.rmse_mean),
            fmt_f(outcome.rmse_std),
            fmt_f(outcome.r2_mean),
            fmt_f(outcome.r2_std),
            fmt_f(outcome.mean_pred_rmse),
            fmt_f(outcome.mean_pred_r2),
            outcome.failed_restarts.to_string(),
        ]);
        outcomes.push(outcome);
    }
    write_tsv(
        &out_dir.join("cases.tsv"),
        &[
            "case",
            "n_k",
            "n_h",
            "rmse_mean",
            "rmse_std",
            "r2_mean",
            "r2_std",
            "mean_pred_rmse",
            "mean_pred_r2",
            "failed_restarts",
        ],
        &rows,
    )?;
    Ok(outcomes)
}

/// Latent-dimension study: one model per dimension, the fixed measurement
/// case, and the analytic retained-energy column.
pub fn cmd_zdim_study(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let basis = build_basis(cfg)?;
    let cov = cfg.covariance_spec()?;
    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let solver = cfg.solver_config();
    let data = generate_dataset(
        &basis,
        &cov,
        &bc,
        &q,
        cfg.dataset.size,
        cfg.dataset.seed,
        &solver,
    )?;
    let truth = held_out_truth(cfg, 0)?;
    let grid = cfg.grid_spec()?;
    let icfg = cfg.inpaint_config();
    let [n_k, n_h] = cfg.experiment.zdim_case;
    let meas = sample_measurements(&truth, grid, n_k, n_h, icfg.seed.wrapping_add(777))?;

    let mut rows = Vec::new();
    for &dim in &cfg.experiment.zdim_dims {
        let energy_trunc = basis.retained_energy(dim, EnergyDenominator::TruncatedTotal)?;
        let energy_full = basis.retained_energy(dim, EnergyDenominator::FullTrace)?;
        let mut net_cfg = cfg.network_config()?;
        net_cfg.z_dim = dim;
        let train_cfg = cfg.train_config();
        let physics = cfg.physics_config();
        let (model, _) = geogan_core::wgan::train(&data, &train_cfg, &net_cfg, &physics, &bc, &q)?;
        let outcome = run_case(&model, &truth, &meas, &icfg)?;
        rows.push(vec![
            dim.to_string(),
            fmt_f(energy_trunc),
            fmt_f(energy_full),
            fmt_f(outcome.rmse_mean),
            fmt_f(outcome.rmse_std),
            fmt_f(outcome.r2_mean),
            fmt_f(outcome.r2_std),
        ]);
    }
    std::fs::create_dir_all(out_dir)?;
    write_tsv(
        &out_dir.join("zdim_study.tsv"),
        &[
            "z_dim",
            "energy_truncated_total",
            "energy_full_trace",
            "rmse_mean",
            "rmse_std",
            "r2_mean",
            "r2_std",
        ],
        &rows,
    )?;
    Ok(())
}

/// One-shot Darcy solve of a seeded KL realization, for debugging.
pub fn cmd_solve(cfg: &ExperimentConfig, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let basis = build_basis(cfg)?;
    let cov = cfg.covariance_spec()?;
    let bc = cfg.boundary_spec();
    let q = cfg.source_field()?;
    let solver = cfg.solver_config();
    let grid = cfg.grid_spec()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed.unwrap_or(cfg.dataset.seed));
    let z = geogan_core::kl::draw_z(&mut rng, basis.truncation());
    let sample = generate_pair(&basis, &cov, &bc, &q, &z, &solver)?;

    std::fs::create_dir_all(out_dir)?;
    let tags = [(CH_LNK, "lnk"), (CH_H, "h"), (CH_F1, "f1"), (CH_F2, "f2")];
    let mut rows = Vec::new();
    for (c, tag) in tags {
        let ch = sample.index_axis(Axis(0), c);
        write_pgm(&out_dir.join(format!("{tag}.pgm")), ch)?;
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = ch.sum() / ch.len() as f64;
        rows.push(vec![
            tag.to_string(),
            fmt_f(lo),
            fmt_f(hi),
            fmt_f(mean),
        ]);
    }
    let lnk = Field::from_values(grid, sample.index_axis(Axis(0), CH_LNK).to_owned())
        .map_err(PipelineError::Numeric)?;
    let h = Field::from_values(grid, sample.index_axis(Axis(0), CH_H).to_owned())
        .map_err(PipelineError::Numeric)?;
    let k = lnk.map(f64::exp);
    let div = flux_divergence(&k, &h, &bc, &q);
    let max_div = div.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    rows.push(vec![
        "max_abs_divergence".into(),
        fmt_f(max_div),
        String::new(),
        String::new(),
    ]);
    write_tsv(
        &out_dir.join("solve_stats.tsv"),
        &["channel", "min", "max", "mean"],
        &rows,
    )?;
    Ok(())
}

/// Spectrum table (both normalizations) of one dataset channel.
pub fn cmd_spectrum(
    cfg: &ExperimentConfig,
    dataset: &Path,
    channel: usize,
    k: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let (file, _) = DatasetFile::load_with_manifest(dataset)?;
    let k = k
        .unwrap_or(cfg.eval.spectrum_k_lnk)
        .min(file.grid.cells());
    let spec = dataset_spectrum(&file.stack, channel, k)?;
    std::fs::create_dir_all(out_dir)?;
    write_tsv(
        &out_dir.join("spectrum.tsv"),
        &["rank", "eigenvalue", "cum_full_trace", "cum_truncated_total"],
        &spectrum_rows(&spec, None),
    )?;
    Ok(())
}
