//! Conditional reconstruction from sparse point measurements by latent
//! optimization of a trained generator.
//!
//! The objective is the L1 mismatch at observed pixels (lnK and h
//! channels, physical units) plus a weighted prior term -D(G(z)) that
//! keeps the iterate on the learned manifold. The loss is non-convex, so
//! a run executes several restarts from fresh standard-normal z draws and
//! also reports the pixelwise mean reconstruction.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, CH_H, CH_LNK, N_CHANNELS};
use crate::kl::{CovarianceSpec, KlBasis};
use crate::nn::{discriminator_forward, generator_forward, Adam, BnMode};
use crate::wgan::TrainedModel;

/// Which channel an observation constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsChannel {
    /// Log-conductivity (direct measurement, stored in lnK space).
    K,
    /// Hydraulic head (indirect measurement).
    H,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channel: ObsChannel,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Masked point observations of the lnK and h channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    grid: GridSpec,
    seed: Option<u64>,
    entries: Vec<Observation>,
    mask_k: Array2<f64>,
    mask_h: Array2<f64>,
    values_k: Array2<f64>,
    values_h: Array2<f64>,
}

impl MeasurementSet {
    pub fn from_observations(
        grid: GridSpec,
        entries: Vec<Observation>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut mask_k = Array2::zeros((grid.ny, grid.nx));
        let mut mask_h = Array2::zeros((grid.ny, grid.nx));
        let mut values_k = Array2::zeros((grid.ny, grid.nx));
        let mut values_h = Array2::zeros((grid.ny, grid.nx));
        for obs in &entries {
            if obs.i >= grid.nx || obs.j >= grid.ny {
                return Err(Error::IndexOutOfRange {
                    i: obs.i,
                    j: obs.j,
                    nx: grid.nx,
                    ny: grid.ny,
                });
            }
            if !obs.value.is_finite() {
                return Err(Error::NonFinite("observation value".into()));
            }
            let (mask, values) = match obs.channel {
                ObsChannel::K => (&mut mask_k, &mut values_k),
                ObsChannel::H => (&mut mask_h, &mut values_h),
            };
            if mask[[obs.j, obs.i]] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "duplicate observation at ({}, {})",
                    obs.i, obs.j
                )));
            }
            mask[[obs.j, obs.i]] = 1.0;
            values[[obs.j, obs.i]] = obs.value;
        }
        Ok(Self {
            grid,
            seed,
            entries,
            mask_k,
            mask_h,
            values_k,
            values_h,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn n_k(&self) -> usize {
        self.entries
            .iter()
            .filter(|o| o.channel == ObsChannel::K)
            .count()
    }

    pub fn n_h(&self) -> usize {
        self.entries
            .iter()
            .filter(|o| o.channel == ObsChannel::H)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.entries
    }

    pub fn mask_k(&self) -> &Array2<f64> {
        &self.mask_k
    }

    pub fn mask_h(&self) -> &Array2<f64> {
        &self.mask_h
    }

    /// Plain-text tabular form: a header with grid shape and seed, then
    /// one `channel i j value` line per observation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# measurements v1\n");
        out.push_str(&format!(
            "# grid {} {} {} {}\n",
            self.grid.nx, self.grid.ny, self.grid.lx, self.grid.ly
        ));
        match self.seed {
            Some(s) => out.push_str(&format!("# seed {s}\n")),
            None => out.push_str("# seed none\n"),
        }
        for obs in &self.entries {
            let tag = match obs.channel {
                ObsChannel::K => "K",
                ObsChannel::H => "h",
            };
            out.push_str(&format!("{tag} {} {} {}\n", obs.i, obs.j, obs.value));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut grid: Option<GridSpec> = None;
        let mut seed: Option<u64> = None;
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# grid ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::InvalidParameter("malformed grid header".into()));
                }
                let nx = parts[0].parse::<usize>().map_err(bad_header)?;
                let ny = parts[1].parse::<usize>().map_err(bad_header)?;
                let lx = parts[2].parse::<f64>().map_err(bad_header)?;
                let ly = parts[3].parse::<f64>().map_err(bad_header)?;
                grid = Some(GridSpec::new(nx, ny, lx, ly)?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("# seed ") {
                if rest != "none" {
                    seed = Some(rest.parse::<u64>().map_err(bad_header)?);
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::InvalidParameter(format!(
                    "malformed observation line: {line}"
                )));
            }
            let channel = match parts[0] {
                "K" => ObsChannel::K,
                "h" => ObsChannel::H,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown channel tag {other}"
                    )))
                }
            };
            entries.push(Observation {
                channel,
                i: parts[1].parse().map_err(bad_header)?,
                j: parts[2].parse().map_err(bad_header)?,
                value: parts[3].parse().map_err(bad_header)?,
            });
        }
        let grid = grid.ok_or_else(|| Error::InvalidParameter("missing grid header".into()))?;
        Self::from_observations(grid, entries, seed)
    }
}

fn bad_header<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidParameter(format!("malformed measurement file: {e}"))
}

/// Uniform point observations without replacement from a truth sample
/// `[4, ny, nx]`; K and h locations are drawn independently.
pub fn sample_measurements(
    truth: &Array3<f64>,
    grid: GridSpec,
    n_k: usize,
    n_h: usize,
    seed: u64,
) -> Result<MeasurementSet> {
    let cells = grid.cells();
    if truth.dim() != (N_CHANNELS, grid.ny, grid.nx) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, {}, {}]", N_CHANNELS, grid.ny, grid.nx),
            got: format!("{:?}", truth.dim()),
        });
    }
    if n_k > cells || n_h > cells {
        return Err(Error::CountExceedsGrid {
            requested: n_k.max(n_h),
            cells,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let draw = |n: usize, channel: ObsChannel, rng: &mut ChaCha12Rng| -> Vec<Observation> {
        let mut idx: Vec<usize> = (0..cells).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter()
            .map(|p| {
                let (i, j) = (p % grid.nx, p / grid.nx);
                let c = match channel {
                    ObsChannel::K => CH_LNK,
                    ObsChannel::H => CH_H,
                };
                Observation {
                    channel,
                    i,
                    j,
                    value: truth[[c, j, i]],
                }
            })
            .collect()
    };
    let mut entries = draw(n_k, ObsChannel::K, &mut rng);
    entries.extend(draw(n_h, ObsChannel::H, &mut rng));
    MeasurementSet::from_observations(grid, entries, Some(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub lambda_p: f64,
    pub learning_rate: f64,
    /// Multiplicative per-iteration learning-rate factor; 1.0 keeps the
    /// rate constant. The L1 objective stalls at an lr-sized limit cycle
    /// under constant-rate Adam, so precision targets want decay < 1.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

fn default_lr_decay() -> f64 {
    1.0
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.1,
            learning_rate: 1e-2,
            lr_decay: 1.0,
            max_iterations: 3000,
            restarts: 10,
            seed: 0,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0 {
            return Err(Error::InvalidParameter("lambda_p must be >= 0".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidParameter("restarts must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidParameter(
                "lr_decay must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// L1 context loss of a physical-unit sample `[1,4,H,W]` var.
pub fn context_loss_graph(tape: &mut Tape, x_phys: Var, meas: &MeasurementSet) -> Var {
    let shape = tape.value(x_phys).shape().to_vec();
    assert_eq!(shape[0], 1, "context loss is per sample");
    let grid = meas.grid;
    let to_const = |tape: &mut Tape, a: &Array2<f64>| {
        let v = a
            .clone()
            .into_shape(IxDyn(&[1, 1, grid.ny, grid.nx]))
            .unwrap();
        tape.constant(v)
    };
    let mut total: Option<Var> = None;
    for (channel, mask, values) in [
        (CH_LNK, &meas.mask_k, &meas.values_k),
        (CH_H, &meas.mask_h, &meas.values_h),
    ] {
        let ch = tape.slice_channel(x_phys, channel);
        let m = to_const(tape, mask);
        let v = to_const(tape, values);
        let d = tape.sub(ch, v);
        let md = tape.mul(d, m);
        let a = tape.abs(md);
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    total.expect("two channels")
}

/// Context loss of one physical-unit sample with its channel gradients.
pub fn context_loss(sample: &Array3<f64>, meas: &MeasurementSet) -> Result<(f64, Array3<f64>)> {
    let grid = meas.grid;
    if sample.dim() != (N_CHANNELS, grid.ny, grid.nx) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, {}, {}]", N_CHANNELS, grid.ny, grid.nx),
            got: format!("{:?}", sample.dim()),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(
        sample
            .clone()
            .into_shape(IxDyn(&[1, N_CHANNELS, grid.ny, grid.nx]))
            .unwrap(),
    );
    let loss = context_loss_graph(&mut tape, x, meas);
    let g = tape.grad(loss, &[x])[0].expect("loss depends on sample");
    let grad = tape
        .value(g)
        .clone()
        .into_shape(IxDyn(&[N_CHANNELS, grid.ny, grid.nx]))
        .unwrap()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    Ok((tape.scalar(loss), grad))
}

/// A latent-space decoder the inpainting optimizer can drive.
pub trait LatentModel: Sync {
    fn z_dim(&self) -> usize;
    fn grid(&self) -> GridSpec;
    /// Returns the physical-unit sample `[1,4,H,W]` and the prior loss.
    fn decode(&self, tape: &mut Tape, z: Var) -> (Var, Var);
}

/// Trained WGAN-GP generator/discriminator pair as the decoder; the prior
/// loss is -D(G(z)) with both networks in inference mode.
pub struct GanLatentModel<'a> {
    pub model: &'a TrainedModel,
}

impl LatentModel for GanLatentModel<'_> {
    fn z_dim(&self) -> usize {
        self.model.cfg.z_dim
    }

    fn grid(&self) -> GridSpec {
        self.model.cfg.grid
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> (Var, Var) {
        let gv = self.model.params.gen.set.insert(tape, false);
        let dv = self.model.params.disc.set.insert(tape, false);
        let (x_std, _) = generator_forward(
            tape,
            &self.model.cfg,
            &gv,
            BnMode::Eval(&self.model.params.gen.bn_running),
            z,
        );
        let score = discriminator_forward(tape, &self.model.cfg, &dv, x_std, None);
        let mean = tape.mean(score);
        let prior = tape.neg(mean);
        let x_phys = self.model.stats.denormalize_graph(tape, x_std);
        (x_phys, prior)
    }
}

/// Linear Karhunen-Loève decoder: lnK = mu + W z on the first channel,
/// other channels zero, no prior term. Turns the latent objective into a
/// convex surrogate for oracle tests.
pub struct KlLatentModel {
    grid: GridSpec,
    mu: f64,
    decoder: Array2<f64>,
}

impl KlLatentModel {
    pub fn new(basis: &KlBasis, cov: &CovarianceSpec) -> Self {
        Self {
            grid: basis.grid(),
            mu: cov.mu,
            decoder: basis.decoder_matrix(),
        }
    }
}

impl LatentModel for KlLatentModel {
    fn z_dim(&self) -> usize {
        self.decoder.ncols()
    }

    fn grid(&self) -> GridSpec {
        self.grid
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> (Var, Var) {
        let w = tape.constant(self.decoder.clone().into_dyn());
        let flat = tape.linear(z, w);
        let with_mu = tape.add_scalar(flat, self.mu);
        let img = tape.reshape(with_mu, &[1, 1, self.grid.ny, self.grid.nx]);
        let x = tape.pad_channel(img, CH_LNK, N_CHANNELS);
        let prior = tape.scalar_const(0.0);
        (x, prior)
    }
}

/// Prior loss -D(G(z)) of a trained model at a single latent vector.
pub fn prior_loss(model: &TrainedModel, z: &[f64]) -> f64 {
    let zb = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
    let x = model.generate_std(&zb);
    -model.score_std(&x)[0]
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub z: Vec<f64>,
    pub loss: f64,
    pub context: f64,
    pub iteration: usize,
    /// Total loss per iteration, evaluated before each update.
    pub trace: Vec<f64>,
}

/// Adam descent on L_c + lambda_p * L_p from an explicit starting point;
/// returns the best iterate seen.
pub fn optimize_z_from(
    model: &dyn LatentModel,
    meas: &MeasurementSet,
    cfg: &InpaintConfig,
    z0: &[f64],
) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    if meas.is_empty() {
        return Err(Error::EmptyMeasurements);
    }
    if meas.grid() != model.grid() {
        return Err(Error::GridMismatch("measurements vs model".into()));
    }
    if z0.len() != model.z_dim() {
        return Err(Error::LengthMismatch {
            expected: model.z_dim(),
            got: z0.len(),
        });
    }
    let m = model.z_dim();
    let mut z = ArrayD::from_shape_vec(IxDyn(&[1, m]), z0.to_vec()).unwrap();
    let mut opt = Adam::new(cfg.learning_rate, 0.9, 0.999, &[&z]);
    let mut best = OptimizeOutcome {
        z: z0.to_vec(),
        loss: f64::INFINITY,
        context: f64::INFINITY,
        iteration: 0,
        trace: Vec::with_capacity(cfg.max_iterations + 1),
    };
    for it in 0..=cfg.max_iterations {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let (x_phys, prior) = model.decode(&mut tape, zv);
        let context = context_loss_graph(&mut tape, x_phys, meas);
        let weighted = tape.scale(prior, cfg.lambda_p);
        let total = tape.add(context, weighted);
        let loss = tape.scalar(total);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it as u64,
                what: "inpainting loss".into(),
            });
        }
        best.trace.push(loss);
        if loss < best.loss {
            best.loss = loss;
            best.context = tape.scalar(context);
            best.iteration = it;
            best.z = z.iter().cloned().collect();
        }
        if it == cfg.max_iterations {
            break;
        }
        let g = tape.grad(total, &[zv])[0].map(|v| tape.value(v).clone());
        opt.step(&mut [&mut z], &[g]);
        opt.lr *= cfg.lr_decay;
    }
    Ok(best)
}

/// Latent optimization from a standard-normal initial draw (seeded).
pub fn optimize_z(
    model: &dyn LatentModel,
    meas: &MeasurementSet,
    cfg: &InpaintConfig,
) -> Result<OptimizeOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let z0: Vec<f64> = (0..model.z_dim()).map(|_| rng.sample(StandardNormal)).collect();
    optimize_z_from(model, meas, cfg, &z0)
}

/// One restart's reconstruction, or the error that aborted it.
#[derive(Debug, Clone)]
pub enum RestartResult {
    Done {
        outcome: OptimizeOutcome,
        sample: Array3<f64>,
    },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct InpaintResult {
    /// Pixelwise mean of the successful reconstructions, physical units.
    pub mean: Array3<f64>,
    pub restarts: Vec<RestartResult>,
}

fn decode_sample(model: &dyn LatentModel, z: &[f64]) -> Array3<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).unwrap());
    let (x, _) = model.decode(&mut tape, zv);
    let grid = model.grid();
    tape.value(x)
        .clone()
        .into_shape(IxDyn(&[N_CHANNELS, grid.ny, grid.nx]))
        .unwrap()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

/// Full conditional reconstruction: `restarts` independent latent
/// optimizations (sub-seeded from `cfg.seed`) and their pixelwise mean.
pub fn inpaint(
    model: &dyn LatentModel,
    meas: &MeasurementSet,
    cfg: &InpaintConfig,
) -> Result<InpaintResult> {
    cfg.validate()?;
    if meas.is_empty() {
        return Err(Error::EmptyMeasurements);
    }
    let results: Vec<RestartResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let sub = InpaintConfig {
                seed: cfg.seed.wrapping_add(r as u64),
                ..*cfg
            };
            match optimize_z(model, meas, &sub) {
                Ok(outcome) => {
                    let sample = decode_sample(model, &outcome.z);
                    RestartResult::Done { outcome, sample }
                }
                Err(e) => RestartResult::Failed(e.to_string()),
            }
        })
        .collect();
    let grid = model.grid();
    let mut mean = Array3::zeros((N_CHANNELS, grid.ny, grid.nx));
    let mut ok = 0usize;
    for r in &results {
        if let RestartResult::Done { sample, .. } = r {
            mean += sample;
            ok += 1;
        }
    }
    if ok == 0 {
        return Err(Error::Divergence {
            iteration: 0,
            what: "all inpainting restarts".into(),
        });
    }
    mean.mapv_inplace(|v| v / ok as f64);
    Ok(InpaintResult {
        mean,
        restarts: results,
    })
}
