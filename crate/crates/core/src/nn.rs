//! Generator and discriminator networks built on the autodiff tape, plus
//! parameter containers and the Adam optimizer.
//!
//! Generator: FC from the latent vector to a 4d-channel map at 1/8th
//! resolution, three [batch-norm -> ReLU -> stride-2 transposed-conv]
//! blocks halving the channel count, and a stride-1 transposed-conv down
//! to the 4 output channels with a linear head. Discriminator: three
//! [stride-2 conv -> leaky ReLU(0.2) -> dropout] blocks doubling the
//! channel count and a dense map to one score per sample; no batch-norm,
//! so the gradient penalty stays a per-sample quantity.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, N_CHANNELS};

pub const GEN_STAGES: usize = 3;
const BN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub grid: GridSpec,
    pub z_dim: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dropout_rate: f64,
}

impl NetworkConfig {
    pub fn new(grid: GridSpec, z_dim: usize, base_channels: usize) -> Result<Self> {
        let cfg = Self {
            grid,
            z_dim,
            base_channels,
            kernel_size: 4,
            stride: 2,
            dropout_rate: 0.3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.nx % 8 != 0 || self.grid.ny % 8 != 0 {
            return Err(Error::InvalidParameter(format!(
                "grid {}x{} not divisible by 8",
                self.grid.nx, self.grid.ny
            )));
        }
        if self.z_dim == 0 {
            return Err(Error::InvalidParameter("z_dim must be >= 1".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidParameter(
                "base_channels must be an even number >= 2".into(),
            ));
        }
        if self.kernel_size != 4 || self.stride != 2 {
            return Err(Error::InvalidParameter(
                "only kernel_size 4 with stride 2 is supported".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(
                "dropout_rate must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Spatial size of the first generator feature map.
    pub fn seed_hw(&self) -> (usize, usize) {
        (self.grid.ny / 8, self.grid.nx / 8)
    }

    /// Channel ladder of the generator: 4d -> 2d -> d -> d/2.
    pub fn gen_channels(&self) -> [usize; GEN_STAGES + 1] {
        let d = self.base_channels;
        [4 * d, 2 * d, d, d / 2]
    }

    /// Channel ladder of the discriminator: 4 -> d -> 2d -> 4d.
    pub fn disc_channels(&self) -> [usize; GEN_STAGES + 1] {
        let d = self.base_channels;
        [N_CHANNELS, d, 2 * d, 4 * d]
    }
}

/// Named, ordered tensor collection; the order defines the checkpoint and
/// optimizer-state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Insert every entry into the tape, as trainable leaves or constants.
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, v)| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch-norm running statistics for one stage (not trained by gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub set: ParamSet,
    pub bn_running: Vec<BnRunning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub set: ParamSet,
}

/// All weights of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
}

fn randn(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// generator parameter order: fc.w, fc.b, then per stage bn.gamma, bn.beta,
// tconv.w, tconv.b, then final.w, final.b
const G_FC_W: usize = 0;
const G_FC_B: usize = 1;
const fn g_stage(i: usize) -> (usize, usize, usize, usize) {
    (2 + 4 * i, 3 + 4 * i, 4 + 4 * i, 5 + 4 * i)
}
const G_FINAL_W: usize = 2 + 4 * GEN_STAGES;
const G_FINAL_B: usize = 3 + 4 * GEN_STAGES;

// discriminator parameter order: per stage conv.w, conv.b, then fc.w, fc.b
const fn d_stage(i: usize) -> (usize, usize) {
    (2 * i, 2 * i + 1)
}
const D_FC_W: usize = 2 * GEN_STAGES;
const D_FC_B: usize = 2 * GEN_STAGES + 1;

impl NetworkParams {
    /// Weight init: N(0, 0.02) for dense/conv kernels, zero biases,
    /// unit batch-norm scale.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (h0, w0) = cfg.seed_hw();
        let gch = cfg.gen_channels();
        let k = cfg.kernel_size;

        let mut g = ParamSet::new();
        let fc_out = gch[0] * h0 * w0;
        g.push("g.fc.w", randn(&mut rng, &[fc_out, cfg.z_dim], INIT_STD));
        g.push("g.fc.b", zeros(&[fc_out]));
        let mut bn_running = Vec::new();
        for s in 0..GEN_STAGES {
            g.push(format!("g.s{s}.bn.gamma"), ones(&[gch[s]]));
            g.push(format!("g.s{s}.bn.beta"), zeros(&[gch[s]]));
            g.push(
                format!("g.s{s}.tconv.w"),
                randn(&mut rng, &[gch[s], gch[s + 1], k, k], INIT_STD),
            );
            g.push(format!("g.s{s}.tconv.b"), zeros(&[gch[s + 1]]));
            bn_running.push(BnRunning {
                mean: Array1::zeros(gch[s]),
                var: Array1::ones(gch[s]),
            });
        }
        g.push(
            "g.final.w",
            randn(&mut rng, &[gch[GEN_STAGES], N_CHANNELS, 3, 3], INIT_STD),
        );
        g.push("g.final.b", zeros(&[N_CHANNELS]));

        let mut d = ParamSet::new();
        let dch = cfg.disc_channels();
        for s in 0..GEN_STAGES {
            d.push(
                format!("d.s{s}.conv.w"),
                randn(&mut rng, &[dch[s + 1], dch[s], k, k], INIT_STD),
            );
            d.push(format!("d.s{s}.conv.b"), zeros(&[dch[s + 1]]));
        }
        let flat = dch[GEN_STAGES] * h0 * w0;
        d.push("d.fc.w", randn(&mut rng, &[1, flat], INIT_STD));
        d.push("d.fc.b", zeros(&[1]));

        Ok(Self {
            gen: GeneratorParams { set: g, bn_running },
            disc: DiscriminatorParams { set: d },
        })
    }
}

/// Batch-norm mode for a generator forward pass.
pub enum BnMode<'a> {
    /// Normalize with batch statistics (training); the computed per-stage
    /// statistics are returned for the running-average update.
    Train,
    /// Normalize with the stored running statistics (inference).
    Eval(&'a [BnRunning]),
}

/// Per-stage batch statistics observed during a training forward pass.
pub struct BnBatch {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: &BnMode<'_>,
    stage: usize,
    observed: &mut Vec<BnBatch>,
) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let centered = match mode {
        BnMode::Train => {
            let mean = tape.channel_mean(x);
            let mean_b = tape.broadcast_channel(mean, &shape);
            let centered = tape.sub(x, mean_b);
            let sq = tape.square(centered);
            let var = tape.channel_mean(sq);
            observed.push(BnBatch {
                mean: tape
                    .value(mean)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
                var: tape
                    .value(var)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
            });
            let var_eps = tape.add_scalar(var, BN_EPS);
            let stdv = tape.sqrt(var_eps);
            let inv = tape.reciprocal(stdv);
            let inv_b = tape.broadcast_channel(inv, &shape);
            tape.mul(centered, inv_b)
        }
        BnMode::Eval(running) => {
            let rm = &running[stage];
            let mean = tape.constant(rm.mean.clone().into_dyn());
            let inv = tape.constant(rm.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()).into_dyn());
            let mean_b = tape.broadcast_channel(mean, &shape);
            let inv_b = tape.broadcast_channel(inv, &shape);
            let centered = tape.sub(x, mean_b);
            tape.mul(centered, inv_b)
        }
    };
    let gamma_b = tape.broadcast_channel(gamma, &shape);
    let beta_b = tape.broadcast_channel(beta, &shape);
    let scaled = tape.mul(centered, gamma_b);
    tape.add(scaled, beta_b)
}

fn add_channel_bias(tape: &mut Tape, x: Var, b: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let bb = tape.broadcast_channel(b, &shape);
    tape.add(x, bb)
}

/// Generator forward pass for a latent batch `z` of shape `[B, z_dim]`.
///
/// Returns the standardized-unit output `[B, 4, ny, nx]` and, in training
/// mode, the batch statistics of every batch-norm stage.
pub fn generator_forward(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    gvars: &[Var],
    mode: BnMode<'_>,
    z: Var,
) -> (Var, Vec<BnBatch>) {
    let zshape = tape.value(z).shape().to_vec();
    assert_eq!(zshape.len(), 2, "z must be [B, z_dim]");
    assert_eq!(zshape[1], cfg.z_dim, "latent width mismatch");
    let b = zshape[0];
    let (h0, w0) = cfg.seed_hw();
    let gch = cfg.gen_channels();

    let fc = tape.linear(z, gvars[G_FC_W]);
    let fc_b = {
        let bias = gvars[G_FC_B];
        let shape = tape.value(fc).shape().to_vec();
        let as4 = tape.reshape(fc, &[b, gch[0] * h0 * w0, 1, 1]);
        let biased = add_channel_bias(tape, as4, bias);
        let _ = shape;
        tape.reshape(biased, &[b, gch[0], h0, w0])
    };
    let mut x = fc_b;
    let mut observed = Vec::new();
    for s in 0..GEN_STAGES {
        let (gi, bi, wi, ci) = g_stage(s);
        x = batch_norm(tape, x, gvars[gi], gvars[bi], &mode, s, &mut observed);
        x = tape.relu(x);
        x = tape.conv_t2d(x, gvars[wi], cfg.stride, 1);
        x = add_channel_bias(tape, x, gvars[ci]);
    }
    x = tape.conv_t2d(x, gvars[G_FINAL_W], 1, 1);
    x = add_channel_bias(tape, x, gvars[G_FINAL_B]);
    (x, observed)
}

/// Update running batch-norm statistics from one training forward pass.
pub fn update_bn_running(running: &mut [BnRunning], observed: &[BnBatch]) {
    for (r, o) in running.iter_mut().zip(observed) {
        r.mean = BN_MOMENTUM * &r.mean + (1.0 - BN_MOMENTUM) * &o.mean;
        r.var = BN_MOMENTUM * &r.var + (1.0 - BN_MOMENTUM) * &o.var;
    }
}

/// Inverted dropout masks for the discriminator stages, drawn per forward.
pub fn dropout_masks(
    rng: &mut ChaCha12Rng,
    cfg: &NetworkConfig,
    batch: usize,
) -> Vec<ArrayD<f64>> {
    let rate = cfg.dropout_rate;
    let keep = 1.0 - rate;
    let dch = cfg.disc_channels();
    let (mut h, mut w) = (cfg.grid.ny, cfg.grid.nx);
    let mut masks = Vec::with_capacity(GEN_STAGES);
    for s in 0..GEN_STAGES {
        h /= 2;
        w /= 2;
        let shape = [batch, dch[s + 1], h, w];
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        masks.push(ArrayD::from_shape_vec(IxDyn(&shape), v).unwrap());
    }
    masks
}

/// Discriminator forward pass: standardized batch `[B, 4, ny, nx]` to one
/// score per sample `[B, 1]`. `masks` enables dropout (training); `None`
/// runs the deterministic inference path.
pub fn discriminator_forward(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    dvars: &[Var],
    x: Var,
    masks: Option<&[ArrayD<f64>]>,
) -> Var {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "input must be [B, C, H, W]");
    assert_eq!(shape[1], N_CHANNELS, "channel count mismatch");
    assert_eq!(
        (shape[2], shape[3]),
        (cfg.grid.ny, cfg.grid.nx),
        "spatial shape mismatch"
    );
    let b = shape[0];
    let (h0, w0) = cfg.seed_hw();
    let dch = cfg.disc_channels();
    let mut h = x;
    for s in 0..GEN_STAGES {
        let (wi, bi) = d_stage(s);
        h = tape.conv2d(h, dvars[wi], cfg.stride, 1);
        h = add_channel_bias(tape, h, dvars[bi]);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        if let Some(m) = masks {
            let mask = tape.constant(m[s].clone());
            h = tape.mul(h, mask);
        }
    }
    let flat = tape.reshape(h, &[b, dch[GEN_STAGES] * h0 * w0]);
    let y = tape.linear(flat, dvars[D_FC_W]);
    let bias = tape.reshape(y, &[b, 1, 1, 1]);
    let biased = add_channel_bias(tape, bias, dvars[D_FC_B]);
    tape.reshape(biased, &[b, 1])
}

/// Adam over an ordered list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, shapes: &[&ArrayD<f64>]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn for_params(lr: f64, beta1: f64, beta2: f64, set: &ParamSet) -> Self {
        let shapes: Vec<&ArrayD<f64>> = set.iter().map(|(_, v)| v).collect();
        Self::new(lr, beta1, beta2, &shapes)
    }

    /// One update; `grads[i] = None` leaves tensor i untouched.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(&mut *params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / b1t;
                    let vh = v / b2t;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }

    /// Update a [`ParamSet`] in place.
    pub fn step_params(&mut self, set: &mut ParamSet, grads: &[Option<ArrayD<f64>>]) {
        let mut refs: Vec<&mut ArrayD<f64>> = Vec::with_capacity(set.len());
        // split borrows entry by entry
        for (_, v) in set.entries.iter_mut() {
            refs.push(v);
        }
        self.step(&mut refs, grads);
    }
}

/// Gradients of a scalar loss with respect to inserted parameter vars,
/// extracted as owned arrays aligned with the var list.
pub fn extract_grads(tape: &mut Tape, loss: Var, vars: &[Var]) -> Vec<Option<ArrayD<f64>>> {
    let gs = tape.grad(loss, vars);
    gs.into_iter()
        .map(|g| g.map(|v| tape.value(v).clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::grid::make_grid;

    fn tiny_cfg() -> NetworkConfig {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        NetworkConfig::new(grid, 3, 2).unwrap()
    }

    fn latent(b: usize, z: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        randn(&mut rng, &[b, z], 1.0)
    }

    #[test]
    fn generator_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 7).unwrap();
        let z = latent(3, cfg.z_dim, 1);
        let run = || {
            let mut tape = Tape::new();
            let gv = params.gen.set.insert(&mut tape, false);
            let zv = tape.constant(z.clone());
            let (out, _) =
                generator_forward(&mut tape, &cfg, &gv, BnMode::Eval(&params.gen.bn_running), zv);
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[3, 4, 8, 8]);
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_is_sensitive_to_latent_coordinates() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 8).unwrap();
        let z1 = latent(1, cfg.z_dim, 2);
        let mut z2 = z1.clone();
        z2[[0, 1]] += 0.5;
        let eval = |z: &ArrayD<f64>| {
            let mut tape = Tape::new();
            let gv = params.gen.set.insert(&mut tape, false);
            let zv = tape.constant(z.clone());
            let (out, _) =
                generator_forward(&mut tape, &cfg, &gv, BnMode::Eval(&params.gen.bn_running), zv);
            tape.value(out).clone()
        };
        let (a, b) = (eval(&z1), eval(&z2));
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "outputs identical after perturbing z");
    }

    #[test]
    fn discriminator_shapes_and_zero_params() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[5, 4, 8, 8], 1.0);
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = discriminator_forward(&mut tape, &cfg, &dv, xv, None);
        assert_eq!(tape.value(y).shape(), &[5, 1]);

        // all-zero parameters give identically zero scores
        let mut zeroed = params.disc.set.clone();
        for i in 0..zeroed.len() {
            zeroed.value_mut(i).fill(0.0);
        }
        let mut tape = Tape::new();
        let dv = zeroed.insert(&mut tape, false);
        let xv = tape.constant(x);
        let y = discriminator_forward(&mut tape, &cfg, &dv, xv, None);
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = randn(&mut rng, &[2, 4, 8, 8], 0.7);
        let eval = |vals: &[f64]| {
            let x = ArrayD::from_shape_vec(x0.raw_dim(), vals.to_vec()).unwrap();
            let mut tape = Tape::new();
            let dv = params.disc.set.insert(&mut tape, false);
            let xv = tape.leaf(x);
            let y = discriminator_forward(&mut tape, &cfg, &dv, xv, None);
            let s = tape.sum(y);
            tape.scalar(s)
        };
        let fd = finite_difference(eval, x0.as_slice().unwrap(), 1e-6);
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, false);
        let xv = tape.leaf(x0.clone());
        let y = discriminator_forward(&mut tape, &cfg, &dv, xv, None);
        let s = tape.sum(y);
        let g = tape.grad(s, &[xv])[0].unwrap();
        for (a, b) in tape.value(g).iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn generator_parameter_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 13).unwrap();
        let z = latent(2, cfg.z_dim, 5);
        // flatten all generator parameters into one vector for FD
        let flat0: Vec<f64> = params
            .gen
            .set
            .iter()
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        let rebuild = |vals: &[f64]| -> ParamSet {
            let mut set = params.gen.set.clone();
            let mut off = 0;
            for i in 0..set.len() {
                let len = set.value(i).len();
                let shape = set.value(i).raw_dim();
                *set.value_mut(i) =
                    ArrayD::from_shape_vec(shape, vals[off..off + len].to_vec()).unwrap();
                off += len;
            }
            set
        };
        let eval = |vals: &[f64]| {
            let set = rebuild(vals);
            let mut tape = Tape::new();
            let gv = set.insert(&mut tape, false);
            let zv = tape.constant(z.clone());
            let (out, _) = generator_forward(&mut tape, &cfg, &gv, BnMode::Train, zv);
            let sq = tape.square(out);
            let l = tape.mean(sq);
            tape.scalar(l)
        };
        let fd = finite_difference(eval, &flat0, 1e-6);
        let mut tape = Tape::new();
        let gv = params.gen.set.insert(&mut tape, true);
        let zv = tape.constant(z);
        let (out, _) = generator_forward(&mut tape, &cfg, &gv, BnMode::Train, zv);
        let sq = tape.square(out);
        let l = tape.mean(sq);
        let grads = extract_grads(&mut tape, l, &gv);
        let analytic: Vec<f64> = grads
            .iter()
            .zip(params.gen.set.iter())
            .flat_map(|(g, (_, v))| match g {
                Some(g) => g.iter().cloned().collect::<Vec<f64>>(),
                None => vec![0.0; v.len()],
            })
            .collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let target = 3.0f64;
        let mut x = ArrayD::from_elem(IxDyn(&[1]), 0.0f64);
        let mut opt = Adam::new(0.1, 0.9, 0.999, &[&x]);
        for _ in 0..500 {
            let g = x.mapv(|v| 2.0 * (v - target));
            opt.step(&mut [&mut x], &[Some(g)]);
        }
        assert!((x[[0]] - target).abs() < 1e-3);
    }

    #[test]
    fn dropout_masks_are_inverted_and_deterministic() {
        let cfg = tiny_cfg();
        let mut r1 = ChaCha12Rng::seed_from_u64(77);
        let mut r2 = ChaCha12Rng::seed_from_u64(77);
        let m1 = dropout_masks(&mut r1, &cfg, 2);
        let m2 = dropout_masks(&mut r2, &cfg, 2);
        assert_eq!(m1.len(), GEN_STAGES);
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a, b);
        }
        let keep = 1.0 - cfg.dropout_rate;
        for m in &m1 {
            for v in m.iter() {
                assert!(*v == 0.0 || (*v - 1.0 / keep).abs() < 1e-12);
            }
        }
    }
}
