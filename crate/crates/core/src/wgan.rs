//! WGAN-GP losses and the physics-augmented training loop.
//!
//! The discriminator minimizes E[D(fake)] - E[D(real)] + lambda * GP with
//! the gradient penalty taken at uniform interpolates between real and
//! fake batches. The generator minimizes -E[D(fake)] plus the weighted
//! PDE-residual and boundary losses evaluated on its denormalized output.
//! Both use Adam; every stochastic choice is drawn from one seeded stream
//! so a run is reproducible bit for bit.

use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{BoundarySpec, Field, FieldStack};
use crate::nn::{
    discriminator_forward, dropout_masks, extract_grads, generator_forward, update_bn_running,
    Adam, BnMode, NetworkConfig, NetworkParams,
};
use crate::norm::ChannelStats;
use crate::sobel::{boundary_loss_graph, residual_loss_graph, PhysicsLossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gp_lambda: f64,
    pub lambda_r: f64,
    pub lambda_b: f64,
    pub d_steps_per_g: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_g_iterations: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gp_lambda: 10.0,
            lambda_r: 1.0,
            lambda_b: 10.0,
            d_steps_per_g: 5,
            batch_size: 50,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            total_g_iterations: 150_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gp_lambda < 0.0 || self.lambda_r < 0.0 || self.lambda_b < 0.0 {
            return Err(Error::InvalidParameter(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.d_steps_per_g < 1 {
            return Err(Error::InvalidParameter("d_steps_per_g must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn physics(&self, interior_crop: bool) -> PhysicsLossConfig {
        PhysicsLossConfig {
            lambda_r: self.lambda_r,
            lambda_b: self.lambda_b,
            interior_crop,
        }
    }
}

/// Unweighted gradient penalty mean((|grad_x D(x_hat)|_2 - 1)^2) at the
/// per-sample interpolates x_hat = eps*real + (1-eps)*fake.
pub fn gradient_penalty_graph(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    dvars: &[Var],
    real: &Array4<f64>,
    fake: &Array4<f64>,
    eps: &[f64],
    masks: Option<&[ArrayD<f64>]>,
) -> Var {
    assert_eq!(real.dim(), fake.dim(), "real/fake batch shapes differ");
    assert_eq!(real.dim().0, eps.len(), "one eps per sample");
    let mut interp = real.clone();
    for (s, &e) in eps.iter().enumerate() {
        let mut slab = interp.index_axis_mut(ndarray::Axis(0), s);
        let f = fake.index_axis(ndarray::Axis(0), s);
        slab.zip_mut_with(&f, |r, &f| *r = e * *r + (1.0 - e) * f);
    }
    let x_hat = tape.leaf(interp.into_dyn());
    let scores = discriminator_forward(tape, cfg, dvars, x_hat, masks);
    let total = tape.sum(scores);
    let g = tape.grad(total, &[x_hat])[0].expect("scores depend on x_hat");
    let g2 = tape.square(g);
    let n2 = tape.sum_per_sample(g2);
    let n = tape.sqrt(n2);
    let nm1 = tape.add_scalar(n, -1.0);
    let sq = tape.square(nm1);
    tape.mean(sq)
}

/// The discriminator loss and its logged components.
pub struct DLossParts {
    pub total: Var,
    pub e_fake: Var,
    pub e_real: Var,
    pub penalty: Var,
}

/// E[D(fake)] - E[D(real)] + gp_lambda * penalty, on a fresh tape with the
/// discriminator variables `dvars`; `fake` must already be detached
/// (values only).
#[allow(clippy::too_many_arguments)]
pub fn d_loss_graph(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    dvars: &[Var],
    real: &Array4<f64>,
    fake: &Array4<f64>,
    eps: &[f64],
    gp_lambda: f64,
    masks: Option<(&[ArrayD<f64>], &[ArrayD<f64>], &[ArrayD<f64>])>,
) -> DLossParts {
    let (m_real, m_fake, m_interp) = match masks {
        Some((a, b, c)) => (Some(a), Some(b), Some(c)),
        None => (None, None, None),
    };
    let real_v = tape.constant(real.clone().into_dyn());
    let fake_v = tape.constant(fake.clone().into_dyn());
    let d_real = discriminator_forward(tape, cfg, dvars, real_v, m_real);
    let d_fake = discriminator_forward(tape, cfg, dvars, fake_v, m_fake);
    let e_real = tape.mean(d_real);
    let e_fake = tape.mean(d_fake);
    let penalty = gradient_penalty_graph(tape, cfg, dvars, real, fake, eps, m_interp);
    let diff = tape.sub(e_fake, e_real);
    let weighted = tape.scale(penalty, gp_lambda);
    let total = tape.add(diff, weighted);
    DLossParts {
        total,
        e_fake,
        e_real,
        penalty,
    }
}

/// The generator loss and its logged components.
pub struct GLossParts {
    pub total: Var,
    pub adversarial: Var,
    pub residual: Var,
    pub boundary: Var,
    pub output_std: Var,
}

/// -E[D(G(z))] + lambda_r * L_r + lambda_b * L_b. The physics losses see
/// the generator output after inverting the per-channel standardization.
#[allow(clippy::too_many_arguments)]
pub fn g_loss_graph(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    gvars: &[Var],
    dvars: &[Var],
    z: &Array2<f64>,
    stats: &ChannelStats,
    bc: &BoundarySpec,
    q: &Field,
    physics: &PhysicsLossConfig,
    bn: BnMode<'_>,
    d_masks: Option<&[ArrayD<f64>]>,
) -> (GLossParts, Vec<crate::nn::BnBatch>) {
    let zv = tape.constant(z.clone().into_dyn());
    let (x_std, observed) = generator_forward(tape, cfg, gvars, bn, zv);
    let scores = discriminator_forward(tape, cfg, dvars, x_std, d_masks);
    let e = tape.mean(scores);
    let adversarial = tape.neg(e);
    let x_phys = stats.denormalize_graph(tape, x_std);
    let residual = residual_loss_graph(tape, x_phys, cfg.grid, q.values(), physics.interior_crop);
    let boundary = boundary_loss_graph(tape, x_phys, cfg.grid, bc);
    let wr = tape.scale(residual, physics.lambda_r);
    let wb = tape.scale(boundary, physics.lambda_b);
    let t = tape.add(adversarial, wr);
    let total = tape.add(t, wb);
    (
        GLossParts {
            total,
            adversarial,
            residual,
            boundary,
            output_std: x_std,
        },
        observed,
    )
}

/// One metrics row per generator iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_adversarial: f64,
    pub residual: f64,
    pub boundary: f64,
    pub penalty: f64,
}

/// A trained (or initialized) model with everything needed to sample it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub cfg: NetworkConfig,
    pub params: NetworkParams,
    pub stats: ChannelStats,
    pub iteration: u64,
}

impl TrainedModel {
    /// Deterministic inference: standardized-unit samples for `z` `[B, z_dim]`.
    pub fn generate_std(&self, z: &Array2<f64>) -> Array4<f64> {
        let mut tape = Tape::new();
        let gv = self.params.gen.set.insert(&mut tape, false);
        let zv = tape.constant(z.clone().into_dyn());
        let (out, _) = generator_forward(
            &mut tape,
            &self.cfg,
            &gv,
            BnMode::Eval(&self.params.gen.bn_running),
            zv,
        );
        tape.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }

    /// Physical-unit samples for `z`.
    pub fn generate(&self, z: &Array2<f64>) -> Array4<f64> {
        self.stats.denormalize(&self.generate_std(z))
    }

    /// Discriminator scores of a standardized batch (inference mode).
    pub fn score_std(&self, x_std: &Array4<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let dv = self.params.disc.set.insert(&mut tape, false);
        let xv = tape.constant(x_std.clone().into_dyn());
        let y = discriminator_forward(&mut tape, &self.cfg, &dv, xv, None);
        tape.value(y).iter().cloned().collect()
    }
}

fn draw_z_batch(rng: &mut ChaCha12Rng, b: usize, z_dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, z_dim), |_| rng.sample(StandardNormal))
}

fn gather_batch(data: &Array4<f64>, indices: &[usize]) -> Array4<f64> {
    let (_, c, h, w) = data.dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (s, &idx) in indices.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), s)
            .assign(&data.index_axis(ndarray::Axis(0), idx));
    }
    out
}

/// Train the physics-informed WGAN-GP on a physical-unit dataset.
///
/// The dataset is standardized per channel internally; the recorded
/// statistics travel with the returned model. Aborts with a divergence
/// error (carrying the iteration) if any logged quantity stops being
/// finite.
pub fn train(
    data: &FieldStack,
    train_cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    physics: &PhysicsLossConfig,
    bc: &BoundarySpec,
    q: &Field,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    train_with_snapshots(data, train_cfg, net_cfg, physics, bc, q, None, 0, |_, _| Ok(()))
}

/// [`train`] with a periodic snapshot hook: every `snapshot_every`
/// generator iterations (0 disables it) the callback sees the current
/// model and the log so far, e.g. to persist intermediate checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn train_with_snapshots(
    data: &FieldStack,
    train_cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    physics: &PhysicsLossConfig,
    bc: &BoundarySpec,
    q: &Field,
    resume: Option<&TrainedModel>,
    snapshot_every: u64,
    mut snapshot: impl FnMut(&TrainedModel, &[LogRow]) -> Result<()>,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    train_cfg.validate()?;
    net_cfg.validate()?;
    physics.validate()?;
    if net_cfg.grid != data.grid() {
        return Err(Error::GridMismatch("network vs dataset".into()));
    }
    let n = data.n_samples();
    if train_cfg.batch_size > n {
        return Err(Error::InvalidParameter(format!(
            "batch_size {} exceeds sample count {n}",
            train_cfg.batch_size
        )));
    }
    let stats = ChannelStats::compute(data)?;
    let data_std = stats.normalize(data.data());

    let mut iteration0 = 0u64;
    let mut params = match resume {
        Some(model) => {
            if model.cfg != *net_cfg {
                return Err(Error::ShapeMismatch {
                    expected: format!("{net_cfg:?}"),
                    got: format!("{:?}", model.cfg),
                });
            }
            iteration0 = model.iteration;
            model.params.clone()
        }
        None => NetworkParams::init(net_cfg, train_cfg.seed)?,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(train_cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam_g = Adam::for_params(
        train_cfg.learning_rate,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        &params.gen.set,
    );
    let mut adam_d = Adam::for_params(
        train_cfg.learning_rate,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        &params.disc.set,
    );
    let b = train_cfg.batch_size;
    let mut log = Vec::with_capacity(train_cfg.total_g_iterations as usize);

    for iter in 0..train_cfg.total_g_iterations {
        let mut last_d = 0.0;
        let mut last_gp = 0.0;
        for _ in 0..train_cfg.d_steps_per_g {
            let indices: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
            let real = gather_batch(&data_std, &indices);
            let z = draw_z_batch(&mut rng, b, net_cfg.z_dim);
            let eps: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
            let m_real = dropout_masks(&mut rng, net_cfg, b);
            let m_fake = dropout_masks(&mut rng, net_cfg, b);
            let m_interp = dropout_masks(&mut rng, net_cfg, b);

            // fake batch, detached: generator weights enter as constants
            let mut tape = Tape::new();
            let gv = params.gen.set.insert(&mut tape, false);
            let zv = tape.constant(z.into_dyn());
            let (fake_var, observed) =
                generator_forward(&mut tape, net_cfg, &gv, BnMode::Train, zv);
            update_bn_running(&mut params.gen.bn_running, &observed);
            let fake = tape
                .value(fake_var)
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();

            let mut tape = Tape::new();
            let dv = params.disc.set.insert(&mut tape, true);
            let parts = d_loss_graph(
                &mut tape,
                net_cfg,
                &dv,
                &real,
                &fake,
                &eps,
                train_cfg.gp_lambda,
                Some((&m_real, &m_fake, &m_interp)),
            );
            last_d = tape.scalar(parts.total);
            last_gp = tape.scalar(parts.penalty);
            if !last_d.is_finite() {
                return Err(Error::Divergence {
                    iteration: iter,
                    what: "d_loss".into(),
                });
            }
            let grads = extract_grads(&mut tape, parts.total, &dv);
            adam_d.step_params(&mut params.disc.set, &grads);
        }

        let z = draw_z_batch(&mut rng, b, net_cfg.z_dim);
        let d_masks = dropout_masks(&mut rng, net_cfg, b);
        let mut tape = Tape::new();
        let gv = params.gen.set.insert(&mut tape, true);
        let dv = params.disc.set.insert(&mut tape, false);
        let (parts, observed) = g_loss_graph(
            &mut tape,
            net_cfg,
            &gv,
            &dv,
            &z,
            &stats,
            bc,
            q,
            physics,
            BnMode::Train,
            Some(&d_masks),
        );
        update_bn_running(&mut params.gen.bn_running, &observed);
        let row = LogRow {
            iteration: iter,
            d_loss: last_d,
            g_loss: tape.scalar(parts.total),
            g_adversarial: tape.scalar(parts.adversarial),
            residual: tape.scalar(parts.residual),
            boundary: tape.scalar(parts.boundary),
            penalty: last_gp,
        };
        if !(row.g_loss.is_finite() && row.residual.is_finite() && row.boundary.is_finite()) {
            return Err(Error::Divergence {
                iteration: iter,
                what: "g_loss".into(),
            });
        }
        let grads = extract_grads(&mut tape, parts.total, &gv);
        adam_g.step_params(&mut params.gen.set, &grads);
        log.push(row);

        if snapshot_every > 0 && (iter + 1) % snapshot_every == 0 {
            let snap = TrainedModel {
                cfg: *net_cfg,
                params: params.clone(),
                stats,
                iteration: iteration0 + iter + 1,
            };
            snapshot(&snap, &log)?;
        }
    }

    if !(params.gen.set.all_finite() && params.disc.set.all_finite()) {
        return Err(Error::Divergence {
            iteration: train_cfg.total_g_iterations,
            what: "parameters".into(),
        });
    }
    Ok((
        TrainedModel {
            cfg: *net_cfg,
            params,
            stats,
            iteration: iteration0 + train_cfg.total_g_iterations,
        },
        log,
    ))
}

/// Mean gradient norm of the discriminator at fresh interpolates; a soft
/// Lipschitz diagnostic (reported, not asserted).
pub fn mean_interpolate_grad_norm(
    model: &TrainedModel,
    real: &Array4<f64>,
    fake: &Array4<f64>,
    eps: &[f64],
) -> f64 {
    let mut tape = Tape::new();
    let dv = model.params.disc.set.insert(&mut tape, false);
    let mut interp = real.clone();
    for (s, &e) in eps.iter().enumerate() {
        let mut slab = interp.index_axis_mut(ndarray::Axis(0), s);
        let f = fake.index_axis(ndarray::Axis(0), s);
        slab.zip_mut_with(&f, |r, &f| *r = e * *r + (1.0 - e) * f);
    }
    let x_hat = tape.leaf(interp.into_dyn());
    let scores = discriminator_forward(&mut tape, &model.cfg, &dv, x_hat, None);
    let total = tape.sum(scores);
    let g = tape.grad(total, &[x_hat])[0].unwrap();
    let g2 = tape.square(g);
    let n2 = tape.sum_per_sample(g2);
    let n = tape.sqrt(n2);
    let m = tape.mean(n);
    tape.scalar(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn tiny_cfg() -> NetworkConfig {
        let grid = make_grid(8, 8, 2.0, 2.0).unwrap();
        NetworkConfig::new(grid, 3, 2).unwrap()
    }

    fn random_batch(seed: u64, b: usize) -> Array4<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 4, 8, 8), |_| rng.sample(StandardNormal))
    }

    /// Discriminator with conv weights zeroed and the final bias set to c:
    /// D(x) = c for every x.
    fn constant_disc(cfg: &NetworkConfig, c: f64) -> NetworkParams {
        let mut params = NetworkParams::init(cfg, 1).unwrap();
        for i in 0..params.disc.set.len() {
            params.disc.set.value_mut(i).fill(0.0);
        }
        let last = params.disc.set.len() - 1;
        params.disc.set.value_mut(last).fill(c);
        params
    }

    #[test]
    fn constant_discriminator_penalty_is_one_and_d_loss_is_lambda() {
        let cfg = tiny_cfg();
        let params = constant_disc(&cfg, 2.5);
        let real = random_batch(10, 3);
        let fake = random_batch(11, 3);
        let eps = [0.3, 0.8, 0.5];
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let parts = d_loss_graph(&mut tape, &cfg, &dv, &real, &fake, &eps, 10.0, None);
        assert!((tape.scalar(parts.penalty) - 1.0).abs() < 1e-12);
        assert!((tape.scalar(parts.total) - 10.0).abs() < 1e-12);
        assert!((tape.scalar(parts.e_fake) - 2.5).abs() < 1e-12);
        assert!((tape.scalar(parts.e_real) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_discriminator_with_zero_lambda_gives_zero_loss() {
        let cfg = tiny_cfg();
        let params = constant_disc(&cfg, 0.0);
        let real = random_batch(12, 2);
        let fake = random_batch(13, 2);
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let parts = d_loss_graph(&mut tape, &cfg, &dv, &real, &fake, &[0.5, 0.5], 0.0, None);
        assert!(tape.scalar(parts.total).abs() < 1e-15);
    }

    #[test]
    fn affine_discriminator_with_unit_gradient_norm_has_zero_penalty() {
        let cfg = tiny_cfg();
        // positive conv biases keep every pre-activation on the linear
        // branch of the leaky relu, so D is affine on the test inputs
        let mut params = NetworkParams::init(&cfg, 3).unwrap();
        for i in 0..params.disc.set.len() {
            let name = params.disc.set.name(i).to_string();
            if name.ends_with("conv.b") {
                params.disc.set.value_mut(i).fill(10.0);
            }
        }
        let real = random_batch(14, 2).mapv(|v| 0.05 * v);
        let fake = random_batch(15, 2).mapv(|v| 0.05 * v);
        let eps = [0.25, 0.75];
        // measure the (constant) gradient norm, then rescale the head
        let norm = {
            let mut tape = Tape::new();
            let dv = params.disc.set.insert(&mut tape, false);
            let x = tape.leaf(real.clone().into_dyn());
            let y = discriminator_forward(&mut tape, &cfg, &dv, x, None);
            let s = tape.sum(y);
            let g = tape.grad(s, &[x])[0].unwrap();
            let g2 = tape.square(g);
            let n2 = tape.sum_per_sample(g2);
            let n = tape.sqrt(n2);
            tape.value(n)[[0]]
        };
        let fc = params.disc.set.len() - 2;
        params
            .disc
            .set
            .value_mut(fc)
            .mapv_inplace(|v| v / norm);
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let gp = gradient_penalty_graph(&mut tape, &cfg, &dv, &real, &fake, &eps, None);
        assert!(tape.scalar(gp).abs() < 1e-10, "{}", tape.scalar(gp));
    }

    #[test]
    fn d_loss_decomposes_into_its_parts() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 5).unwrap();
        let real = random_batch(16, 3);
        let fake = random_batch(17, 3);
        let eps = [0.1, 0.6, 0.9];
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let parts = d_loss_graph(&mut tape, &cfg, &dv, &real, &fake, &eps, 10.0, None);
        let total = tape.scalar(parts.total);
        let sum = tape.scalar(parts.e_fake) - tape.scalar(parts.e_real)
            + 10.0 * tape.scalar(parts.penalty);
        assert!((total - sum).abs() <= 1e-10);
    }

    #[test]
    fn g_loss_reduces_to_adversarial_when_weights_vanish() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg, 6).unwrap();
        let stats = ChannelStats::identity();
        let bc = BoundarySpec::darcy(1.0, 0.0, 0.0, 0.0);
        let q = Field::constant(cfg.grid, 0.0);
        let z = Array2::from_shape_fn((2, cfg.z_dim), |(i, j)| 0.3 * (i as f64 - j as f64));
        let physics = PhysicsLossConfig {
            lambda_r: 0.0,
            lambda_b: 0.0,
            interior_crop: true,
        };
        let mut tape = Tape::new();
        let gv = params.gen.set.insert(&mut tape, true);
        let dv = params.disc.set.insert(&mut tape, false);
        let (parts, _) = g_loss_graph(
            &mut tape,
            &cfg,
            &gv,
            &dv,
            &z,
            &stats,
            &bc,
            &q,
            &physics,
            BnMode::Train,
            None,
        );
        let total = tape.scalar(parts.total);
        let adv = tape.scalar(parts.adversarial);
        assert!((total - adv).abs() <= 1e-15);
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let cfg = tiny_cfg();
        let grid = cfg.grid;
        let mut samples = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        for _ in 0..4 {
            samples.push(Array3::from_shape_fn((4, 8, 8), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }));
        }
        let data = FieldStack::from_samples(grid, &samples).unwrap();
        let tc = TrainConfig {
            total_g_iterations: 0,
            batch_size: 2,
            seed: 99,
            ..TrainConfig::default()
        };
        let physics = tc.physics(true);
        let bc = BoundarySpec::darcy(1.0, 0.0, 0.0, 0.0);
        let q = Field::constant(grid, 0.0);
        let (model, log) = train(&data, &tc, &cfg, &physics, &bc, &q).unwrap();
        assert!(log.is_empty());
        let fresh = NetworkParams::init(&cfg, 99).unwrap();
        assert_eq!(model.params, fresh);
    }

    #[test]
    fn short_training_is_deterministic_and_logged() {
        let cfg = tiny_cfg();
        let grid = cfg.grid;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut samples = Vec::new();
        for _ in 0..6 {
            samples.push(Array3::from_shape_fn((4, 8, 8), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }));
        }
        let data = FieldStack::from_samples(grid, &samples).unwrap();
        let tc = TrainConfig {
            total_g_iterations: 3,
            batch_size: 3,
            d_steps_per_g: 2,
            learning_rate: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let physics = tc.physics(true);
        let bc = BoundarySpec::darcy(1.0, 0.0, 0.0, 0.0);
        let q = Field::constant(grid, 0.0);
        let (m1, l1) = train(&data, &tc, &cfg, &physics, &bc, &q).unwrap();
        let (m2, l2) = train(&data, &tc, &cfg, &physics, &bc, &q).unwrap();
        assert_eq!(l1.len(), 3);
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
        // generation shape contract
        let z = Array2::zeros((2, cfg.z_dim));
        let out = m1.generate(&z);
        assert_eq!(out.dim(), (2, 4, 8, 8));
    }
}
