use geogan_core::autodiff::Tape;
use geogan_core::grid::make_grid;
use geogan_core::nn::{discriminator_forward, dropout_masks, extract_grads, NetworkConfig, NetworkParams};
use geogan_core::wgan::gradient_penalty_graph;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

#[test]
#[ignore]
fn bench_d_loss_phases() {
    let grid = make_grid(16, 16, 2.0, 2.0).unwrap();
    let cfg = NetworkConfig::new(grid, 32, 16).unwrap();
    let params = NetworkParams::init(&cfg, 1).unwrap();
    let b = 16usize;
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let real = Array4::from_shape_fn((b, 4, 16, 16), |_| rng.sample::<f64, _>(StandardNormal));
    let fake = Array4::from_shape_fn((b, 4, 16, 16), |_| rng.sample::<f64, _>(StandardNormal));
    let eps: Vec<f64> = (0..b).map(|_| rng.gen()).collect();
    let m1 = dropout_masks(&mut rng, &cfg, b);
    let m2 = dropout_masks(&mut rng, &cfg, b);
    let m3 = dropout_masks(&mut rng, &cfg, b);

    // phase 1: three forwards
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let r = tape.constant(real.clone().into_dyn());
        let f = tape.constant(fake.clone().into_dyn());
        let _a = discriminator_forward(&mut tape, &cfg, &dv, r, Some(&m1));
        let _b = discriminator_forward(&mut tape, &cfg, &dv, f, Some(&m2));
    }
    println!("2 D forwards: {:?}", t0.elapsed() / 10);

    // phase 2: gp graph(fwd + first grad)
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let _gp = gradient_penalty_graph(&mut tape, &cfg, &dv, &real, &fake, &eps, Some(&m3));
    }
    println!("gp graph (fwd+1st grad): {:?}", t0.elapsed() / 10);

    // phase 3: gp + second grad
    let t0 = Instant::now();
    let mut nodes = 0;
    for _ in 0..10 {
        let mut tape = Tape::new();
        let dv = params.disc.set.insert(&mut tape, true);
        let gp = gradient_penalty_graph(&mut tape, &cfg, &dv, &real, &fake, &eps, Some(&m3));
        let _g = extract_grads(&mut tape, gp, &dv);
        nodes = tape.len();
    }
    println!("gp + 2nd grad: {:?}  (tape nodes {nodes})", t0.elapsed() / 10);
}
