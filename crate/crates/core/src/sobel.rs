//! Sobel-filtered spatial derivatives and the physics losses built on them.
//!
//! The 3x3 kernels act as smoothed central differences. Applied as a true
//! convolution (kernel flipped), the classic horizontal/vertical kernels
//! return +df/dx and +df/dy in grid coordinates; dividing by 8*dx (8*dy)
//! makes a unit-slope field come out with derivative exactly one, which is
//! what couples the filtered gradients to physical flux units. Borders use
//! replicate padding and are normally excluded from the residual loss.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{BoundarySpec, Field, GridSpec, Side, SideBc, N_CHANNELS};

/// The filter pair in its textbook orientation, plus the derivative scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SobelKernels {
    pub horizontal: [[f64; 3]; 3],
    pub vertical: [[f64; 3]; 3],
    pub scale_x: f64,
    pub scale_y: f64,
}

impl SobelKernels {
    pub fn for_grid(grid: GridSpec) -> Self {
        Self {
            horizontal: [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]],
            vertical: [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]],
            scale_x: 1.0 / (8.0 * grid.dx()),
            scale_y: 1.0 / (8.0 * grid.dy()),
        }
    }
}

/// Weights for the physics terms added to the generator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsLossConfig {
    pub lambda_r: f64,
    pub lambda_b: f64,
    pub interior_crop: bool,
}

impl Default for PhysicsLossConfig {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_b: 10.0,
            interior_crop: true,
        }
    }
}

impl PhysicsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_r < 0.0 || self.lambda_b < 0.0 {
            return Err(Error::InvalidParameter(
                "physics loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// +x derivative estimate on one `[h, w]` slab, replicate padding.
pub(crate) fn sobel_x_raw(f: &[f64], h: usize, w: usize, dx: f64, out: &mut [f64]) {
    let s = 1.0 / (8.0 * dx);
    for y in 0..h {
        let (ym, yp) = (clamp(y as isize - 1, h), clamp(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp(x as isize - 1, w), clamp(x as isize + 1, w));
            let acc = (f[ym * w + xp] - f[ym * w + xm])
                + 2.0 * (f[y * w + xp] - f[y * w + xm])
                + (f[yp * w + xp] - f[yp * w + xm]);
            out[y * w + x] = s * acc;
        }
    }
}

/// +y derivative estimate on one `[h, w]` slab, replicate padding.
pub(crate) fn sobel_y_raw(f: &[f64], h: usize, w: usize, dy: f64, out: &mut [f64]) {
    let s = 1.0 / (8.0 * dy);
    for y in 0..h {
        let (ym, yp) = (clamp(y as isize - 1, h), clamp(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp(x as isize - 1, w), clamp(x as isize + 1, w));
            let acc = (f[yp * w + xm] - f[ym * w + xm])
                + 2.0 * (f[yp * w + x] - f[ym * w + x])
                + (f[yp * w + xp] - f[ym * w + xp]);
            out[y * w + x] = s * acc;
        }
    }
}

/// Adjoint of [`sobel_x_raw`] under the Euclidean inner product (the
/// replicate padding makes it accumulate into clamped border taps).
pub(crate) fn sobel_x_adjoint_raw(g: &[f64], h: usize, w: usize, dx: f64, out: &mut [f64]) {
    let s = 1.0 / (8.0 * dx);
    for y in 0..h {
        let (ym, yp) = (clamp(y as isize - 1, h), clamp(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp(x as isize - 1, w), clamp(x as isize + 1, w));
            let gv = s * g[y * w + x];
            out[ym * w + xp] += gv;
            out[ym * w + xm] -= gv;
            out[y * w + xp] += 2.0 * gv;
            out[y * w + xm] -= 2.0 * gv;
            out[yp * w + xp] += gv;
            out[yp * w + xm] -= gv;
        }
    }
}

pub(crate) fn sobel_y_adjoint_raw(g: &[f64], h: usize, w: usize, dy: f64, out: &mut [f64]) {
    let s = 1.0 / (8.0 * dy);
    for y in 0..h {
        let (ym, yp) = (clamp(y as isize - 1, h), clamp(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp(x as isize - 1, w), clamp(x as isize + 1, w));
            let gv = s * g[y * w + x];
            out[yp * w + xm] += gv;
            out[ym * w + xm] -= gv;
            out[yp * w + x] += 2.0 * gv;
            out[ym * w + x] -= 2.0 * gv;
            out[yp * w + xp] += gv;
            out[ym * w + xp] -= gv;
        }
    }
}

fn sobel_field(f: &Field, is_x: bool) -> Result<Field> {
    let grid = f.grid();
    if grid.nx < 3 || grid.ny < 3 {
        return Err(Error::GridTooSmall {
            nx: grid.nx,
            ny: grid.ny,
        });
    }
    let src = f.values().as_slice().expect("standard layout");
    let mut out = vec![0.0; src.len()];
    if is_x {
        sobel_x_raw(src, grid.ny, grid.nx, grid.dx(), &mut out);
    } else {
        sobel_y_raw(src, grid.ny, grid.nx, grid.dy(), &mut out);
    }
    Field::from_values(
        grid,
        Array2::from_shape_vec((grid.ny, grid.nx), out).unwrap(),
    )
}

/// Sobel estimate of df/dx at every cell.
pub fn sobel_x(f: &Field) -> Result<Field> {
    sobel_field(f, true)
}

/// Sobel estimate of df/dy at every cell.
pub fn sobel_y(f: &Field) -> Result<Field> {
    sobel_field(f, false)
}

/// 0/1 interior mask replicated over a batch, shape `[b, 1, ny, nx]`.
fn interior_mask(b: usize, grid: GridSpec) -> ArrayD<f64> {
    let (h, w) = (grid.ny, grid.nx);
    let mut m = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    for bi in 0..b {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                m[[bi, 0, y, x]] = 1.0;
            }
        }
    }
    m
}

fn batched_channel_const(b: usize, values: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = values.dim();
    let mut out = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    for bi in 0..b {
        let mut slab = out.index_axis_mut(ndarray::Axis(0), bi);
        let mut slab = slab.index_axis_mut(ndarray::Axis(0), 0);
        slab.assign(values);
    }
    out
}

/// Mean PDE residual loss of a physical-unit batch `[B,4,H,W]`:
/// (1/N)(|F + K o grad h|^2 + |div F - q|^2), Sobel-discretized, averaged
/// over the batch. `N` counts interior pixels when `interior_crop` is set.
pub fn residual_loss_graph(
    tape: &mut Tape,
    x_phys: Var,
    grid: GridSpec,
    q: &Array2<f64>,
    interior_crop: bool,
) -> Var {
    let shape = tape.value(x_phys).shape().to_vec();
    assert_eq!(shape.len(), 4);
    assert_eq!(shape[1], N_CHANNELS);
    assert_eq!((shape[2], shape[3]), (grid.ny, grid.nx));
    let b = shape[0];
    let (dx, dy) = (grid.dx(), grid.dy());

    let lnk = tape.slice_channel(x_phys, crate::grid::CH_LNK);
    let k = tape.exp(lnk);
    let head = tape.slice_channel(x_phys, crate::grid::CH_H);
    let f1 = tape.slice_channel(x_phys, crate::grid::CH_F1);
    let f2 = tape.slice_channel(x_phys, crate::grid::CH_F2);

    let hx = tape.sobel_x(head, dx);
    let hy = tape.sobel_y(head, dy);
    let khx = tape.mul(k, hx);
    let khy = tape.mul(k, hy);
    let rx = tape.add(f1, khx);
    let ry = tape.add(f2, khy);

    let d1 = tape.sobel_x(f1, dx);
    let d2 = tape.sobel_y(f2, dy);
    let div = tape.add(d1, d2);
    let qc = tape.constant(batched_channel_const(b, q));
    let rq = tape.sub(div, qc);

    let (rx, ry, rq, n_pix) = if interior_crop {
        let m = tape.constant(interior_mask(b, grid));
        (
            tape.mul(rx, m),
            tape.mul(ry, m),
            tape.mul(rq, m),
            (grid.ny - 2) * (grid.nx - 2),
        )
    } else {
        (rx, ry, rq, grid.cells())
    };
    let sx = tape.square(rx);
    let sy = tape.square(ry);
    let sq = tape.square(rq);
    let s1 = tape.sum(sx);
    let s2 = tape.sum(sy);
    let s3 = tape.sum(sq);
    let t = tape.add(s1, s2);
    let total = tape.add(t, s3);
    tape.scale(total, 1.0 / (n_pix * b) as f64)
}

/// Mean boundary loss of a physical-unit batch: squared head mismatch on
/// Dirichlet edge pixels plus squared normal-flux mismatch on Neumann edge
/// pixels, divided by the boundary pixel count M = 2nx + 2ny.
pub fn boundary_loss_graph(tape: &mut Tape, x_phys: Var, grid: GridSpec, bc: &BoundarySpec) -> Var {
    let shape = tape.value(x_phys).shape().to_vec();
    assert_eq!(shape.len(), 4);
    assert_eq!(shape[1], N_CHANNELS);
    assert_eq!((shape[2], shape[3]), (grid.ny, grid.nx));
    let b = shape[0];
    let (nx, ny) = (grid.nx, grid.ny);
    let m_count = 2 * nx + 2 * ny;

    // per-side (mask, target, channel)
    let mut side_terms: Vec<(Array2<f64>, Array2<f64>, usize)> = Vec::new();
    for side in [Side::Left, Side::Right, Side::Bottom, Side::Top] {
        let mut mask = Array2::zeros((ny, nx));
        let fill = |mask: &mut Array2<f64>| match side {
            Side::Left => (0..ny).for_each(|j| mask[[j, 0]] = 1.0),
            Side::Right => (0..ny).for_each(|j| mask[[j, nx - 1]] = 1.0),
            Side::Bottom => (0..nx).for_each(|i| mask[[0, i]] = 1.0),
            Side::Top => (0..nx).for_each(|i| mask[[ny - 1, i]] = 1.0),
        };
        fill(&mut mask);
        match bc.side(side) {
            SideBc::Dirichlet(h_d) => {
                let target = &mask * h_d;
                side_terms.push((mask, target, crate::grid::CH_H));
            }
            SideBc::Neumann(_) => {
                let (target_val, channel) = match side {
                    Side::Left | Side::Right => {
                        (bc.f1_target(side).unwrap(), crate::grid::CH_F1)
                    }
                    Side::Bottom | Side::Top => {
                        (bc.f2_target(side).unwrap(), crate::grid::CH_F2)
                    }
                };
                let target = &mask * target_val;
                side_terms.push((mask, target, channel));
            }
        }
    }

    let mut acc: Option<Var> = None;
    for (mask, target, channel) in side_terms {
        let ch = tape.slice_channel(x_phys, channel);
        let t = tape.constant(batched_channel_const(b, &target));
        let m = tape.constant(batched_channel_const(b, &mask));
        let d = tape.sub(ch, t);
        let md = tape.mul(d, m);
        let s = tape.square(md);
        let term = tape.sum(s);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let total = acc.expect("four sides");
    tape.scale(total, 1.0 / (m_count * b) as f64)
}

fn sample_leaf(tape: &mut Tape, sample: &Array3<f64>, grid: GridSpec) -> Result<Var> {
    let dim = sample.dim();
    if dim != (N_CHANNELS, grid.ny, grid.nx) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, {}, {}]", N_CHANNELS, grid.ny, grid.nx),
            got: format!("{dim:?}"),
        });
    }
    let v = sample
        .clone()
        .into_shape(IxDyn(&[1, N_CHANNELS, grid.ny, grid.nx]))
        .unwrap();
    Ok(tape.leaf(v))
}

fn grad_to_sample(tape: &Tape, g: Var, grid: GridSpec) -> Array3<f64> {
    tape.value(g)
        .clone()
        .into_shape(IxDyn(&[N_CHANNELS, grid.ny, grid.nx]))
        .unwrap()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

/// Residual loss of one physical-unit sample `[4, ny, nx]`, with its
/// gradient with respect to all four channels.
pub fn residual_loss(
    sample: &Array3<f64>,
    grid: GridSpec,
    q: &Field,
    cfg: &PhysicsLossConfig,
) -> Result<(f64, Array3<f64>)> {
    cfg.validate()?;
    if q.grid() != grid {
        return Err(Error::GridMismatch("source grid".into()));
    }
    let mut tape = Tape::new();
    let x = sample_leaf(&mut tape, sample, grid)?;
    let loss = residual_loss_graph(&mut tape, x, grid, q.values(), cfg.interior_crop);
    let g = tape.grad(loss, &[x])[0].expect("loss depends on the sample");
    Ok((tape.scalar(loss), grad_to_sample(&tape, g, grid)))
}

/// Boundary loss of one physical-unit sample, with gradient.
pub fn boundary_loss(
    sample: &Array3<f64>,
    grid: GridSpec,
    bc: &BoundarySpec,
) -> Result<(f64, Array3<f64>)> {
    let mut tape = Tape::new();
    let x = sample_leaf(&mut tape, sample, grid)?;
    let loss = boundary_loss_graph(&mut tape, x, grid, bc);
    let g = tape.grad(loss, &[x])[0].expect("loss depends on the sample");
    Ok((tape.scalar(loss), grad_to_sample(&tape, g, grid)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::grid::{make_grid, BoundarySpec};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn kernels_match_published_entries() {
        let grid = make_grid(8, 8, 2.0, 2.0).unwrap();
        let k = SobelKernels::for_grid(grid);
        assert_eq!(k.horizontal, [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]]);
        assert_eq!(k.vertical, [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]]);
        assert_eq!(k.scale_x, 1.0 / (8.0 * 0.25));
    }

    #[test]
    fn raw_path_equals_kernel_convolution() {
        // applying the stored kernel as a true convolution (flipped taps)
        // must reproduce the fast path, interior pixels, both axes
        let grid = make_grid(7, 6, 2.0, 1.5).unwrap();
        let kern = SobelKernels::for_grid(grid);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let f = Field::from_fn(grid, |_, _| rng.gen_range(-1.0..1.0));
        let gx = sobel_x(&f).unwrap();
        let gy = sobel_y(&f).unwrap();
        for j in 1..grid.ny - 1 {
            for i in 1..grid.nx - 1 {
                let mut accx = 0.0;
                let mut accy = 0.0;
                for r in 0..3usize {
                    for c in 0..3usize {
                        let (dyo, dxo) = (r as isize - 1, c as isize - 1);
                        let v = f.at(
                            (i as isize - dxo) as usize,
                            (j as isize - dyo) as usize,
                        );
                        accx += kern.horizontal[r][c] * v;
                        accy += kern.vertical[r][c] * v;
                    }
                }
                assert!((kern.scale_x * accx - gx.at(i, j)).abs() < 1e-14);
                assert!((kern.scale_y * accy - gy.at(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let grid = make_grid(6, 5, 1.0, 1.0).unwrap();
        let f = Field::constant(grid, 3.7);
        assert!(sobel_x(&f).unwrap().values().iter().all(|v| v.abs() < 1e-14));
        assert!(sobel_y(&f).unwrap().values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn affine_fields_are_differentiated_exactly() {
        let grid = make_grid(9, 7, 2.0, 3.0).unwrap();
        let f = Field::from_fn(grid, |x, y| 3.0 * x - 2.0 * y + 0.5);
        let gx = sobel_x(&f).unwrap();
        let gy = sobel_y(&f).unwrap();
        for j in 1..grid.ny - 1 {
            for i in 1..grid.nx - 1 {
                assert!((gx.at(i, j) - 3.0).abs() <= 1e-12, "gx {}", gx.at(i, j));
                assert!((gy.at(i, j) + 2.0).abs() <= 1e-12, "gy {}", gy.at(i, j));
            }
        }
    }

    #[test]
    fn matches_smoothed_central_difference_oracle() {
        // independent oracle: (1,2,1)/4 cross-smoothing of the plain
        // central difference, written as explicit loops
        let grid = make_grid(12, 10, 2.0, 2.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let f = Field::from_fn(grid, |_, _| rng.gen_range(-2.0..2.0));
            let gx = sobel_x(&f).unwrap();
            let gy = sobel_y(&f).unwrap();
            let (dx, dy) = (grid.dx(), grid.dy());
            for j in 1..grid.ny - 1 {
                for i in 1..grid.nx - 1 {
                    let mut cx = 0.0;
                    let mut cy = 0.0;
                    for (off, wt) in [(-1isize, 0.25), (0, 0.5), (1, 0.25)] {
                        let jj = (j as isize + off) as usize;
                        let ii = (i as isize + off) as usize;
                        cx += wt * (f.at(i + 1, jj) - f.at(i - 1, jj)) / (2.0 * dx);
                        cy += wt * (f.at(ii, j + 1) - f.at(ii, j - 1)) / (2.0 * dy);
                    }
                    assert!((gx.at(i, j) - cx).abs() <= 1e-12);
                    assert!((gy.at(i, j) - cy).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn sobel_is_linear() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let f = Field::from_fn(grid, |_, _| rng.gen_range(-1.0..1.0));
        let g = Field::from_fn(grid, |_, _| rng.gen_range(-1.0..1.0));
        let (a, b) = (1.7, -0.4);
        let combo = Field::from_values(grid, a * f.values() + b * g.values()).unwrap();
        let lhs = sobel_x(&combo).unwrap();
        let rhs = a * sobel_x(&f).unwrap().values() + b * sobel_x(&g).unwrap().values();
        for (l, r) in lhs.values().iter().zip(rhs.iter()) {
            assert!((l - r).abs() < 1e-13);
        }
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let grid = make_grid(10, 10, 1.0, 1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Field::from_values(
            grid,
            Array2::from_shape_fn((10, 10), |(j, i)| base[(j * 10 + i) % 100]),
        )
        .unwrap();
        let shifted = Field::from_values(
            grid,
            Array2::from_shape_fn((10, 10), |(j, i)| base[(j * 10 + (i + 1)) % 100]),
        )
        .unwrap();
        let gf = sobel_x(&f).unwrap();
        let gs = sobel_x(&shifted).unwrap();
        for j in 2..8 {
            for i in 2..7 {
                assert!((gs.at(i, j) - gf.at(i + 1, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (h, w) = (6usize, 7usize);
        let f: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for is_x in [true, false] {
            let mut sf = vec![0.0; h * w];
            let mut stg = vec![0.0; h * w];
            if is_x {
                sobel_x_raw(&f, h, w, 0.3, &mut sf);
                sobel_x_adjoint_raw(&g, h, w, 0.3, &mut stg);
            } else {
                sobel_y_raw(&f, h, w, 0.3, &mut sf);
                sobel_y_adjoint_raw(&g, h, w, 0.3, &mut stg);
            }
            let lhs: f64 = sf.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.iter().zip(&stg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_grids() {
        assert!(make_grid(2, 5, 1.0, 1.0).is_err());
    }

    fn flat_loss(
        vals: &[f64],
        grid: GridSpec,
        q: &Field,
        cfg: &PhysicsLossConfig,
        boundary: Option<&BoundarySpec>,
    ) -> f64 {
        let sample =
            Array3::from_shape_vec((N_CHANNELS, grid.ny, grid.nx), vals.to_vec()).unwrap();
        match boundary {
            None => residual_loss(&sample, grid, q, cfg).unwrap().0,
            Some(bc) => boundary_loss(&sample, grid, bc).unwrap().0,
        }
    }

    #[test]
    fn residual_loss_vanishes_on_trivial_sample() {
        let grid = make_grid(5, 5, 1.0, 1.0).unwrap();
        let q = Field::constant(grid, 0.0);
        // lnK = 0, h constant, F = 0: every term is zero
        let mut sample = Array3::zeros((N_CHANNELS, 5, 5));
        sample
            .index_axis_mut(ndarray::Axis(0), crate::grid::CH_H)
            .fill(2.0);
        let (l, g) = residual_loss(&sample, grid, &q, &PhysicsLossConfig::default()).unwrap();
        assert!(l.abs() < 1e-16);
        assert!(g.iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn residual_loss_gradient_matches_finite_differences() {
        let grid = make_grid(5, 5, 1.0, 1.0).unwrap();
        let q = Field::from_fn(grid, |x, y| 0.1 * x - 0.2 * y);
        let cfg = PhysicsLossConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..N_CHANNELS * 25).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let sample = Array3::from_shape_vec((N_CHANNELS, 5, 5), vals.clone()).unwrap();
        let (_, g) = residual_loss(&sample, grid, &q, &cfg).unwrap();
        let fd = finite_difference(|v| flat_loss(v, grid, &q, &cfg, None), &vals, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!(
                (a - b).abs() <= 1e-6 * b.abs().max(1.0),
                "analytic {a} vs fd {b}"
            );
        }
        // also without the interior crop
        let cfg_full = PhysicsLossConfig {
            interior_crop: false,
            ..cfg
        };
        let (_, g) = residual_loss(&sample, grid, &q, &cfg_full).unwrap();
        let fd = finite_difference(|v| flat_loss(v, grid, &q, &cfg_full, None), &vals, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn boundary_loss_examples_and_gradient() {
        let grid = make_grid(64, 64, 2.0, 2.0).unwrap();
        let bc = BoundarySpec::darcy(1.0, 0.0, 0.0, 0.0);
        // edges exactly matching the boundary conditions give zero
        let mut sample = Array3::zeros((N_CHANNELS, 64, 64));
        {
            let mut h = sample.index_axis_mut(ndarray::Axis(0), crate::grid::CH_H);
            for j in 0..64 {
                h[[j, 0]] = 1.0;
                h[[j, 63]] = 0.0;
            }
        }
        let (l, _) = boundary_loss(&sample, grid, &bc).unwrap();
        assert!(l.abs() < 1e-16);

        // left edge off by +0.1: (1/M) * 64 * 0.01 with M = 256
        let mut off = sample.clone();
        {
            let mut h = off.index_axis_mut(ndarray::Axis(0), crate::grid::CH_H);
            for j in 0..64 {
                h[[j, 0]] = 1.1;
            }
        }
        let (l, _) = boundary_loss(&off, grid, &bc).unwrap();
        assert!((l - 0.0025).abs() < 1e-12, "{l}");

        // gradient check on a small grid
        let grid5 = make_grid(5, 5, 1.0, 1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let vals: Vec<f64> = (0..N_CHANNELS * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sample = Array3::from_shape_vec((N_CHANNELS, 5, 5), vals.clone()).unwrap();
        let bc5 = BoundarySpec::darcy(1.0, 0.0, 0.3, -0.2);
        let (_, g) = boundary_loss(&sample, grid5, &bc5).unwrap();
        let q = Field::constant(grid5, 0.0);
        let fd = finite_difference(
            |v| flat_loss(v, grid5, &q, &PhysicsLossConfig::default(), Some(&bc5)),
            &vals,
            1e-6,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn losses_are_nonnegative_and_zero_iff_residual_vanishes() {
        let grid = make_grid(6, 6, 1.0, 1.0).unwrap();
        let q = Field::constant(grid, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..N_CHANNELS * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sample = Array3::from_shape_vec((N_CHANNELS, 6, 6), vals).unwrap();
            let (l, _) = residual_loss(&sample, grid, &q, &PhysicsLossConfig::default()).unwrap();
            assert!(l >= 0.0);
        }
    }
}
