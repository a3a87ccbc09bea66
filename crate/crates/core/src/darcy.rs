//! Steady-state saturated Darcy flow on the cell-centered grid.
//!
//! The conservation form div(K grad h) + q = 0 is discretized with a
//! five-point finite-volume stencil: interface conductivities are harmonic
//! means of the adjacent cells, Dirichlet sides enter through ghost-cell
//! elimination (boundary face transmissibility 2K/dx) and Neumann sides
//! through prescribed face fluxes on the right-hand side. The assembled
//! matrix is symmetric positive definite whenever at least one Dirichlet
//! face is present.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    BoundarySpec, Field, FieldStack, GridSpec, Side, SideBc, CH_F1, CH_F2, CH_H, CH_LNK,
};
use crate::kl::{CovarianceSpec, KlBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    #[default]
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolveMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolveMethod::Direct,
            tolerance: 1e-10,
            max_iterations: 20_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "solver tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidParameter(
                "solver max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Symmetric penta-diagonal system over the grid cells (row-major order).
///
/// `east[p]` couples cell p with p+1 (valid when p is not in the last
/// column), `north[p]` couples p with p+nx (valid below the top row).
/// Off-diagonal entries are the negated transmissibilities.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    grid: GridSpec,
    diag: Vec<f64>,
    east: Vec<f64>,
    north: Vec<f64>,
    rhs: Vec<f64>,
    dirichlet_faces: usize,
}

impl LinearSystem {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// y = A x with the penta-diagonal structure.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let nx = self.grid.nx;
        let n = self.grid.cells();
        for p in 0..n {
            let mut acc = self.diag[p] * x[p];
            let i = p % nx;
            if i + 1 < nx {
                acc += self.east[p] * x[p + 1];
            }
            if i > 0 {
                acc += self.east[p - 1] * x[p - 1];
            }
            if p + nx < n {
                acc += self.north[p] * x[p + nx];
            }
            if p >= nx {
                acc += self.north[p - nx] * x[p - nx];
            }
            y[p] = acc;
        }
    }

    pub fn residual_norm(&self, x: &[f64]) -> f64 {
        let n = self.grid.cells();
        let mut ax = vec![0.0; n];
        self.matvec(x, &mut ax);
        ax.iter()
            .zip(&self.rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assemble the finite-volume system for conductivity `K`, boundary
/// conditions `bc` and source density `q`.
pub fn assemble(k: &Field, bc: &BoundarySpec, q: &Field) -> Result<LinearSystem> {
    k.same_grid(q)?;
    if !k.values().iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::NonpositiveConductivity);
    }
    let grid = k.grid();
    let (nx, ny) = (grid.nx, grid.ny);
    let (dx, dy) = (grid.dx(), grid.dy());
    let n = grid.cells();
    let mut diag = vec![0.0; n];
    let mut east = vec![0.0; n];
    let mut north = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut dirichlet_faces = 0usize;

    for j in 0..ny {
        for i in 0..nx {
            let p = grid.idx(i, j);
            let kc = k.at(i, j);
            rhs[p] += q.at(i, j) * dx * dy;

            // interior faces (assembled once from the west/south cell)
            if i + 1 < nx {
                let t = harmonic(kc, k.at(i + 1, j)) * dy / dx;
                diag[p] += t;
                diag[p + 1] += t;
                east[p] = -t;
            }
            if j + 1 < ny {
                let t = harmonic(kc, k.at(i, j + 1)) * dx / dy;
                diag[p] += t;
                diag[p + nx] += t;
                north[p] = -t;
            }

            // boundary faces
            let mut sides: [(bool, Side, f64, f64); 4] = [
                (i == 0, Side::Left, dy, dx / 2.0),
                (i == nx - 1, Side::Right, dy, dx / 2.0),
                (j == 0, Side::Bottom, dx, dy / 2.0),
                (j == ny - 1, Side::Top, dx, dy / 2.0),
            ];
            for (active, side, face_len, half_dist) in sides.iter_mut() {
                if !*active {
                    continue;
                }
                match bc.side(*side) {
                    SideBc::Dirichlet(h_d) => {
                        let t = kc * *face_len / *half_dist;
                        diag[p] += t;
                        rhs[p] += t * h_d;
                        dirichlet_faces += 1;
                    }
                    SideBc::Neumann(g) => {
                        rhs[p] -= g * *face_len;
                    }
                }
            }
        }
    }

    Ok(LinearSystem {
        grid,
        diag,
        east,
        north,
        rhs,
        dirichlet_faces,
    })
}

/// Banded Cholesky factorization (semi-bandwidth nx) and solve.
fn solve_direct(sys: &LinearSystem) -> Result<Vec<f64>> {
    let nx = sys.grid.nx;
    let n = sys.grid.cells();
    let w = nx;
    // band[p * (w+1) + c] holds L[p][p - c]
    let at = |p: usize, c: usize| p * (w + 1) + c;
    let max_diag = sys.diag.iter().cloned().fold(0.0, f64::max);
    let pivot_floor = 1e-12 * max_diag;
    let mut band = vec![0.0f64; n * (w + 1)];
    for p in 0..n {
        band[at(p, 0)] = sys.diag[p];
        let i = p % nx;
        if i > 0 {
            band[at(p, 1)] = sys.east[p - 1];
        }
        if p >= nx {
            band[at(p, w)] = sys.north[p - nx];
        }
    }
    // in-place factorization of the band
    for p in 0..n {
        let lo = p.saturating_sub(w);
        let mut s = band[at(p, 0)];
        for k in lo..p {
            let l = band[at(p, p - k)];
            s -= l * l;
        }
        if !(s > pivot_floor) || !s.is_finite() {
            return Err(Error::SingularSystem(format!(
                "nonpositive pivot at row {p} (value {s:.3e})"
            )));
        }
        let lpp = s.sqrt();
        band[at(p, 0)] = lpp;
        for r in (p + 1)..n.min(p + w + 1) {
            let lo_r = r.saturating_sub(w).max(lo);
            let mut s = band[at(r, r - p)];
            for k in lo_r..p {
                s -= band[at(r, r - k)] * band[at(p, p - k)];
            }
            band[at(r, r - p)] = s / lpp;
        }
    }
    // L y = rhs
    let mut x = sys.rhs.clone();
    for p in 0..n {
        let lo = p.saturating_sub(w);
        let mut s = x[p];
        for k in lo..p {
            s -= band[at(p, p - k)] * x[k];
        }
        x[p] = s / band[at(p, 0)];
    }
    // L^T x = y
    for p in (0..n).rev() {
        let hi = n.min(p + w + 1);
        let mut s = x[p];
        for r in (p + 1)..hi {
            s -= band[at(r, r - p)] * x[r];
        }
        x[p] = s / band[at(p, 0)];
    }
    Ok(x)
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
fn solve_cg(sys: &LinearSystem, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = sys.grid.cells();
    let b_norm = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0f64; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = sys
        .diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let mut r = sys.rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0f64; n];
    for it in 0..max_iter {
        sys.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::SingularSystem(format!(
                "indefinite or singular system in CG at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(Error::Nonconvergence {
        iterations: max_iter,
        residual: r_norm / b_norm,
    })
}

/// Solve for the hydraulic head.
pub fn solve(sys: &LinearSystem, config: &SolverConfig) -> Result<Field> {
    config.validate()?;
    if sys.dirichlet_faces == 0 {
        return Err(Error::SingularSystem(
            "no Dirichlet face: the all-Neumann problem fixes h only up to a constant".into(),
        ));
    }
    let x = match config.method {
        SolveMethod::Direct => solve_direct(sys)?,
        SolveMethod::ConjugateGradient => solve_cg(sys, config.tolerance, config.max_iterations)?,
    };
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("solved head".into()));
    }
    let b_norm = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm > 0.0 {
        let rel = sys.residual_norm(&x) / b_norm;
        if rel > config.tolerance {
            return Err(Error::Nonconvergence {
                iterations: 0,
                residual: rel,
            });
        }
    }
    let grid = sys.grid;
    let values = Array2::from_shape_vec((grid.ny, grid.nx), x).unwrap();
    Field::from_values(grid, values)
}

/// Darcy fluxes through vertical faces, `fx[j][i]` being the +x flux per
/// unit face length through the face between cells (i-1, j) and (i, j);
/// `i` runs over 0..=nx so both boundary faces are included.
pub fn face_flux_x(k: &Field, h: &Field, bc: &BoundarySpec) -> Array2<f64> {
    let grid = k.grid();
    let (nx, ny, dx) = (grid.nx, grid.ny, grid.dx());
    let mut fx = Array2::zeros((ny, nx + 1));
    for j in 0..ny {
        for i in 1..nx {
            let kf = harmonic(k.at(i - 1, j), k.at(i, j));
            fx[[j, i]] = kf * (h.at(i - 1, j) - h.at(i, j)) / dx;
        }
        fx[[j, 0]] = match bc.left {
            SideBc::Dirichlet(h_d) => 2.0 * k.at(0, j) * (h_d - h.at(0, j)) / dx,
            SideBc::Neumann(g) => -g,
        };
        fx[[j, nx]] = match bc.right {
            SideBc::Dirichlet(h_d) => 2.0 * k.at(nx - 1, j) * (h.at(nx - 1, j) - h_d) / dx,
            SideBc::Neumann(g) => g,
        };
    }
    fx
}

/// Darcy fluxes through horizontal faces, `fy[j][i]` being the +y flux per
/// unit face length through the face between cells (i, j-1) and (i, j).
pub fn face_flux_y(k: &Field, h: &Field, bc: &BoundarySpec) -> Array2<f64> {
    let grid = k.grid();
    let (nx, ny, dy) = (grid.nx, grid.ny, grid.dy());
    let mut fy = Array2::zeros((ny + 1, nx));
    for i in 0..nx {
        for j in 1..ny {
            let kf = harmonic(k.at(i, j - 1), k.at(i, j));
            fy[[j, i]] = kf * (h.at(i, j - 1) - h.at(i, j)) / dy;
        }
        fy[[0, i]] = match bc.bottom {
            SideBc::Dirichlet(h_d) => 2.0 * k.at(i, 0) * (h_d - h.at(i, 0)) / dy,
            SideBc::Neumann(g) => -g,
        };
        fy[[ny, i]] = match bc.top {
            SideBc::Dirichlet(h_d) => 2.0 * k.at(i, ny - 1) * (h.at(i, ny - 1) - h_d) / dy,
            SideBc::Neumann(g) => g,
        };
    }
    fy
}

/// Cell-centered Darcy flux components.
///
/// Each component averages the two bounding face fluxes, which reduces to
/// -K times the central difference of h wherever K is locally uniform and
/// stays exact across conductivity jumps. On Neumann sides the normal
/// component of the boundary row/column takes the prescribed value exactly.
pub fn compute_flux(k: &Field, h: &Field, bc: &BoundarySpec) -> Result<(Field, Field)> {
    k.same_grid(h)?;
    let grid = k.grid();
    let (nx, ny) = (grid.nx, grid.ny);
    let fx = face_flux_x(k, h, bc);
    let fy = face_flux_y(k, h, bc);
    let mut f1 = Array2::zeros((ny, nx));
    let mut f2 = Array2::zeros((ny, nx));
    for j in 0..ny {
        for i in 0..nx {
            f1[[j, i]] = 0.5 * (fx[[j, i]] + fx[[j, i + 1]]);
            f2[[j, i]] = 0.5 * (fy[[j, i]] + fy[[j + 1, i]]);
        }
    }
    if let Some(v) = bc.f2_target(Side::Top) {
        for i in 0..nx {
            f2[[ny - 1, i]] = v;
        }
    }
    if let Some(v) = bc.f2_target(Side::Bottom) {
        for i in 0..nx {
            f2[[0, i]] = v;
        }
    }
    if let Some(v) = bc.f1_target(Side::Left) {
        for j in 0..ny {
            f1[[j, 0]] = v;
        }
    }
    if let Some(v) = bc.f1_target(Side::Right) {
        for j in 0..ny {
            f1[[j, nx - 1]] = v;
        }
    }
    Ok((Field::from_values(grid, f1)?, Field::from_values(grid, f2)?))
}

/// Net volumetric face outflux minus the source of every cell; a solved
/// head makes this vanish to solver precision (discrete conservation).
pub fn flux_divergence(k: &Field, h: &Field, bc: &BoundarySpec, q: &Field) -> Array2<f64> {
    let grid = k.grid();
    let (nx, ny, dx, dy) = (grid.nx, grid.ny, grid.dx(), grid.dy());
    let fx = face_flux_x(k, h, bc);
    let fy = face_flux_y(k, h, bc);
    let mut div = Array2::zeros((ny, nx));
    for j in 0..ny {
        for i in 0..nx {
            div[[j, i]] = (fx[[j, i + 1]] - fx[[j, i]]) * dy
                + (fy[[j + 1, i]] - fy[[j, i]]) * dx
                - q.at(i, j) * dx * dy;
        }
    }
    div
}

/// One paired sample `[4, ny, nx]` (lnK, h, F1, F2) for coefficients `z`.
pub fn generate_pair(
    basis: &KlBasis,
    cov: &CovarianceSpec,
    bc: &BoundarySpec,
    q: &Field,
    z: &[f64],
    config: &SolverConfig,
) -> Result<Array3<f64>> {
    let grid = basis.grid();
    let lnk = basis.sample_lnk(cov, z)?;
    let k = lnk.map(f64::exp);
    let sys = assemble(&k, bc, q)?;
    let h = solve(&sys, config)?;
    let (f1, f2) = compute_flux(&k, &h, bc)?;
    let mut out = Array3::zeros((4, grid.ny, grid.nx));
    out.index_axis_mut(ndarray::Axis(0), CH_LNK)
        .assign(lnk.values());
    out.index_axis_mut(ndarray::Axis(0), CH_H).assign(h.values());
    out.index_axis_mut(ndarray::Axis(0), CH_F1)
        .assign(f1.values());
    out.index_axis_mut(ndarray::Axis(0), CH_F2)
        .assign(f2.values());
    Ok(out)
}

/// Deterministic paired dataset: sample `index` uses an RNG seeded with
/// `seed + index`, so generation parallelizes without changing results.
pub fn generate_dataset(
    basis: &KlBasis,
    cov: &CovarianceSpec,
    bc: &BoundarySpec,
    q: &Field,
    n: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<FieldStack> {
    let samples: Vec<Result<Array3<f64>>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(idx as u64));
            let z = crate::kl::draw_z(&mut rng, basis.truncation());
            generate_pair(basis, cov, bc, q, &z, config)
        })
        .collect();
    let mut collected = Vec::with_capacity(n);
    for (idx, s) in samples.into_iter().enumerate() {
        collected
            .push(s.map_err(|e| Error::InvalidParameter(format!("sample {idx} failed: {e}")))?);
    }
    FieldStack::from_samples(basis.grid(), &collected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::kl::{build_covariance, eigendecompose, CovarianceKind};
    use approx::assert_abs_diff_eq;

    fn unit_bc() -> BoundarySpec {
        BoundarySpec::darcy(1.0, 0.0, 0.0, 0.0)
    }

    #[test]
    fn interior_stencil_is_scaled_laplacian() {
        let grid = make_grid(3, 3, 3.0, 3.0).unwrap();
        let k = Field::constant(grid, 1.0);
        let q = Field::constant(grid, 0.0);
        let sys = assemble(&k, &unit_bc(), &q).unwrap();
        // center cell: four unit transmissibilities (dx = dy = 1)
        let p = grid.idx(1, 1);
        assert_abs_diff_eq!(sys.diag[p], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sys.east[p], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sys.east[p - 1], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sys.north[p], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sys.north[p - 3], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn interface_transmissibility_is_harmonic() {
        assert_abs_diff_eq!(harmonic(1.0, 3.0), 1.5, epsilon = 1e-15);
        let grid = make_grid(4, 3, 4.0, 3.0).unwrap();
        let k = Field::from_fn(grid, |x, _| if x < 1.0 { 1.0 } else { 3.0 });
        let q = Field::constant(grid, 0.0);
        let sys = assemble(&k, &unit_bc(), &q).unwrap();
        let p = grid.idx(0, 1);
        assert_abs_diff_eq!(sys.east[p], -1.5, epsilon = 1e-14);
    }

    #[test]
    fn all_neumann_is_singular_at_solve_time() {
        let grid = make_grid(4, 4, 1.0, 1.0).unwrap();
        let k = Field::constant(grid, 1.0);
        let q = Field::constant(grid, 0.0);
        let sys = assemble(&k, &BoundarySpec::all_neumann(0.0), &q).unwrap();
        assert!(matches!(
            solve(&sys, &SolverConfig::default()),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn rejects_nonpositive_conductivity_and_grid_mismatch() {
        let grid = make_grid(4, 4, 1.0, 1.0).unwrap();
        let q = Field::constant(grid, 0.0);
        let k = Field::constant(grid, 0.0);
        assert!(matches!(
            assemble(&k, &unit_bc(), &q),
            Err(Error::NonpositiveConductivity)
        ));
        let other = make_grid(5, 4, 1.0, 1.0).unwrap();
        let k = Field::constant(other, 1.0);
        assert!(matches!(
            assemble(&k, &unit_bc(), &q),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn homogeneous_head_is_linear_exactly() {
        for method in [SolveMethod::Direct, SolveMethod::ConjugateGradient] {
            let grid = make_grid(64, 64, 2.0, 2.0).unwrap();
            let k = Field::constant(grid, 1.0);
            let q = Field::constant(grid, 0.0);
            let sys = assemble(&k, &unit_bc(), &q).unwrap();
            let cfg = SolverConfig {
                method,
                tolerance: 1e-12,
                max_iterations: 20_000,
            };
            let h = solve(&sys, &cfg).unwrap();
            let tol = match method {
                SolveMethod::Direct => 1e-10,
                SolveMethod::ConjugateGradient => 1e-7,
            };
            for j in 0..64 {
                for i in 0..64 {
                    let (x, _) = grid.cell_center(i, j);
                    assert!(
                        (h.at(i, j) - (1.0 - x / 2.0)).abs() <= tol,
                        "method {method:?} cell ({i},{j})"
                    );
                }
            }
            let (f1, f2) = compute_flux(&k, &h, &unit_bc()).unwrap();
            for j in 0..64 {
                for i in 0..64 {
                    assert!((f1.at(i, j) - 0.5).abs() <= 10.0 * tol);
                    assert!(f2.at(i, j).abs() <= 10.0 * tol);
                }
            }
        }
    }

    #[test]
    fn two_strip_series_resistance_oracle() {
        let grid = make_grid(64, 64, 2.0, 2.0).unwrap();
        let k = Field::from_fn(grid, |x, _| if x < 1.0 { 1.0 } else { 4.0 });
        let q = Field::constant(grid, 0.0);
        let sys = assemble(&k, &unit_bc(), &q).unwrap();
        let h = solve(&sys, &SolverConfig::default()).unwrap();
        // exact: uniform flux 0.8, interface head 0.2
        let (f1, f2) = compute_flux(&k, &h, &unit_bc()).unwrap();
        for j in 0..64 {
            for i in 0..64 {
                assert!(
                    (f1.at(i, j) - 0.8).abs() <= 1e-8,
                    "F1 at ({i},{j}) = {}",
                    f1.at(i, j)
                );
                assert!(f2.at(i, j).abs() <= 1e-8);
            }
        }
        // face head from transmissibility-weighted interface average
        let (hl, hr) = (h.at(31, 10), h.at(32, 10));
        let (tl, tr) = (2.0 * 1.0, 2.0 * 4.0);
        let h_face = (tl * hl + tr * hr) / (tl + tr);
        assert!((h_face - 0.2).abs() <= 1e-8);
    }

    #[test]
    fn constant_head_gives_zero_flux_except_prescribed() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let k = Field::constant(grid, 2.0);
        let h = Field::constant(grid, 0.7);
        let bc = BoundarySpec::darcy(0.7, 0.7, 0.25, 0.0);
        let (f1, f2) = compute_flux(&k, &h, &bc).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                assert_abs_diff_eq!(f1.at(i, j), 0.0, epsilon = 1e-14);
                let expect = if j == 7 { 0.25 } else { 0.0 };
                assert_abs_diff_eq!(f2.at(i, j), expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn random_lognormal_fields_conserve_mass() {
        let grid = make_grid(16, 16, 2.0, 2.0).unwrap();
        let cov = CovarianceSpec::new(0.0, 1.0, 0.5, 0.5, CovarianceKind::Exponential).unwrap();
        let c = build_covariance(grid, &cov).unwrap();
        let basis = eigendecompose(grid, &c, 64).unwrap();
        let q = Field::constant(grid, 0.0);
        let bc = unit_bc();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..10 {
            let z = crate::kl::draw_z(&mut rng, 64);
            let lnk = basis.sample_lnk(&cov, &z).unwrap();
            let k = lnk.map(f64::exp);
            let sys = assemble(&k, &bc, &q).unwrap();
            let h = solve(&sys, &SolverConfig::default()).unwrap();
            let div = flux_divergence(&k, &h, &bc, &q);
            for v in div.iter() {
                assert!(v.abs() <= 1e-8, "divergence {v}");
            }
            // maximum principle for q = 0
            for v in h.values().iter() {
                assert!(*v >= -1e-9 && *v <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn mirroring_k_mirrors_h_and_negates_f2() {
        let grid = make_grid(12, 12, 2.0, 2.0).unwrap();
        let cov = CovarianceSpec::new(0.0, 1.0, 0.5, 0.5, CovarianceKind::Exponential).unwrap();
        let c = build_covariance(grid, &cov).unwrap();
        let basis = eigendecompose(grid, &c, 40).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = crate::kl::draw_z(&mut rng, 40);
        let lnk = basis.sample_lnk(&cov, &z).unwrap();
        let k = lnk.map(f64::exp);
        let mirrored =
            Field::from_values(grid, Array2::from_shape_fn((12, 12), |(j, i)| k.at(i, 11 - j)))
                .unwrap();
        let q = Field::constant(grid, 0.0);
        let bc = unit_bc();
        let h1 = solve(&assemble(&k, &bc, &q).unwrap(), &SolverConfig::default()).unwrap();
        let h2 = solve(
            &assemble(&mirrored, &bc, &q).unwrap(),
            &SolverConfig::default(),
        )
        .unwrap();
        let (f1a, f2a) = compute_flux(&k, &h1, &bc).unwrap();
        let (f1b, f2b) = compute_flux(&mirrored, &h2, &bc).unwrap();
        for j in 0..12 {
            for i in 0..12 {
                assert!((h1.at(i, j) - h2.at(i, 11 - j)).abs() <= 1e-12);
                assert!((f1a.at(i, j) - f1b.at(i, 11 - j)).abs() <= 1e-12);
                assert!((f2a.at(i, j) + f2b.at(i, 11 - j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn generate_pair_is_deterministic_and_composite() {
        let grid = make_grid(8, 8, 2.0, 2.0).unwrap();
        let cov = CovarianceSpec::new(0.0, 1.0, 0.5, 0.5, CovarianceKind::Exponential).unwrap();
        let c = build_covariance(grid, &cov).unwrap();
        let basis = eigendecompose(grid, &c, 16).unwrap();
        let q = Field::constant(grid, 0.0);
        let bc = unit_bc();
        let cfg = SolverConfig::default();

        // z = 0: homogeneous composite
        let z = vec![0.0; 16];
        let s = generate_pair(&basis, &cov, &bc, &q, &z, &cfg).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                assert_abs_diff_eq!(s[[CH_LNK, j, i]], 0.0, epsilon = 1e-12);
                let (x, _) = grid.cell_center(i, j);
                assert_abs_diff_eq!(s[[CH_H, j, i]], 1.0 - x / 2.0, epsilon = 1e-9);
                assert_abs_diff_eq!(s[[CH_F1, j, i]], 0.5, epsilon = 1e-9);
                assert_abs_diff_eq!(s[[CH_F2, j, i]], 0.0, epsilon = 1e-9);
            }
        }

        let stack1 = generate_dataset(&basis, &cov, &bc, &q, 6, 123, &cfg).unwrap();
        let stack2 = generate_dataset(&basis, &cov, &bc, &q, 6, 123, &cfg).unwrap();
        assert_eq!(stack1.data(), stack2.data());
    }
}
