//! Rectangular cell-centered grids, scalar fields and multi-channel sample
//! stacks shared by the sampler, solver and networks.
//!
//! Storage is row-major with the y index outermost, so a field's memory
//! layout is identical to a single image channel. All types are immutable
//! after construction and safe to share across threads.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel order of a [`FieldStack`] sample: log-conductivity, head, and the
/// two Darcy flux components.
pub const CH_LNK: usize = 0;
pub const CH_H: usize = 1;
pub const CH_F1: usize = 2;
pub const CH_F2: usize = 3;
pub const N_CHANNELS: usize = 4;

/// Cell-centered discretization of a rectangular domain.
///
/// Cell (i, j) has its center at ((i + 0.5)·dx, (j + 0.5)·dy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::GridTooSmall { nx, ny });
        }
        if !(lx > 0.0) || !(ly > 0.0) {
            return Err(Error::InvalidDomain { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.dx(),
            (j as f64 + 0.5) * self.dy(),
        )
    }

    /// Row-major linear index of cell (i, j); bijective over the grid.
    pub fn flatten_index(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.nx || j >= self.ny {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                nx: self.nx,
                ny: self.ny,
            });
        }
        Ok(self.idx(i, j))
    }

    /// Unchecked linear index, for hot loops.
    #[inline]
    pub(crate) fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }
}

/// Alias for the spec-friendly free-function spelling.
pub fn make_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<GridSpec> {
    GridSpec::new(nx, ny, lx, ly)
}

/// A real scalar per grid cell, stored as `[ny, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Array2<f64>,
}

impl Field {
    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: Array2::from_elem((grid.ny, grid.nx), value),
        }
    }

    pub fn from_values(grid: GridSpec, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.ny, grid.nx) {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, {}]", grid.ny, grid.nx),
                got: format!("[{}, {}]", values.dim().0, values.dim().1),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Self { grid, values })
    }

    /// Build a field by evaluating `f` at every cell center.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn((grid.ny, grid.nx), |(j, i)| {
            let (x, y) = grid.cell_center(i, j);
            f(x, y)
        });
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[[j, i]]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.mapv(&f),
        }
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{}x{} vs {}x{}",
                self.grid.nx, self.grid.ny, other.grid.nx, other.grid.ny
            )));
        }
        Ok(())
    }
}

/// A batch of 4-channel samples `[n, 4, ny, nx]` in the fixed channel order
/// lnK, h, F1, F2.
#[derive(Debug, Clone)]
pub struct FieldStack {
    grid: GridSpec,
    data: Array4<f64>,
}

impl FieldStack {
    pub fn empty(grid: GridSpec) -> Self {
        Self {
            grid,
            data: Array4::zeros((0, N_CHANNELS, grid.ny, grid.nx)),
        }
    }

    pub fn from_data(grid: GridSpec, data: Array4<f64>) -> Result<Self> {
        let (_, c, ny, nx) = data.dim();
        if c != N_CHANNELS || ny != grid.ny || nx != grid.nx {
            return Err(Error::ShapeMismatch {
                expected: format!("[*, {}, {}, {}]", N_CHANNELS, grid.ny, grid.nx),
                got: format!("{:?}", data.dim()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field stack".into()));
        }
        Ok(Self { grid, data })
    }

    /// Collect per-sample `[4, ny, nx]` arrays into a stack.
    pub fn from_samples(grid: GridSpec, samples: &[Array3<f64>]) -> Result<Self> {
        let mut data = Array4::zeros((samples.len(), N_CHANNELS, grid.ny, grid.nx));
        for (s, sample) in samples.iter().enumerate() {
            if sample.dim() != (N_CHANNELS, grid.ny, grid.nx) {
                return Err(Error::ShapeMismatch {
                    expected: format!("[{}, {}, {}]", N_CHANNELS, grid.ny, grid.nx),
                    got: format!("{:?}", sample.dim()),
                });
            }
            data.index_axis_mut(ndarray::Axis(0), s).assign(sample);
        }
        Self::from_data(grid, data)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn sample(&self, s: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), s)
    }

    pub fn channel(&self, s: usize, c: usize) -> ArrayView2<'_, f64> {
        self.data
            .index_axis(ndarray::Axis(0), s)
            .index_axis_move(ndarray::Axis(0), c)
    }

    /// Channel of one sample as an owned [`Field`].
    pub fn channel_field(&self, s: usize, c: usize) -> Field {
        Field {
            grid: self.grid,
            values: self.channel(s, c).to_owned(),
        }
    }
}

/// One side of the rectangular boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Boundary condition on one side: a prescribed head or a prescribed
/// outward normal Darcy flux (per unit face length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SideBc {
    Dirichlet(f64),
    Neumann(f64),
}

/// Boundary conditions for the four sides of the domain.
///
/// The default head-flow configuration keeps left/right Dirichlet and
/// top/bottom Neumann; the general form exists so degenerate setups
/// (e.g. all-Neumann) can be expressed and rejected by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub left: SideBc,
    pub right: SideBc,
    pub bottom: SideBc,
    pub top: SideBc,
}

impl BoundarySpec {
    /// Left/right Dirichlet heads, top/bottom Neumann outward fluxes.
    pub fn darcy(left_h: f64, right_h: f64, top_flux: f64, bottom_flux: f64) -> Self {
        Self {
            left: SideBc::Dirichlet(left_h),
            right: SideBc::Dirichlet(right_h),
            bottom: SideBc::Neumann(bottom_flux),
            top: SideBc::Neumann(top_flux),
        }
    }

    pub fn all_neumann(flux: f64) -> Self {
        Self {
            left: SideBc::Neumann(flux),
            right: SideBc::Neumann(flux),
            bottom: SideBc::Neumann(flux),
            top: SideBc::Neumann(flux),
        }
    }

    pub fn side(&self, side: Side) -> SideBc {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
            Side::Bottom => self.bottom,
            Side::Top => self.top,
        }
    }

    pub fn has_dirichlet(&self) -> bool {
        [self.left, self.right, self.bottom, self.top]
            .iter()
            .any(|bc| matches!(bc, SideBc::Dirichlet(_)))
    }

    pub fn dirichlet_head(&self, side: Side) -> Option<f64> {
        match self.side(side) {
            SideBc::Dirichlet(h) => Some(h),
            SideBc::Neumann(_) => None,
        }
    }

    /// Prescribed value of the F1 channel on a Neumann left/right side.
    ///
    /// The stored Neumann value is the *outward* normal flux g, so on the
    /// left side (outward normal -x) the channel value is -g.
    pub fn f1_target(&self, side: Side) -> Option<f64> {
        match (side, self.side(side)) {
            (Side::Left, SideBc::Neumann(g)) => Some(-g),
            (Side::Right, SideBc::Neumann(g)) => Some(g),
            _ => None,
        }
    }

    /// Prescribed value of the F2 channel on a Neumann bottom/top side.
    pub fn f2_target(&self, side: Side) -> Option<f64> {
        match (side, self.side(side)) {
            (Side::Bottom, SideBc::Neumann(g)) => Some(-g),
            (Side::Top, SideBc::Neumann(g)) => Some(g),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_grid_derives_spacing() {
        let g = make_grid(64, 64, 2.0, 2.0).unwrap();
        assert_eq!(g.dx(), 0.03125);
        assert_eq!(g.dy(), 0.03125);

        let g = make_grid(3, 3, 1.0, 1.0).unwrap();
        assert!((g.dx() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn make_grid_rejects_small_dimensions() {
        assert!(matches!(
            make_grid(2, 64, 2.0, 2.0),
            Err(Error::GridTooSmall { .. })
        ));
        assert!(matches!(
            make_grid(64, 2, 2.0, 2.0),
            Err(Error::GridTooSmall { .. })
        ));
        assert!(matches!(
            make_grid(4, 4, 0.0, 1.0),
            Err(Error::InvalidDomain { .. })
        ));
    }

    #[test]
    fn flatten_index_examples() {
        let g = make_grid(64, 64, 2.0, 2.0).unwrap();
        assert_eq!(g.flatten_index(0, 0).unwrap(), 0);
        assert_eq!(g.flatten_index(63, 63).unwrap(), 4095);
        assert_eq!(g.flatten_index(5, 2).unwrap(), 133);
        assert!(g.flatten_index(64, 0).is_err());
        assert!(g.flatten_index(0, 64).is_err());
    }

    #[test]
    fn field_shape_and_finiteness_checked() {
        let g = make_grid(4, 3, 1.0, 1.0).unwrap();
        assert!(Field::from_values(g, Array2::zeros((3, 4))).is_ok());
        assert!(Field::from_values(g, Array2::zeros((4, 3))).is_err());
        let mut bad = Array2::zeros((3, 4));
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(
            Field::from_values(g, bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn boundary_targets_follow_outward_normals() {
        let bc = BoundarySpec::darcy(1.0, 0.0, 0.25, -0.5);
        assert_eq!(bc.dirichlet_head(Side::Left), Some(1.0));
        assert_eq!(bc.dirichlet_head(Side::Top), None);
        assert_eq!(bc.f2_target(Side::Top), Some(0.25));
        assert_eq!(bc.f2_target(Side::Bottom), Some(0.5));
        assert_eq!(bc.f1_target(Side::Left), None);
        assert!(bc.has_dirichlet());
        assert!(!BoundarySpec::all_neumann(0.0).has_dirichlet());
    }
}
