use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid};

/// A `k`-th moment map `M^k(x_1, …, x_k)` sampled on an `n·k`-dimensional grid.
///
/// Axes are slot-major: the first `n` axes belong to `x_1`, the next `n` to
/// `x_2` and so on. `epsilon` is the mollification width the map carries
/// (zero for exact or empirical moments), `support_radius` the per-slot ball
/// outside which the map vanishes.
#[derive(Clone, Debug)]
pub struct MomentGrid {
    pub grid: Grid,
    pub order: usize,
    pub slot_dim: usize,
    pub epsilon: f64,
    pub support_radius: f64,
}

impl MomentGrid {
    pub fn new(grid: Grid, order: usize, slot_dim: usize, epsilon: f64, support_radius: f64) -> Result<Self> {
        if order == 0 || slot_dim == 0 || grid.dim() != order * slot_dim {
            return Err(Error::GridMismatch(format!(
                "grid of dimension {} cannot hold order {order} moments in R^{slot_dim}",
                grid.dim()
            )));
        }
        grid.check_finite()?;
        Ok(MomentGrid { grid, order, slot_dim, epsilon, support_radius })
    }

    pub fn zeros(slot: Geometry, order: usize, support_radius: f64) -> Result<Self> {
        let g = slot.power(order)?;
        MomentGrid::new(Grid::zeros(g), order, slot.dim, 0.0, support_radius)
    }

    /// Geometry of a single slot.
    pub fn slot_geometry(&self) -> Geometry {
        Geometry { dim: self.slot_dim, extent: self.grid.extent(), points: self.grid.points() }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(x)
    }
}
