//! Uniform axis-aligned grids centred on the origin.
//!
//! Every field in the crate (potentials, moment maps, covariance tables) is
//! carried by a [`Grid`]: `points` nodes per axis on `[-extent, extent]`,
//! values stored row-major with the last axis varying fastest.

use crate::error::{Error, Result};

/// Shape of a grid without its values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub dim: usize,
    pub extent: f64,
    pub points: usize,
}

impl Geometry {
    pub fn new(dim: usize, extent: f64, points: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::param("extent", format!("must be positive and finite, got {extent}")));
        }
        if points < 2 {
            return Err(Error::param("points_per_axis", format!("need at least 2, got {points}")));
        }
        if (points as f64).powi(dim as i32) > 1.0e9 {
            return Err(Error::param("points_per_axis", "grid too large"));
        }
        Ok(Geometry { dim, extent, points })
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.points - 1) as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.extent + i as f64 * self.spacing()
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume element `h^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Multi-index of the flat index `flat`.
    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.dim).rev() {
            out[a] = flat % self.points;
            flat /= self.points;
        }
    }

    pub fn node(&self, mut flat: usize, out: &mut [f64]) {
        let h = self.spacing();
        for a in (0..self.dim).rev() {
            out[a] = -self.extent + (flat % self.points) as f64 * h;
            flat /= self.points;
        }
    }

    /// The `k`-fold product geometry (same axes, `k * dim` dimensions).
    pub fn power(&self, k: usize) -> Result<Geometry> {
        Geometry::new(self.dim * k, self.extent, self.points)
    }

    pub fn approx_eq(&self, other: &Geometry) -> bool {
        self.dim == other.dim
            && self.points == other.points
            && (self.extent - other.extent).abs() <= 1e-12 * self.extent.max(other.extent)
    }
}

/// Per-axis linear interpolation stencil: lower index and weight of the upper node.
#[inline]
pub(crate) fn axis_stencil(x: f64, extent: f64, inv_h: f64, points: usize) -> Option<(usize, f64)> {
    let u = (x + extent) * inv_h;
    let last = (points - 1) as f64;
    if !(u >= 0.0 && u <= last) {
        return None;
    }
    let i0 = (u.floor() as usize).min(points - 2);
    Some((i0, u - i0 as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    geometry: Geometry,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(geometry: Geometry) -> Self {
        Grid { values: vec![0.0; geometry.len()], geometry }
    }

    pub fn from_values(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(Grid { geometry, values })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; geometry.dim];
        let values = (0..geometry.len())
            .map(|i| {
                geometry.node(i, &mut x);
                f(&x)
            })
            .collect();
        Grid { geometry, values }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim
    }

    pub fn extent(&self) -> f64 {
        self.geometry.extent
    }

    pub fn points(&self) -> usize {
        self.geometry.points
    }

    pub fn spacing(&self) -> f64 {
        self.geometry.spacing()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, factor: f64) -> Grid {
        Grid {
            geometry: self.geometry,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Discrete integral `h^dim * sum(values)`.
    pub fn integral(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.values) * self.geometry.cell_volume()
    }

    /// Discrete L2 inner product.
    pub fn dot(&self, other: &Grid) -> f64 {
        let prods: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        crate::numeric::pairwise_sum(&prods) * self.geometry.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation; zero outside the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.geometry.dim);
        let g = &self.geometry;
        let inv_h = 1.0 / g.spacing();
        if g.dim == 2 {
            return self.interpolate2(x[0], x[1], inv_h);
        }
        let mut base = 0usize;
        let mut fracs = [0.0f64; 16];
        let mut strides = [0usize; 16];
        assert!(g.dim <= 16, "interpolation supports at most 16 dimensions");
        let mut stride = 1usize;
        for a in (0..g.dim).rev() {
            match axis_stencil(x[a], g.extent, inv_h, g.points) {
                Some((i0, f)) => {
                    base += i0 * stride;
                    fracs[a] = f;
                    strides[a] = stride;
                }
                None => return 0.0,
            }
            stride *= g.points;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dim) {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..g.dim {
                if corner >> a & 1 == 1 {
                    w *= fracs[a];
                    idx += strides[a];
                } else {
                    w *= 1.0 - fracs[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    #[inline]
    fn interpolate2(&self, x: f64, y: f64, inv_h: f64) -> f64 {
        let g = &self.geometry;
        let (Some((i, fx)), Some((j, fy))) = (
            axis_stencil(x, g.extent, inv_h, g.points),
            axis_stencil(y, g.extent, inv_h, g.points),
        ) else {
            return 0.0;
        };
        let m = g.points;
        let v = &self.values;
        let r0 = i * m + j;
        let r1 = r0 + m;
        (1.0 - fx) * ((1.0 - fy) * v[r0] + fy * v[r0 + 1]) + fx * ((1.0 - fy) * v[r1] + fy * v[r1 + 1])
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("grid values"))
        }
    }
}
