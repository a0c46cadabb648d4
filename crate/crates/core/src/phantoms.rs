//! Deterministic test potentials.

use crate::error::Result;
use crate::field_models::{PotentialGrid, Taper};
use crate::grid::{Geometry, Grid};
use crate::numeric::bump;

/// Anti-aliased indicator of the centred ball of radius `radius`.
///
/// Nodes within a few cells of the sphere hold the indicator averaged
/// against a Gaussian of standard deviation one cell, estimated on a
/// `supersample^dim` sub-lattice. Plain point sampling (or box averaging)
/// leaves aliasing that dominates line-integral errors at this resolution.
pub fn disk_indicator(geometry: Geometry, radius: f64, supersample: usize) -> Result<PotentialGrid> {
    let h = geometry.spacing();
    let n = geometry.dim;
    let sigma = h;
    let reach = 4.5 * sigma;
    let s = supersample.max(1);
    let half = (reach / h).ceil() as i64 * s as i64;
    let side = (2 * half + 1) as usize;
    let step = h / s as f64;
    // separable Gaussian weights over the sub-lattice window
    let w1: Vec<f64> = (0..side).map(|i| (-0.5 * ((i as i64 - half) as f64 * step / sigma).powi(2)).exp()).collect();
    let total = side.pow(n as u32);
    let r2 = radius * radius;
    let grid = Grid::from_fn(geometry, |x| {
        let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r < radius - reach {
            return 1.0;
        }
        if r > radius + reach {
            return 0.0;
        }
        let (mut num, mut den) = (0.0, 0.0);
        let mut idx = vec![0usize; n];
        for flat in 0..total {
            let mut f = flat;
            for a in (0..n).rev() {
                idx[a] = f % side;
                f /= side;
            }
            let mut w = 1.0;
            let mut d2 = 0.0;
            for a in 0..n {
                w *= w1[idx[a]];
                d2 += (x[a] + (idx[a] as i64 - half) as f64 * step).powi(2);
            }
            den += w;
            if d2 <= r2 {
                num += w;
            }
        }
        num / den
    });
    PotentialGrid::new(grid, radius + reach)
}

/// Gaussian bump `amp·exp(-|x-c|²/(2w²))` times a radial taper that brings it
/// to zero by `0.85·extent`.
pub fn tapered_gaussian(geometry: Geometry, center: &[f64], width: f64, amp: f64) -> Result<PotentialGrid> {
    let e = geometry.extent;
    let taper = Taper { inner: 0.5 * e, width: 0.35 * e };
    PotentialGrid::from_fn(geometry, taper.outer(), |x| {
        let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
        amp * (-0.5 * d2 / (width * width)).exp() * taper.eval(x)
    })
}

/// Polynomial bump `amp·(1 - |x-c|²/r²)⁴₊`.
pub fn smooth_bump(geometry: Geometry, center: &[f64], radius: f64, amp: f64) -> Result<PotentialGrid> {
    let reach = center.iter().map(|c| c * c).sum::<f64>().sqrt() + radius;
    PotentialGrid::from_fn(geometry, reach, |x| {
        let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
        amp * bump(d2 / (radius * radius))
    })
}

/// 1D box `amp·1_{|x| < half_width}`. Nodes on the edges carry half the
/// height, so the piecewise-linear interpolant has mass exactly `2·amp·half_width`
/// when the edges fall on nodes.
pub fn box_1d(geometry: Geometry, half_width: f64, amp: f64) -> Result<PotentialGrid> {
    if geometry.dim != 1 {
        return Err(crate::error::Error::param("dim", "box potential is one-dimensional"));
    }
    let h = geometry.spacing();
    let grid = Grid::from_fn(geometry, |x| {
        let a = x[0].abs();
        if (a - half_width).abs() < 0.25 * h {
            0.5 * amp
        } else if a < half_width {
            amp
        } else {
            0.0
        }
    });
    PotentialGrid::new(grid, half_width + h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_mass_is_accurate() {
        let p = disk_indicator(Geometry::new(2, 1.25, 128).unwrap(), 1.0, 4).unwrap();
        let mass = p.grid().integral();
        assert!((mass - std::f64::consts::PI).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn bump_is_compact() {
        let g = Geometry::new(2, 1.0, 41).unwrap();
        let p = smooth_bump(g, &[0.2, 0.0], 0.5, 2.0).unwrap();
        assert_eq!(p.value_at(&[0.2, 0.0]), 2.0);
        assert_eq!(p.value_at(&[-0.35, 0.0]), 0.0);
    }
}
