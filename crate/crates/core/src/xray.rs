//! Line integrals of gridded potentials.
//!
//! All line integrals share one discretisation: the line `y + tθ` (with `y`
//! the foot point orthogonal to `θ`) is cut to the chord of a ball, the chord
//! is split into equal cells no longer than `h/2`, and the multilinear
//! interpolant is sampled at the cell midpoints. Because the chord depends on
//! `y` only, any point on the same line gives the same nodes.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_models::PotentialGrid;
use crate::grid::{Geometry, Grid};

/// Unit vector in `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Accepts `v` only if it is already a unit vector (to 1e-12).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidDirection("components must be finite".into()));
        }
        let norm = dot(&v, &v).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDirection(format!("norm {norm} is not 1")));
        }
        Ok(Direction(v))
    }

    /// Normalises `v`; fails on the zero vector.
    pub fn normalized(v: &[f64]) -> Result<Self> {
        let norm = dot(v, v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidDirection("cannot normalise a zero or non-finite vector".into()));
        }
        Ok(Direction(v.iter().map(|c| c / norm).collect()))
    }

    /// Unit vector at angle `phi` in the plane.
    pub fn planar(phi: f64) -> Self {
        Direction(vec![phi.cos(), phi.sin()])
    }

    pub fn axis(dim: usize, a: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[a] = 1.0;
        Direction(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn negated(&self) -> Direction {
        Direction(self.0.iter().map(|c| -c).collect())
    }

    /// Angle between two directions, accurate for nearly parallel vectors.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let diff: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        2.0 * (0.5 * diff).min(1.0).asin()
    }
}

/// A point of the tangent bundle: direction plus an offset orthogonal to it.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPoint {
    pub direction: Direction,
    pub offset: Vec<f64>,
}

impl TangentPoint {
    pub fn new(direction: Direction, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != direction.dim() {
            return Err(Error::InvalidDirection("offset and direction differ in dimension".into()));
        }
        let along = dot(&offset, direction.as_slice());
        if along.abs() > 1e-10 * dot(&offset, &offset).sqrt().max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidDirection(format!("offset is not orthogonal to the direction ({along:e})")));
        }
        Ok(TangentPoint { direction, offset })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Foot point `y = x - (x·θ)θ` and the parameter `τ = x·θ`, so `x = y + τθ`.
#[inline]
pub(crate) fn foot(x: &[f64], theta: &[f64], y: &mut [f64]) -> f64 {
    let tau = dot(x, theta);
    for ((yi, xi), ti) in y.iter_mut().zip(x).zip(theta) {
        *yi = xi - tau * ti;
    }
    tau
}

/// Midpoint rule over `[-c, min(c, upto)]` on the lattice `t ∈ step·Z`,
/// clipping the end cells. The lattice is anchored at the foot point, so
/// neighbouring parallel lines share cell phases and the result is smooth in
/// the offset.
#[inline]
pub(crate) fn chord_sum(c: f64, step: f64, upto: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let end = c.min(upto);
    if end <= -c {
        return 0.0;
    }
    let first = (-c / step).floor() as i64;
    let last = (end / step).ceil() as i64;
    let mut acc = 0.0;
    for k in first..last {
        let lo = (k as f64 * step).max(-c);
        let hi = ((k + 1) as f64 * step).min(end);
        if hi > lo {
            acc += f(0.5 * (lo + hi)) * (hi - lo);
        }
    }
    acc
}

/// Midpoints and lengths of the cells used by [`chord_sum`] over the full chord.
pub(crate) fn chord_cells(c: f64, step: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let first = (-c / step).floor() as i64;
    let last = (c / step).ceil() as i64;
    for k in first..last {
        let lo = (k as f64 * step).max(-c);
        let hi = ((k + 1) as f64 * step).min(c);
        if hi > lo {
            out.push((0.5 * (lo + hi), hi - lo));
        }
    }
    out
}

fn check_point(x: &[f64], theta: &Direction, dim: usize) -> Result<()> {
    if theta.dim() != dim || x.len() != dim {
        return Err(Error::GridMismatch(format!("point/direction dimension differs from potential dimension {dim}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("line base point"));
    }
    Ok(())
}

fn line_integral(grid: &Grid, radius: f64, y: &[f64], theta: &[f64], upto: f64) -> f64 {
    let c2 = radius * radius - dot(y, y);
    if c2 <= 0.0 {
        return 0.0;
    }
    let step = 0.5 * grid.spacing();
    let mut z = [0.0f64; 16];
    let n = y.len();
    chord_sum(c2.sqrt(), step, upto, |t| {
        for a in 0..n {
            z[a] = y[a] + t * theta[a];
        }
        grid.interpolate(&z[..n])
    })
}

/// `∫_R V(x + sθ) ds`.
pub fn xray_transform(p: &PotentialGrid, x: &[f64], theta: &Direction) -> Result<f64> {
    check_point(x, theta, p.dim())?;
    let mut y = x.to_vec();
    foot(x, theta.as_slice(), &mut y);
    Ok(line_integral(p.grid(), p.interpolant_radius(), &y, theta.as_slice(), f64::INFINITY))
}

/// `∫_{-∞}^0 V(x + sθ) ds`: the first progressive-expansion coefficient.
pub fn half_line_integral(p: &PotentialGrid, x: &[f64], theta: &Direction) -> Result<f64> {
    check_point(x, theta, p.dim())?;
    let mut y = x.to_vec();
    let tau = foot(x, theta.as_slice(), &mut y);
    Ok(line_integral(p.grid(), p.interpolant_radius(), &y, theta.as_slice(), tau))
}

/// Leading-front jump of the scattered wave: half the line integral through
/// the tangent point.
pub fn jump_amplitude(p: &PotentialGrid, tp: &TangentPoint) -> Result<f64> {
    Ok(0.5 * xray_transform(p, &tp.offset, &tp.direction)?)
}

/// Parallel [`xray_transform`] over many lines.
pub fn xray_batch(p: &PotentialGrid, lines: &[(Vec<f64>, Direction)]) -> Result<Vec<f64>> {
    lines.par_iter().map(|(x, theta)| xray_transform(p, x, theta)).collect()
}

/// Writes `x…, θ…, value` rows.
pub fn write_xray_csv<W: Write>(mut out: W, lines: &[(Vec<f64>, Direction)], values: &[f64]) -> Result<()> {
    let Some((x0, _)) = lines.first() else {
        return Ok(());
    };
    let n = x0.len();
    let mut header: Vec<String> = (0..n).map(|a| format!("x{a}")).collect();
    header.extend((0..n).map(|a| format!("theta{a}")));
    header.push("value".into());
    writeln!(out, "{}", header.join(","))?;
    for ((x, theta), v) in lines.iter().zip(values) {
        let row: Vec<String> =
            x.iter().chain(theta.as_slice()).chain(std::iter::once(v)).map(|c| format!("{c:.17e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Second progressive-expansion coefficient for a fixed direction.
///
/// `a₁` is tabulated on the potential grid; `(Δ + V) a₁` is formed there with
/// central differences and integrated along incoming half-lines. The source is
/// kept in two parts, `Δa₁` and `V a₁`, so the response to rescaling `V` can
/// be checked term by term.
#[derive(Clone, Debug)]
pub struct ProgressiveExpansion {
    theta: Direction,
    a1: Grid,
    laplacian: Grid,
    product: Grid,
}

impl ProgressiveExpansion {
    /// `length_scale` is the smallest feature size of `V`; the grid must
    /// resolve it with at least four points.
    pub fn new(p: &PotentialGrid, theta: &Direction, length_scale: f64) -> Result<Self> {
        let g = *p.grid().geometry();
        let limit = length_scale / 4.0;
        if g.spacing() > limit {
            return Err(Error::ResolutionTooCoarse { spacing: g.spacing(), limit });
        }
        check_point(&vec![0.0; g.dim], theta, g.dim)?;
        let n = g.dim;
        let a1_at = |x: &[f64]| -> f64 {
            let mut y = x.to_vec();
            let tau = foot(x, theta.as_slice(), &mut y);
            line_integral(p.grid(), p.interpolant_radius(), &y, theta.as_slice(), tau)
        };
        let a1_values: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let mut x = vec![0.0; n];
                g.node(i, &mut x);
                a1_at(&x)
            })
            .collect();
        let a1 = Grid::from_values(g, a1_values)?;
        let h = g.spacing();
        let m = g.points;
        let lap: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let mut idx = vec![0usize; n];
                g.unravel(i, &mut idx);
                let mut x = vec![0.0; n];
                g.node(i, &mut x);
                let centre = a1.values()[i];
                let mut stride = 1usize;
                let mut strides = vec![0usize; n];
                for a in (0..n).rev() {
                    strides[a] = stride;
                    stride *= m;
                }
                let mut s = 0.0;
                for a in 0..n {
                    let mut side = |sign: f64| -> f64 {
                        let j = idx[a] as isize + sign as isize;
                        if j < 0 || j >= m as isize {
                            // ghost node: evaluate the half-line integral directly
                            let keep = x[a];
                            x[a] += sign * h;
                            let v = a1_at(&x);
                            x[a] = keep;
                            v
                        } else if sign > 0.0 {
                            a1.values()[i + strides[a]]
                        } else {
                            a1.values()[i - strides[a]]
                        }
                    };
                    s += side(1.0) - 2.0 * centre + side(-1.0);
                }
                s / (h * h)
            })
            .collect();
        let product: Vec<f64> = p.grid().values().iter().zip(a1.values()).map(|(v, a)| v * a).collect();
        Ok(ProgressiveExpansion {
            theta: theta.clone(),
            laplacian: Grid::from_values(g, lap)?,
            product: Grid::from_values(g, product)?,
            a1,
        })
    }

    pub fn a1_grid(&self) -> &Grid {
        &self.a1
    }

    /// `(½∫Δa₁, ½∫V a₁)` along the incoming half-line through `x`.
    pub fn a2_parts(&self, x: &[f64]) -> Result<(f64, f64)> {
        let g = self.a1.geometry();
        check_point(x, &self.theta, g.dim)?;
        let th = self.theta.as_slice();
        let mut y = x.to_vec();
        let tau = foot(x, th, &mut y);
        // the source lives in the whole box (a₁ persists behind the support)
        let radius = g.extent * (g.dim as f64).sqrt() + g.spacing();
        let lin = 0.5 * line_integral(&self.laplacian, radius, &y, th, tau);
        let quad = 0.5 * line_integral(&self.product, radius, &y, th, tau);
        Ok((lin, quad))
    }

    pub fn a2(&self, x: &[f64]) -> Result<f64> {
        let (lin, quad) = self.a2_parts(x)?;
        Ok(lin + quad)
    }
}

/// One-shot `a₂(x, θ)`; prefer [`ProgressiveExpansion`] for many points.
pub fn progressive_coefficient_a2(p: &PotentialGrid, x: &[f64], theta: &Direction, length_scale: f64) -> Result<f64> {
    ProgressiveExpansion::new(p, theta, length_scale)?.a2(x)
}

/// Geometry helper used by tests and callers that tabulate a₁ elsewhere.
pub fn a1_on_grid(p: &PotentialGrid, theta: &Direction, out: &Geometry) -> Result<Grid> {
    check_point(&vec![0.0; out.dim], theta, p.dim())?;
    let values: Vec<f64> = (0..out.len())
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; out.dim];
            out.node(i, &mut x);
            let mut y = x.clone();
            let tau = foot(&x, theta.as_slice(), &mut y);
            line_integral(p.grid(), p.interpolant_radius(), &y, theta.as_slice(), tau)
        })
        .collect();
    Grid::from_values(*out, values)
}
