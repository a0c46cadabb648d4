//! Moment reconstruction by hyperplane assembly and filtered backprojection.
//!
//! For a hyperplane normal `η ∈ S^{nk-1}` a frame picks, per slot, a line
//! direction `θ_j ⊥ η_j`. The hyperplane `{z·η = r}` then splits into the
//! product of lines through `z` along the `θ_j` (where the data already
//! integrates `M^k`) and an orthogonal complement `P`, which is integrated
//! numerically. The resulting Radon transform is inverted with a ramp filter
//! `|σ|^{d-1}` and backprojection in `R^d`, `d = nk`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::correlation_data::{tangent_basis, DataSet, DataSource, DirectionTuple, Mollifier, MollifiedSource, OffsetGrid};
use crate::error::{Error, Result};
use crate::field_models::Ensemble;
use crate::grid::{Geometry, Grid};
use crate::moment::MomentGrid;
use crate::numeric::{pairwise_sum, sphere_area};
use crate::xray::{dot, Direction};

/// Unit normal in `R^{nk}`, read as `k` blocks of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperDirection {
    v: Vec<f64>,
    n: usize,
}

impl HyperDirection {
    pub fn new(v: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 || v.is_empty() || !v.len().is_multiple_of(n) {
            return Err(Error::InvalidDirection(format!("length {} is not a multiple of n = {n}", v.len())));
        }
        let norm = dot(&v, &v).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDirection(format!("norm {norm} is not 1")));
        }
        Ok(HyperDirection { v, n })
    }

    pub fn normalized(v: &[f64], n: usize) -> Result<Self> {
        let norm = dot(v, v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidDirection("zero or non-finite normal".into()));
        }
        HyperDirection::new(v.iter().map(|c| c / norm).collect(), n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn slot_dim(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.v.len() / self.n
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.v[j * self.n..(j + 1) * self.n]
    }

    pub fn negated(&self) -> HyperDirection {
        HyperDirection { v: self.v.iter().map(|c| -c).collect(), n: self.n }
    }
}

/// Per-slot line directions with `η_j · θ_j = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub thetas: Vec<Direction>,
}

/// Two valid frame rules; the assembled transform must not depend on which.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameRule {
    /// Quarter turn counter-clockwise in the plane; in higher dimension the
    /// standard axis least aligned with `η_j`, orthogonalised. Degenerate
    /// blocks take `e₁`.
    #[default]
    Standard,
    /// Clockwise quarter turn; second least aligned axis; degenerate blocks
    /// take the last axis.
    Alternate,
}

const DEGENERATE_BLOCK: f64 = 1e-8;

pub fn frame_select(eta: &HyperDirection) -> Frame {
    frame_select_with(eta, FrameRule::Standard)
}

pub fn frame_select_with(eta: &HyperDirection, rule: FrameRule) -> Frame {
    let n = eta.slot_dim();
    let thetas = (0..eta.order())
        .map(|j| {
            let b = eta.block(j);
            let norm = dot(b, b).sqrt();
            if norm <= DEGENERATE_BLOCK {
                return match rule {
                    FrameRule::Standard => Direction::axis(n, 0),
                    FrameRule::Alternate => Direction::axis(n, n - 1),
                };
            }
            let u: Vec<f64> = b.iter().map(|c| c / norm).collect();
            if n == 1 {
                // no direction is orthogonal on the line; keep e₁ (caller rejects n = 1)
                return Direction::axis(1, 0);
            }
            if n == 2 {
                let v = match rule {
                    FrameRule::Standard => vec![-u[1], u[0]],
                    FrameRule::Alternate => vec![u[1], -u[0]],
                };
                return Direction::normalized(&v).expect("unit block");
            }
            let mut axes: Vec<usize> = (0..n).collect();
            axes.sort_by(|&a, &c| u[a].abs().total_cmp(&u[c].abs()).then(a.cmp(&c)));
            let m = match rule {
                FrameRule::Standard => axes[0],
                FrameRule::Alternate => axes[1],
            };
            let mut v = vec![0.0; n];
            v[m] = 1.0;
            for _ in 0..2 {
                let c = dot(&v, &u);
                v.iter_mut().zip(&u).for_each(|(x, y)| *x -= c * y);
            }
            Direction::normalized(&v).expect("axis not parallel to block")
        })
        .collect();
    Frame { thetas }
}

/// Orthonormal basis of the complement `P` of `span{η, slot(θ_1), …}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PBasis {
    pub vectors: Vec<Vec<f64>>,
}

/// `θ_j` embedded into block `j` of `R^{nk}`.
pub fn slot_vector(theta: &Direction, j: usize, k: usize) -> Vec<f64> {
    let n = theta.dim();
    let mut v = vec![0.0; n * k];
    v[j * n..(j + 1) * n].copy_from_slice(theta.as_slice());
    v
}

pub fn pbasis(eta: &HyperDirection, frame: &Frame) -> Result<PBasis> {
    let n = eta.slot_dim();
    let k = eta.order();
    let d = n * k;
    if frame.thetas.len() != k {
        return Err(Error::GridMismatch(format!("frame has {} slots, normal has {k}", frame.thetas.len())));
    }
    let expected = (k * (n - 1)).saturating_sub(1);
    let mut span: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut fixed_vectors = vec![eta.as_slice().to_vec()];
    fixed_vectors.extend(frame.thetas.iter().enumerate().map(|(j, t)| slot_vector(t, j, k)));
    let push_orthogonal = |span: &mut Vec<Vec<f64>>, mut v: Vec<f64>| -> bool {
        for _ in 0..2 {
            for s in span.iter() {
                let c = dot(&v, s);
                v.iter_mut().zip(s).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            span.push(v);
            true
        } else {
            false
        }
    };
    for v in fixed_vectors {
        push_orthogonal(&mut span, v);
    }
    let fixed = span.len();
    // candidates ordered by how much of them survives projection
    let mut candidates: Vec<(f64, usize)> = (0..d)
        .map(|a| {
            let residual: f64 = 1.0 - span.iter().map(|s| s[a] * s[a]).sum::<f64>();
            (residual, a)
        })
        .collect();
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    for &(_, a) in &candidates {
        if span.len() == d {
            break;
        }
        let mut v = vec![0.0; d];
        v[a] = 1.0;
        push_orthogonal(&mut span, v);
    }
    let found = span.len() - fixed;
    if found != expected {
        return Err(Error::DimensionDeficit { expected, found });
    }
    Ok(PBasis { vectors: span.split_off(fixed) })
}

/// Maximum deviation of the Gram matrix of `{η, slots, P}` from the identity.
pub fn splitting_gram_deviation(eta: &HyperDirection, frame: &Frame, p: &PBasis) -> f64 {
    let k = eta.order();
    let mut all: Vec<Vec<f64>> = vec![eta.as_slice().to_vec()];
    all.extend(frame.thetas.iter().enumerate().map(|(j, t)| slot_vector(t, j, k)));
    all.extend(p.vectors.iter().cloned());
    let mut worst: f64 = 0.0;
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(a, b) - target).abs());
        }
    }
    worst
}

/// Points on `S^{d-1}` with quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereQuadrature {
    pub dim: usize,
    /// Row-major `count × dim`.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn count(&self) -> usize {
        self.weights.len()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.points[m * self.dim..(m + 1) * self.dim]
    }

    pub fn from_points(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() || weights.is_empty() {
            return Err(Error::GridMismatch("direction table shape mismatch".into()));
        }
        for m in 0..weights.len() {
            let p = &points[m * dim..(m + 1) * dim];
            if ((dot(p, p)).sqrt() - 1.0).abs() > 1e-12 || !weights[m].is_finite() {
                return Err(Error::InvalidDirection(format!("direction {m} is not a unit vector")));
            }
        }
        Ok(SphereQuadrature { dim, points, weights })
    }

    /// `count` equally spaced angles `2π(m + ½)/count`.
    pub fn circle(count: usize) -> Self {
        let mut points = Vec::with_capacity(2 * count);
        for m in 0..count {
            let phi = 2.0 * PI * (m as f64 + 0.5) / count as f64;
            points.extend([phi.cos(), phi.sin()]);
        }
        SphereQuadrature { dim: 2, points, weights: vec![2.0 * PI / count as f64; count] }
    }

    /// Spherical Fibonacci lattice on `S²`.
    pub fn fibonacci(count: usize) -> Self {
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        let mut points = Vec::with_capacity(3 * count);
        for i in 0..count {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * (i as f64 / golden).fract();
            points.extend([rho * phi.cos(), rho * phi.sin(), z]);
        }
        SphereQuadrature { dim: 3, points, weights: vec![4.0 * PI / count as f64; count] }
    }

    /// Product lattice on `S³` in Hopf coordinates
    /// `(√u e^{iφ₁}, √(1-u) e^{iφ₂})`, where the surface measure is
    /// `½ du dφ₁ dφ₂`: `n_phi` midpoint angles per circle, `n_u` midpoints in `u`.
    /// Slot directions repeat across `u`, so data sets are shared.
    pub fn hopf(n_phi: usize, n_u: usize) -> Self {
        let count = n_phi * n_phi * n_u;
        let mut points = Vec::with_capacity(4 * count);
        for i in 0..n_u {
            let u = (i as f64 + 0.5) / n_u as f64;
            let (a, b) = (u.sqrt(), (1.0 - u).sqrt());
            for p in 0..n_phi {
                let f1 = 2.0 * PI * (p as f64 + 0.5) / n_phi as f64;
                for q in 0..n_phi {
                    let f2 = 2.0 * PI * (q as f64 + 0.5) / n_phi as f64;
                    points.extend([a * f1.cos(), a * f1.sin(), b * f2.cos(), b * f2.sin()]);
                }
            }
        }
        SphereQuadrature { dim: 4, points, weights: vec![2.0 * PI * PI / count as f64; count] }
    }

    /// Additive-recurrence (Kronecker) sequence pushed through Box–Muller and
    /// normalised: equal-weight points on any `S^{d-1}`.
    pub fn kronecker(dim: usize, count: usize) -> Self {
        let pairs = dim.div_ceil(2);
        let s = 2 * pairs;
        // generalised golden ratio: root of x^{s+1} = x + 1
        let mut g = 2.0f64;
        for _ in 0..64 {
            g = (1.0 + g).powf(1.0 / (s as f64 + 1.0));
        }
        let alpha: Vec<f64> = (1..=s).map(|a| (1.0 / g.powi(a as i32)).fract()).collect();
        let mut points = Vec::with_capacity(dim * count);
        let mut z = vec![0.0; s];
        for i in 0..count {
            for p in 0..pairs {
                let u1 = (0.5 + (i as f64 + 1.0) * alpha[2 * p]).fract().max(1e-300);
                let u2 = (0.5 + (i as f64 + 1.0) * alpha[2 * p + 1]).fract();
                let r = (-2.0 * u1.ln()).sqrt();
                z[2 * p] = r * (2.0 * PI * u2).cos();
                z[2 * p + 1] = r * (2.0 * PI * u2).sin();
            }
            let norm = dot(&z[..dim], &z[..dim]).sqrt();
            points.extend(z[..dim].iter().map(|c| c / norm));
        }
        SphereQuadrature { dim, points, weights: vec![sphere_area(dim) / count as f64; count] }
    }

    /// Default set of about `count` directions for `S^{d-1}`.
    pub fn for_dimension(dim: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::param("directions", "must be positive"));
        }
        Ok(match dim {
            0 | 1 => return Err(Error::param("dim", "sphere quadrature needs d >= 2")),
            2 => SphereQuadrature::circle(count),
            3 => SphereQuadrature::fibonacci(count),
            4 => {
                let (n_phi, n_u) = hopf_split(count);
                SphereQuadrature::hopf(n_phi, n_u)
            }
            _ => SphereQuadrature::kronecker(dim, count),
        })
    }
}

/// Split `count ≈ n_phi² · n_u` with `n_phi` even and `n_u` close to `n_phi`,
/// preferring exact factorisations.
pub fn hopf_split(count: usize) -> (usize, usize) {
    let mut best = (2, 1);
    let mut best_err = f64::INFINITY;
    for n_phi in (2..=1024).step_by(2) {
        if n_phi * n_phi > 4 * count {
            break;
        }
        let n_u = ((count as f64) / (n_phi * n_phi) as f64).round().max(1.0) as usize;
        let mismatch = ((n_phi * n_phi * n_u) as f64 / count as f64).ln().abs();
        let shape = (n_u as f64 / n_phi as f64).ln().abs();
        let err = 100.0 * mismatch + shape;
        if err < best_err {
            best_err = err;
            best = (n_phi, n_u);
        }
    }
    best
}

/// Sampled `R[M^k](r, η)` on `r_i = -r_max + iΔr`, `Δr = 2 r_max / N_r`.
#[derive(Clone, Debug)]
pub struct Sinogram {
    pub order: usize,
    pub slot_dim: usize,
    pub r_max: f64,
    pub n_r: usize,
    pub directions: SphereQuadrature,
    /// Row-major `N_r × N_η`.
    pub values: Vec<f64>,
    /// Support radius of the underlying moment slots.
    pub support_radius: f64,
    /// Evaluations that fell outside a data grid while inside the support.
    pub truncations: u64,
}

impl Sinogram {
    pub fn dim(&self) -> usize {
        self.order * self.slot_dim
    }

    pub fn dr(&self) -> f64 {
        2.0 * self.r_max / self.n_r as f64
    }

    pub fn radius(&self, i: usize) -> f64 {
        -self.r_max + i as f64 * self.dr()
    }

    pub fn value(&self, i: usize, m: usize) -> f64 {
        self.values[i * self.directions.count() + m]
    }

    /// Tabulates an analytic transform `f(r, η)`.
    pub fn from_fn(
        order: usize,
        slot_dim: usize,
        r_max: f64,
        n_r: usize,
        directions: SphereQuadrature,
        support_radius: f64,
        f: impl Fn(f64, &[f64]) -> f64 + Sync,
    ) -> Result<Self> {
        check_sinogram_shape(order, slot_dim, r_max, n_r, &directions)?;
        let n_eta = directions.count();
        let dr = 2.0 * r_max / n_r as f64;
        let values: Vec<f64> = (0..n_r * n_eta)
            .into_par_iter()
            .map(|flat| f(-r_max + (flat / n_eta) as f64 * dr, directions.point(flat % n_eta)))
            .collect();
        Ok(Sinogram { order, slot_dim, r_max, n_r, directions, values, support_radius, truncations: 0 })
    }
}

fn check_sinogram_shape(order: usize, slot_dim: usize, r_max: f64, n_r: usize, directions: &SphereQuadrature) -> Result<()> {
    if order == 0 || slot_dim == 0 {
        return Err(Error::param("k", "order and dimension must be positive"));
    }
    if directions.dim != order * slot_dim {
        return Err(Error::GridMismatch(format!("directions live on S^{}, need S^{}", directions.dim - 1, order * slot_dim - 1)));
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::param("r_max", "must be positive"));
    }
    if n_r < 2 || !n_r.is_power_of_two() {
        return Err(Error::param("radii", format!("N_r = {n_r} must be a power of two")));
    }
    Ok(())
}

/// Sampling of the Radon transform.
#[derive(Clone, Debug)]
pub struct SinogramSpec {
    pub r_max: f64,
    pub n_r: usize,
    pub directions: SphereQuadrature,
    pub rule: FrameRule,
    /// Step of the midpoint rule over `P`; defaults to half the offset spacing.
    pub p_step: Option<f64>,
}

impl SinogramSpec {
    pub fn new(r_max: f64, n_r: usize, directions: SphereQuadrature) -> Self {
        SinogramSpec { r_max, n_r, directions, rule: FrameRule::Standard, p_step: None }
    }
}

/// Geometry for evaluating one data set along `rη + P`.
struct PlaneMap {
    /// Offset coordinates of `η` (concatenated over slots).
    eta_coords: Vec<f64>,
    /// Offset coordinates of each `P` basis vector.
    p_coords: Vec<Vec<f64>>,
    /// Slot blocks of `η` and of the `P` vectors, for support tests.
    eta_blocks: Vec<Vec<f64>>,
    p_blocks: Vec<Vec<Vec<f64>>>,
}

impl PlaneMap {
    fn new(eta: &HyperDirection, tuple: &DirectionTuple, p: &PBasis) -> Self {
        let n = eta.slot_dim();
        let k = eta.order();
        let bases: Vec<Vec<Vec<f64>>> = tuple.directions().iter().map(tangent_basis).collect();
        let project = |v: &[f64]| -> Vec<f64> {
            (0..k).flat_map(|j| bases[j].iter().map(move |b| dot(&v[j * n..(j + 1) * n], b))).collect()
        };
        PlaneMap {
            eta_coords: project(eta.as_slice()),
            p_coords: p.vectors.iter().map(|v| project(v)).collect(),
            eta_blocks: (0..k).map(|j| eta.block(j).to_vec()).collect(),
            p_blocks: p.vectors.iter().map(|v| (0..k).map(|j| v[j * n..(j + 1) * n].to_vec()).collect()).collect(),
        }
    }
}

/// `2^k ∫_P D^k(rη + x^P, θ(η)) dP` by a midpoint rule over the cube of
/// half-width `ρ = √(kR² - r²)` restricted to the ball `|x^P| ≤ ρ`. Returns the
/// value and the number of in-support evaluations that left the data grid.
fn radon_on_plane(data: &DataSet, map: &PlaneMap, r: f64, step: f64) -> (f64, u64) {
    let k = data.order();
    let radius = data.support_radius;
    let scale = 2f64.powi(k as i32);
    let rho2 = k as f64 * radius * radius - r * r;
    if rho2 <= 0.0 {
        return (0.0, 0);
    }
    let q = map.p_coords.len();
    let axes = map.eta_coords.len();
    let mut s = vec![0.0; axes];
    let mut truncations = 0u64;
    let mut eval = |c: &[f64]| -> f64 {
        for (a, si) in s.iter_mut().enumerate() {
            let mut v = r * map.eta_coords[a];
            for (b, cb) in c.iter().enumerate() {
                v += cb * map.p_coords[b][a];
            }
            *si = v;
        }
        match data.evaluate_coords(&s) {
            Some(v) => v,
            None => {
                // out of grid: count only if every slot is inside the support
                let inside = (0..k).all(|j| {
                    let mut norm2 = 0.0;
                    for (a, e) in map.eta_blocks[j].iter().enumerate() {
                        let mut v = r * e;
                        for (b, cb) in c.iter().enumerate() {
                            v += cb * map.p_blocks[b][j][a];
                        }
                        norm2 += v * v;
                    }
                    norm2 <= radius * radius
                });
                if inside {
                    truncations += 1;
                }
                0.0
            }
        }
    };
    if q == 0 {
        let v = eval(&[]);
        return (scale * v, truncations);
    }
    let rho = rho2.sqrt();
    let cells = ((2.0 * rho / step).ceil() as usize).max(1);
    let h = 2.0 * rho / cells as f64;
    let nodes: Vec<f64> = (0..cells).map(|i| -rho + (i as f64 + 0.5) * h).collect();
    let mut idx = vec![0usize; q];
    let mut c = vec![0.0; q];
    let mut terms = Vec::new();
    'outer: loop {
        let mut norm2 = 0.0;
        for b in 0..q {
            c[b] = nodes[idx[b]];
            norm2 += c[b] * c[b];
        }
        if norm2 <= rho2 {
            terms.push(eval(&c));
        }
        for b in (0..q).rev() {
            idx[b] += 1;
            if idx[b] < cells {
                continue 'outer;
            }
            idx[b] = 0;
        }
        break;
    }
    (scale * pairwise_sum(&terms) * h.powi(q as i32), truncations)
}

/// Radon transform of `M^k` at a single `(r, η)` from a data source.
pub fn radon_from_data(source: &dyn DataSource, r: f64, eta: &HyperDirection, rule: FrameRule, p_step: Option<f64>) -> Result<(f64, u64)> {
    let frame = frame_select_with(eta, rule);
    let tuple = DirectionTuple::new(frame.thetas.clone())?;
    let p = pbasis(eta, &frame)?;
    let data = source.dataset(&tuple)?;
    let step = p_step.unwrap_or_else(|| default_p_step(&data));
    let map = PlaneMap::new(eta, &tuple, &p);
    Ok(radon_on_plane(&data, &map, r, step))
}

fn default_p_step(data: &DataSet) -> f64 {
    0.5 * data.offsets.iter().map(|g| g.spacing()).fold(f64::INFINITY, f64::min)
}

/// Quantised key grouping frames that agree to ~1e-10 (e.g. the same slot
/// angle reached through different radial weights).
fn frame_key(frame: &Frame) -> Vec<i64> {
    frame.thetas.iter().flat_map(|t| t.as_slice().iter().map(|c| (c * 1e10).round() as i64)).collect()
}

/// Directions of a sinogram grouped by their frame; each group is served by
/// one data set. Also returns the directions split into slots.
pub fn frame_groups(
    directions: &SphereQuadrature,
    n: usize,
    rule: FrameRule,
) -> Result<(Vec<(DirectionTuple, Vec<usize>)>, Vec<HyperDirection>)> {
    let mut groups: Vec<(DirectionTuple, Vec<usize>)> = Vec::new();
    let mut lookup: HashMap<Vec<i64>, usize> = HashMap::new();
    let mut etas = Vec::with_capacity(directions.count());
    for m in 0..directions.count() {
        let eta = HyperDirection::new(directions.point(m).to_vec(), n)?;
        let frame = frame_select_with(&eta, rule);
        let key = frame_key(&frame);
        match lookup.get(&key) {
            Some(&g) => groups[g].1.push(m),
            None => {
                lookup.insert(key, groups.len());
                groups.push((DirectionTuple::new(frame.thetas)?, vec![m]));
            }
        }
        etas.push(eta);
    }
    Ok((groups, etas))
}

/// The direction tuples [`assemble_sinogram`] will request for `spec`.
pub fn sinogram_tuples(spec: &SinogramSpec, n: usize) -> Result<Vec<DirectionTuple>> {
    Ok(frame_groups(&spec.directions, n, spec.rule)?.0.into_iter().map(|g| g.0).collect())
}

/// Dense Radon transform over the radii and directions of `spec`.
pub fn assemble_sinogram(source: &dyn DataSource, spec: &SinogramSpec) -> Result<Sinogram> {
    let k = source.order();
    let n = source.dim();
    if n < 2 {
        return Err(Error::param("dim", "reconstruction needs n >= 2"));
    }
    check_sinogram_shape(k, n, spec.r_max, spec.n_r, &spec.directions)?;
    let support = source.support_radius();
    if spec.r_max < support * (k as f64).sqrt() {
        warn!("r_max {} is below R·√k = {}; transform is truncated", spec.r_max, support * (k as f64).sqrt());
    }
    let n_eta = spec.directions.count();
    let (groups, etas) = frame_groups(&spec.directions, n, spec.rule)?;
    let mut distinct: Vec<Direction> = Vec::new();
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    for (t, _) in &groups {
        for d in t.distinct() {
            let key: Vec<u64> = d.as_slice().iter().map(|c| c.to_bits()).collect();
            if seen.insert(key, ()).is_none() {
                distinct.push(d.clone());
            }
        }
    }
    source.prepare(&distinct)?;
    info!("assembling sinogram: {} radii x {n_eta} directions, {} data sets", spec.n_r, groups.len());
    let dr = 2.0 * spec.r_max / spec.n_r as f64;
    let columns: Vec<Vec<(usize, Vec<f64>, u64)>> = groups
        .par_iter()
        .map(|(tuple, members)| {
            let data: Arc<DataSet> = source.dataset(tuple)?;
            let step = spec.p_step.unwrap_or_else(|| default_p_step(&data));
            members
                .iter()
                .map(|&m| {
                    let eta = &etas[m];
                    let frame = Frame { thetas: tuple.directions().to_vec() };
                    let p = pbasis(eta, &frame)?;
                    let map = PlaneMap::new(eta, tuple, &p);
                    let mut col = Vec::with_capacity(spec.n_r);
                    let mut lost = 0;
                    for i in 0..spec.n_r {
                        let (v, t) = radon_on_plane(&data, &map, -spec.r_max + i as f64 * dr, step);
                        col.push(v);
                        lost += t;
                    }
                    Ok((m, col, lost))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; spec.n_r * n_eta];
    let mut truncations = 0;
    for (m, col, lost) in columns.into_iter().flatten() {
        for (i, v) in col.into_iter().enumerate() {
            values[i * n_eta + m] = v;
        }
        truncations += lost;
    }
    if truncations > 0 {
        warn!("{truncations} in-support evaluations fell outside the data grids");
    }
    Ok(Sinogram {
        order: k,
        slot_dim: n,
        r_max: spec.r_max,
        n_r: spec.n_r,
        directions: spec.directions.clone(),
        values,
        support_radius: support,
        truncations,
    })
}

/// Ramp-filtered projections on the zero-padded radial grid.
struct Filtered {
    /// Radius of `samples[0]`.
    start: f64,
    dr: f64,
    len: usize,
    /// Row-major `N_η × len`.
    samples: Vec<f64>,
}

impl Filtered {
    #[inline]
    fn at(&self, m: usize, s: f64) -> f64 {
        let u = (s - self.start) / self.dr;
        if !(u >= 0.0) {
            return 0.0;
        }
        let i = u as usize;
        if i + 1 >= self.len {
            return 0.0;
        }
        let f = u - i as f64;
        let row = &self.samples[m * self.len..(m + 1) * self.len];
        row[i] + f * (row[i + 1] - row[i])
    }
}

/// `∫_0^1 τ^p cos(πmτ) dτ` in closed form.
fn cosine_moment(p: usize, m: i64) -> f64 {
    if m == 0 {
        return 1.0 / (p as f64 + 1.0);
    }
    // repeated integration by parts of τ^p e^{ibτ}, b = πm
    let b = PI * m as f64;
    let ib = Complex64::new(0.0, b);
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    let mut acc = Complex64::new(0.0, 0.0);
    let mut fall = 1.0;
    for j in 0..=p {
        let term = Complex64::new(fall * if j % 2 == 0 { 1.0 } else { -1.0 }, 0.0) / ib.powi(j as i32 + 1);
        acc += term * sign;
        if j == p {
            acc -= term;
        }
        fall *= (p - j) as f64;
    }
    acc.re
}

/// Taps `h(n)` of the band-limited filter `|σ|^{d-1} W(σ)` sampled at `nΔr`,
/// with `W` the raised cosine reaching zero at the Nyquist frequency.
fn ramp_kernel(half: usize, dr: f64, d: usize) -> Vec<f64> {
    let p = d - 1;
    let x = PI / dr;
    let scale = x.powi(p as i32 + 1) / PI;
    (0..half)
        .map(|n| {
            let n = n as i64;
            scale * (0.5 * cosine_moment(p, n) + 0.25 * cosine_moment(p, n + 1) + 0.25 * cosine_moment(p, n - 1))
        })
        .collect()
}

fn filter_sinogram(s: &Sinogram) -> Filtered {
    let d = s.dim();
    let n_eta = s.directions.count();
    let len = 8 * s.n_r;
    let half = len / 2;
    let dr = s.dr();
    // transfer function of the circular kernel
    let taps = ramp_kernel(half, dr, d);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut kernel = vec![Complex64::new(0.0, 0.0); len];
    for n in 0..half {
        kernel[n] = Complex64::new(taps[n] * dr, 0.0);
        if n > 0 {
            kernel[len - n] = kernel[n];
        }
    }
    fwd.process(&mut kernel);
    // keep outputs within 2 N_r of the data on either side
    let margin = 2 * s.n_r;
    let kept = s.n_r + 2 * margin;
    let samples: Vec<f64> = (0..n_eta)
        .into_par_iter()
        .flat_map_iter(|m| {
            let mut buf = vec![Complex64::new(0.0, 0.0); len];
            for i in 0..s.n_r {
                buf[i] = Complex64::new(s.value(i, m), 0.0);
            }
            fwd.process(&mut buf);
            for (b, w) in buf.iter_mut().zip(&kernel) {
                *b *= *w;
            }
            inv.process(&mut buf);
            let norm = 1.0 / len as f64;
            (0..kept).map(move |j| buf[(j + len - margin) % len].re * norm)
        })
        .collect();
    Filtered { start: s.radius(0) - margin as f64 * dr, dr, len: kept, samples }
}

/// Filtered backprojection onto `out` (a `d`-dimensional geometry):
/// `M(x) = c_d Σ_m w_m q_m(x·η_m)` with `c_d = 1 / (2 (2π)^{d-1})`.
pub fn fbp_invert(s: &Sinogram, out: &Geometry) -> Result<MomentGrid> {
    let d = s.dim();
    if out.dim != d {
        return Err(Error::GridMismatch(format!("output grid has dimension {}, sinogram needs {d}", out.dim)));
    }
    check_sinogram_shape(s.order, s.slot_dim, s.r_max, s.n_r, &s.directions)?;
    let half_h = 0.5 * out.spacing();
    if s.dr() > half_h * (1.0 + 1e-9) {
        return Err(Error::NyquistViolation { dr: s.dr(), half_h });
    }
    if out.extent > s.r_max * (1.0 + 1e-12) {
        return Err(Error::param("grid", format!("output extent {} exceeds r_max {}", out.extent, s.r_max)));
    }
    let filtered = filter_sinogram(s);
    let c_d = 1.0 / (2.0 * (2.0 * PI).powi(d as i32 - 1));
    let p = out.points;
    let rows = out.len() / p;
    let coords: Vec<f64> = (0..p).map(|i| out.coord(i)).collect();
    let n_eta = s.directions.count();
    const ROWS_PER_BLOCK: usize = 64;
    let blocks: Vec<Vec<f64>> = (0..rows.div_ceil(ROWS_PER_BLOCK))
        .into_par_iter()
        .map(|b| {
            let r0 = b * ROWS_PER_BLOCK;
            let r1 = (r0 + ROWS_PER_BLOCK).min(rows);
            let mut acc = vec![0.0; (r1 - r0) * p];
            let mut idx = vec![0usize; d];
            let mut last = vec![0.0; p];
            for m in 0..n_eta {
                let eta = s.directions.point(m);
                let w = s.directions.weights[m];
                for (l, c) in last.iter_mut().zip(&coords) {
                    *l = c * eta[d - 1];
                }
                for row in r0..r1 {
                    let mut rem = row;
                    for a in (0..d - 1).rev() {
                        idx[a] = rem % p;
                        rem /= p;
                    }
                    let base: f64 = (0..d - 1).map(|a| coords[idx[a]] * eta[a]).sum();
                    let out_row = &mut acc[(row - r0) * p..(row - r0 + 1) * p];
                    for (o, l) in out_row.iter_mut().zip(&last) {
                        *o += w * filtered.at(m, base + l);
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v *= c_d);
            acc
        })
        .collect();
    let values = blocks.concat();
    MomentGrid::new(Grid::from_values(*out, values)?, s.order, s.slot_dim, 0.0, s.support_radius)
}

/// Mollify (if `epsilon > 0`), assemble, invert; the result carries `epsilon`.
pub fn reconstruct_moment(source: &dyn DataSource, epsilon: f64, spec: &SinogramSpec, out: &Geometry) -> Result<MomentGrid> {
    let sino = if epsilon > 0.0 {
        let wrapped = MollifiedSource { inner: source, mollifier: Mollifier::new(epsilon, source.dim())? };
        assemble_sinogram(&wrapped, spec)?
    } else {
        assemble_sinogram(source, spec)?
    };
    let mut m = fbp_invert(&sino, out)?;
    m.epsilon = epsilon;
    Ok(m)
}

/// Smooth test functions `exp(-|x - c_t|² / (2 s²))` in `R^{nk}` for the
/// convergence diagnostic: one centred, plus shifts along the first and last
/// axes, all scaled by the support radius.
pub fn test_functions(dim: usize, radius: f64) -> Vec<(Vec<f64>, f64)> {
    let s = 0.3 * radius;
    let mut out = vec![(vec![0.0; dim], s)];
    let mut a = vec![0.0; dim];
    a[0] = 0.35 * radius;
    out.push((a, s));
    let mut b = vec![0.0; dim];
    b[dim - 1] = -0.3 * radius;
    out.push((b, s));
    out
}

pub fn pairing(m: &MomentGrid, center: &[f64], width: f64) -> f64 {
    let g = m.grid.geometry();
    let mut x = vec![0.0; g.dim];
    let terms: Vec<f64> = m
        .grid
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            g.node(i, &mut x);
            let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
            v * (-0.5 * d2 / (width * width)).exp()
        })
        .collect();
    pairwise_sum(&terms) * g.cell_volume()
}

/// One entry of a resolution sweep.
#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub epsilon: f64,
    pub moment: MomentGrid,
    pub pairings: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub skipped: Vec<f64>,
    /// `|⟨M_{ε_{i+1}}, ψ_t⟩ - ⟨M_{ε_i}, ψ_t⟩|`, per consecutive pair and test function.
    pub differences: Vec<Vec<f64>>,
    /// Noise floor per test function used in the monotonicity check.
    pub noise: Vec<f64>,
    /// Successive differences shrink, up to twice the noise floor.
    pub monotone: bool,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("epsilon");
        for t in 0..self.noise.len() {
            out.push_str(&format!(",pairing_{t}"));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{:.6e}", e.epsilon));
            for p in &e.pairings {
                out.push_str(&format!(",{p:.10e}"));
            }
            out.push('\n');
        }
        out.push_str("# successive differences\n");
        for (i, row) in self.differences.iter().enumerate() {
            let cols: Vec<String> = row.iter().map(|v| format!("{v:.4e}")).collect();
            out.push_str(&format!("# {} -> {}: {}\n", i, i + 1, cols.join(",")));
        }
        let noise: Vec<String> = self.noise.iter().map(|v| format!("{v:.4e}")).collect();
        out.push_str(&format!("# noise floor: {}\n", noise.join(",")));
        out.push_str(&format!("# monotone within noise: {}\n", self.monotone));
        for e in &self.skipped {
            out.push_str(&format!("# skipped epsilon {e:.6e}: below twice the grid spacing\n"));
        }
        out
    }
}

/// Reconstructs at each `ε` (strictly decreasing) and reports the pairings
/// against [`test_functions`]. `noise` gives a per-pairing noise floor (e.g.
/// from [`noise_floor`]); pass zeros for exact data.
pub fn resolution_sweep(
    source: &dyn DataSource,
    epsilons: &[f64],
    spec: &SinogramSpec,
    out: &Geometry,
    noise: Option<&[f64]>,
) -> Result<SweepReport> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("epsilons", "must be strictly decreasing"));
    }
    let mut moments = Vec::new();
    let mut skipped = Vec::new();
    for &eps in epsilons {
        if eps < 2.0 * out.spacing() {
            info!("skipping epsilon {eps}: below twice the grid spacing {}", out.spacing());
            skipped.push(eps);
            continue;
        }
        moments.push(reconstruct_moment(source, eps, spec, out)?);
    }
    Ok(sweep_from_moments(moments, skipped, source.support_radius(), noise))
}

/// Builds the sweep report from reconstructions already ordered by decreasing
/// `ε`; `support` places the test functions.
pub fn sweep_from_moments(moments: Vec<MomentGrid>, skipped: Vec<f64>, support: f64, noise: Option<&[f64]>) -> SweepReport {
    let dim = moments.first().map_or(1, |m| m.grid.dim());
    let tests = test_functions(dim, support);
    let entries: Vec<SweepEntry> = moments
        .into_iter()
        .map(|moment| {
            let pairings = tests.iter().map(|(c, w)| pairing(&moment, c, *w)).collect();
            SweepEntry { epsilon: moment.epsilon, moment, pairings }
        })
        .collect();
    let noise: Vec<f64> = match noise {
        Some(n) => n.to_vec(),
        None => vec![0.0; tests.len()],
    };
    let differences: Vec<Vec<f64>> = entries
        .windows(2)
        .map(|w| w[0].pairings.iter().zip(&w[1].pairings).map(|(a, b)| (b - a).abs()).collect())
        .collect();
    let monotone = differences.windows(2).all(|w| {
        w[1].iter().zip(&w[0]).zip(&noise).all(|((later, earlier), floor)| *later <= *earlier + 2.0 * floor + 1e-14)
    });
    SweepReport { entries, skipped, differences, noise, monotone }
}

/// Monte-Carlo noise propagated through the (linear) reconstruction by batch
/// means: the ensemble is split into `batches` parts, each reconstructed
/// separately, and the spread of the batch results estimates the standard
/// error of the full reconstruction.
#[derive(Clone, Debug)]
pub struct NoiseFloor {
    /// Pointwise standard error of the full-ensemble reconstruction.
    pub sigma: Grid,
    pub max: f64,
    /// Standard error of each test-function pairing.
    pub pairings: Vec<f64>,
}

pub fn noise_floor(
    ensemble: &Ensemble,
    order: usize,
    count: usize,
    offsets: OffsetGrid,
    batches: usize,
    epsilon: f64,
    spec: &SinogramSpec,
    out: &Geometry,
) -> Result<NoiseFloor> {
    if batches < 2 || count < batches || count > ensemble.count() {
        return Err(Error::param("batches", format!("need 2 <= batches <= count <= {}", ensemble.count())));
    }
    let size = count / batches;
    let tests = test_functions(out.dim, ensemble.support_radius());
    let mut grids = Vec::with_capacity(batches);
    let mut pairs = Vec::with_capacity(batches);
    for b in 0..batches {
        let src = crate::correlation_data::EnsembleSource::with_samples(ensemble, order, b * size..(b + 1) * size, offsets)?;
        let m = reconstruct_moment(&src, epsilon, spec, out)?;
        pairs.push(tests.iter().map(|(c, w)| pairing(&m, c, *w)).collect::<Vec<f64>>());
        grids.push(m.grid);
    }
    let bf = batches as f64;
    let spread = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mean = v.iter().sum::<f64>() / bf;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (bf - 1.0);
        // batch means estimate the error of the full-sample mean
        (var / bf).sqrt()
    };
    let sigma_values: Vec<f64> = (0..out.len()).map(|i| spread(&mut grids.iter().map(|g| g.values()[i]))).collect();
    let max = sigma_values.iter().fold(0.0f64, |a, v| a.max(*v));
    let pairings = (0..tests.len()).map(|t| spread(&mut pairs.iter().map(|p| p[t]))).collect();
    Ok(NoiseFloor { sigma: Grid::from_values(*out, sigma_values)?, max, pairings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation_data::MomentSource;

    fn random_etas(n: usize, k: usize, count: usize) -> Vec<HyperDirection> {
        let q = SphereQuadrature::kronecker(n * k, count);
        (0..count).map(|m| HyperDirection::new(q.point(m).to_vec(), n).unwrap()).collect()
    }

    #[test]
    fn frame_examples() {
        let eta = HyperDirection::new(vec![0.0, 1.0], 2).unwrap();
        assert_eq!(frame_select(&eta).thetas[0].as_slice(), &[-1.0, 0.0]);
        let eta = HyperDirection::new(vec![0.6, 0.8, 0.0, 0.0], 2).unwrap();
        assert_eq!(frame_select(&eta).thetas[1].as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn frames_are_orthogonal_and_split_is_orthonormal() {
        for (n, k) in [(2, 1), (2, 2), (3, 1), (3, 2), (2, 3)] {
            for rule in [FrameRule::Standard, FrameRule::Alternate] {
                for eta in random_etas(n, k, 200) {
                    let f = frame_select_with(&eta, rule);
                    for j in 0..k {
                        assert!(dot(eta.block(j), f.thetas[j].as_slice()).abs() <= 1e-10);
                    }
                    let p = pbasis(&eta, &f).unwrap();
                    assert_eq!(p.vectors.len(), k * (n - 1) - 1);
                    assert!(splitting_gram_deviation(&eta, &f, &p) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn pbasis_examples() {
        let eta = HyperDirection::new(vec![0.6, 0.8], 2).unwrap();
        assert!(pbasis(&eta, &frame_select(&eta)).unwrap().vectors.is_empty());
        let eta = HyperDirection::normalized(&[1.0, 2.0, 2.0], 3).unwrap();
        let f = frame_select(&eta);
        let p = pbasis(&eta, &f).unwrap();
        assert_eq!(p.vectors.len(), 1);
        // η, θ, p span R³: determinant ±1
        let (a, b, c) = (eta.as_slice(), f.thetas[0].as_slice(), &p.vectors[0]);
        let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0]);
        assert!((det.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broken_frame_is_reported() {
        let eta = HyperDirection::new(vec![0.6, 0.8, 0.0, 0.0], 2).unwrap();
        let bad = Frame { thetas: vec![Direction::normalized(&[0.6, 0.8]).unwrap(), Direction::axis(2, 0)] };
        assert!(matches!(pbasis(&eta, &bad), Err(Error::DimensionDeficit { .. })));
    }

    #[test]
    fn quadrature_weights_sum_to_sphere_area() {
        for (d, q) in [
            (2, SphereQuadrature::circle(64)),
            (3, SphereQuadrature::fibonacci(500)),
            (4, SphereQuadrature::hopf(8, 4)),
            (6, SphereQuadrature::kronecker(6, 300)),
        ] {
            let total: f64 = q.weights.iter().sum();
            assert!((total - sphere_area(d)).abs() <= 1e-6 * sphere_area(d));
            for m in 0..q.count() {
                assert!((dot(q.point(m), q.point(m)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadrature_integrates_low_degree_polynomials() {
        // ∫ x_1² over S^{d-1} = |S^{d-1}| / d
        for q in [SphereQuadrature::fibonacci(2000), SphereQuadrature::hopf(16, 8), SphereQuadrature::kronecker(5, 20000)] {
            let got: f64 = (0..q.count()).map(|m| q.weights[m] * q.point(m)[0].powi(2)).sum();
            let exact = sphere_area(q.dim) / q.dim as f64;
            assert!((got - exact).abs() < 2e-2 * exact, "d={}: {got} vs {exact}", q.dim);
        }
    }

    #[test]
    fn hopf_split_hits_count() {
        assert_eq!(hopf_split(4096), (16, 16));
        let (p, u) = hopf_split(1000);
        assert!(p % 2 == 0 && (p * p * u) as f64 / 1000.0 < 1.3);
    }

    /// Standard Gaussian in the plane: projections √(2π) e^{-r²/2}.
    #[test]
    fn gaussian_round_trip_d2() {
        let s = Sinogram::from_fn(1, 2, 6.0, 512, SphereQuadrature::circle(256), 5.0, |r, _| {
            (2.0 * PI).sqrt() * (-0.5 * r * r).exp()
        })
        .unwrap();
        let out = Geometry::new(2, 3.0, 61).unwrap();
        let m = fbp_invert(&s, &out).unwrap();
        let peak = m.grid.values()[30 * 61 + 30];
        assert!((peak - 1.0).abs() < 0.02, "{peak}");
    }

    #[test]
    fn ramp_kernel_matches_quadrature() {
        // h(n) = (1/π) ∫_0^X σ^p W(σ) cos(σ n Δr) dσ by a fine midpoint rule
        let dr = 0.1;
        for d in [2usize, 3, 4] {
            let taps = ramp_kernel(6, dr, d);
            for (n, tap) in taps.iter().enumerate() {
                let x = PI / dr;
                let cells = 200_000;
                let step = x / cells as f64;
                let mut acc = 0.0;
                for i in 0..cells {
                    let sg = (i as f64 + 0.5) * step;
                    acc += sg.powi(d as i32 - 1) * 0.5 * (1.0 + (PI * sg / x).cos()) * (sg * n as f64 * dr).cos();
                }
                let expect = acc * step / PI;
                assert!((tap - expect).abs() <= 1e-7 * taps[0].abs(), "d={d} n={n}: {tap} vs {expect}");
            }
        }
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let s = Sinogram::from_fn(1, 2, 1.0, 16, SphereQuadrature::circle(8), 1.0, |_, _| 0.0).unwrap();
        let out = Geometry::new(2, 1.0, 41).unwrap();
        assert!(matches!(fbp_invert(&s, &out), Err(Error::NyquistViolation { .. })));
    }

    #[test]
    fn zero_sinogram_gives_zero() {
        let s = Sinogram::from_fn(2, 2, 1.0, 64, SphereQuadrature::hopf(4, 2), 0.5, |_, _| 0.0).unwrap();
        let m = fbp_invert(&s, &Geometry::new(4, 0.7, 6).unwrap()).unwrap();
        assert_eq!(m.grid.max_abs(), 0.0);
    }

    #[test]
    fn zero_moment_source_gives_zero_sinogram() {
        let slot = Geometry::new(2, 1.0, 9).unwrap();
        let m = MomentGrid::zeros(slot, 2, 0.6).unwrap();
        let src = MomentSource { moment: &m, offsets: OffsetGrid::new(1.0, 9).unwrap() };
        let spec = SinogramSpec::new(1.2, 8, SphereQuadrature::hopf(4, 1));
        let s = assemble_sinogram(&src, &spec).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }
}
