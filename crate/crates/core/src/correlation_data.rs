//! Exterior correlation data on tangent-bundle coordinates.
//!
//! A [`DataSet`] holds `D^k(y_1, θ_1, …, y_k, θ_k)` for one direction tuple,
//! with each offset `y_j ∈ θ_j^⊥` written in the orthonormal basis returned by
//! [`tangent_basis`]. Values are stored slot-major, row-major within a slot.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::sync::{Arc, Mutex};

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_models::Ensemble;
use crate::moment::MomentGrid;
use crate::numeric::{bump_mass, pairwise_sum};
use crate::xray::{chord_cells, chord_sum, dot, foot, Direction, TangentPoint};

/// Angular tolerance below which two requested directions are one incident wave.
pub const DISTINCT_TOLERANCE: f64 = 1e-9;

/// `y = x - (x·θ)θ`.
pub fn tangent_reduce(x: &[f64], theta: &Direction) -> TangentPoint {
    let mut y = x.to_vec();
    foot(x, theta.as_slice(), &mut y);
    TangentPoint { direction: theta.clone(), offset: y }
}

/// Orthonormal basis of `θ^⊥`. In the plane this is the quarter turn
/// `(-θ_y, θ_x)`; otherwise the `n - 1` standard axes least aligned with `θ`
/// are orthogonalised against it.
pub fn tangent_basis(theta: &Direction) -> Vec<Vec<f64>> {
    let t = theta.as_slice();
    let n = t.len();
    if n == 2 {
        return vec![vec![-t[1], t[0]]];
    }
    let mut axes: Vec<usize> = (0..n).collect();
    axes.sort_by(|&a, &b| t[a].abs().total_cmp(&t[b].abs()).then(a.cmp(&b)));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for &a in &axes[..n - 1] {
        let mut v = vec![0.0; n];
        v[a] = 1.0;
        for _ in 0..2 {
            let c = dot(&v, t);
            v.iter_mut().zip(t).for_each(|(x, y)| *x -= c * y);
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

/// `k` detector directions and the distinct incident directions behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionTuple {
    directions: Vec<Direction>,
    distinct: Vec<Direction>,
    index: Vec<usize>,
}

impl DirectionTuple {
    /// Directions closer than [`DISTINCT_TOLERANCE`] are merged; every slot
    /// then carries the first representative bit for bit.
    pub fn new(directions: Vec<Direction>) -> Result<Self> {
        let Some(first) = directions.first() else {
            return Err(Error::param("tuple", "needs at least one direction"));
        };
        let n = first.dim();
        if directions.iter().any(|d| d.dim() != n) {
            return Err(Error::InvalidDirection("tuple mixes dimensions".into()));
        }
        let mut distinct: Vec<Direction> = Vec::new();
        let mut index = Vec::with_capacity(directions.len());
        for d in &directions {
            match distinct.iter().position(|e| e.angle_to(d) <= DISTINCT_TOLERANCE) {
                Some(i) => index.push(i),
                None => {
                    index.push(distinct.len());
                    distinct.push(d.clone());
                }
            }
        }
        let directions = index.iter().map(|&i| distinct[i].clone()).collect();
        Ok(DirectionTuple { directions, distinct, index })
    }

    pub fn order(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> usize {
        self.directions[0].dim()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn distinct(&self) -> &[Direction] {
        &self.distinct
    }

    /// Slot `j` ↦ index into [`Self::distinct`].
    pub fn index_map(&self) -> &[usize] {
        &self.index
    }

    /// Bitwise key, used to cache per-tuple work.
    pub fn key(&self) -> Vec<u64> {
        self.directions.iter().flat_map(|d| d.as_slice().iter().map(|c| c.to_bits())).collect()
    }
}

/// Uniform offset grid on one tangent plane: `points` nodes per axis on
/// `[-extent, extent]^{n-1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetGrid {
    pub extent: f64,
    pub points: usize,
}

impl OffsetGrid {
    pub fn new(extent: f64, points: usize) -> Result<Self> {
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::param("offset_extent", "must be positive"));
        }
        if points < 2 {
            return Err(Error::param("offset_points", "need at least 2 points per axis"));
        }
        Ok(OffsetGrid { extent, points })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.extent + i as f64 * self.spacing()
    }

    pub fn len(&self, axes: usize) -> usize {
        self.points.pow(axes as u32)
    }
}

/// Samples of `D^k` for one direction tuple.
#[derive(Clone, Debug)]
pub struct DataSet {
    pub tuple: DirectionTuple,
    pub offsets: Vec<OffsetGrid>,
    pub values: Vec<f64>,
    /// Monte-Carlo standard error per value (zero for exact data).
    pub stderr: Vec<f64>,
    pub count: u64,
    pub seed: u64,
    /// Offsets with `|y_j|` beyond this radius carry zero data.
    pub support_radius: f64,
}

impl DataSet {
    pub fn zeros(tuple: DirectionTuple, offsets: Vec<OffsetGrid>, support_radius: f64) -> Result<Self> {
        let len = shape_len(&tuple, &offsets)?;
        Ok(DataSet { tuple, offsets, values: vec![0.0; len], stderr: vec![0.0; len], count: 0, seed: 0, support_radius })
    }

    pub fn new(
        tuple: DirectionTuple,
        offsets: Vec<OffsetGrid>,
        values: Vec<f64>,
        stderr: Vec<f64>,
        count: u64,
        seed: u64,
        support_radius: f64,
    ) -> Result<Self> {
        let len = shape_len(&tuple, &offsets)?;
        if values.len() != len || stderr.len() != len {
            return Err(Error::GridMismatch(format!(
                "data set needs {len} values, got {} values and {} errors",
                values.len(),
                stderr.len()
            )));
        }
        if values.iter().chain(&stderr).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data values"));
        }
        Ok(DataSet { tuple, offsets, values, stderr, count, seed, support_radius })
    }

    pub fn order(&self) -> usize {
        self.tuple.order()
    }

    pub fn dim(&self) -> usize {
        self.tuple.dim()
    }

    /// Axes per slot, `n - 1`.
    pub fn slot_axes(&self) -> usize {
        self.dim() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offset coordinates of flat index `flat`, all slots concatenated.
    pub fn coords(&self, mut flat: usize, out: &mut [f64]) {
        let m = self.slot_axes();
        for j in (0..self.order()).rev() {
            let g = self.offsets[j];
            for a in (0..m).rev() {
                out[j * m + a] = g.coord(flat % g.points);
                flat /= g.points;
            }
        }
    }

    /// Multilinear interpolation at concatenated offset coordinates; `None`
    /// if any coordinate falls outside its grid.
    pub fn evaluate_coords(&self, s: &[f64]) -> Option<f64> {
        let m = self.slot_axes();
        let axes = self.order() * m;
        debug_assert_eq!(s.len(), axes);
        if axes > 16 {
            return None;
        }
        let mut base = 0usize;
        let mut fracs = [0.0f64; 16];
        let mut strides = [0usize; 16];
        let mut stride = 1usize;
        for ax in (0..axes).rev() {
            let g = self.offsets[ax / m];
            let (i0, f) = crate::grid::axis_stencil(s[ax], g.extent, 1.0 / g.spacing(), g.points)?;
            base += i0 * stride;
            fracs[ax] = f;
            strides[ax] = stride;
            stride *= g.points;
        }
        if axes == 2 {
            let v = &self.values;
            let (fx, fy, sx, sy) = (fracs[0], fracs[1], strides[0], strides[1]);
            return Some(
                (1.0 - fx) * ((1.0 - fy) * v[base] + fy * v[base + sy])
                    + fx * ((1.0 - fy) * v[base + sx] + fy * v[base + sx + sy]),
            );
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << axes) {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..axes {
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
        Some(acc)
    }

    /// `D^k` at raw points `x_j ∈ R^n`; each is reduced to its tangent offset.
    pub fn evaluate_points(&self, points: &[Vec<f64>]) -> Option<f64> {
        let bases: Vec<Vec<Vec<f64>>> = self.tuple.directions().iter().map(tangent_basis).collect();
        let s: Vec<f64> = points.iter().zip(&bases).flat_map(|(x, b)| b.iter().map(move |v| dot(x, v))).collect();
        self.evaluate_coords(&s)
    }

    /// `a·self + b·other` on identical layouts; standard errors add in quadrature.
    pub fn combine(&self, a: f64, other: &DataSet, b: f64) -> Result<DataSet> {
        if self.tuple != other.tuple || self.offsets != other.offsets {
            return Err(Error::GridMismatch("data sets differ in tuple or offset grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        let stderr = self.stderr.iter().zip(&other.stderr).map(|(x, y)| (a * x).hypot(b * y)).collect();
        DataSet::new(
            self.tuple.clone(),
            self.offsets.clone(),
            values,
            stderr,
            self.count.max(other.count),
            self.seed,
            self.support_radius.max(other.support_radius),
        )
    }

    /// CSV with one column per offset coordinate, then value and standard error.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.order() > 2 {
            return Err(Error::param("k", "CSV export is limited to k <= 2"));
        }
        let m = self.slot_axes();
        let axes = self.order() * m;
        let mut header: Vec<String> =
            (0..self.order()).flat_map(|j| (0..m).map(move |a| format!("y{}_{}", j + 1, a))).collect();
        header.push("value".into());
        header.push("stderr".into());
        writeln!(out, "{}", header.join(","))?;
        let mut s = vec![0.0; axes];
        for i in 0..self.len() {
            self.coords(i, &mut s);
            let row: Vec<String> =
                s.iter().chain([&self.values[i], &self.stderr[i]]).map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn shape_len(tuple: &DirectionTuple, offsets: &[OffsetGrid]) -> Result<usize> {
    if tuple.dim() < 2 {
        return Err(Error::param("dim", "tangent-plane data needs n >= 2"));
    }
    if offsets.len() != tuple.order() {
        return Err(Error::GridMismatch(format!("{} offset grids for {} slots", offsets.len(), tuple.order())));
    }
    let axes = tuple.order() * (tuple.dim() - 1);
    if axes > 16 {
        return Err(Error::param("k", "at most 16 offset axes are supported"));
    }
    let len = offsets.iter().map(|g| g.len(tuple.dim() - 1) as f64).product::<f64>();
    if len > 4.0e8 {
        return Err(Error::param("offset_points", "data set too large"));
    }
    Ok(len as usize)
}

/// Offsets `y = Σ_a s_a b_a` for every node of a slot grid.
fn slot_offsets(theta: &Direction, grid: OffsetGrid) -> Vec<Vec<f64>> {
    let basis = tangent_basis(theta);
    let n = theta.dim();
    let m = n - 1;
    (0..grid.len(m))
        .map(|mut flat| {
            let mut y = vec![0.0; n];
            for a in (0..m).rev() {
                let s = grid.coord(flat % grid.points);
                flat /= grid.points;
                y.iter_mut().zip(&basis[a]).for_each(|(yi, bi)| *yi += s * bi);
            }
            y
        })
        .collect()
}

/// Jump amplitudes `½ ∫ V_i` of every sample over a slot grid, sample-major.
#[derive(Debug)]
pub struct Projections {
    pub samples: usize,
    pub points: usize,
    pub values: Vec<f64>,
}

pub fn jump_projections(ensemble: &Ensemble, samples: Range<usize>, theta: &Direction, grid: OffsetGrid) -> Result<Projections> {
    if samples.end > ensemble.count() || samples.is_empty() {
        return Err(Error::param("count", format!("sample range {samples:?} not within 1..={}", ensemble.count())));
    }
    if theta.dim() != ensemble.dim() {
        return Err(Error::GridMismatch("direction and ensemble differ in dimension".into()));
    }
    let offsets = slot_offsets(theta, grid);
    let points = offsets.len();
    let rows: Vec<Vec<f64>> = ensemble.samples[samples.clone()]
        .par_iter()
        .map(|p| {
            offsets
                .iter()
                .map(|y| {
                    let r = p.interpolant_radius();
                    let c2 = r * r - dot(y, y);
                    if c2 <= 0.0 {
                        return 0.0;
                    }
                    0.5 * line_on(p.grid(), y, theta.as_slice(), c2.sqrt())
                })
                .collect()
        })
        .collect();
    Ok(Projections { samples: samples.len(), points, values: rows.concat() })
}

#[inline]
fn line_on(grid: &crate::grid::Grid, y: &[f64], theta: &[f64], c: f64) -> f64 {
    let n = y.len();
    let mut z = [0.0f64; 16];
    chord_sum(c, 0.5 * grid.spacing(), f64::INFINITY, |t| {
        for a in 0..n {
            z[a] = y[a] + t * theta[a];
        }
        grid.interpolate(&z[..n])
    })
}

/// Empirical mean and standard error of `∏_j P_j` over samples.
fn tensor_moments(slots: &[&Projections]) -> (Vec<f64>, Vec<f64>) {
    let n = slots[0].samples;
    let first = slots[0];
    let rest_len: usize = slots[1..].iter().map(|p| p.points).product();
    let mut sum = DMatrix::<f64>::zeros(first.points, rest_len);
    let mut sum_sq = DMatrix::<f64>::zeros(first.points, rest_len);
    const BLOCK: usize = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let rows = end - start;
        let a = DMatrix::from_fn(rows, first.points, |i, s| first.values[(start + i) * first.points + s]);
        let q = DMatrix::from_fn(rows, rest_len, |i, mut r| {
            let mut v = 1.0;
            for p in slots[1..].iter().rev() {
                v *= p.values[(start + i) * p.points + r % p.points];
                r /= p.points;
            }
            v
        });
        sum += a.transpose() * &q;
        sum_sq += a.map(|v| v * v).transpose() * q.map(|v| v * v);
        start = end;
    }
    let inv = 1.0 / n as f64;
    let mut mean = vec![0.0; first.points * rest_len];
    let mut se = vec![0.0; first.points * rest_len];
    for s in 0..first.points {
        for r in 0..rest_len {
            let m = sum[(s, r)] * inv;
            let idx = s * rest_len + r;
            mean[idx] = m;
            if n > 1 {
                let var = ((sum_sq[(s, r)] * inv - m * m) * n as f64 / (n - 1) as f64).max(0.0);
                se[idx] = (var * inv).sqrt();
            }
        }
    }
    (mean, se)
}

/// `D^k` as the empirical mean over the first `count` realisations of the
/// product of jump amplitudes.
pub fn synthesize_data(ensemble: &Ensemble, tuple: &DirectionTuple, offsets: &[OffsetGrid], count: usize) -> Result<DataSet> {
    if count == 0 {
        return Err(Error::EmptyEnsemble);
    }
    synthesize_range(ensemble, tuple, offsets, 0..count)
}

fn synthesize_range(ensemble: &Ensemble, tuple: &DirectionTuple, offsets: &[OffsetGrid], samples: Range<usize>) -> Result<DataSet> {
    shape_len(tuple, offsets)?;
    warn_uncovered(offsets, ensemble.support_radius());
    let projections: Vec<Projections> = tuple
        .directions()
        .iter()
        .zip(offsets)
        .map(|(theta, &g)| jump_projections(ensemble, samples.clone(), theta, g))
        .collect::<Result<_>>()?;
    let refs: Vec<&Projections> = projections.iter().collect();
    let (values, stderr) = tensor_moments(&refs);
    DataSet::new(
        tuple.clone(),
        offsets.to_vec(),
        values,
        stderr,
        samples.len() as u64,
        ensemble.seed,
        interpolant_radius(ensemble),
    )
}

fn interpolant_radius(ensemble: &Ensemble) -> f64 {
    ensemble.samples.iter().map(|s| s.interpolant_radius()).fold(0.0, f64::max)
}

fn warn_uncovered(offsets: &[OffsetGrid], radius: f64) {
    if offsets.iter().any(|g| g.extent < radius) {
        warn!("offset grid does not cover the support shadow of radius {radius:.4}");
    }
}

/// Brute-force `D^k = 2^{-k} ∫ M^k` over the product of lines through the
/// tangent points, on the same line lattice as [`synthesize_data`].
pub fn oracle_data_from_moment(moment: &MomentGrid, tuple: &DirectionTuple, offsets: &[OffsetGrid]) -> Result<DataSet> {
    let k = moment.order;
    let n = moment.slot_dim;
    if tuple.order() != k || tuple.dim() != n {
        return Err(Error::GridMismatch(format!(
            "moment of order {k} in R^{n} cannot feed a tuple of order {} in R^{}",
            tuple.order(),
            tuple.dim()
        )));
    }
    let len = shape_len(tuple, offsets)?;
    let h = moment.grid.spacing();
    let radius = moment.support_radius + h * (n as f64).sqrt();
    let slot_points: Vec<Vec<Vec<f64>>> =
        tuple.directions().iter().zip(offsets).map(|(t, &g)| slot_offsets(t, g)).collect();
    let thetas: Vec<&[f64]> = tuple.directions().iter().map(|d| d.as_slice()).collect();
    let scale = 0.5f64.powi(k as i32);
    let values: Vec<f64> = (0..len)
        .into_par_iter()
        .map(|mut flat| {
            let mut ys: Vec<&[f64]> = vec![&[]; k];
            for j in (0..k).rev() {
                let l = slot_points[j].len();
                ys[j] = &slot_points[j][flat % l];
                flat /= l;
            }
            // per-slot midpoint nodes and weights on the shared lattice
            let mut nodes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(k);
            for y in &ys {
                let c2 = radius * radius - dot(y, y);
                if c2 <= 0.0 {
                    return 0.0;
                }
                let weights = chord_cells(c2.sqrt(), 0.5 * h);
                nodes.push(weights);
            }
            let mut z = vec![0.0; n * k];
            let mut idx = vec![0usize; k];
            let mut acc = 0.0;
            'outer: loop {
                let mut w = 1.0;
                for j in 0..k {
                    let (t, dt) = nodes[j][idx[j]];
                    w *= dt;
                    for a in 0..n {
                        z[j * n + a] = ys[j][a] + t * thetas[j][a];
                    }
                }
                acc += w * moment.grid.interpolate(&z);
                for j in (0..k).rev() {
                    idx[j] += 1;
                    if idx[j] < nodes[j].len() {
                        continue 'outer;
                    }
                    idx[j] = 0;
                }
                break;
            }
            scale * acc
        })
        .collect();
    DataSet::new(tuple.clone(), offsets.to_vec(), values, vec![0.0; len], 0, 0, radius)
}

/// Normalised polynomial bump `φ_ε(x) = ε^{-n} c (1 - |x/ε|²)⁴₊`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mollifier {
    pub epsilon: f64,
    pub dim: usize,
}

impl Mollifier {
    pub fn new(epsilon: f64, dim: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        Ok(Mollifier { epsilon, dim })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let s2 = x.iter().map(|v| v * v).sum::<f64>() / (self.epsilon * self.epsilon);
        crate::numeric::bump(s2) / (bump_mass(self.dim) * self.epsilon.powi(self.dim as i32))
    }

    /// Density on a tangent plane of `∫ φ_ε(y + tθ) dt`; radial in `|y|`.
    ///
    /// Integrating `(1 - u² - t²)⁴` over `t` gives `(1 - u²)^{9/2} · 256/315`.
    pub fn marginal(&self, radius: f64) -> f64 {
        let u2 = (radius / self.epsilon).powi(2);
        if u2 >= 1.0 {
            return 0.0;
        }
        let m = (self.dim - 1) as i32;
        (1.0 - u2).powf(4.5) * (256.0 / 315.0) / (bump_mass(self.dim) * self.epsilon.powi(m))
    }
}

/// Per-slot convolution of the data with the tangent-plane marginal of
/// `φ_ε`. Stencil weights are renormalised to sum to one and indices are
/// clamped at the grid edge, so constants pass through unchanged.
pub fn mollify_data(data: &DataSet, moll: &Mollifier) -> Result<DataSet> {
    if moll.dim != data.dim() {
        return Err(Error::GridMismatch("mollifier dimension differs from data dimension".into()));
    }
    let m = data.slot_axes();
    let mut values = data.values.clone();
    let mut stderr = data.stderr.clone();
    let k = data.order();
    for j in 0..k {
        let g = data.offsets[j];
        if moll.epsilon >= g.extent {
            return Err(Error::param("epsilon", format!("width {} exceeds the offset extent {}", moll.epsilon, g.extent)));
        }
        let h = g.spacing();
        if moll.epsilon <= h {
            warn!("mollifier width {} is below the offset spacing {h}; slot {j} left unchanged", moll.epsilon);
            continue;
        }
        let stencil = marginal_stencil(moll, h, m);
        // layout: [outer][slot j block][inner]
        let block = g.len(m);
        let inner: usize = (j + 1..k).map(|i| data.offsets[i].len(m)).product();
        let outer = values.len() / (block * inner);
        for buf in [&mut values, &mut stderr] {
            let src = buf.clone();
            buf.par_chunks_mut(block * inner).enumerate().for_each(|(o, chunk)| {
                debug_assert!(o < outer);
                let base = o * block * inner;
                let mut idx = vec![0usize; m];
                for b in 0..block {
                    let mut rem = b;
                    for a in (0..m).rev() {
                        idx[a] = rem % g.points;
                        rem /= g.points;
                    }
                    for i in 0..inner {
                        let mut terms = Vec::with_capacity(stencil.len());
                        for (shift, w) in &stencil {
                            let mut flat = 0usize;
                            for a in 0..m {
                                let p = (idx[a] as i64 + shift[a]).clamp(0, g.points as i64 - 1) as usize;
                                flat = flat * g.points + p;
                            }
                            terms.push(w * src[base + flat * inner + i]);
                        }
                        chunk[b * inner + i] = pairwise_sum(&terms);
                    }
                }
            });
        }
    }
    DataSet::new(
        data.tuple.clone(),
        data.offsets.clone(),
        values,
        stderr,
        data.count,
        data.seed,
        data.support_radius + moll.epsilon,
    )
}

fn marginal_stencil(moll: &Mollifier, h: f64, axes: usize) -> Vec<(Vec<i64>, f64)> {
    let reach = (moll.epsilon / h).floor() as i64;
    let side = (2 * reach + 1) as usize;
    let mut out = Vec::new();
    for flat in 0..side.pow(axes as u32) {
        let mut rem = flat;
        let mut shift = vec![0i64; axes];
        for a in (0..axes).rev() {
            shift[a] = (rem % side) as i64 - reach;
            rem /= side;
        }
        let r = shift.iter().map(|&s| (s as f64 * h).powi(2)).sum::<f64>().sqrt();
        let w = moll.marginal(r);
        if w > 0.0 {
            out.push((shift, w));
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    out.iter_mut().for_each(|(_, w)| *w /= total);
    out
}

/// Supplies data sets on demand for sinogram assembly.
pub trait DataSource: Sync {
    fn order(&self) -> usize;
    fn dim(&self) -> usize;
    /// Radius beyond which every slot's data vanishes.
    fn support_radius(&self) -> f64;
    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>>;
    /// Hint listing every distinct slot direction that will be requested.
    fn prepare(&self, _directions: &[Direction]) -> Result<()> {
        Ok(())
    }
}

impl<S: DataSource + ?Sized> DataSource for &S {
    fn order(&self) -> usize {
        (**self).order()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn support_radius(&self) -> f64 {
        (**self).support_radius()
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        (**self).dataset(tuple)
    }

    fn prepare(&self, directions: &[Direction]) -> Result<()> {
        (**self).prepare(directions)
    }
}

/// Data synthesised from an ensemble, caching per-direction projections.
pub struct EnsembleSource<'a> {
    ensemble: &'a Ensemble,
    order: usize,
    samples: Range<usize>,
    offsets: OffsetGrid,
    cache: Mutex<HashMap<Vec<u64>, Arc<Projections>>>,
}

impl<'a> EnsembleSource<'a> {
    pub fn new(ensemble: &'a Ensemble, order: usize, count: usize, offsets: OffsetGrid) -> Result<Self> {
        EnsembleSource::with_samples(ensemble, order, 0..count, offsets)
    }

    /// Restricts the source to a sub-range of realisations (used for batch means).
    pub fn with_samples(ensemble: &'a Ensemble, order: usize, samples: Range<usize>, offsets: OffsetGrid) -> Result<Self> {
        if samples.is_empty() || samples.end > ensemble.count() {
            return Err(Error::param("count", format!("sample range {samples:?} not within 1..={}", ensemble.count())));
        }
        if order == 0 {
            return Err(Error::param("k", "must be positive"));
        }
        warn_uncovered(&[offsets], ensemble.support_radius());
        Ok(EnsembleSource { ensemble, order, samples, offsets, cache: Mutex::new(HashMap::new()) })
    }

    fn projections(&self, theta: &Direction) -> Result<Arc<Projections>> {
        let key: Vec<u64> = theta.as_slice().iter().map(|c| c.to_bits()).collect();
        if let Some(p) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(jump_projections(self.ensemble, self.samples.clone(), theta, self.offsets)?);
        self.cache.lock().expect("cache lock").insert(key, p.clone());
        Ok(p)
    }
}

impl DataSource for EnsembleSource<'_> {
    fn order(&self) -> usize {
        self.order
    }

    fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    fn support_radius(&self) -> f64 {
        interpolant_radius(self.ensemble)
    }

    fn prepare(&self, directions: &[Direction]) -> Result<()> {
        let fresh: Vec<&Direction> = {
            let cache = self.cache.lock().expect("cache lock");
            directions
                .iter()
                .filter(|d| !cache.contains_key(&d.as_slice().iter().map(|c| c.to_bits()).collect::<Vec<_>>()))
                .collect()
        };
        let computed: Vec<(Vec<u64>, Arc<Projections>)> = fresh
            .into_iter()
            .map(|d| {
                let p = jump_projections(self.ensemble, self.samples.clone(), d, self.offsets)?;
                Ok((d.as_slice().iter().map(|c| c.to_bits()).collect(), Arc::new(p)))
            })
            .collect::<Result<_>>()?;
        self.cache.lock().expect("cache lock").extend(computed);
        Ok(())
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        if tuple.order() != self.order {
            return Err(Error::GridMismatch(format!("source has order {}, tuple has {}", self.order, tuple.order())));
        }
        let projections: Vec<Arc<Projections>> =
            tuple.directions().iter().map(|d| self.projections(d)).collect::<Result<_>>()?;
        let refs: Vec<&Projections> = projections.iter().map(|p| p.as_ref()).collect();
        let (values, stderr) = tensor_moments(&refs);
        Ok(Arc::new(DataSet::new(
            tuple.clone(),
            vec![self.offsets; self.order],
            values,
            stderr,
            self.samples.len() as u64,
            self.ensemble.seed,
            self.support_radius(),
        )?))
    }
}

/// Brute-force data from a moment map.
pub struct MomentSource<'a> {
    pub moment: &'a MomentGrid,
    pub offsets: OffsetGrid,
}

impl DataSource for MomentSource<'_> {
    fn order(&self) -> usize {
        self.moment.order
    }

    fn dim(&self) -> usize {
        self.moment.slot_dim
    }

    fn support_radius(&self) -> f64 {
        self.moment.support_radius + self.moment.grid.spacing() * (self.moment.slot_dim as f64).sqrt()
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        Ok(Arc::new(oracle_data_from_moment(self.moment, tuple, &vec![self.offsets; self.moment.order])?))
    }
}

/// Wraps a source and mollifies every data set it returns.
pub struct MollifiedSource<S> {
    pub inner: S,
    pub mollifier: Mollifier,
}

impl<S: DataSource> DataSource for MollifiedSource<S> {
    fn order(&self) -> usize {
        self.inner.order()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn support_radius(&self) -> f64 {
        self.inner.support_radius() + self.mollifier.epsilon
    }

    fn prepare(&self, directions: &[Direction]) -> Result<()> {
        self.inner.prepare(directions)
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        Ok(Arc::new(mollify_data(&*self.inner.dataset(tuple)?, &self.mollifier)?))
    }
}

/// Linear combination of two sources, `a·S₁ + b·S₂`.
pub struct CombinedSource<A, B> {
    pub first: A,
    pub a: f64,
    pub second: B,
    pub b: f64,
}

impl<A: DataSource, B: DataSource> DataSource for CombinedSource<A, B> {
    fn order(&self) -> usize {
        self.first.order()
    }

    fn dim(&self) -> usize {
        self.first.dim()
    }

    fn support_radius(&self) -> f64 {
        self.first.support_radius().max(self.second.support_radius())
    }

    fn prepare(&self, directions: &[Direction]) -> Result<()> {
        self.first.prepare(directions)?;
        self.second.prepare(directions)
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        Ok(Arc::new(self.first.dataset(tuple)?.combine(self.a, &*self.second.dataset(tuple)?, self.b)?))
    }
}

/// Data sets held in memory (e.g. loaded from files), looked up by tuple.
#[derive(Default)]
pub struct DataBank {
    sets: HashMap<Vec<u64>, Arc<DataSet>>,
    order: usize,
    dim: usize,
    support: f64,
}

impl DataBank {
    pub fn new() -> Self {
        DataBank::default()
    }

    pub fn insert(&mut self, set: DataSet) -> Result<()> {
        if !self.sets.is_empty() && (set.order() != self.order || set.dim() != self.dim) {
            return Err(Error::GridMismatch("bank mixes orders or dimensions".into()));
        }
        self.order = set.order();
        self.dim = set.dim();
        self.support = self.support.max(set.support_radius);
        self.sets.insert(set.tuple.key(), Arc::new(set));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Data sets in a deterministic order.
    pub fn sets(&self) -> Vec<Arc<DataSet>> {
        let mut keys: Vec<&Vec<u64>> = self.sets.keys().collect();
        keys.sort();
        keys.into_iter().map(|k| self.sets[k].clone()).collect()
    }
}

impl DataSource for DataBank {
    fn order(&self) -> usize {
        self.order
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn support_radius(&self) -> f64 {
        self.support
    }

    fn dataset(&self, tuple: &DirectionTuple) -> Result<Arc<DataSet>> {
        self.sets
            .get(&tuple.key())
            .cloned()
            .ok_or_else(|| Error::param("tuple", "no stored data set for this direction tuple"))
    }
}

/// Batch data synthesis for all tuples, in parallel.
pub fn synthesize_many(ensemble: &Ensemble, tuples: &[DirectionTuple], offsets: OffsetGrid, count: usize) -> Result<Vec<DataSet>> {
    if tuples.is_empty() {
        return Ok(Vec::new());
    }
    let source = EnsembleSource::new(ensemble, tuples[0].order(), count, offsets)?;
    let mut all: Vec<Direction> = Vec::new();
    for t in tuples {
        for d in t.distinct() {
            if !all.contains(d) {
                all.push(d.clone());
            }
        }
    }
    source.prepare(&all)?;
    tuples.iter().map(|t| source.dataset(t).map(|d| (*d).clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_models::{empirical_moment, sample_finite_rank_field, CoefficientLaw, FieldModel, Mode, PotentialGrid};
    use crate::grid::{Geometry, Grid};
    use crate::phantoms;
    use crate::xray::xray_transform;

    fn repeated(p: PotentialGrid, copies: usize) -> Ensemble {
        let g = *p.grid().geometry();
        let model = FieldModel::finite_rank(
            g,
            vec![Mode { shape: p.grid().clone(), law: CoefficientLaw::Constant(1.0) }],
            p.support_radius() * 0.8,
            p.support_radius() * 0.2 + 1e-9,
        )
        .unwrap();
        Ensemble::from_samples(Arc::new(model), 0, vec![p; copies]).unwrap()
    }

    fn bump_ensemble() -> Ensemble {
        let g = Geometry::new(2, 1.0, 41).unwrap();
        repeated(phantoms::smooth_bump(g, &[0.1, -0.1], 0.5, 1.0).unwrap(), 3)
    }

    #[test]
    fn tangent_reduce_examples() {
        let th = Direction::normalized(&[1.0, 2.0, 2.0]).unwrap();
        assert!(tangent_reduce(th.as_slice(), &th).offset.iter().all(|v| v.abs() < 1e-15));
        let x = tangent_basis(&th)[0].clone();
        let y = tangent_reduce(&x, &th).offset;
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-15));
        let z = [0.3, -0.2, 0.5];
        let shifted: Vec<f64> = z.iter().zip(th.as_slice()).map(|(a, t)| a + 5.0 * t).collect();
        let (a, b) = (tangent_reduce(&z, &th).offset, tangent_reduce(&shifted, &th).offset);
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-14));
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        for v in [[1.0, 0.0, 0.0], [0.3, -0.8, 0.1], [0.0, 0.0, -1.0]] {
            let th = Direction::normalized(&v).unwrap();
            let b = tangent_basis(&th);
            for (i, bi) in b.iter().enumerate() {
                assert!(dot(bi, th.as_slice()).abs() < 1e-15);
                for (j, bj) in b.iter().enumerate() {
                    assert!((dot(bi, bj) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn tuple_merges_coincident_directions() {
        let a = Direction::planar(0.3);
        let b = Direction::planar(0.3 + 1e-12);
        let c = Direction::planar(2.0);
        let t = DirectionTuple::new(vec![a.clone(), c, b]).unwrap();
        assert_eq!(t.distinct().len(), 2);
        assert_eq!(t.index_map(), &[0, 1, 0]);
        assert_eq!(t.directions()[2], a);
    }

    #[test]
    fn zero_ensemble_gives_zero_data() {
        let g = Geometry::new(2, 1.0, 21).unwrap();
        let e = repeated(PotentialGrid::zeros(g, 0.5).unwrap(), 2);
        let t = DirectionTuple::new(vec![Direction::planar(0.1), Direction::planar(1.0)]).unwrap();
        let off = OffsetGrid::new(0.8, 9).unwrap();
        let d = synthesize_data(&e, &t, &[off, off], 2).unwrap();
        assert!(d.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_k1_is_half_xray() {
        let e = bump_ensemble();
        let th = Direction::planar(0.7);
        let off = OffsetGrid::new(0.9, 19).unwrap();
        let d = synthesize_data(&e, &DirectionTuple::new(vec![th.clone()]).unwrap(), &[off], 3).unwrap();
        let b = tangent_basis(&th)[0].clone();
        for i in 0..off.points {
            let y: Vec<f64> = b.iter().map(|v| v * off.coord(i)).collect();
            let x = xray_transform(&e.samples[0], &y, &th).unwrap();
            assert!((d.values[i] - 0.5 * x).abs() < 1e-14);
            // identical samples: only the E[X²] - E[X]² cancellation floor remains
            assert!(d.stderr[i] <= 1e-7 * d.values[i].abs());
        }
    }

    #[test]
    fn rademacher_mode_factorises() {
        let g = Geometry::new(2, 1.0, 31).unwrap();
        let psi = Grid::from_fn(g, |x| crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.36));
        let model = FieldModel::finite_rank(g, vec![Mode { shape: psi.clone(), law: CoefficientLaw::Rademacher }], 0.5, 0.2)
            .unwrap();
        let e = sample_finite_rank_field(&model, 3, 400).unwrap();
        let (t1, t2) = (Direction::planar(0.2), Direction::planar(1.3));
        let off = OffsetGrid::new(0.8, 9).unwrap();
        let d2 = synthesize_data(&e, &DirectionTuple::new(vec![t1.clone(), t2.clone()]).unwrap(), &[off, off], 400).unwrap();
        let p = PotentialGrid::new(psi, 0.7).unwrap();
        let (b1, b2) = (tangent_basis(&t1)[0].clone(), tangent_basis(&t2)[0].clone());
        for i in 0..9 {
            for j in 0..9 {
                let y1: Vec<f64> = b1.iter().map(|v| v * off.coord(i)).collect();
                let y2: Vec<f64> = b2.iter().map(|v| v * off.coord(j)).collect();
                let expect = 0.25 * xray_transform(&p, &y1, &t1).unwrap() * xray_transform(&p, &y2, &t2).unwrap();
                // A² = 1 exactly, so the factorisation holds sample by sample
                assert!((d2.values[i * 9 + j] - expect).abs() < 1e-12);
            }
        }
        let d1 = synthesize_data(&e, &DirectionTuple::new(vec![t1]).unwrap(), &[off], 400).unwrap();
        for (v, se) in d1.values.iter().zip(&d1.stderr) {
            assert!(v.abs() <= 4.0 * se + 1e-15);
        }
    }

    #[test]
    fn oracle_agrees_with_synthesis() {
        let g = Geometry::new(2, 1.0, 17).unwrap();
        let psi = Grid::from_fn(g, |x| crate::numeric::bump(((x[0] - 0.1).powi(2) + x[1] * x[1]) / 0.3));
        let phi = Grid::from_fn(g, |x| x[0] * crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.5));
        let model = FieldModel::finite_rank(
            g,
            vec![
                Mode { shape: psi, law: CoefficientLaw::Uniform { lo: -1.0, hi: 2.0 } },
                Mode { shape: phi, law: CoefficientLaw::Rademacher },
            ],
            0.6,
            0.2,
        )
        .unwrap();
        let e = sample_finite_rank_field(&model, 5, 50).unwrap();
        let off = OffsetGrid::new(0.9, 7).unwrap();
        let tuple = DirectionTuple::new(vec![Direction::planar(0.4), Direction::planar(-1.1)]).unwrap();
        let d = synthesize_data(&e, &tuple, &[off, off], 50).unwrap();
        let m = empirical_moment(&e, 2).unwrap();
        let o = oracle_data_from_moment(&m, &tuple, &[off, off]).unwrap();
        let scale = d.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in d.values.iter().zip(&o.values) {
            assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn mollifier_mass_and_marginal() {
        for n in 2..=3 {
            let m = Mollifier::new(0.3, n).unwrap();
            // marginal integrates to one over the (n-1)-plane
            let steps = 4000;
            let dr = 0.3 / steps as f64;
            let mass: f64 = (0..steps)
                .map(|i| {
                    let r = (i as f64 + 0.5) * dr;
                    let shell = if n == 2 { 2.0 } else { 2.0 * std::f64::consts::PI * r };
                    m.marginal(r) * shell * dr
                })
                .sum();
            assert!((mass - 1.0).abs() < 1e-6, "n={n}: {mass}");
        }
        let m = Mollifier::new(0.25, 2).unwrap();
        let g = Geometry::new(2, 0.3, 301).unwrap();
        let total = Grid::from_fn(g, |x| m.eval(x)).integral();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mollify_preserves_constants() {
        let tuple = DirectionTuple::new(vec![Direction::planar(0.0), Direction::planar(1.0)]).unwrap();
        let off = OffsetGrid::new(1.0, 21).unwrap();
        let len = 21 * 21;
        let d = DataSet::new(tuple, vec![off, off], vec![2.5; len], vec![0.0; len], 1, 0, 0.5).unwrap();
        let out = mollify_data(&d, &Mollifier::new(0.35, 2).unwrap()).unwrap();
        assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn evaluation_is_shift_invariant() {
        let e = bump_ensemble();
        let th = Direction::planar(0.9);
        let off = OffsetGrid::new(0.9, 31).unwrap();
        let d = synthesize_data(&e, &DirectionTuple::new(vec![th.clone()]).unwrap(), &[off], 1).unwrap();
        let x = vec![0.21, -0.13];
        let moved: Vec<f64> = x.iter().zip(th.as_slice()).map(|(a, t)| a + 3.0 * t).collect();
        let reduced = tangent_reduce(&x, &th).offset;
        let (a, b, c) = (d.evaluate_points(&[x]).unwrap(), d.evaluate_points(&[moved]).unwrap(), d.evaluate_points(&[reduced]).unwrap());
        assert!((a - b).abs() <= 1e-13 * a.abs() && (a - c).abs() <= 1e-13 * a.abs());
    }
}
