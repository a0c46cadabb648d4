//! Recovering laws from moment maps and comparing laws of two ensembles.
//!
//! For Gaussian fields the first two moments fix the law; this module cuts
//! the covariance out of reconstructed `M¹`, `M²` at a set of probe points and
//! projects it onto the PSD cone. For general laws, finite-dimensional
//! marginals are compared through the pairings `⟨M^k, φ_{j₁}⊗…⊗φ_{j_k}⟩` with
//! an orthonormal grid basis. Finite data can only separate laws, never
//! certify equality, so the comparison verdict is either "distinguished at
//! order k" or "indistinguishable up to the tested order".

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_models::{h2_norm_proxy, Ensemble};
use crate::grid::{Geometry, Grid};
use crate::moment::MomentGrid;

/// `C(x, y)` on the square of a slot grid (slot-major axes, like `M²`).
#[derive(Clone, Debug)]
pub struct CovarianceGrid {
    pub grid: Grid,
    pub slot_dim: usize,
}

impl CovarianceGrid {
    pub fn at(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut z = Vec::with_capacity(2 * self.slot_dim);
        z.extend_from_slice(x);
        z.extend_from_slice(y);
        self.grid.interpolate(&z)
    }
}

fn check_pair(m1: &MomentGrid, m2: &MomentGrid) -> Result<()> {
    if m1.order != 1 || m2.order != 2 {
        return Err(Error::GridMismatch(format!("expected orders 1 and 2, got {} and {}", m1.order, m2.order)));
    }
    if m1.slot_dim != m2.slot_dim || !m1.slot_geometry().approx_eq(&m2.slot_geometry()) {
        return Err(Error::GridMismatch("M¹ and M² live on different slot grids".into()));
    }
    Ok(())
}

/// `C = M² − M¹ ⊗ M¹`.
pub fn covariance_from_moments(m1: &MomentGrid, m2: &MomentGrid) -> Result<CovarianceGrid> {
    check_pair(m1, m2)?;
    let mean = m1.grid.values();
    let s = mean.len();
    let values: Vec<f64> = m2
        .grid
        .values()
        .par_iter()
        .enumerate()
        .map(|(flat, v)| v - mean[flat / s] * mean[flat % s])
        .collect();
    Ok(CovarianceGrid { grid: Grid::from_values(*m2.grid.geometry(), values)?, slot_dim: m1.slot_dim })
}

/// Projection of a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues. Returns the projected matrix and the clipped mass `Σ|λ₋|`.
pub fn psd_project(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped = 0.0;
    let lambda = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped += -l;
            0.0
        } else {
            l
        }
    });
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&lambda) * q.transpose();
    // exact symmetry of the reassembled matrix
    out = (&out + out.transpose()) * 0.5;
    (out, clipped)
}

/// Gaussian law cut out of `M¹`, `M²` at probe points.
#[derive(Clone, Debug)]
pub struct GaussianLawEstimate {
    pub mean: Grid,
    pub probes: Vec<Vec<f64>>,
    pub probe_mean: Vec<f64>,
    /// Symmetrised covariance before projection.
    pub raw_covariance: DMatrix<f64>,
    /// PSD projection of `raw_covariance`.
    pub covariance: DMatrix<f64>,
    pub clipped_mass: f64,
    /// Clipped mass exceeds 10% of the trace.
    pub unreliable: bool,
    pub full: CovarianceGrid,
}

impl GaussianLawEstimate {
    /// Draws `count` probe vectors from `N(probe_mean, covariance)`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let m = self.probes.len();
        let eig = SymmetricEigen::new(self.covariance.clone());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                (0..m).map(|i| self.probe_mean[i] + (0..m).map(|j| root[(i, j)] * z[j]).sum::<f64>()).collect()
            })
            .collect()
    }

    pub fn write_matrix_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.probes.len();
        let header: Vec<String> = (0..m).map(|j| format!("p{j}")).collect();
        writeln!(out, "probe,{}", header.join(","))?;
        for i in 0..m {
            let row: Vec<String> = (0..m).map(|j| format!("{:.12e}", self.covariance[(i, j)])).collect();
            writeln!(out, "p{i},{}", row.join(","))?;
        }
        Ok(())
    }
}

pub const CLIP_LIMIT: f64 = 0.1;

pub fn gaussian_law_from_moments(m1: &MomentGrid, m2: &MomentGrid, probes: &[Vec<f64>]) -> Result<GaussianLawEstimate> {
    check_pair(m1, m2)?;
    let n = m1.slot_dim;
    for (i, p) in probes.iter().enumerate() {
        if p.len() != n {
            return Err(Error::param("probe_points", format!("probe {i} has dimension {}", p.len())));
        }
        let r = p.iter().map(|c| c * c).sum::<f64>().sqrt();
        if r > m1.support_radius.max(m2.support_radius) || p.iter().any(|c| c.abs() > m1.grid.extent()) {
            return Err(Error::param("probe_points", format!("probe {i} lies outside the support ball")));
        }
    }
    let full = covariance_from_moments(m1, m2)?;
    let m = probes.len();
    let probe_mean: Vec<f64> = probes.iter().map(|p| m1.evaluate(p)).collect();
    let raw = DMatrix::from_fn(m, m, |i, j| full.at(&probes[i], &probes[j]));
    let raw = (&raw + raw.transpose()) * 0.5;
    let (covariance, clipped_mass) = psd_project(&raw);
    let trace = covariance.trace();
    let unreliable = clipped_mass > CLIP_LIMIT * trace.max(0.0) && clipped_mass > 0.0;
    Ok(GaussianLawEstimate {
        mean: m1.grid.clone(),
        probes: probes.to_vec(),
        probe_mean,
        raw_covariance: raw,
        covariance,
        clipped_mass,
        unreliable,
        full,
    })
}

/// Sample variances of resampled probe values against the estimate.
#[derive(Clone, Debug)]
pub struct ResamplingCheck {
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
    /// Monte-Carlo standard error of each sample variance.
    pub stderr: Vec<f64>,
    pub max_z: f64,
}

pub fn resampling_check(est: &GaussianLawEstimate, count: usize, seed: u64) -> Result<ResamplingCheck> {
    if count < 2 {
        return Err(Error::param("count", "resampling needs at least two draws"));
    }
    let draws = est.sample(count, seed);
    let m = est.probes.len();
    let nf = count as f64;
    let mut expected = Vec::with_capacity(m);
    let mut observed = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    let mut max_z: f64 = 0.0;
    for i in 0..m {
        let mean = draws.iter().map(|d| d[i]).sum::<f64>() / nf;
        let var = draws.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let sigma2 = est.covariance[(i, i)];
        // var(s²) = 2σ⁴/(N-1) for Gaussian draws
        let se = sigma2 * (2.0 / (nf - 1.0)).sqrt();
        let z = if se > 0.0 { (var - sigma2).abs() / se } else if var == sigma2 { 0.0 } else { f64::INFINITY };
        max_z = max_z.max(z);
        expected.push(sigma2);
        observed.push(var);
        stderr.push(se);
    }
    Ok(ResamplingCheck { expected, observed, stderr, max_z })
}

/// Orthonormal functions on a slot grid under `⟨f, g⟩ = h^n Σ f g`.
#[derive(Clone, Debug)]
pub struct GridBasis {
    pub kind: String,
    pub geometry: Geometry,
    pub functions: Vec<Grid>,
}

pub const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

impl GridBasis {
    /// Validates orthonormality (Gram deviation ≤ 1e-8).
    pub fn new(kind: impl Into<String>, geometry: Geometry, functions: Vec<Grid>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::param("basis", "empty basis"));
        }
        for f in &functions {
            if !f.geometry().approx_eq(&geometry) {
                return Err(Error::GridMismatch("basis function on a different grid".into()));
            }
        }
        let basis = GridBasis { kind: kind.into(), geometry, functions };
        let dev = basis.gram_deviation();
        if dev > ORTHONORMAL_TOLERANCE {
            return Err(Error::NotOrthonormal(dev));
        }
        Ok(basis)
    }

    /// Tensor products of orthonormal discrete cosines `cos(π m (i + ½) / P)`,
    /// ordered by total degree, first `count` of them.
    pub fn dct(geometry: Geometry, count: usize) -> Result<Self> {
        let p = geometry.points;
        let n = geometry.dim;
        let per_axis = p.min(count.max(1));
        let mut indices: Vec<Vec<usize>> = (0..per_axis.pow(n as u32))
            .map(|flat| {
                let mut m = vec![0usize; n];
                let mut rem = flat;
                for a in (0..n).rev() {
                    m[a] = rem % per_axis;
                    rem /= per_axis;
                }
                m
            })
            .collect();
        indices.sort_by_key(|m| (m.iter().sum::<usize>(), m.clone()));
        if count > indices.len() {
            return Err(Error::param("basis_size", format!("at most {} functions fit this grid", indices.len())));
        }
        indices.truncate(count);
        let scale = geometry.spacing().powf(-(n as f64) / 2.0);
        let cosine = |m: usize, i: usize| -> f64 {
            let alpha = if m == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
            alpha * (PI * m as f64 * (i as f64 + 0.5) / p as f64).cos()
        };
        let mut multi = vec![0usize; n];
        let functions = indices
            .iter()
            .map(|m| {
                let values = (0..geometry.len())
                    .map(|flat| {
                        geometry.unravel(flat, &mut multi);
                        scale * multi.iter().zip(m).map(|(&i, &mm)| cosine(mm, i)).product::<f64>()
                    })
                    .collect();
                Grid::from_values(geometry, values)
            })
            .collect::<Result<Vec<_>>>()?;
        GridBasis::new("dct", geometry, functions)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn gram_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.functions.iter().enumerate() {
            for (j, b) in self.functions.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        worst
    }

    /// `N × J` matrix of `h^n φ_j(x_i)` (the quadrature-weighted basis).
    fn weighted(&self, j_max: usize) -> Vec<f64> {
        let w = self.geometry.cell_volume();
        let len = self.geometry.len();
        let mut out = vec![0.0; len * j_max];
        for (j, f) in self.functions[..j_max].iter().enumerate() {
            for (i, v) in f.values().iter().enumerate() {
                out[i * j_max + j] = w * v;
            }
        }
        out
    }
}

/// Pairings `⟨M^k, φ_{j₁}⊗…⊗φ_{j_k}⟩` for all `j ∈ [0, J)^k`, with the last index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTensor {
    pub order: usize,
    pub values: Vec<f64>,
    /// Monte-Carlo standard errors for empirical tables.
    pub stderr: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentProjectionTable {
    pub basis_kind: String,
    pub j_max: usize,
    pub tensors: Vec<ProjectionTensor>,
}

impl MomentProjectionTable {
    pub fn tensor(&self, k: usize) -> Option<&ProjectionTensor> {
        self.tensors.iter().find(|t| t.order == k)
    }

    /// Flat index of `(j₁, …, j_k)`.
    pub fn index(&self, js: &[usize]) -> usize {
        js.iter().fold(0, |acc, &j| acc * self.j_max + j)
    }
}

fn check_basis(basis: &GridBasis, j_max: usize) -> Result<()> {
    if j_max == 0 || j_max > basis.len() {
        return Err(Error::param("j_max", format!("must be in 1..={}", basis.len())));
    }
    let dev = basis.gram_deviation();
    if dev > ORTHONORMAL_TOLERANCE {
        return Err(Error::NotOrthonormal(dev));
    }
    Ok(())
}

/// Tensor quadrature of a moment map against the basis, one slot at a time.
pub fn moment_projections(m: &MomentGrid, basis: &GridBasis, j_max: usize) -> Result<MomentProjectionTable> {
    check_basis(basis, j_max)?;
    if !m.slot_geometry().approx_eq(&basis.geometry) {
        return Err(Error::GridMismatch("moment slots and basis live on different grids".into()));
    }
    let b = basis.weighted(j_max);
    let s = basis.geometry.len();
    let k = m.order;
    // shape: (outer, s, inner); contract the middle axis, last slot first
    let mut current = m.grid.values().to_vec();
    let mut inner = 1usize;
    for slot in (0..k).rev() {
        let outer = s.pow(slot as u32);
        let next: Vec<f64> = (0..outer)
            .into_par_iter()
            .flat_map_iter(|o| {
                let block = &current[o * s * inner..(o + 1) * s * inner];
                let b = &b;
                let mut out = vec![0.0; j_max * inner];
                for i in 0..s {
                    let row = &block[i * inner..(i + 1) * inner];
                    for j in 0..j_max {
                        let w = b[i * j_max + j];
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut out[j * inner..(j + 1) * inner];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += w * v;
                        }
                    }
                }
                out
            })
            .collect();
        current = next;
        inner *= j_max;
    }
    Ok(MomentProjectionTable {
        basis_kind: basis.kind.clone(),
        j_max,
        tensors: vec![ProjectionTensor { order: k, values: current, stderr: None }],
    })
}

/// `⟨V_i, φ_j⟩` for every realisation, row-major `count × J`.
pub fn sample_coefficients(ensemble: &Ensemble, basis: &GridBasis, j_max: usize) -> Result<Vec<f64>> {
    check_basis(basis, j_max)?;
    if !ensemble.geometry().approx_eq(&basis.geometry) {
        return Err(Error::GridMismatch("ensemble and basis live on different grids".into()));
    }
    let b = basis.weighted(j_max);
    Ok(ensemble
        .samples
        .par_iter()
        .flat_map_iter(|s| {
            let v = s.grid().values();
            let b = &b;
            (0..j_max).map(move |j| v.iter().enumerate().map(|(i, x)| x * b[i * j_max + j]).sum::<f64>())
        })
        .collect())
}

/// Empirical tables `mean_i ∏_l ⟨V_i, φ_{j_l}⟩` for `k = 1..=k_max`, with
/// standard errors of the mean.
pub fn empirical_projections(ensemble: &Ensemble, basis: &GridBasis, k_max: usize, j_max: usize) -> Result<MomentProjectionTable> {
    if k_max == 0 {
        return Err(Error::param("k_max", "must be positive"));
    }
    let coeffs = sample_coefficients(ensemble, basis, j_max)?;
    let count = ensemble.count();
    let nf = count as f64;
    let tensors = (1..=k_max)
        .map(|k| {
            let entries = j_max.pow(k as u32);
            let (values, stderr): (Vec<f64>, Vec<f64>) = (0..entries)
                .into_par_iter()
                .map(|flat| {
                    let mut js = vec![0usize; k];
                    let mut rem = flat;
                    for l in (0..k).rev() {
                        js[l] = rem % j_max;
                        rem /= j_max;
                    }
                    let prods: Vec<f64> = (0..count)
                        .map(|i| js.iter().map(|&j| coeffs[i * j_max + j]).product())
                        .collect();
                    // shifted sums keep identical samples exact
                    let pivot = prods[0];
                    let mean = pivot + prods.iter().map(|p| p - pivot).sum::<f64>() / nf;
                    let var = if count > 1 {
                        prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (nf - 1.0)
                    } else {
                        0.0
                    };
                    (mean, (var / nf).sqrt())
                })
                .unzip();
            ProjectionTensor { order: k, values, stderr: Some(stderr) }
        })
        .collect();
    Ok(MomentProjectionTable { basis_kind: basis.kind.clone(), j_max, tensors })
}

/// Result of probing `E exp(a ‖V‖_{H²})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpMomentEstimate {
    pub a: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Some term overflowed: evidence against finiteness at this `a`.
    pub overflow: bool,
}

pub fn exp_moment_estimate(ensemble: &Ensemble, a: f64) -> Result<ExpMomentEstimate> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::param("a", "must be positive"));
    }
    let values: Vec<f64> = ensemble.samples.par_iter().map(|s| (a * h2_norm_proxy(s)).exp()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Ok(ExpMomentEstimate { a, mean: f64::INFINITY, stderr: f64::INFINITY, overflow: true });
    }
    let n = values.len();
    let nf = n as f64;
    let pivot = values[0];
    let shifted_sum: f64 = values.iter().map(|v| v - pivot).sum();
    let mean = pivot + shifted_sum / nf;
    // jackknife over leave-one-out means
    let stderr = if n > 1 {
        let loo: Vec<f64> = values.iter().map(|v| pivot + (shifted_sum - (v - pivot)) / (nf - 1.0)).collect();
        let loo_mean = loo.iter().sum::<f64>() / nf;
        ((nf - 1.0) / nf * loo.iter().map(|l| (l - loo_mean).powi(2)).sum::<f64>()).sqrt()
    } else {
        0.0
    };
    Ok(ExpMomentEstimate { a, mean, stderr, overflow: false })
}

/// Difference statistics at one order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderComparison {
    pub order: usize,
    pub max_abs_diff: f64,
    /// Combined standard error at the entry with the largest difference.
    pub stderr_at_max: f64,
    /// Largest `|diff| / combined SE` over all entries. The combined SE
    /// includes [`ROUNDING_FLOOR`].
    pub max_z: f64,
    pub diffs: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Indistinguishable { up_to: usize },
    Distinguished { order: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LawComparison {
    pub basis_kind: String,
    pub j_max: usize,
    pub threshold: f64,
    pub orders: Vec<OrderComparison>,
    pub verdict: Verdict,
}

pub const DISTINGUISH_Z: f64 = 4.0;

/// Relative rounding floor added (in quadrature) to every combined standard
/// error, scaled by the largest entry of the order. Entries that vanish by
/// symmetry carry only summation noise, which would otherwise give
/// arbitrary z-scores.
pub const ROUNDING_FLOOR: f64 = 1e-9;

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Compares two ensembles through their projection tables up to `k_max`.
pub fn compare_laws(a: &Ensemble, b: &Ensemble, k_max: usize, basis: &GridBasis, j_max: usize) -> Result<LawComparison> {
    if !a.geometry().approx_eq(b.geometry()) {
        return Err(Error::GridMismatch("ensembles live on different grids".into()));
    }
    let ta = empirical_projections(a, basis, k_max, j_max)?;
    let tb = empirical_projections(b, basis, k_max, j_max)?;
    Ok(compare_tables(&ta, &tb))
}

pub fn compare_tables(ta: &MomentProjectionTable, tb: &MomentProjectionTable) -> LawComparison {
    let mut orders = Vec::new();
    let mut verdict = None;
    for (x, y) in ta.tensors.iter().zip(&tb.tensors) {
        let zeros = vec![0.0; x.values.len()];
        let sx = x.stderr.as_ref().unwrap_or(&zeros);
        let sy = y.stderr.as_ref().unwrap_or(&zeros);
        let diffs: Vec<f64> = x.values.iter().zip(&y.values).map(|(p, q)| (p - q).abs()).collect();
        let scale = x.values.iter().chain(&y.values).fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = ROUNDING_FLOOR * scale;
        let stderr: Vec<f64> = sx.iter().zip(sy).map(|(p, q)| p.hypot(*q).hypot(floor)).collect();
        let (mut max_abs_diff, mut stderr_at_max, mut max_z) = (0.0, 0.0, 0.0f64);
        for (d, s) in diffs.iter().zip(&stderr) {
            if *d > max_abs_diff {
                max_abs_diff = *d;
                stderr_at_max = *s;
            }
            max_z = max_z.max(z_score(*d, *s));
        }
        if verdict.is_none() && max_z > DISTINGUISH_Z {
            verdict = Some(Verdict::Distinguished { order: x.order });
        }
        orders.push(OrderComparison { order: x.order, max_abs_diff, stderr_at_max, max_z, diffs, stderr });
    }
    let up_to = orders.last().map_or(0, |o| o.order);
    LawComparison {
        basis_kind: ta.basis_kind.clone(),
        j_max: ta.j_max,
        threshold: DISTINGUISH_Z,
        orders,
        verdict: verdict.unwrap_or(Verdict::Indistinguishable { up_to }),
    }
}

impl LawComparison {
    pub fn verdict_text(&self) -> String {
        match self.verdict {
            Verdict::Indistinguishable { up_to } => format!("indistinguishable up to k = {up_to}"),
            Verdict::Distinguished { order } => format!("distinguished at k = {order}"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# law comparison through {} projections onto {} {} basis functions\n\
             # surrogate: finite-dimensional marginals only; equality is never certified\n",
            self.orders.len(),
            self.j_max,
            self.basis_kind
        );
        out.push_str("k,max_abs_diff,stderr_at_max,max_z\n");
        for o in &self.orders {
            out.push_str(&format!("{},{:.6e},{:.6e},{:.3}\n", o.order, o.max_abs_diff, o.stderr_at_max, o.max_z));
        }
        out.push_str(&format!("verdict: {} (threshold {} standard errors)\n", self.verdict_text(), self.threshold));
        out
    }

    /// Every entry: order, index tuple, difference, combined standard error.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,indices,abs_diff,stderr,z")?;
        for o in &self.orders {
            for (flat, (d, s)) in o.diffs.iter().zip(&o.stderr).enumerate() {
                let mut js = vec![0usize; o.order];
                let mut rem = flat;
                for l in (0..o.order).rev() {
                    js[l] = rem % self.j_max;
                    rem /= self.j_max;
                }
                let idx: Vec<String> = js.iter().map(|j| j.to_string()).collect();
                writeln!(out, "{},{},{:.10e},{:.10e},{:.4}", o.order, idx.join(":"), d, s, z_score(*d, *s))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_models::{empirical_moment, sample_finite_rank_field, true_moment, CoefficientLaw, FieldModel, KernelKind, Mode};

    fn slot() -> Geometry {
        Geometry::new(2, 1.0, 9).unwrap()
    }

    fn moment(order: usize, f: impl Fn(&[f64]) -> f64) -> MomentGrid {
        let g = slot().power(order).unwrap();
        MomentGrid::new(Grid::from_fn(g, f), order, 2, 0.0, 0.9).unwrap()
    }

    #[test]
    fn zero_mean_covariance_is_second_moment() {
        let m1 = moment(1, |_| 0.0);
        let m2 = moment(2, |x| (-(x[0] - x[2]).powi(2) - (x[1] - x[3]).powi(2)).exp());
        let c = covariance_from_moments(&m1, &m2).unwrap();
        assert_eq!(c.grid.values(), m2.grid.values());
    }

    #[test]
    fn deterministic_field_has_zero_covariance() {
        let f = |x: &[f64]| 1.0 + x[0] - 0.5 * x[1];
        let m1 = moment(1, f);
        let m2 = moment(2, |x| f(&x[..2]) * f(&x[2..]));
        let c = covariance_from_moments(&m1, &m2).unwrap();
        assert!(c.grid.max_abs() < 1e-12);
    }

    #[test]
    fn kernel_moments_give_kernel_matrix() {
        let g = Geometry::new(2, 1.5, 13).unwrap();
        let model = FieldModel::gaussian(Grid::from_fn(g, |x| 0.2 * x[0]), KernelKind::SquaredExponential, 0.6, 1.3, 0.8, 0.4).unwrap();
        let m1 = true_moment(&model, 1, &g).unwrap();
        let m2 = true_moment(&model, 2, &g.power(2).unwrap()).unwrap();
        let probes: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.25, 0.0], vec![0.0, -0.5], vec![-0.5, 0.25]];
        let est = gaussian_law_from_moments(&m1, &m2, &probes).unwrap();
        assert_eq!(est.clipped_mass, 0.0);
        assert!(!est.unreliable);
        for i in 0..4 {
            for j in 0..4 {
                let exact = model.tapered_covariance(&probes[i], &probes[j]);
                assert!((est.covariance[(i, j)] - exact).abs() < 1e-10, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_moments_give_degenerate_law() {
        let est = gaussian_law_from_moments(&moment(1, |_| 0.0), &moment(2, |_| 0.0), &[vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap();
        assert_eq!(est.covariance.abs().max(), 0.0);
        assert_eq!(est.probe_mean, vec![0.0, 0.0]);
        assert!(est.sample(3, 1).iter().all(|d| d.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn probes_outside_support_are_rejected() {
        assert!(gaussian_law_from_moments(&moment(1, |_| 0.0), &moment(2, |_| 0.0), &[vec![0.95, 0.0]]).is_err());
    }

    #[test]
    fn psd_projection_is_idempotent_and_flags_clipping() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.0, 0.9, 1.0, 0.95, 0.0, 0.95, 1.0]);
        let (p, clipped) = psd_project(&m);
        assert!(clipped > 0.0);
        let (pp, again) = psd_project(&p);
        assert!(again < 1e-12);
        assert!((&pp - &p).abs().max() < 1e-12);
        let eig = SymmetricEigen::new(p.clone());
        assert!(eig.eigenvalues.min() >= -1e-8 * eig.eigenvalues.max());
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = GridBasis::dct(slot(), 12).unwrap();
        assert_eq!(b.len(), 12);
        assert!(b.gram_deviation() < 1e-12);
        assert!(matches!(GridBasis::new("x", slot(), vec![Grid::from_fn(slot(), |_| 1.0)]), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn projection_of_rank_one_moment() {
        let g = slot();
        let psi = Grid::from_fn(g, |x| crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.64));
        let norm = psi.l2_norm();
        let hat = psi.scaled(1.0 / norm);
        let basis = GridBasis::new("custom", g, vec![hat]).unwrap();
        let psi_v = psi.values().to_vec();
        let m2 = moment(2, |_| 0.0);
        let vals: Vec<f64> = (0..m2.grid.values().len()).map(|f| psi_v[f / g.len()] * psi_v[f % g.len()]).collect();
        let m2 = MomentGrid::new(Grid::from_values(*m2.grid.geometry(), vals).unwrap(), 2, 2, 0.0, 0.9).unwrap();
        let t = moment_projections(&m2, &basis, 1).unwrap();
        assert!((t.tensors[0].values[0] - norm * norm).abs() < 1e-12 * norm * norm);
    }

    #[test]
    fn symmetric_moment_gives_symmetric_table() {
        let m2 = moment(2, |x| (-(x[0] - x[2]).powi(2) - 2.0 * (x[1] - x[3]).powi(2)).exp() * (1.0 + x[0] * x[2]));
        let basis = GridBasis::dct(slot(), 6).unwrap();
        let t = moment_projections(&m2, &basis, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (a, b) = (t.tensors[0].values[t.index(&[i, j])], t.tensors[0].values[t.index(&[j, i])]);
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = moment_projections(&moment(2, |_| 0.0), &basis, 6).unwrap();
        assert!(zero.tensors[0].values.iter().all(|v| *v == 0.0));
    }

    fn mode_model(law: CoefficientLaw) -> FieldModel {
        let g = Geometry::new(2, 1.0, 9).unwrap();
        let shape = Grid::from_fn(g, |x| crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.36) * (1.0 + x[0]));
        FieldModel::finite_rank(g, vec![Mode { shape, law }], 0.5, 0.2).unwrap()
    }

    #[test]
    fn empirical_path_commutes_with_moment_path() {
        let e = sample_finite_rank_field(&mode_model(CoefficientLaw::Uniform { lo: -1.0, hi: 2.0 }), 5, 50).unwrap();
        let basis = GridBasis::dct(*e.geometry(), 5).unwrap();
        let emp = empirical_projections(&e, &basis, 2, 5).unwrap();
        for k in 1..=2 {
            let m = empirical_moment(&e, k).unwrap();
            let t = moment_projections(&m, &basis, 5).unwrap();
            for (a, b) in t.tensors[0].values.iter().zip(&emp.tensor(k).unwrap().values) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn exp_moment_of_zero_and_fixed_ensembles() {
        let zero = sample_finite_rank_field(&mode_model(CoefficientLaw::Constant(0.0)), 1, 7).unwrap();
        let est = exp_moment_estimate(&zero, 2.0).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
        let fixed = sample_finite_rank_field(&mode_model(CoefficientLaw::Constant(0.3)), 1, 7).unwrap();
        let est = exp_moment_estimate(&fixed, 0.5).unwrap();
        assert_eq!(est.mean, (0.5 * h2_norm_proxy(&fixed.samples[0])).exp());
    }

    #[test]
    fn exp_moment_of_rademacher_mode_is_the_direct_average() {
        // ‖±ψ‖ = ‖ψ‖, so every term equals e^{a‖ψ‖}
        let e = sample_finite_rank_field(&mode_model(CoefficientLaw::Rademacher), 3, 40).unwrap();
        let psi = &e.model.modes[0].shape;
        let direct = (0.1 * h2_norm_proxy(&crate::field_models::PotentialGrid::new(psi.clone(), 0.7).unwrap())).exp();
        let est = exp_moment_estimate(&e, 0.1).unwrap();
        assert!(!est.overflow);
        assert!((est.mean - direct).abs() <= 1e-12 * direct);
        let huge = exp_moment_estimate(&e, 1e6).unwrap();
        assert!(huge.overflow && huge.mean.is_infinite());
    }

    #[test]
    fn identical_ensembles_compare_exactly_equal_and_symmetric() {
        let m = mode_model(CoefficientLaw::Normal { mean: 0.0, std: 1.0 });
        let a = sample_finite_rank_field(&m, 9, 200).unwrap();
        let b = sample_finite_rank_field(&m, 9, 200).unwrap();
        let basis = GridBasis::dct(*a.geometry(), 3).unwrap();
        let cmp = compare_laws(&a, &b, 3, &basis, 3).unwrap();
        assert!(cmp.orders.iter().all(|o| o.max_abs_diff == 0.0));
        assert_eq!(cmp.verdict, Verdict::Indistinguishable { up_to: 3 });
        let c = sample_finite_rank_field(&m, 10, 200).unwrap();
        let ab = compare_laws(&a, &c, 3, &basis, 3).unwrap();
        let ba = compare_laws(&c, &a, 3, &basis, 3).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn report_mentions_surrogate() {
        let m = mode_model(CoefficientLaw::Rademacher);
        let a = sample_finite_rank_field(&m, 1, 20).unwrap();
        let basis = GridBasis::dct(*a.geometry(), 2).unwrap();
        let cmp = compare_laws(&a, &a, 2, &basis, 2).unwrap();
        assert!(cmp.to_text().contains("equality is never certified"));
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 + 4);
    }

    #[test]
    fn rounding_residue_does_not_distinguish() {
        let table = |v: Vec<f64>, se: Vec<f64>| MomentProjectionTable {
            basis_kind: "dct".into(),
            j_max: 2,
            tensors: vec![ProjectionTensor { order: 1, values: v, stderr: Some(se) }],
        };
        let a = table(vec![1.0, 1e-18], vec![0.1, 0.0]);
        let b = table(vec![1.05, -3e-18], vec![0.1, 1e-20]);
        assert_eq!(compare_tables(&a, &b).verdict, Verdict::Indistinguishable { up_to: 1 });
        let c = table(vec![2.0, -3e-18], vec![0.1, 1e-20]);
        assert_eq!(compare_tables(&a, &c).verdict, Verdict::Distinguished { order: 1 });
    }
}
