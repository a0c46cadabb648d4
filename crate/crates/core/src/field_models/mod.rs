//! Random potentials with compact support and their exact moment maps.
//!
//! Two families are provided. Stationary Gaussian fields (squared-exponential
//! or Matérn-5/2 covariance) are synthesised on the grid by circulant
//! embedding and multiplied by a smooth radial taper so that every sample is
//! supported in the ball of radius `cutoff_radius + taper_width`. Finite-rank
//! fields `Σ A_i ψ_i` combine fixed mode shapes with independent scalar
//! coefficients and are used as non-Gaussian test ensembles.

mod finite_rank;
mod gaussian;
mod h2;
mod moments;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid};

pub use finite_rank::sample_finite_rank_field;
pub use gaussian::{sample_gaussian_field, CirculantSampler};
pub use h2::h2_norm_proxy;
pub use moments::{empirical_moment, true_moment};

/// One realisation of the potential on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialGrid {
    grid: Grid,
    support_radius: f64,
}

impl PotentialGrid {
    /// Wraps `grid`, checking that it vanishes at every node farther than
    /// `support_radius` from the origin.
    pub fn new(grid: Grid, support_radius: f64) -> Result<Self> {
        if !(support_radius > 0.0 && support_radius < grid.extent()) {
            return Err(Error::CutoffExceedsBox { radius: support_radius, extent: grid.extent() });
        }
        grid.check_finite()?;
        let g = *grid.geometry();
        let mut x = vec![0.0; g.dim];
        for (i, v) in grid.values().iter().enumerate() {
            if *v != 0.0 {
                g.node(i, &mut x);
                if norm(&x) > support_radius {
                    return Err(Error::param("support_radius", "potential has values outside the support ball"));
                }
            }
        }
        Ok(PotentialGrid { grid, support_radius })
    }

    /// Samples `f` at the nodes and zeroes every node outside the ball.
    pub fn from_fn(geometry: Geometry, support_radius: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let grid = Grid::from_fn(geometry, |x| if norm(x) > support_radius { 0.0 } else { f(x) });
        PotentialGrid::new(grid, support_radius)
    }

    pub fn zeros(geometry: Geometry, support_radius: f64) -> Result<Self> {
        PotentialGrid::new(Grid::zeros(geometry), support_radius)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Radius of the ball outside which the multilinear interpolant vanishes.
    pub fn interpolant_radius(&self) -> f64 {
        self.support_radius + self.grid.spacing() * (self.dim() as f64).sqrt()
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(x)
    }

    pub fn scaled(&self, factor: f64) -> PotentialGrid {
        PotentialGrid { grid: self.grid.scaled(factor), support_radius: self.support_radius }
    }

    /// `a·self + b·other` on a common geometry.
    pub fn combine(&self, a: f64, other: &PotentialGrid, b: f64) -> Result<PotentialGrid> {
        if !self.grid.geometry().approx_eq(other.grid.geometry()) {
            return Err(Error::GridMismatch("potentials live on different grids".into()));
        }
        let values = self.grid.values().iter().zip(other.grid.values()).map(|(x, y)| a * x + b * y).collect();
        Ok(PotentialGrid {
            grid: Grid::from_values(*self.grid.geometry(), values)?,
            support_radius: self.support_radius.max(other.support_radius),
        })
    }
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Radial taper: 1 inside `inner`, `(1 - ((r - inner)/width)^2)^4` across the
/// transition shell, 0 beyond `inner + width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taper {
    pub inner: f64,
    pub width: f64,
}

impl Taper {
    #[inline]
    pub fn at_radius(&self, r: f64) -> f64 {
        if r <= self.inner {
            1.0
        } else {
            let u = (r - self.inner) / self.width;
            crate::numeric::bump(u * u)
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.at_radius(norm(x))
    }

    pub fn outer(&self) -> f64 {
        self.inner + self.width
    }
}

/// Scalar law of a finite-rank coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoefficientLaw {
    /// ±1 with probability ½ each.
    Rademacher,
    Uniform { lo: f64, hi: f64 },
    Constant(f64),
    Normal { mean: f64, std: f64 },
    /// Declared for completeness; rejected because only finitely many moments exist.
    StudentT { dof: f64 },
    Cauchy { scale: f64 },
}

impl CoefficientLaw {
    pub fn name(&self) -> &'static str {
        match self {
            CoefficientLaw::Rademacher => "rademacher",
            CoefficientLaw::Uniform { .. } => "uniform",
            CoefficientLaw::Constant(_) => "constant",
            CoefficientLaw::Normal { .. } => "normal",
            CoefficientLaw::StudentT { .. } => "student-t",
            CoefficientLaw::Cauchy { .. } => "cauchy",
        }
    }

    /// Laws whose exponential moments are finite, i.e. admissible coefficients.
    pub fn validate(&self) -> Result<()> {
        match *self {
            CoefficientLaw::Rademacher => Ok(()),
            CoefficientLaw::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            CoefficientLaw::Constant(c) if c.is_finite() => Ok(()),
            CoefficientLaw::Normal { mean, std } if mean.is_finite() && std.is_finite() && std >= 0.0 => Ok(()),
            CoefficientLaw::StudentT { .. } | CoefficientLaw::Cauchy { .. } => {
                Err(Error::UnboundedLaw(self.name().to_string()))
            }
            _ => Err(Error::param("law", format!("invalid parameters for {} law", self.name()))),
        }
    }

    /// Raw moment `E[A^p]`.
    pub fn raw_moment(&self, p: usize) -> f64 {
        match *self {
            CoefficientLaw::Rademacher => {
                if p.is_multiple_of(2) {
                    1.0
                } else {
                    0.0
                }
            }
            CoefficientLaw::Uniform { lo, hi } => {
                let q = (p + 1) as i32;
                (hi.powi(q) - lo.powi(q)) / (q as f64 * (hi - lo))
            }
            CoefficientLaw::Constant(c) => c.powi(p as i32),
            CoefficientLaw::Normal { mean, std } => {
                // m_p = μ m_{p-1} + (p-1) σ² m_{p-2}
                let (mut prev, mut cur) = (1.0, mean);
                if p == 0 {
                    return 1.0;
                }
                for q in 2..=p {
                    let next = mean * cur + (q - 1) as f64 * std * std * prev;
                    prev = cur;
                    cur = next;
                }
                cur
            }
            CoefficientLaw::StudentT { .. } | CoefficientLaw::Cauchy { .. } => f64::NAN,
        }
    }

    pub(crate) fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        match *self {
            CoefficientLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            CoefficientLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CoefficientLaw::Constant(c) => c,
            CoefficientLaw::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            CoefficientLaw::StudentT { .. } | CoefficientLaw::Cauchy { .. } => f64::NAN,
        }
    }
}

/// One term `A ψ` of a finite-rank field.
#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub shape: Grid,
    pub law: CoefficientLaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    SquaredExponential,
    Matern52,
    FiniteRank,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::SquaredExponential => "squared-exponential",
            KernelKind::Matern52 => "matern-5/2",
            KernelKind::FiniteRank => "finite-rank",
        }
    }
}

/// Statistical description of a random potential.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    /// Mean field before tapering; also fixes the sampling grid.
    pub mean: Grid,
    pub kernel: KernelKind,
    pub length_scale: f64,
    pub variance: f64,
    pub cutoff_radius: f64,
    pub taper_width: f64,
    pub modes: Vec<Mode>,
}

impl FieldModel {
    pub fn gaussian(
        mean: Grid,
        kernel: KernelKind,
        length_scale: f64,
        variance: f64,
        cutoff_radius: f64,
        taper_width: f64,
    ) -> Result<Self> {
        if kernel == KernelKind::FiniteRank {
            return Err(Error::param("kernel_kind", "use FieldModel::finite_rank for finite-rank models"));
        }
        let model = FieldModel { mean, kernel, length_scale, variance, cutoff_radius, taper_width, modes: Vec::new() };
        model.validate()?;
        Ok(model)
    }

    pub fn finite_rank(geometry: Geometry, modes: Vec<Mode>, cutoff_radius: f64, taper_width: f64) -> Result<Self> {
        let model = FieldModel {
            mean: Grid::zeros(geometry),
            kernel: KernelKind::FiniteRank,
            length_scale: 1.0,
            variance: 0.0,
            cutoff_radius,
            taper_width,
            modes,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn geometry(&self) -> &Geometry {
        self.mean.geometry()
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn taper(&self) -> Taper {
        Taper { inner: self.cutoff_radius, width: self.taper_width }
    }

    /// Radius of the ball that contains every realisation.
    pub fn support_radius(&self) -> f64 {
        self.cutoff_radius + self.taper_width
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_radius > 0.0 && self.cutoff_radius.is_finite()) {
            return Err(Error::param("cutoff_radius", "must be positive"));
        }
        if !(self.taper_width > 0.0 && self.taper_width.is_finite()) {
            return Err(Error::param("taper_width", "must be positive"));
        }
        if self.support_radius() >= self.mean.extent() {
            return Err(Error::CutoffExceedsBox { radius: self.support_radius(), extent: self.mean.extent() });
        }
        self.mean.check_finite()?;
        match self.kernel {
            KernelKind::SquaredExponential | KernelKind::Matern52 => {
                if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
                    return Err(Error::NotPositiveDefinite(format!("length_scale = {}", self.length_scale)));
                }
                if !(self.variance >= 0.0 && self.variance.is_finite()) {
                    return Err(Error::NotPositiveDefinite(format!("variance = {}", self.variance)));
                }
            }
            KernelKind::FiniteRank => {
                if self.modes.is_empty() {
                    return Err(Error::param("modes", "finite-rank model needs at least one mode"));
                }
                let r = self.support_radius();
                for (index, mode) in self.modes.iter().enumerate() {
                    mode.law.validate()?;
                    if !mode.shape.geometry().approx_eq(self.geometry()) {
                        return Err(Error::GridMismatch(format!("mode {index} is not on the model grid")));
                    }
                    mode.shape.check_finite()?;
                    let g = *mode.shape.geometry();
                    let mut x = vec![0.0; g.dim];
                    for (i, v) in mode.shape.values().iter().enumerate() {
                        if *v != 0.0 {
                            g.node(i, &mut x);
                            if norm(&x) > r {
                                return Err(Error::ModeSupportViolation { index });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Stationary covariance `C(r)` as a function of distance.
    pub fn covariance_at(&self, r: f64) -> f64 {
        let l = self.length_scale;
        match self.kernel {
            KernelKind::SquaredExponential => self.variance * (-0.5 * (r / l).powi(2)).exp(),
            KernelKind::Matern52 => {
                let s = 5.0_f64.sqrt() * r / l;
                self.variance * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelKind::FiniteRank => f64::NAN,
        }
    }

    /// Tapered covariance `t(x) t(y) C(x - y)` of a Gaussian model.
    pub fn tapered_covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        let t = self.taper();
        let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        t.eval(x) * t.eval(y) * self.covariance_at(d)
    }

    /// Tapered mean `t(x) m(x)`.
    pub fn tapered_mean(&self, x: &[f64]) -> f64 {
        self.taper().eval(x) * self.mean.interpolate(x)
    }
}

/// A finite seeded collection of realisations.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub model: Arc<FieldModel>,
    pub seed: u64,
    pub samples: Vec<PotentialGrid>,
}

impl Ensemble {
    /// Wraps explicitly given realisations (e.g. a deterministic phantom repeated).
    pub fn from_samples(model: Arc<FieldModel>, seed: u64, samples: Vec<PotentialGrid>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        Ok(Ensemble { model, seed, samples })
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn geometry(&self) -> &Geometry {
        self.samples[0].grid().geometry()
    }

    pub fn dim(&self) -> usize {
        self.geometry().dim
    }

    pub fn support_radius(&self) -> f64 {
        self.samples.iter().map(|s| s.support_radius()).fold(0.0, f64::max)
    }

    /// The first `count` realisations.
    pub fn truncated(&self, count: usize) -> Result<Ensemble> {
        if count == 0 || count > self.count() {
            return Err(Error::param("count", format!("must be in 1..={}", self.count())));
        }
        Ok(Ensemble { model: self.model.clone(), seed: self.seed, samples: self.samples[..count].to_vec() })
    }
}

/// Independent RNG stream for realisation `index`.
pub(crate) fn realisation_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub(crate) fn generate<F>(count: usize, f: F) -> Result<Vec<PotentialGrid>>
where
    F: Fn(usize) -> Result<PotentialGrid> + Sync + Send,
{
    if count == 0 {
        return Err(Error::param("count", "must be positive"));
    }
    (0..count).into_par_iter().map(f).collect()
}
