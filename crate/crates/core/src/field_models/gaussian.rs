use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use super::{generate, realisation_rng, Ensemble, FieldModel, KernelKind, PotentialGrid};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::{fft_nd, next_pow2};

/// Circulant-embedding sampler for a stationary kernel on a fixed grid.
///
/// The covariance is embedded in a periodic box of `embed` points per axis,
/// whose eigenvalues are the FFT of the wrapped kernel. The box is doubled
/// until the spectrum is non-negative up to round-off.
#[derive(Clone, Debug)]
pub struct CirculantSampler {
    dim: usize,
    points: usize,
    embed: usize,
    sqrt_eigs: Vec<f64>,
    /// Sum of negative eigenvalues that were clipped, relative to the largest.
    pub clipped: f64,
}

impl CirculantSampler {
    pub fn new(model: &FieldModel) -> Result<Self> {
        let g = *model.geometry();
        let h = g.spacing();
        let mut embed = next_pow2(2 * (g.points - 1));
        for attempt in 0..4 {
            let total = embed.pow(g.dim as u32);
            let mut c = vec![Complex64::new(0.0, 0.0); total];
            let mut idx = vec![0usize; g.dim];
            for (flat, slot) in c.iter_mut().enumerate() {
                let mut f = flat;
                for a in (0..g.dim).rev() {
                    idx[a] = f % embed;
                    f /= embed;
                }
                let r2: f64 = idx
                    .iter()
                    .map(|&i| {
                        let d = i.min(embed - i) as f64 * h;
                        d * d
                    })
                    .sum();
                *slot = Complex64::new(model.covariance_at(r2.sqrt()), 0.0);
            }
            fft_nd(&mut c, g.dim, embed, false);
            let max = c.iter().map(|z| z.re).fold(0.0_f64, f64::max);
            let neg: f64 = c.iter().map(|z| (-z.re).max(0.0)).sum();
            let min = c.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
            let tol = 1e-8 * max.max(f64::MIN_POSITIVE);
            if min >= -tol || attempt == 3 {
                let clipped = if max > 0.0 { neg / max } else { 0.0 };
                if clipped > 1e-3 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "circulant embedding has negative spectral mass {clipped:.3e} after padding to {embed}"
                    )));
                }
                if min < -tol {
                    log::warn!("circulant embedding clipped negative spectral mass {clipped:.3e}");
                }
                let scale = 1.0 / total as f64;
                let sqrt_eigs = c.iter().map(|z| (z.re.max(0.0) * scale).sqrt()).collect();
                return Ok(CirculantSampler { dim: g.dim, points: g.points, embed, sqrt_eigs, clipped });
            }
            embed *= 2;
        }
        unreachable!()
    }

    pub fn embedding_size(&self) -> usize {
        self.embed
    }

    /// One zero-mean stationary realisation on the grid nodes.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut w: Vec<Complex64> = self
            .sqrt_eigs
            .iter()
            .map(|&s| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                Complex64::new(s * a, s * b)
            })
            .collect();
        fft_nd(&mut w, self.dim, self.embed, false);
        let m = self.points;
        let mut out = Vec::with_capacity(m.pow(self.dim as u32));
        let mut idx = vec![0usize; self.dim];
        for flat in 0..m.pow(self.dim as u32) {
            let mut f = flat;
            for a in (0..self.dim).rev() {
                idx[a] = f % m;
                f /= m;
            }
            let e = idx.iter().fold(0usize, |acc, &i| acc * self.embed + i);
            out.push(w[e].re);
        }
        out
    }
}

/// Draws `count` tapered Gaussian realisations `t·(m + Z)`.
pub fn sample_gaussian_field(model: &FieldModel, seed: u64, count: usize) -> Result<Ensemble> {
    if !matches!(model.kernel, KernelKind::SquaredExponential | KernelKind::Matern52) {
        return Err(Error::param("kernel_kind", "Gaussian sampling needs a stationary kernel"));
    }
    model.validate()?;
    let g = *model.geometry();
    let h = g.spacing();
    if h > model.length_scale / 4.0 {
        return Err(Error::ResolutionTooCoarse { spacing: h, limit: model.length_scale / 4.0 });
    }
    let sampler = CirculantSampler::new(model)?;
    let taper = model.taper();
    let weights: Vec<f64> = Grid::from_fn(g, |x| taper.eval(x)).into_values();
    let support = model.support_radius();
    let samples = generate(count, |i| {
        let mut rng = realisation_rng(seed, i);
        let z = sampler.sample(&mut rng);
        let values = weights
            .iter()
            .zip(model.mean.values())
            .zip(z)
            .map(|((t, m), z)| if *t == 0.0 { 0.0 } else { t * (m + z) })
            .collect();
        PotentialGrid::new(Grid::from_values(g, values)?, support)
    })?;
    Ok(Ensemble { model: Arc::new(model.clone()), seed, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn model(kernel: KernelKind, variance: f64) -> FieldModel {
        let g = Geometry::new(2, 1.5, 25).unwrap();
        let mean = Grid::from_fn(g, |x| 0.3 + 0.2 * x[0]);
        FieldModel::gaussian(mean, kernel, 0.6, variance, 0.8, 0.4).unwrap()
    }

    #[test]
    fn zero_variance_gives_tapered_mean() {
        let m = model(KernelKind::SquaredExponential, 0.0);
        let e = sample_gaussian_field(&m, 3, 4).unwrap();
        let expected = Grid::from_fn(*m.geometry(), |x| m.taper().eval(x) * (0.3 + 0.2 * x[0]));
        for s in &e.samples {
            for (a, b) in s.grid().values().iter().zip(expected.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = model(KernelKind::Matern52, 1.0);
        let a = sample_gaussian_field(&m, 11, 5).unwrap();
        let b = sample_gaussian_field(&m, 11, 5).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = sample_gaussian_field(&m, 12, 5).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn samples_vanish_outside_support() {
        let m = model(KernelKind::SquaredExponential, 1.0);
        let e = sample_gaussian_field(&m, 5, 3).unwrap();
        let g = *m.geometry();
        let mut x = [0.0; 2];
        for s in &e.samples {
            for (i, v) in s.grid().values().iter().enumerate() {
                g.node(i, &mut x);
                if crate::field_models::norm(&x) > m.support_radius() {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let g = Geometry::new(2, 1.5, 9).unwrap();
        let m = FieldModel::gaussian(Grid::zeros(g), KernelKind::SquaredExponential, 0.5, 1.0, 0.8, 0.4).unwrap();
        assert!(matches!(sample_gaussian_field(&m, 0, 2), Err(Error::ResolutionTooCoarse { .. })));
    }

    #[test]
    fn embedding_spectrum_reproduces_kernel() {
        // Empirical variance at the centre over many draws ~ C(0).
        let m = model(KernelKind::SquaredExponential, 2.0);
        let s = CirculantSampler::new(&m).unwrap();
        assert!(s.clipped < 1e-6);
        let mut acc = 0.0;
        let n = 4000;
        for i in 0..n {
            let mut rng = realisation_rng(99, i);
            let z = s.sample(&mut rng);
            acc += z[12 * 25 + 12].powi(2);
        }
        let var = acc / n as f64;
        // standard error of a variance estimate: C(0) sqrt(2/n)
        assert!((var - 2.0).abs() < 4.0 * 2.0 * (2.0 / n as f64).sqrt(), "var = {var}");
    }
}
