use std::sync::Arc;

use super::{generate, realisation_rng, Ensemble, FieldModel, KernelKind, PotentialGrid};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Draws `count` realisations `Σ_i A_i ψ_i` with independent coefficients.
pub fn sample_finite_rank_field(model: &FieldModel, seed: u64, count: usize) -> Result<Ensemble> {
    if model.kernel != KernelKind::FiniteRank {
        return Err(Error::param("kernel_kind", "finite-rank sampling needs a finite-rank model"));
    }
    model.validate()?;
    let g = *model.geometry();
    let support = model.support_radius();
    let samples = generate(count, |i| {
        let mut rng = realisation_rng(seed, i);
        let mut values = vec![0.0; g.len()];
        for mode in &model.modes {
            let a = mode.law.sample(&mut rng);
            for (v, psi) in values.iter_mut().zip(mode.shape.values()) {
                *v += a * psi;
            }
        }
        PotentialGrid::new(Grid::from_values(g, values)?, support)
    })?;
    Ok(Ensemble { model: Arc::new(model.clone()), seed, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_models::{CoefficientLaw, Mode};
    use crate::grid::Geometry;

    fn bump(g: Geometry, cx: f64) -> Grid {
        Grid::from_fn(g, |x| {
            let r2 = (x[0] - cx).powi(2) + x[1] * x[1];
            crate::numeric::bump(r2 / 0.16)
        })
    }

    fn model(laws: &[(f64, CoefficientLaw)]) -> FieldModel {
        let g = Geometry::new(2, 1.5, 31).unwrap();
        let modes = laws.iter().map(|&(cx, law)| Mode { shape: bump(g, cx), law }).collect();
        FieldModel::finite_rank(g, modes, 0.9, 0.3).unwrap()
    }

    #[test]
    fn constant_coefficient_reproduces_mode() {
        let m = model(&[(0.0, CoefficientLaw::Constant(1.0))]);
        let e = sample_finite_rank_field(&m, 1, 3).unwrap();
        for s in &e.samples {
            assert_eq!(s.grid().values(), m.modes[0].shape.values());
        }
    }

    #[test]
    fn rademacher_mode_is_odd_symmetric() {
        let m = model(&[(0.0, CoefficientLaw::Rademacher)]);
        let e = sample_finite_rank_field(&m, 7, 4000).unwrap();
        let centre = 15 * 31 + 15;
        let psi = m.modes[0].shape.values()[centre];
        let mean: f64 = e.samples.iter().map(|s| s.grid().values()[centre]).sum::<f64>() / 4000.0;
        // each draw is ±psi: std error psi/sqrt(n)
        assert!(mean.abs() <= 4.0 * psi / (4000f64).sqrt());
        for s in &e.samples {
            let v = s.grid().values()[centre];
            assert!(v == psi || v == -psi);
        }
    }

    #[test]
    fn independent_rademacher_cross_moment() {
        let m = model(&[(-0.3, CoefficientLaw::Rademacher), (0.3, CoefficientLaw::Rademacher)]);
        let n = 5000;
        // recover coefficients at the mode centres; the bumps do not overlap there
        let e = sample_finite_rank_field(&m, 21, n).unwrap();
        let p1 = [-0.3, 0.0];
        let p2 = [0.3, 0.0];
        let s1 = m.modes[0].shape.interpolate(&p1);
        let s2 = m.modes[1].shape.interpolate(&p2);
        let cross: f64 = e
            .samples
            .iter()
            .map(|s| (s.value_at(&p1) / s1).round() * (s.value_at(&p2) / s2).round())
            .sum::<f64>()
            / n as f64;
        // A1 A2 is itself Rademacher: standard error 1/sqrt(n)
        assert!(cross.abs() <= 4.0 / (n as f64).sqrt(), "cross = {cross}");
    }

    #[test]
    fn mode_outside_support_is_rejected() {
        let g = Geometry::new(2, 1.5, 31).unwrap();
        let wide = Grid::from_fn(g, |x| crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 2.0));
        let err = FieldModel::finite_rank(g, vec![Mode { shape: wide, law: CoefficientLaw::Rademacher }], 0.9, 0.3);
        assert!(matches!(err, Err(Error::ModeSupportViolation { index: 0 })));
    }

    #[test]
    fn unbounded_law_is_rejected() {
        let g = Geometry::new(2, 1.5, 31).unwrap();
        let err = FieldModel::finite_rank(g, vec![Mode { shape: bump(g, 0.0), law: CoefficientLaw::Cauchy { scale: 1.0 } }], 0.9, 0.3);
        assert!(matches!(err, Err(Error::UnboundedLaw(_))));
    }
}
