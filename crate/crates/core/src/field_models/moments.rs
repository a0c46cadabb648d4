use rayon::prelude::*;

use super::{Ensemble, FieldModel, KernelKind};
use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid};
use crate::moment::MomentGrid;

/// All partitions of `0..k` into singletons and pairs (the Wick terms).
fn wick_partitions(k: usize) -> Vec<(Vec<usize>, Vec<(usize, usize)>)> {
    fn rec(rest: &[usize], singles: &mut Vec<usize>, pairs: &mut Vec<(usize, usize)>, out: &mut Vec<(Vec<usize>, Vec<(usize, usize)>)>) {
        let Some((&first, tail)) = rest.split_first() else {
            out.push((singles.clone(), pairs.clone()));
            return;
        };
        singles.push(first);
        rec(tail, singles, pairs, out);
        singles.pop();
        for (pos, &other) in tail.iter().enumerate() {
            let mut remaining = tail.to_vec();
            remaining.remove(pos);
            pairs.push((first, other));
            rec(&remaining, singles, pairs, out);
            pairs.pop();
        }
    }
    let idx: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    rec(&idx, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

fn slot_nodes(slot: &Geometry) -> Vec<Vec<f64>> {
    let mut x = vec![0.0; slot.dim];
    (0..slot.len())
        .map(|i| {
            slot.node(i, &mut x);
            x.clone()
        })
        .collect()
}

/// Exact moment map `E ∏ V(x_j)` of the (tapered) model on `output`, an
/// `n·k`-dimensional geometry.
pub fn true_moment(model: &FieldModel, k: usize, output: &Geometry) -> Result<MomentGrid> {
    let n = model.dim();
    if k == 0 || output.dim != n * k {
        return Err(Error::GridMismatch(format!(
            "output grid has dimension {}, order {k} moments in R^{n} need {}",
            output.dim,
            n * k
        )));
    }
    let slot = Geometry { dim: n, extent: output.extent, points: output.points };
    let nodes = slot_nodes(&slot);
    let s_len = nodes.len();

    let values: Vec<f64> = match model.kernel {
        KernelKind::SquaredExponential | KernelKind::Matern52 => {
            if k > 4 {
                return Err(Error::UnsupportedMoment { k, kernel: model.kernel.name() });
            }
            let mean: Vec<f64> = nodes.iter().map(|x| model.tapered_mean(x)).collect();
            let taper: Vec<f64> = nodes.iter().map(|x| model.taper().eval(x)).collect();
            let terms = wick_partitions(k);
            let cov = |a: usize, b: usize| -> f64 {
                if taper[a] == 0.0 || taper[b] == 0.0 {
                    return 0.0;
                }
                let d: f64 = nodes[a].iter().zip(&nodes[b]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                taper[a] * taper[b] * model.covariance_at(d)
            };
            (0..output.len())
                .into_par_iter()
                .map(|flat| {
                    let s = split_slots(flat, s_len, k);
                    terms
                        .iter()
                        .map(|(singles, pairs)| {
                            let mut p = 1.0;
                            for &i in singles {
                                p *= mean[s[i]];
                            }
                            for &(i, j) in pairs {
                                p *= cov(s[i], s[j]);
                            }
                            p
                        })
                        .sum()
                })
                .collect()
        }
        KernelKind::FiniteRank => {
            let modes: Vec<Vec<f64>> =
                model.modes.iter().map(|m| nodes.iter().map(|x| m.shape.interpolate(x)).collect()).collect();
            let r = modes.len();
            // coefficient moments for every multi-index in r^k
            let multi: Vec<(Vec<usize>, f64)> = (0..r.pow(k as u32))
                .filter_map(|code| {
                    let mut idx = vec![0usize; k];
                    let mut c = code;
                    for slot in idx.iter_mut().rev() {
                        *slot = c % r;
                        c /= r;
                    }
                    let mut counts = vec![0usize; r];
                    for &i in &idx {
                        counts[i] += 1;
                    }
                    let coef: f64 =
                        counts.iter().enumerate().map(|(i, &c)| model.modes[i].law.raw_moment(c)).product();
                    (coef != 0.0).then_some((idx, coef))
                })
                .collect();
            (0..output.len())
                .into_par_iter()
                .map(|flat| {
                    let s = split_slots(flat, s_len, k);
                    multi
                        .iter()
                        .map(|(idx, coef)| coef * idx.iter().zip(&s).map(|(&i, &sj)| modes[i][sj]).product::<f64>())
                        .sum()
                })
                .collect()
        }
    };
    MomentGrid::new(Grid::from_values(*output, values)?, k, n, 0.0, model.support_radius())
}

#[inline]
fn split_slots(mut flat: usize, s_len: usize, k: usize) -> [usize; 8] {
    let mut s = [0usize; 8];
    assert!(k <= 8, "moment order above 8 is not supported");
    for j in (0..k).rev() {
        s[j] = flat % s_len;
        flat /= s_len;
    }
    s
}

/// Empirical moment `mean_i ∏ V_i(x_j)` on the `k`-fold power of the ensemble grid.
pub fn empirical_moment(ensemble: &Ensemble, k: usize) -> Result<MomentGrid> {
    let slot = *ensemble.geometry();
    let out = slot.power(k)?;
    let s_len = slot.len();
    let inv = 1.0 / ensemble.count() as f64;
    let samples: Vec<&[f64]> = ensemble.samples.iter().map(|s| s.grid().values()).collect();
    let values: Vec<f64> = (0..out.len())
        .into_par_iter()
        .map(|flat| {
            let s = split_slots(flat, s_len, k);
            let mut acc = 0.0;
            for v in &samples {
                let mut p = 1.0;
                for &sj in &s[..k] {
                    p *= v[sj];
                    if p == 0.0 {
                        break;
                    }
                }
                acc += p;
            }
            acc * inv
        })
        .collect();
    MomentGrid::new(Grid::from_values(out, values)?, k, slot.dim, 0.0, ensemble.support_radius())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_models::{sample_gaussian_field, CoefficientLaw, Mode};

    #[test]
    fn wick_term_counts() {
        // number of involutions: 1, 2, 4, 10
        let counts: Vec<usize> = (1..=4).map(|k| wick_partitions(k).len()).collect();
        assert_eq!(counts, vec![1, 2, 4, 10]);
    }

    fn gaussian(mean: f64) -> FieldModel {
        let g = Geometry::new(2, 1.5, 25).unwrap();
        FieldModel::gaussian(Grid::from_fn(g, |_| mean), KernelKind::SquaredExponential, 0.6, 1.3, 0.8, 0.4).unwrap()
    }

    #[test]
    fn zero_mean_first_moment_vanishes() {
        let m = gaussian(0.0);
        let out = Geometry::new(2, 1.5, 13).unwrap();
        let mk = true_moment(&m, 1, &out).unwrap();
        assert_eq!(mk.grid.max_abs(), 0.0);
    }

    #[test]
    fn second_moment_is_tapered_kernel() {
        let m = gaussian(0.0);
        let out = Geometry::new(4, 1.5, 7).unwrap();
        let mk = true_moment(&m, 2, &out).unwrap();
        let mut x = [0.0; 4];
        for i in (0..out.len()).step_by(37) {
            out.node(i, &mut x);
            let expect = m.taper().eval(&x[..2]) * m.taper().eval(&x[2..]) * {
                let d = ((x[0] - x[2]).powi(2) + (x[1] - x[3]).powi(2)).sqrt();
                1.3 * (-0.5 * (d / 0.6).powi(2)).exp()
            };
            assert!((mk.grid.values()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn rademacher_mode_moments() {
        let g = Geometry::new(2, 1.5, 15).unwrap();
        let psi = Grid::from_fn(g, |x| crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.81));
        let model = FieldModel::finite_rank(g, vec![Mode { shape: psi.clone(), law: CoefficientLaw::Rademacher }], 0.9, 0.3)
            .unwrap();
        let m2 = true_moment(&model, 2, &g.power(2).unwrap()).unwrap();
        let s = psi.values();
        for (flat, v) in m2.grid.values().iter().enumerate() {
            assert!((v - s[flat / s.len()] * s[flat % s.len()]).abs() < 1e-15);
        }
        let m3 = true_moment(&model, 3, &Geometry::new(6, 1.5, 5).unwrap()).unwrap();
        assert_eq!(m3.grid.max_abs(), 0.0);
    }

    #[test]
    fn gaussian_order_five_is_unsupported() {
        let m = gaussian(0.0);
        let out = Geometry::new(10, 1.5, 2).unwrap();
        assert!(matches!(true_moment(&m, 5, &out), Err(Error::UnsupportedMoment { k: 5, .. })));
    }

    #[test]
    fn empirical_second_moment_matches_kernel_at_probes() {
        let m = gaussian(0.2);
        let n = 10_000;
        let e = sample_gaussian_field(&m, 2024, n).unwrap();
        let probes = [[0.0, 0.0], [0.25, 0.0], [0.0, -0.5], [0.5, 0.5], [-0.75, 0.0]];
        for p in &probes {
            for q in &probes {
                let prods: Vec<f64> = e.samples.iter().map(|s| s.value_at(p) * s.value_at(q)).collect();
                let mean = prods.iter().sum::<f64>() / n as f64;
                let var = prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                let exact = m.tapered_covariance(p, q) + m.tapered_mean(p) * m.tapered_mean(q);
                assert!((mean - exact).abs() <= 4.0 * se + 1e-12, "{p:?} {q:?}: {mean} vs {exact} (se {se})");
            }
        }
    }

    #[test]
    fn wick_fourth_moment_at_probes() {
        let m = gaussian(0.0);
        let n = 10_000;
        let e = sample_gaussian_field(&m, 77, n).unwrap();
        let x = [0.1, 0.0];
        let y = [-0.3, 0.2];
        let prods: Vec<f64> = e.samples.iter().map(|s| (s.value_at(&x) * s.value_at(&y)).powi(2)).collect();
        let mean = prods.iter().sum::<f64>() / n as f64;
        let var = prods.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let cxx = m.tapered_covariance(&x, &x);
        let cyy = m.tapered_covariance(&y, &y);
        let cxy = m.tapered_covariance(&x, &y);
        let wick = cxx * cyy + 2.0 * cxy * cxy;
        assert!((mean - wick).abs() <= 4.0 * se, "{mean} vs {wick} (se {se})");
    }
}
