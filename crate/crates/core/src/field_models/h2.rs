use super::PotentialGrid;

/// Discrete H² norm `sqrt(Σ h^n (|V|² + |∇V|² + |D²V|²))`.
///
/// Central differences throughout; nodes outside the grid count as zero,
/// which is exact for potentials supported strictly inside the box.
pub fn h2_norm_proxy(p: &PotentialGrid) -> f64 {
    let g = *p.grid().geometry();
    let v = p.grid().values();
    let n = g.dim;
    let m = g.points as isize;
    let h = g.spacing();
    let mut strides = vec![1isize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * m;
    }
    let mut idx = vec![0usize; n];
    let at = |idx: &[usize], shifts: &[(usize, isize)]| -> f64 {
        let mut flat = 0isize;
        for (a, &i) in idx.iter().enumerate() {
            let mut j = i as isize;
            for &(axis, s) in shifts {
                if axis == a {
                    j += s;
                }
            }
            if j < 0 || j >= m {
                return 0.0;
            }
            flat += j * strides[a];
        }
        v[flat as usize]
    };
    let mut total = Vec::with_capacity(g.len());
    for flat in 0..g.len() {
        g.unravel(flat, &mut idx);
        let c = v[flat];
        let mut s = c * c;
        for a in 0..n {
            let fwd = at(&idx, &[(a, 1)]);
            let bwd = at(&idx, &[(a, -1)]);
            let d1 = (fwd - bwd) / (2.0 * h);
            let d2 = (fwd - 2.0 * c + bwd) / (h * h);
            s += d1 * d1 + d2 * d2;
            for b in (a + 1)..n {
                let mixed = (at(&idx, &[(a, 1), (b, 1)]) - at(&idx, &[(a, 1), (b, -1)]) - at(&idx, &[(a, -1), (b, 1)])
                    + at(&idx, &[(a, -1), (b, -1)]))
                    / (4.0 * h * h);
                // ∂a∂b and ∂b∂a both appear in |D²V|²
                s += 2.0 * mixed * mixed;
            }
        }
        total.push(s);
    }
    (crate::numeric::pairwise_sum(&total) * g.cell_volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_models::Taper;
    use crate::grid::Geometry;

    #[test]
    fn zero_potential_has_zero_norm() {
        let g = Geometry::new(2, 1.0, 21).unwrap();
        assert_eq!(h2_norm_proxy(&PotentialGrid::zeros(g, 0.8).unwrap()), 0.0);
    }

    #[test]
    fn homogeneous_of_degree_one() {
        let g = Geometry::new(2, 1.0, 41).unwrap();
        let p = PotentialGrid::from_fn(g, 0.8, |x| (3.0 * x[0]).sin() * crate::numeric::bump((x[0] * x[0] + x[1] * x[1]) / 0.64))
            .unwrap();
        let a = h2_norm_proxy(&p);
        let b = h2_norm_proxy(&p.scaled(2.0));
        assert!((b - 2.0 * a).abs() < 1e-12 * b);
    }

    /// Continuum H² norm of a radial taper in the plane by fine radial quadrature:
    /// |D²t|² = t''² + (t'/r)² for radial functions in 2D.
    fn radial_taper_h2(t: Taper) -> f64 {
        let (r0, w) = (t.inner, t.width);
        let n = 200_000;
        let dr = (r0 + w) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let r = (i as f64 + 0.5) * dr;
            let (f, f1, f2) = if r <= r0 {
                (1.0, 0.0, 0.0)
            } else {
                let u = (r - r0) / w;
                let q = 1.0 - u * u;
                // f = q^4, f' = 4 q^3 (-2u/w), f'' = 12 q^2 (2u/w)^2 + 4 q^3 (-2/w^2)
                (q.powi(4), -8.0 * u * q.powi(3) / w, 48.0 * u * u * q * q / (w * w) - 8.0 * q.powi(3) / (w * w))
            };
            acc += (f * f + f1 * f1 + f2 * f2 + (f1 / r).powi(2)) * 2.0 * std::f64::consts::PI * r * dr;
        }
        acc.sqrt()
    }

    #[test]
    fn tapered_constant_matches_continuum_norm() {
        let t = Taper { inner: 0.5, width: 0.4 };
        let g = Geometry::new(2, 1.2, 481).unwrap();
        let p = PotentialGrid::from_fn(g, t.outer(), |x| t.eval(x)).unwrap();
        let discrete = h2_norm_proxy(&p);
        let exact = radial_taper_h2(t);
        assert!((discrete - exact).abs() <= 0.02 * exact, "{discrete} vs {exact}");
    }
}
