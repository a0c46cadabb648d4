use std::sync::Arc;

use corrtomo::correlation_data::{tangent_reduce, DataSource, DirectionTuple, EnsembleSource, OffsetGrid};
use corrtomo::field_models::{sample_finite_rank_field, CoefficientLaw, Ensemble, FieldModel, Mode};
use corrtomo::law_recovery::{compare_laws, GridBasis, Verdict};
use corrtomo::phantoms;
use corrtomo::reconstruction::{fbp_invert, frame_select_with, pbasis, splitting_gram_deviation, FrameRule, HyperDirection, Sinogram, SphereQuadrature};
use corrtomo::xray::{xray_transform, Direction};
use corrtomo::Geometry;
use proptest::prelude::*;

fn unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n).prop_filter("not too short", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
}

fn bump_ensemble(law: CoefficientLaw, seed: u64, count: usize) -> Ensemble {
    let g = Geometry::new(2, 1.0, 32).unwrap();
    let psi = phantoms::smooth_bump(g, &[0.1, -0.1], 0.45, 1.0).unwrap();
    let model = FieldModel::finite_rank(g, vec![Mode { shape: psi.grid().clone(), law }], 0.6, 0.2).unwrap();
    sample_finite_rank_field(&model, seed, count).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frames_are_orthogonal_and_splitting_is_orthonormal(
        (n, k) in prop_oneof![Just((2usize, 1usize)), Just((2, 2)), Just((3, 1)), Just((3, 2)), Just((2, 3))],
        raw in unit(6),
        alternate: bool,
    ) {
        let eta = HyperDirection::normalized(&raw[..n * k], n);
        prop_assume!(eta.is_ok());
        let eta = eta.unwrap();
        let rule = if alternate { FrameRule::Alternate } else { FrameRule::Standard };
        let f = frame_select_with(&eta, rule);
        for j in 0..k {
            let dot: f64 = eta.block(j).iter().zip(f.thetas[j].as_slice()).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-10);
        }
        let p = pbasis(&eta, &f).unwrap();
        prop_assert!(splitting_gram_deviation(&eta, &f, &p) <= 1e-9);
    }

    #[test]
    fn tangent_point_is_line_invariant(phi in 0.0f64..6.3, x in unit(2), s in -3.0f64..3.0) {
        let theta = Direction::planar(phi);
        let a = tangent_reduce(&x, &theta);
        let moved = [x[0] + s * theta.as_slice()[0], x[1] + s * theta.as_slice()[1]];
        let b = tangent_reduce(&moved, &theta);
        prop_assert!((a.offset[0] - b.offset[0]).abs() < 1e-12 && (a.offset[1] - b.offset[1]).abs() < 1e-12);
        let dot = a.offset[0] * theta.as_slice()[0] + a.offset[1] * theta.as_slice()[1];
        prop_assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn xray_is_even_in_direction_and_linear(phi in 0.0f64..6.3, d in -0.7f64..0.7, a in -3.0f64..3.0) {
        let g = Geometry::new(2, 1.0, 48).unwrap();
        let p = phantoms::smooth_bump(g, &[0.1, 0.0], 0.5, 1.0).unwrap();
        let theta = Direction::planar(phi);
        let x = [-d * theta.as_slice()[1], d * theta.as_slice()[0]];
        let fwd = xray_transform(&p, &x, &theta).unwrap();
        let back = xray_transform(&p, &x, &theta.negated()).unwrap();
        prop_assert!((fwd - back).abs() <= 1e-12 * fwd.abs().max(1e-12));
        let scaled = xray_transform(&p.scaled(a), &x, &theta).unwrap();
        prop_assert!((scaled - a * fwd).abs() <= 1e-12 * fwd.abs().max(1.0));
    }

    #[test]
    fn second_order_data_are_symmetric_under_slot_swap(p1 in 0.0f64..3.1, p2 in 0.0f64..3.1, y1 in -0.5f64..0.5, y2 in -0.5f64..0.5) {
        prop_assume!((p1 - p2).abs() > 1e-3);
        let e = bump_ensemble(CoefficientLaw::Uniform { lo: -1.0, hi: 1.0 }, 4, 12);
        let src = EnsembleSource::new(&e, 2, 12, OffsetGrid::new(1.0, 41).unwrap()).unwrap();
        let (t1, t2) = (Direction::planar(p1), Direction::planar(p2));
        let x1 = vec![-y1 * t1.as_slice()[1], y1 * t1.as_slice()[0]];
        let x2 = vec![-y2 * t2.as_slice()[1], y2 * t2.as_slice()[0]];
        let a = src.dataset(&DirectionTuple::new(vec![t1.clone(), t2.clone()]).unwrap()).unwrap().evaluate_points(&[x1.clone(), x2.clone()]).unwrap();
        let b = src.dataset(&DirectionTuple::new(vec![t2, t1]).unwrap()).unwrap().evaluate_points(&[x2, x1]).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
    }

    #[test]
    fn fbp_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.15f64..0.3) {
        let q = SphereQuadrature::circle(48);
        let gauss = |s: f64| move |r: f64, _: &[f64]| (-0.5 * r * r / (s * s)).exp();
        let s1 = Sinogram::from_fn(1, 2, 1.0, 64, q.clone(), 1.0, gauss(w)).unwrap();
        let s2 = Sinogram::from_fn(1, 2, 1.0, 64, q.clone(), 1.0, |r, eta| r * eta[0] * (-4.0 * r * r).exp()).unwrap();
        let mut s3 = s1.clone();
        for (v, (x, y)) in s3.values.iter_mut().zip(s1.values.iter().zip(&s2.values)) {
            *v = a * x + b * y;
        }
        let out = Geometry::new(2, 0.8, 17).unwrap();
        let (m1, m2, m3) = (fbp_invert(&s1, &out).unwrap(), fbp_invert(&s2, &out).unwrap(), fbp_invert(&s3, &out).unwrap());
        for i in 0..out.len() {
            let want = a * m1.grid.values()[i] + b * m2.grid.values()[i];
            prop_assert!((m3.grid.values()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn comparison_is_symmetric_and_self_consistent() {
    let basis = GridBasis::dct(Geometry::new(2, 1.0, 32).unwrap(), 3).unwrap();
    let a = bump_ensemble(CoefficientLaw::Normal { mean: 0.0, std: 1.0 }, 10, 6000);
    let b = bump_ensemble(CoefficientLaw::Normal { mean: 0.0, std: 1.0 }, 11, 6000);
    let ab = compare_laws(&a, &b, 3, &basis, 2).unwrap();
    let ba = compare_laws(&b, &a, 3, &basis, 2).unwrap();
    assert_eq!(ab.verdict, Verdict::Indistinguishable { up_to: 3 });
    for (x, y) in ab.orders.iter().zip(&ba.orders) {
        assert_eq!(x.max_z, y.max_z);
    }
}

#[test]
fn repeated_sample_ensemble_matches_single_sample_data() {
    let one = bump_ensemble(CoefficientLaw::Constant(0.7), 0, 1);
    let many = Ensemble::from_samples(Arc::clone(&one.model), 0, vec![one.samples[0].clone(); 5]).unwrap();
    let tuple = DirectionTuple::new(vec![Direction::planar(0.4)]).unwrap();
    let offsets = OffsetGrid::new(1.0, 33).unwrap();
    let a = EnsembleSource::new(&one, 1, 1, offsets).unwrap().dataset(&tuple).unwrap();
    let b = EnsembleSource::new(&many, 1, 5, offsets).unwrap().dataset(&tuple).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
    }
    // variance of equal terms is rounding only, so its root is O(√ε)
    assert!(b.stderr.iter().zip(&b.values).all(|(s, v)| *s <= 1e-7 * v.abs().max(1e-3)));
}
