//! Small numerical helpers shared across modules.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Pairwise (cascade) summation. Result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `Γ(m / 2)` for a positive integer `m`.
pub fn gamma_half(m: usize) -> f64 {
    assert!(m > 0);
    let (mut value, mut x) = if m.is_multiple_of(2) { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    let target = m as f64 / 2.0;
    while x < target - 0.25 {
        value *= x;
        x += 1.0;
    }
    value
}

/// Surface area of the unit sphere `S^{d-1}` in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma_half(d)
}

/// `∫_{R^n} (1 - |x|^2)_+^4 dx`.
pub fn bump_mass(n: usize) -> f64 {
    // π^{n/2} Γ(5) / Γ(n/2 + 5)
    PI.powf(n as f64 / 2.0) * 24.0 / gamma_half(n + 10)
}

/// Unnormalised polynomial bump `(1 - s^2)^4` on `|s| < 1`.
#[inline]
pub fn bump(s2: f64) -> f64 {
    if s2 >= 1.0 {
        0.0
    } else {
        let t = 1.0 - s2;
        let t2 = t * t;
        t2 * t2
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// In-place forward (or inverse, unnormalised) FFT of a row-major
/// `points^dim` complex array along every axis.
pub fn fft_nd(data: &mut [Complex64], dim: usize, points: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(points) } else { planner.plan_fft_forward(points) };
    let total = data.len();
    debug_assert_eq!(total, points.pow(dim as u32));
    let mut line = vec![Complex64::new(0.0, 0.0); points];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut stride = 1usize;
    for _axis in 0..dim {
        let block = stride * points;
        for start in (0..total).step_by(block) {
            for offset in 0..stride {
                let base = start + offset;
                for (i, c) in line.iter_mut().enumerate() {
                    *c = data[base + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, c) in line.iter().enumerate() {
                    data[base + i * stride] = *c;
                }
            }
        }
        stride *= points;
    }
}

/// Relative L2 distance `|a - b| / |b|`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for a named stream.
pub fn named_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(root ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_and_sphere_areas() {
        assert!((gamma_half(1) - PI.sqrt()).abs() < 1e-15);
        assert!((gamma_half(2) - 1.0).abs() < 1e-15);
        assert!((gamma_half(7) - 3.323_350_970_447_843).abs() < 1e-12);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn bump_mass_matches_quadrature() {
        // n = 1: ∫(1-s^2)^4 ds = 256/315; n = 2: π/5.
        assert!((bump_mass(1) - 256.0 / 315.0).abs() < 1e-14);
        assert!((bump_mass(2) - PI / 5.0).abs() < 1e-14);
    }

    #[test]
    fn pairwise_matches_naive_on_exact_values() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn fft_roundtrip_2d() {
        let n = 8;
        let orig: Vec<Complex64> = (0..n * n).map(|i| Complex64::new(i as f64, -(i as f64) * 0.5)).collect();
        let mut data = orig.clone();
        fft_nd(&mut data, 2, n, false);
        fft_nd(&mut data, 2, n, true);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a / (n * n) as f64 - b).norm() < 1e-12);
        }
    }
}
