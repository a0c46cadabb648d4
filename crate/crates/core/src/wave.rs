//! Time-domain check of the jump identity in one space dimension.
//!
//! The total field `u = u_inc + u_sc` solves `u_tt = u_xx + V u`, with the
//! incident plane wave `δ(t − x)` regularised to a unit-mass bump of width
//! `ε_p`. The scattered part is evolved by leapfrog with the analytic source
//! `V·u_inc`; behind the front it carries a smoothed step of height `½∫V`
//! plus a residual that is continuous across the front. The plateau is read
//! off at a detector beyond the support and extrapolated linearly to `ε_p → 0`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field_models::PotentialGrid;
use crate::numeric::{bump, pairwise_sum};

const BUMP_NORM: f64 = 315.0 / 256.0;

/// Regularised incident pulse `δ_ε(t − d·x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseSpec {
    pub width: f64,
    /// +1 travels towards +x, −1 towards −x.
    pub direction: i8,
}

impl PulseSpec {
    pub fn new(width: f64, direction: i8) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::param("pulse_width", "must be positive"));
        }
        if direction != 1 && direction != -1 {
            return Err(Error::param("direction", "must be +1 or -1"));
        }
        Ok(PulseSpec { width, direction })
    }

    /// Unit-mass bump `(315/256)(1 − (s/ε)²)⁴ / ε`.
    #[inline]
    pub fn delta(&self, s: f64) -> f64 {
        let u = s / self.width;
        BUMP_NORM * bump(u * u) / self.width
    }

    /// Its primitive, the smoothed Heaviside.
    pub fn step(&self, s: f64) -> f64 {
        let u = (s / self.width).clamp(-1.0, 1.0);
        let u2 = u * u;
        let f = u * (1.0 + u2 * (-4.0 / 3.0 + u2 * (6.0 / 5.0 + u2 * (-4.0 / 7.0 + u2 / 9.0))));
        (BUMP_NORM * f + 0.5).clamp(0.0, 1.0)
    }

    /// Front coordinate `s = t − d·x`.
    #[inline]
    pub fn front(&self, t: f64, x: f64) -> f64 {
        t - self.direction as f64 * x
    }
}

/// Space-time discretisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveGrid {
    pub x_lo: f64,
    pub hx: f64,
    pub nx: usize,
    pub t0: f64,
    pub ht: f64,
    pub steps: usize,
}

impl WaveGrid {
    pub fn x(&self, i: usize) -> f64 {
        self.x_lo + i as f64 * self.hx
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.ht
    }

    /// Layout for a potential supported in `[−R, R]`: the pulse starts `3ε`
    /// before the support, the detector sits `4ε` beyond it, and the run
    /// lasts until the front is `12ε` past the detector. `courant = ht / hx`.
    pub fn for_potential(p: &PotentialGrid, pulse: &PulseSpec, hx: f64, courant: f64) -> Result<Self> {
        if !(hx > 0.0 && hx.is_finite()) {
            return Err(Error::param("hx", "must be positive"));
        }
        if !(courant > 0.0) || courant > 1.0 {
            return Err(Error::CflViolation { ht: courant * hx, hx });
        }
        let r = p.interpolant_radius();
        let e = pulse.width;
        let detector = r + 4.0 * e;
        let half = detector + 16.0 * e;
        // node-aligned: x_lo is a multiple of hx so grids at hx, hx/2 nest
        let cells = (half / hx).ceil() as usize;
        let x_lo = -(cells as f64) * hx;
        let nx = 2 * cells + 1;
        let ht = courant * hx;
        let t0 = -r - 3.0 * e;
        let t_end = detector + 12.0 * e;
        let steps = ((t_end - t0) / ht).ceil() as usize;
        Ok(WaveGrid { x_lo, hx, nx, t0, ht, steps })
    }

    /// Default detector: `4ε` beyond the support on the outgoing side.
    pub fn default_detector(p: &PotentialGrid, pulse: &PulseSpec) -> f64 {
        pulse.direction as f64 * (p.interpolant_radius() + 4.0 * pulse.width)
    }
}

/// Scattered field `u_sc(x_i, t_n)` for every step.
#[derive(Clone, Debug)]
pub struct SpacetimeField {
    pub grid: WaveGrid,
    pub pulse: PulseSpec,
    /// Row-major `(steps + 1) × nx`.
    pub values: Vec<f64>,
    /// Support interval of the sampled potential.
    pub support: (f64, f64),
    pub peak: f64,
    /// Largest wrong-way-travelling content outside the support relative to
    /// the outgoing content: the boundary reflection estimate.
    pub reflection: f64,
}

pub const REFLECTION_LIMIT: f64 = 1e-3;

impl SpacetimeField {
    pub fn snapshot(&self, n: usize) -> &[f64] {
        &self.values[n * self.grid.nx..(n + 1) * self.grid.nx]
    }

    pub fn last(&self) -> &[f64] {
        self.snapshot(self.grid.steps)
    }

    /// Time trace at `x` (linear interpolation between nodes).
    pub fn trace(&self, x: f64) -> Result<Vec<f64>> {
        let g = &self.grid;
        let u = (x - g.x_lo) / g.hx;
        if !(u >= 0.0 && u <= (g.nx - 1) as f64) {
            return Err(Error::param("detector_x", format!("{x} is outside the simulated domain")));
        }
        let i = (u.floor() as usize).min(g.nx - 2);
        let f = u - i as f64;
        Ok((0..=g.steps)
            .map(|n| {
                let row = self.snapshot(n);
                (1.0 - f) * row[i] + f * row[i + 1]
            })
            .collect())
    }

    /// `x,t,value` rows, every `stride`-th step and node.
    pub fn write_csv<W: Write>(&self, mut out: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        writeln!(out, "x,t,value")?;
        for n in (0..=self.grid.steps).step_by(stride) {
            let row = self.snapshot(n);
            for i in (0..self.grid.nx).step_by(stride) {
                writeln!(out, "{:.8e},{:.8e},{:.10e}", self.grid.x(i), self.grid.t(n), row[i])?;
            }
        }
        Ok(())
    }

    pub fn write_trace_csv<W: Write>(&self, mut out: W, x: f64) -> Result<()> {
        let trace = self.trace(x)?;
        writeln!(out, "t,value")?;
        for (n, v) in trace.iter().enumerate() {
            writeln!(out, "{:.8e},{:.10e}", self.grid.t(n), v)?;
        }
        Ok(())
    }
}

/// Exact average of the piecewise-linear interpolant of `p` over `[a, b]`.
fn cell_average(p: &PotentialGrid, a: f64, b: f64) -> f64 {
    let g = p.grid();
    let h = g.spacing();
    let e = g.extent();
    let vals = g.values();
    let at = |x: f64| g.interpolate(&[x]);
    let mut knots = vec![a];
    let first = ((a + e) / h).floor() as i64 + 1;
    let mut k = first;
    loop {
        let x = -e + k as f64 * h;
        if x >= b || k as usize >= vals.len() {
            break;
        }
        if x > a {
            knots.push(x);
        }
        k += 1;
    }
    knots.push(b);
    let mut acc = 0.0;
    for w in knots.windows(2) {
        acc += 0.5 * (at(w[0]) + at(w[1])) * (w[1] - w[0]);
    }
    acc / (b - a)
}

/// Leapfrog for `u_sc,tt = u_sc,xx + V u_sc + V u_inc`, zero initial data,
/// first-order Mur boundaries (exact at Courant number one).
pub fn fdtd_solve(p: &PotentialGrid, pulse: &PulseSpec, grid: &WaveGrid) -> Result<SpacetimeField> {
    if p.dim() != 1 {
        return Err(Error::param("dim", "wave validation runs in one space dimension"));
    }
    if grid.ht > grid.hx * (1.0 + 1e-12) {
        return Err(Error::CflViolation { ht: grid.ht, hx: grid.hx });
    }
    if pulse.width < 4.0 * grid.hx * (1.0 - 1e-12) {
        return Err(Error::param("pulse_width", format!("ε_p = {} is below 4·hx = {}", pulse.width, 4.0 * grid.hx)));
    }
    let r = p.interpolant_radius();
    let x_hi = grid.x(grid.nx - 1);
    if grid.x_lo > -r - 2.0 * grid.hx || x_hi < r + 2.0 * grid.hx {
        return Err(Error::param("domain", "potential must lie well inside the simulated domain"));
    }
    if pulse.front(grid.t0 - grid.ht, pulse.direction as f64 * -r) > -pulse.width {
        return Err(Error::param("t0", "pulse already overlaps the potential at the start"));
    }
    let nx = grid.nx;
    let v: Vec<f64> = (0..nx)
        .map(|i| {
            let x = grid.x(i);
            if x.abs() > r + grid.hx {
                0.0
            } else {
                cell_average(p, x - 0.5 * grid.hx, x + 0.5 * grid.hx)
            }
        })
        .collect();
    let active: Vec<usize> = (0..nx).filter(|&i| v[i] != 0.0).collect();
    let support = match (active.first(), active.last()) {
        (Some(&a), Some(&b)) => (grid.x(a), grid.x(b)),
        _ => (0.0, 0.0),
    };
    let lambda = grid.ht / grid.hx;
    let l2 = lambda * lambda;
    let ht2 = grid.ht * grid.ht;
    let mur = (lambda - 1.0) / (lambda + 1.0);
    let mut values = vec![0.0; (grid.steps + 1) * nx];
    let mut prev = vec![0.0; nx];
    let mut cur = vec![0.0; nx];
    let mut next = vec![0.0; nx];
    // travelling-wave bookkeeping outside the support
    let (mut wrong, mut right_way) = (0.0f64, 0.0f64);
    let d = pulse.direction as f64;
    let margin = 2.0 * grid.hx;
    // support edges in the coordinate d·x
    let (near, far) = if d > 0.0 { (support.0, support.1) } else { (-support.1, -support.0) };
    for n in 0..grid.steps {
        let t = grid.t(n);
        for i in 1..nx - 1 {
            let src = if v[i] != 0.0 { v[i] * (cur[i] + pulse.delta(pulse.front(t, grid.x(i)))) } else { 0.0 };
            next[i] = 2.0 * cur[i] - prev[i] + l2 * (cur[i + 1] - 2.0 * cur[i] + cur[i - 1]) + ht2 * src;
        }
        next[0] = cur[1] + mur * (next[1] - cur[0]);
        next[nx - 1] = cur[nx - 2] + mur * (next[nx - 2] - cur[nx - 1]);
        if n >= 1 {
            for i in 1..nx - 1 {
                let x = grid.x(i);
                let ut = (next[i] - prev[i]) / (2.0 * grid.ht);
                let ux = (cur[i + 1] - cur[i - 1]) / (2.0 * grid.hx);
                // beyond the support on the outgoing side only +d-travelling
                // waves are physical; on the incoming side only −d-travelling
                let (outgoing, incoming) = (ut - d * ux, ut + d * ux);
                if d * x > far + margin {
                    wrong = wrong.max(incoming.abs());
                    right_way = right_way.max(outgoing.abs());
                } else if d * x < near - margin {
                    wrong = wrong.max(outgoing.abs());
                    right_way = right_way.max(incoming.abs());
                }
            }
        }
        values[(n + 1) * nx..(n + 2) * nx].copy_from_slice(&next);
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        if cur.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("scattered field"));
        }
    }
    let peak = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let reflection = if right_way > 0.0 { wrong / right_way } else { 0.0 };
    if reflection > REFLECTION_LIMIT {
        log::warn!("boundary reflection estimate {reflection:.2e} exceeds {REFLECTION_LIMIT:.0e}");
    }
    Ok(SpacetimeField { grid: *grid, pulse: *pulse, values, support, peak, reflection })
}

/// Plateau read-out at one detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEstimate {
    pub width: f64,
    pub plateau: f64,
    pub pre_front: f64,
    /// `max |u_sc − plateau·H_ε|` over `s ∈ [−2ε, 6ε]`, relative to `|plateau|`.
    pub residual: f64,
}

/// Mean of `u_sc` over `t − d·x ∈ [2ε, 6ε]` minus the mean over `[−6ε, −2ε]`.
pub fn extract_jump(f: &SpacetimeField, detector_x: f64) -> Result<JumpEstimate> {
    let pulse = &f.pulse;
    let d = pulse.direction as f64;
    let far = if d > 0.0 { f.support.1 } else { -f.support.0 };
    if d * detector_x <= far {
        return Err(Error::param("detector_x", "detector must lie beyond the support on the outgoing side"));
    }
    let e = pulse.width;
    let trace = f.trace(detector_x)?;
    let s_of = |n: usize| pulse.front(f.grid.t(n), detector_x);
    let last = s_of(f.grid.steps);
    if last < 10.0 * e - 1e-9 * e || s_of(0) > -6.0 * e {
        return Err(Error::WindowContaminated(format!(
            "record covers t − x ∈ [{:.3e}, {:.3e}], need [−6ε, 10ε]",
            s_of(0),
            last
        )));
    }
    if f.reflection > REFLECTION_LIMIT {
        return Err(Error::WindowContaminated(format!("boundary reflection {:.2e}", f.reflection)));
    }
    let window_mean = |lo: f64, hi: f64| -> f64 {
        let vals: Vec<f64> = (0..trace.len()).filter(|&n| (lo..=hi).contains(&s_of(n))).map(|n| trace[n]).collect();
        if vals.is_empty() {
            0.0
        } else {
            pairwise_sum(&vals) / vals.len() as f64
        }
    };
    let pre_front = window_mean(-6.0 * e, -2.0 * e);
    let plateau = window_mean(2.0 * e, 6.0 * e) - pre_front;
    let mut worst: f64 = 0.0;
    for (n, u) in trace.iter().enumerate() {
        let s = s_of(n);
        if (-2.0 * e..=6.0 * e).contains(&s) {
            worst = worst.max((u - pre_front - plateau * pulse.step(s)).abs());
        }
    }
    let residual = if plateau != 0.0 { worst / plateau.abs() } else { worst };
    Ok(JumpEstimate { width: e, plateau, pre_front, residual })
}

/// Linear extrapolation to zero width from `P(ε)` and `P(ε/2)`.
pub fn richardson(at_width: f64, at_half: f64) -> f64 {
    2.0 * at_half - at_width
}

/// `½∫V` along the line, the limit the plateau should approach.
pub fn half_integral(p: &PotentialGrid) -> f64 {
    0.5 * p.grid().integral()
}

/// Plateaus at each width (grid spacing `width / cells_per_width`) and the
/// Richardson limit from the two smallest widths.
#[derive(Clone, Debug)]
pub struct JumpSweep {
    pub estimates: Vec<JumpEstimate>,
    pub extrapolated: f64,
    pub target: f64,
    pub reflection: f64,
}

impl JumpSweep {
    pub fn relative_error(&self) -> f64 {
        if self.target == 0.0 {
            self.extrapolated.abs()
        } else {
            (self.extrapolated - self.target).abs() / self.target.abs()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("width,plateau,pre_front,residual\n");
        for e in &self.estimates {
            out.push_str(&format!("{:.6e},{:.10e},{:.3e},{:.4}\n", e.width, e.plateau, e.pre_front, e.residual));
        }
        out.push_str(&format!(
            "# extrapolated plateau {:.10e}, half line integral {:.10e}, relative difference {:.3e}\n# boundary reflection {:.2e}\n",
            self.extrapolated,
            self.target,
            self.relative_error(),
            self.reflection
        ));
        out
    }
}

/// Runs `fdtd_solve` + `extract_jump` for each width (largest first).
pub fn jump_sweep(p: &PotentialGrid, widths: &[f64], cells_per_width: usize, direction: i8) -> Result<JumpSweep> {
    use rayon::prelude::*;
    if widths.len() < 2 || widths.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("pulse_widths", "need at least two strictly decreasing widths"));
    }
    if cells_per_width < 4 {
        return Err(Error::param("cells_per_width", "ε_p must span at least four cells"));
    }
    let runs: Vec<(JumpEstimate, f64)> = widths
        .par_iter()
        .map(|&w| {
            let pulse = PulseSpec::new(w, direction)?;
            let grid = WaveGrid::for_potential(p, &pulse, w / cells_per_width as f64, 1.0)?;
            let field = fdtd_solve(p, &pulse, &grid)?;
            let est = extract_jump(&field, WaveGrid::default_detector(p, &pulse))?;
            Ok((est, field.reflection))
        })
        .collect::<Result<_>>()?;
    let m = runs.len();
    let extrapolated = richardson(runs[m - 2].0.plateau, runs[m - 1].0.plateau);
    let reflection = runs.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(JumpSweep { estimates: runs.into_iter().map(|r| r.0).collect(), extrapolated, target: half_integral(p), reflection })
}

/// Self-convergence order from three runs at `hx`, `hx/2`, `hx/4` (same
/// pulse), comparing final snapshots on the coarse nodes in discrete L².
pub fn convergence_order(p: &PotentialGrid, pulse: &PulseSpec, hx: f64, courant: f64) -> Result<f64> {
    let base = WaveGrid::for_potential(p, pulse, hx, courant)?;
    // nested grids sharing domain, start and end time
    let finals: Vec<(WaveGrid, Vec<f64>)> = (0..3)
        .map(|l| {
            let m = 1usize << l;
            let g = WaveGrid {
                x_lo: base.x_lo,
                hx: base.hx / m as f64,
                nx: (base.nx - 1) * m + 1,
                t0: base.t0,
                ht: base.ht / m as f64,
                steps: base.steps * m,
            };
            let f = fdtd_solve(p, pulse, &g)?;
            Ok((g, f.last().to_vec()))
        })
        .collect::<Result<_>>()?;
    let coarse = &finals[0].0;
    let sample = |(g, u): &(WaveGrid, Vec<f64>), i: usize| -> f64 {
        let x = coarse.x(i);
        let j = ((x - g.x_lo) / g.hx).round() as usize;
        u[j]
    };
    let diff = |a: usize, b: usize| -> f64 {
        let sq: Vec<f64> = (0..coarse.nx).map(|i| (sample(&finals[a], i) - sample(&finals[b], i)).powi(2)).collect();
        (pairwise_sum(&sq) * coarse.hx).sqrt()
    };
    let (e1, e2) = (diff(0, 1), diff(1, 2));
    if e2 == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((e1 / e2).log2())
}
