//! Action-angle coordinates for one-degree-of-freedom Hamiltonians.
//!
//! A level loop `{H = a}` around the minimum is traced by an angular sweep
//! from the origin with a radial root solve per ray. The action is the
//! enclosed area over `2 pi` (polar Green formula), the period is the
//! time-of-flight integral `oint r / dH/dr dtheta`, and the angle is the
//! normalised time of flight from the positive `x` axis. Every loop
//! integral uses the periodic trapezoid rule, which is spectrally accurate
//! for smooth loops.
//!
//! Loops that are not starlike about the origin fall back to marching the
//! Hamiltonian flow with RK4. The angle map needs starlike loops.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BirkhoffSystem;

/// Angular nodes per traced loop.
const NODES: usize = 256;
/// RK4 steps per small-oscillation period in the marching fallback.
const MARCH_STEPS: usize = 20_000;

pub type ScalarField = dyn Fn(f64, f64) -> f64 + Send + Sync;
pub type GradientField = dyn Fn(f64, f64) -> [f64; 2] + Send + Sync;

/// `H : R^2 -> R` with a nondegenerate minimum at the origin.
#[derive(Clone)]
pub struct Hamiltonian1D {
    h: Arc<ScalarField>,
    grad: Option<Arc<GradientField>>,
    a_max: f64,
    h0: f64,
    hessian: [[f64; 2]; 2],
}

impl fmt::Debug for Hamiltonian1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hamiltonian1D")
            .field("minimum", &self.h0)
            .field("a_max", &self.a_max)
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

impl Hamiltonian1D {
    /// Levels up to `a_max` are usable.
    pub fn new(h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, a_max: f64) -> Result<Self> {
        Self::assemble(Arc::new(h), None, a_max)
    }

    pub fn with_gradient(
        h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static,
        a_max: f64,
    ) -> Result<Self> {
        Self::assemble(Arc::new(h), Some(Arc::new(grad)), a_max)
    }

    fn assemble(h: Arc<ScalarField>, grad: Option<Arc<GradientField>>, a_max: f64) -> Result<Self> {
        let h0 = h(0.0, 0.0);
        if !h0.is_finite() {
            return Err(Error::domain("H(0, 0) is not finite"));
        }
        if !(a_max > h0 && a_max.is_finite()) {
            return Err(Error::domain(format!("a_max = {a_max} must exceed H(0, 0) = {h0}")));
        }
        let mut ham = Hamiltonian1D { h, grad, a_max, h0, hessian: [[0.0; 2]; 2] };
        let s = 1e-4;
        let g = |x, y| ham.gradient(x, y);
        let (gxp, gxm, gyp, gym) = (g(s, 0.0), g(-s, 0.0), g(0.0, s), g(0.0, -s));
        let hxx = (gxp[0] - gxm[0]) / (2.0 * s);
        let hyy = (gyp[1] - gym[1]) / (2.0 * s);
        let hxy = 0.25 * ((gxp[1] - gxm[1]) + (gyp[0] - gym[0])) / s;
        if !(hxx > 0.0 && hxx * hyy - hxy * hxy > 0.0) {
            return Err(Error::domain("the origin is not a nondegenerate minimum of H"));
        }
        ham.hessian = [[hxx, hxy], [hxy, hyy]];
        Ok(ham)
    }

    /// `1/2 (x^2 + y^2)`.
    pub fn harmonic(a_max: f64) -> Self {
        Self::with_gradient(|x, y| 0.5 * (x * x + y * y), |x, y| [x, y], a_max)
            .expect("harmonic oscillator is valid")
    }

    /// `1/2 r^2 + 1/4 r^4` with `r^2 = x^2 + y^2`, so `h(I) = I + I^2`.
    pub fn quartic_radial(a_max: f64) -> Self {
        Self::with_gradient(
            |x, y| {
                let r2 = x * x + y * y;
                0.5 * r2 + 0.25 * r2 * r2
            },
            |x, y| {
                let f = 1.0 + x * x + y * y;
                [f * x, f * y]
            },
            a_max,
        )
        .expect("quartic radial oscillator is valid")
    }

    /// Hardening Duffing oscillator `1/2 y^2 + 1/2 x^2 + 1/4 x^4`.
    pub fn duffing(a_max: f64) -> Self {
        Self::with_gradient(
            |x, y| 0.5 * y * y + 0.5 * x * x + 0.25 * x.powi(4),
            |x, y| [x + x.powi(3), y],
            a_max,
        )
        .expect("Duffing oscillator is valid")
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        (self.h)(x, y)
    }

    /// Analytic gradient if supplied, central differences otherwise.
    pub fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        if let Some(g) = &self.grad {
            return g(x, y);
        }
        let sx = 1e-6 * x.abs().max(1.0);
        let sy = 1e-6 * y.abs().max(1.0);
        [
            (self.value(x + sx, y) - self.value(x - sx, y)) / (2.0 * sx),
            (self.value(x, y + sy) - self.value(x, y - sy)) / (2.0 * sy),
        ]
    }

    pub fn minimum(&self) -> f64 {
        self.h0
    }

    pub fn energy_max(&self) -> f64 {
        self.a_max
    }

    /// `sqrt(det D^2 H(0))`, the frequency of infinitesimal loops.
    pub fn small_oscillation_frequency(&self) -> f64 {
        let m = self.hessian;
        (m[0][0] * m[1][1] - m[0][1] * m[1][0]).sqrt()
    }

    fn check_level(&self, a: f64) -> Result<()> {
        if a > self.h0 && a <= self.a_max {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "level {a} outside the energy range ({}, {}]",
                self.h0, self.a_max
            )))
        }
    }

    /// Distance to `{H = a}` along the unit ray `dir`, and `dH/dr` there.
    /// Fails when the ray does not cross the level exactly once.
    fn radial_root(&self, a: f64, dir: [f64; 2]) -> Result<(f64, f64)> {
        let f = |r: f64| self.value(r * dir[0], r * dir[1]) - a;
        let m = self.hessian;
        let q = dir[0] * (m[0][0] * dir[0] + m[0][1] * dir[1])
            + dir[1] * (m[1][0] * dir[0] + m[1][1] * dir[1]);
        let mut hi = (2.0 * (a - self.h0) / q).sqrt();
        let mut lo = 0.0;
        let mut grow = 0;
        while f(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
            grow += 1;
            if grow > 80 || !hi.is_finite() {
                return Err(Error::domain(format!("level {a} is not a closed loop")));
            }
        }
        let radial = |r: f64| {
            let g = self.gradient(r * dir[0], r * dir[1]);
            g[0] * dir[0] + g[1] * dir[1]
        };
        let mut r = 0.5 * (lo + hi);
        for _ in 0..200 {
            let fr = f(r);
            if fr == 0.0 {
                break;
            }
            if fr < 0.0 {
                lo = r;
            } else {
                hi = r;
            }
            let d = radial(r);
            let newton = r - fr / d;
            let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - r).abs() <= 4.0 * f64::EPSILON * r || hi - lo <= 4.0 * f64::EPSILON * hi {
                r = next;
                break;
            }
            r = next;
        }
        let d = radial(r);
        // sampled check that the ray crosses the level once, out to 3 r
        let starlike = d > 0.0
            && (1..8).all(|k| f(r * k as f64 / 8.0) < 0.0)
            && (1..=16).all(|k| f(r * (1.0 + k as f64 / 8.0)) > 0.0);
        if !starlike {
            return Err(Error::domain(format!("level {a} is not starlike about the origin")));
        }
        Ok((r, d))
    }

    /// Radii `r_j` and flight rates `dt/dtheta = r_j / (dH/dr)_j` on the
    /// equispaced angular grid.
    fn trace(&self, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut r = Vec::with_capacity(NODES);
        let mut g = Vec::with_capacity(NODES);
        for j in 0..NODES {
            let th = TAU * j as f64 / NODES as f64;
            let (rj, dj) = self.radial_root(a, [th.cos(), th.sin()])?;
            r.push(rj);
            g.push(rj / dj);
        }
        Ok((r, g))
    }

    /// `(area, period)` by marching `x' = -H_y, y' = H_x` through one loop.
    fn march(&self, a: f64) -> Result<(f64, f64)> {
        // seed on the positive x axis; only that one ray needs to be simple
        let f = |x: f64| self.value(x, 0.0) - a;
        let mut hi = (2.0 * (a - self.h0) / self.hessian[0][0]).sqrt();
        let mut grow = 0;
        while f(hi) < 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 80 {
                return Err(Error::domain(format!("level {a} is not a closed loop")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let field = |p: [f64; 2]| {
            let g = self.gradient(p[0], p[1]);
            [-g[1], g[0]]
        };
        let dt = TAU / self.small_oscillation_frequency() / MARCH_STEPS as f64;
        let mut p = [0.5 * (lo + hi), 0.0];
        let mut area = 0.0;
        let mut t = 0.0;
        for step in 0..200 * MARCH_STEPS {
            let k1 = field(p);
            let k2 = field([p[0] + 0.5 * dt * k1[0], p[1] + 0.5 * dt * k1[1]]);
            let k3 = field([p[0] + 0.5 * dt * k2[0], p[1] + 0.5 * dt * k2[1]]);
            let k4 = field([p[0] + dt * k3[0], p[1] + dt * k3[1]]);
            let q = [
                p[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                p[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ];
            if step > 10 && p[1] < 0.0 && q[1] >= 0.0 && q[0] > 0.0 {
                let s = -p[1] / (q[1] - p[1]);
                let end = [p[0] + s * (q[0] - p[0]), 0.0];
                area += 0.5 * (p[0] * end[1] - end[0] * p[1]);
                return Ok((area, t + s * dt));
            }
            area += 0.5 * (p[0] * q[1] - q[0] * p[1]);
            t += dt;
            p = q;
        }
        Err(Error::domain(format!("flow on level {a} did not close")))
    }
}

/// Trigonometric interpolant of the flight rate `dt/dtheta`, with its
/// exact antiderivative.
struct FlightSeries {
    mean: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl FlightSeries {
    fn new(g: &[f64]) -> Self {
        let n = g.len();
        let half = n / 2;
        let mut cos = vec![0.0; half + 1];
        let mut sin = vec![0.0; half + 1];
        for k in 1..=half {
            let scale = if k == half { 1.0 } else { 2.0 } / n as f64;
            for (j, &gj) in g.iter().enumerate() {
                let th = TAU * (k * j % n) as f64 / n as f64;
                cos[k] += scale * gj * th.cos();
                sin[k] += scale * gj * th.sin();
            }
        }
        sin[half] = 0.0;
        FlightSeries { mean: g.iter().sum::<f64>() / n as f64, cos, sin }
    }

    /// Time of flight from angle 0 to `theta`.
    fn time(&self, theta: f64) -> f64 {
        let mut t = self.mean * theta;
        for k in 1..self.cos.len() {
            let kt = k as f64 * theta;
            t += (self.cos[k] * kt.sin() + self.sin[k] * (1.0 - kt.cos())) / k as f64;
        }
        t
    }

    fn rate(&self, theta: f64) -> f64 {
        let mut g = self.mean;
        for k in 1..self.cos.len() {
            let kt = k as f64 * theta;
            g += self.cos[k] * kt.cos() + self.sin[k] * kt.sin();
        }
        g
    }
}

/// `(1 / 2 pi)` times the area enclosed by `{H = a}`.
pub fn action_of_level(ham: &Hamiltonian1D, a: f64) -> Result<f64> {
    ham.check_level(a)?;
    match ham.trace(a) {
        Ok((r, _)) => Ok(r.iter().map(|x| x * x).sum::<f64>() / (2.0 * NODES as f64)),
        Err(_) => Ok(ham.march(a)?.0 / TAU),
    }
}

/// Period of the Hamiltonian flow on `{H = a}`.
pub fn period_of_level(ham: &Hamiltonian1D, a: f64) -> Result<f64> {
    ham.check_level(a)?;
    match ham.trace(a) {
        Ok((_, g)) => Ok(TAU * g.iter().sum::<f64>() / NODES as f64),
        Err(_) => Ok(ham.march(a)?.1),
    }
}

/// `count` equally spaced levels in `(H(0), a_max]`.
pub fn uniform_levels(ham: &Hamiltonian1D, count: usize) -> Vec<f64> {
    let (lo, hi) = (ham.minimum(), ham.energy_max());
    (1..=count).map(|i| lo + (hi - lo) * i as f64 / count as f64).collect()
}

/// Tabulated `a = h(I)` as a monotone cubic Hermite interpolant whose node
/// slopes are `2 pi / T(a_i)`. The origin `(0, H(0))` is always a knot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProfile {
    actions: Vec<f64>,
    levels: Vec<f64>,
    periods: Vec<f64>,
    slopes: Vec<f64>,
    /// Knots whose slope was limited to keep the interpolant monotone.
    limited: usize,
}

pub fn build_action_profile(ham: &Hamiltonian1D, level_grid: &[f64]) -> Result<ActionProfile> {
    if level_grid.len() < 8 {
        return Err(Error::domain("an action profile needs at least 8 levels"));
    }
    if level_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("levels must be strictly increasing"));
    }
    let w0 = ham.small_oscillation_frequency();
    let mut actions = vec![0.0];
    let mut levels = vec![ham.minimum()];
    let mut periods = vec![TAU / w0];
    for &a in level_grid {
        let i = action_of_level(ham, a)?;
        if i <= *actions.last().unwrap() {
            return Err(Error::domain(format!("action is not increasing at level {a}")));
        }
        actions.push(i);
        levels.push(a);
        periods.push(period_of_level(ham, a)?);
    }
    let mut slopes: Vec<f64> = periods.iter().map(|t| TAU / t).collect();
    // Fritsch-Carlson limiter
    let mut limited = 0;
    for i in 0..actions.len() - 1 {
        let delta = (levels[i + 1] - levels[i]) / (actions[i + 1] - actions[i]);
        let (al, be) = (slopes[i] / delta, slopes[i + 1] / delta);
        let s = al * al + be * be;
        if s > 9.0 {
            let tau = 3.0 / s.sqrt();
            slopes[i] = tau * al * delta;
            slopes[i + 1] = tau * be * delta;
            limited += 1;
        }
    }
    Ok(ActionProfile { actions, levels, periods, slopes, limited })
}

impl ActionProfile {
    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn max_action(&self) -> f64 {
        *self.actions.last().unwrap()
    }

    pub fn limited_slopes(&self) -> usize {
        self.limited
    }

    fn segment(&self, i: f64) -> usize {
        self.actions.partition_point(|&x| x <= i).clamp(1, self.actions.len() - 1) - 1
    }

    /// `h(I)`; linear continuation past the last knot, `H(0)` below zero.
    pub fn h(&self, action: f64) -> f64 {
        let last = self.actions.len() - 1;
        if action <= 0.0 {
            return self.levels[0];
        }
        if action >= self.actions[last] {
            return self.levels[last] + self.slopes[last] * (action - self.actions[last]);
        }
        let s = self.segment(action);
        let d = self.actions[s + 1] - self.actions[s];
        let t = (action - self.actions[s]) / d;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.levels[s]
            + (t3 - 2.0 * t2 + t) * d * self.slopes[s]
            + (3.0 * t2 - 2.0 * t3) * self.levels[s + 1]
            + (t3 - t2) * d * self.slopes[s + 1]
    }

    /// `omega(I) = h'(I)`.
    pub fn omega(&self, action: f64) -> f64 {
        let last = self.actions.len() - 1;
        if action <= 0.0 {
            return self.slopes[0];
        }
        if action >= self.actions[last] {
            return self.slopes[last];
        }
        let s = self.segment(action);
        let d = self.actions[s + 1] - self.actions[s];
        let t = (action - self.actions[s]) / d;
        6.0 * (t * t - t) / d * (self.levels[s] - self.levels[s + 1])
            + (3.0 * t * t - 4.0 * t + 1.0) * self.slopes[s]
            + (3.0 * t * t - 2.0 * t) * self.slopes[s + 1]
    }

    /// `I(a)`, the inverse of [`h`](Self::h).
    pub fn action(&self, level: f64) -> f64 {
        let last = self.levels.len() - 1;
        if level <= self.levels[0] {
            return 0.0;
        }
        if level >= self.levels[last] {
            return self.actions[last] + (level - self.levels[last]) / self.slopes[last];
        }
        let s = self.levels.partition_point(|&x| x <= level).clamp(1, last) - 1;
        let (mut lo, mut hi) = (self.actions[s], self.actions[s + 1]);
        let mut x = lo + (hi - lo) * (level - self.levels[s]) / (self.levels[s + 1] - self.levels[s]);
        for _ in 0..100 {
            let f = self.h(x) - level;
            if f == 0.0 {
                break;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.omega(x);
            let n = x - f / d;
            let next = if d > 0.0 && n > lo && n < hi { n } else { 0.5 * (lo + hi) };
            if (next - x).abs() <= 2.0 * f64::EPSILON * x.max(1e-300) {
                x = next;
                break;
            }
            x = next;
        }
        x
    }

    /// Largest `|omega(I) T(h(I)) / 2 pi - 1|` over segment midpoints, with
    /// fresh period integrals. Checks the table against the flow.
    pub fn cross_check(&self, ham: &Hamiltonian1D) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for w in self.actions.windows(2) {
            let i = 0.5 * (w[0] + w[1]);
            let t = period_of_level(ham, self.h(i))?;
            worst = worst.max((self.omega(i) * t / TAU - 1.0).abs());
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ActionProfile = serde_json::from_str(s)?;
        let n = p.actions.len();
        if n < 2 || p.levels.len() != n || p.periods.len() != n || p.slopes.len() != n {
            return Err(Error::Config("action profile tables have inconsistent lengths".into()));
        }
        if p.actions.windows(2).any(|w| w[1] <= w[0]) || p.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("action profile is not increasing".into()));
        }
        Ok(p)
    }
}

fn unit_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// `(x, y) -> (I, phi)`. The angle is `2 pi` times the time of flight from
/// the positive `x` axis over the period. The origin maps to `(0, 0)`.
pub fn aa_transform_1dof(
    ham: &Hamiltonian1D,
    profile: &ActionProfile,
    xy: [f64; 2],
) -> Result<(f64, f64)> {
    if xy == [0.0, 0.0] {
        return Ok((0.0, 0.0));
    }
    let a = ham.value(xy[0], xy[1]);
    ham.check_level(a)?;
    let (_, g) = ham.trace(a)?;
    let series = FlightSeries::new(&g);
    let theta = unit_angle(xy[1].atan2(xy[0]));
    let phi = unit_angle(series.time(theta) / series.mean);
    Ok((profile.action(a), phi))
}

/// `(I, phi) -> (x, y)`, inverse of [`aa_transform_1dof`].
pub fn aa_inverse_1dof(
    ham: &Hamiltonian1D,
    profile: &ActionProfile,
    action_angle: (f64, f64),
) -> Result<[f64; 2]> {
    let (i, phi) = action_angle;
    if !(i >= 0.0 && i.is_finite() && phi.is_finite()) {
        return Err(Error::domain("action must be finite and nonnegative"));
    }
    if i == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let a = profile.h(i);
    ham.check_level(a)?;
    let (_, g) = ham.trace(a)?;
    let series = FlightSeries::new(&g);
    let target = unit_angle(phi) * series.mean;
    // time(theta) is increasing on [0, 2 pi]
    let (mut lo, mut hi) = (0.0, TAU);
    let mut th = unit_angle(phi);
    for _ in 0..100 {
        let f = series.time(th) - target;
        if f < 0.0 {
            lo = th;
        } else {
            hi = th;
        }
        let n = th - f / series.rate(th);
        let next = if n > lo && n < hi { n } else { 0.5 * (lo + hi) };
        if (next - th).abs() < 1e-15 {
            th = next;
            break;
        }
        th = next;
    }
    let (r, _) = ham.radial_root(a, [th.cos(), th.sin()])?;
    Ok([r * th.cos(), r * th.sin()])
}

/// Numerical Jacobian determinant of `(x, y) -> (I, phi)`. Equals 1 for a
/// canonical transform.
pub fn aa_jacobian_determinant(
    ham: &Hamiltonian1D,
    profile: &ActionProfile,
    xy: [f64; 2],
    step: f64,
) -> Result<f64> {
    let eval = |dx: f64, dy: f64| aa_transform_1dof(ham, profile, [xy[0] + dx, xy[1] + dy]);
    let (ixp, pxp) = eval(step, 0.0)?;
    let (ixm, pxm) = eval(-step, 0.0)?;
    let (iyp, pyp) = eval(0.0, step)?;
    let (iym, pym) = eval(0.0, -step)?;
    let wrap = |d: f64| (d + PI).rem_euclid(TAU) - PI;
    let h2 = 2.0 * step;
    let (ix, iy) = ((ixp - ixm) / h2, (iyp - iym) / h2);
    let (px, py) = (wrap(pxp - pxm) / h2, wrap(pyp - pym) / h2);
    Ok(ix * py - iy * px)
}

/// Neighbour-coupling term `P_k(v_{k-1}, v_k, v_{k+1})`; the missing
/// neighbours at the chain ends are `None`.
pub type Coupling = dyn Fn(usize, Option<[f64; 2]>, [f64; 2], Option<[f64; 2]>) -> [f64; 2]
    + Send
    + Sync;

/// Chain of `n` identical oscillators in Cartesian normal-form coordinates:
/// `W_k(I) = omega(I_k)`, nearest-neighbour drift and a `2n x 2n` dispersion.
/// Rejects dispersions that degenerate at random probe points.
pub fn build_oscillator_chain(
    profile: Arc<ActionProfile>,
    n: usize,
    coupling: impl Fn(usize, Option<[f64; 2]>, [f64; 2], Option<[f64; 2]>) -> [f64; 2]
        + Send
        + Sync
        + 'static,
    noise: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
) -> Result<BirkhoffSystem> {
    if n == 0 {
        return Err(Error::domain("a chain needs at least one oscillator"));
    }
    let radius = profile.max_action().sqrt();
    let p = profile.clone();
    let sys = BirkhoffSystem::builder(n, n)
        .frequencies(move |i, w| {
            for (wk, &ik) in w.iter_mut().zip(i) {
                *wk = p.omega(ik);
            }
        })
        .drift(move |v, out| {
            let block = |k: usize| [v[2 * k], v[2 * k + 1]];
            for k in 0..n {
                let prev = (k > 0).then(|| block(k - 1));
                let next = (k + 1 < n).then(|| block(k + 1));
                let pk = coupling(k, prev, block(k), next);
                out[2 * k] = pk[0];
                out[2 * k + 1] = pk[1];
            }
        })
        .dispersion(noise)
        .build()?;
    sys.probe_random(radius, 64, 0)?;
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{bl_distance_sliced, EmpiricalMeasure};
    use crate::model::{actions_of, probe_frequency_nonresonance, CartesianState, Epsilon};
    use crate::sde::{integrate_birkhoff_system, run_ensemble, IntegratorConfig, StoppingRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn harmonic_action_is_energy() {
        let h = Hamiltonian1D::harmonic(5.0);
        for a in [1e-3, 0.3, 1.0, 4.9] {
            assert!((action_of_level(&h, a).unwrap() - a).abs() < 1e-8 * a.max(1.0));
            assert!((period_of_level(&h, a).unwrap() - TAU).abs() < 1e-10);
        }
        assert!(action_of_level(&h, 6.0).is_err());
        assert!(action_of_level(&h, 0.0).is_err());
        let p = build_action_profile(&h, &uniform_levels(&h, 16)).unwrap();
        for i in [0.0, 0.1, 1.7, 4.0] {
            assert!((p.omega(i) - 1.0).abs() < 1e-6);
            assert!((p.h(i) - i).abs() < 1e-8);
        }
    }

    #[test]
    fn quartic_radial_matches_analytic_profile() {
        let h = Hamiltonian1D::quartic_radial(6.0);
        for a in [0.1, 2.0, 6.0] {
            let i = action_of_level(&h, a).unwrap();
            assert!((i + i * i - a).abs() < 1e-10, "a={a}");
        }
        let p = build_action_profile(&h, &uniform_levels(&h, 32)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let i = rng.random_range(0.0..p.max_action());
            assert!((p.omega(i) - (1.0 + 2.0 * i)).abs() < 1e-4 * (1.0 + 2.0 * i), "I={i}");
        }
        assert!(p.cross_check(&h).unwrap() < 1e-4);
        assert_eq!(p.limited_slopes(), 0);
    }

    #[test]
    fn duffing_area_matches_monte_carlo() {
        let h = Hamiltonian1D::duffing(2.0);
        let exact = action_of_level(&h, 1.0).unwrap();
        let xm = (5f64.sqrt() - 1.0).sqrt();
        let ym = 2f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4_000_000;
        let inside = (0..n)
            .filter(|_| {
                let x = rng.random_range(-xm..xm);
                let y = rng.random_range(-ym..ym);
                h.value(x, y) <= 1.0
            })
            .count();
        let mc = inside as f64 / n as f64 * 4.0 * xm * ym / TAU;
        assert!((exact / mc - 1.0).abs() < 1e-3, "{exact} vs {mc}");
        // hardening spring
        let p = build_action_profile(&h, &uniform_levels(&h, 16)).unwrap();
        assert!(p.actions().windows(2).all(|w| p.omega(w[1]) > p.omega(w[0])));
        assert!(p.cross_check(&h).unwrap() < 1e-4);
    }

    #[test]
    fn sheared_loops_use_the_marching_fallback() {
        // (x, y - c x^2) is area preserving, so I(a) = a and T = 2 pi
        let c = 10.0;
        let h = Hamiltonian1D::new(move |x, y| 0.5 * (x * x + (y - c * x * x).powi(2)), 4.0).unwrap();
        assert!(h.trace(2.0).is_err());
        let i = action_of_level(&h, 2.0).unwrap();
        assert!((i - 2.0).abs() < 1e-5, "{i}");
        assert!((period_of_level(&h, 2.0).unwrap() - TAU).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_hamiltonians_and_grids() {
        assert!(Hamiltonian1D::new(|x, y| x * x - y * y, 1.0).is_err());
        assert!(Hamiltonian1D::new(|x, y| x * x + y * y, -1.0).is_err());
        let h = Hamiltonian1D::harmonic(1.0);
        assert!(build_action_profile(&h, &[0.1, 0.2, 0.3]).is_err());
        let mut bad = uniform_levels(&h, 10);
        bad.swap(2, 3);
        assert!(build_action_profile(&h, &bad).is_err());
    }

    #[test]
    fn harmonic_transform_is_polar() {
        let h = Hamiltonian1D::harmonic(10.0);
        let p = build_action_profile(&h, &uniform_levels(&h, 16)).unwrap();
        let (i, phi) = aa_transform_1dof(&h, &p, [1.0, 1.0]).unwrap();
        assert!((i - 1.0).abs() < 1e-10);
        assert!((phi - PI / 4.0).abs() < 1e-10);
        assert_eq!(aa_transform_1dof(&h, &p, [0.0, 0.0]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn transform_round_trip_and_canonicity() {
        for (h, amax) in [
            (Hamiltonian1D::harmonic(3.0), 3.0),
            (Hamiltonian1D::quartic_radial(3.0), 3.0),
            (Hamiltonian1D::duffing(3.0), 3.0),
        ] {
            let p = build_action_profile(&h, &uniform_levels(&h, 48)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut worst: f64 = 0.0;
            let mut tested = 0;
            while tested < 200 {
                let xy = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                let a = h.value(xy[0], xy[1]);
                if a > amax || a < 1e-3 {
                    continue;
                }
                tested += 1;
                let ip = aa_transform_1dof(&h, &p, xy).unwrap();
                let back = aa_inverse_1dof(&h, &p, ip).unwrap();
                worst = worst.max((back[0] - xy[0]).hypot(back[1] - xy[1]));
                if tested % 10 == 0 {
                    let det = aa_jacobian_determinant(&h, &p, xy, 1e-5).unwrap();
                    assert!((det - 1.0).abs() < 1e-5, "det {det} at {xy:?}");
                }
            }
            assert!(worst < 1e-6, "{worst}");
        }
    }

    #[test]
    fn profile_survives_json() {
        let h = Hamiltonian1D::duffing(1.0);
        let p = build_action_profile(&h, &uniform_levels(&h, 8)).unwrap();
        let q = ActionProfile::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, q);
        assert!(ActionProfile::from_json("{\"actions\":[0,1],\"levels\":[0],\"periods\":[1,1],\"slopes\":[1,1],\"limited\":0}").is_err());
    }

    fn harmonic_profile() -> Arc<ActionProfile> {
        let h = Hamiltonian1D::harmonic(10.0);
        Arc::new(build_action_profile(&h, &uniform_levels(&h, 16)).unwrap())
    }

    #[test]
    fn single_harmonic_chain_is_the_ou_benchmark() {
        let sys = build_oscillator_chain(
            harmonic_profile(),
            1,
            |_, _, v, _| [-v[0], -v[1]],
            |_, m| m.fill_with_identity(),
        )
        .unwrap();
        let mut w = [0.0];
        let mut p = [0.0; 2];
        let mut b = DMatrix::zeros(2, 2);
        sys.frequencies(&[0.7], &mut w);
        sys.drift(&[0.3, -2.0], &mut p);
        sys.dispersion(&[0.3, -2.0], &mut b);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert_eq!(p, [-0.3, 2.0]);
        assert_eq!(b, DMatrix::identity(2, 2));
        assert!(build_oscillator_chain(harmonic_profile(), 1, |_, _, _, _| [0.0; 2], |_, _| {})
            .is_err());
    }

    #[test]
    fn quartic_chain_frequencies_are_nonresonant() {
        let h = Hamiltonian1D::quartic_radial(4.0);
        let p = Arc::new(build_action_profile(&h, &uniform_levels(&h, 32)).unwrap());
        let q = p.clone();
        let w = move |i: &[f64], out: &mut [f64]| {
            for (o, &x) in out.iter_mut().zip(i) {
                *o = q.omega(x);
            }
        };
        let probe = probe_frequency_nonresonance(&w, 2, (0.0, p.max_action()), 5, 100_000, 1e-12, 4);
        assert_eq!(probe.collapses, 0);
    }

    #[test]
    fn unperturbed_chain_conserves_profile_actions() {
        let h = Hamiltonian1D::duffing(4.0);
        let p = Arc::new(build_action_profile(&h, &uniform_levels(&h, 32)).unwrap());
        let sys = build_oscillator_chain(p, 3, |_, _, _, _| [0.0; 2], |_, m| m.fill_with_identity())
            .unwrap();
        let sys = BirkhoffSystem::builder(3, 3)
            .frequencies({
                let s = Arc::new(sys);
                move |i, w| s.frequencies(i, w)
            })
            .build()
            .unwrap();
        let init = CartesianState::new(vec![1.0, 0.0, 0.3, 0.4, -0.8, 0.9]).unwrap();
        let i0 = init.actions();
        let cfg = IntegratorConfig { record_every: 1000, ..IntegratorConfig::new(1e-3, 10.0) };
        let path =
            integrate_birkhoff_system(&sys, Epsilon::new(1e-2).unwrap(), &init, &cfg, &StoppingRule::None)
                .unwrap();
        for s in path.states() {
            for (a, b) in actions_of(s).iter().zip(&i0) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn uncoupled_chain_has_independent_actions() {
        let h = Hamiltonian1D::duffing(4.0);
        let p = Arc::new(build_action_profile(&h, &uniform_levels(&h, 16)).unwrap());
        let sys = build_oscillator_chain(
            p,
            2,
            |_, _, v, _| [-v[0], -v[1]],
            |_, m| m.fill_with_identity(),
        )
        .unwrap();
        let init = CartesianState::new(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let n = 2000;
        let ens = run_ensemble(n, 1, |id| {
            let cfg = IntegratorConfig { record_every: 100, ..IntegratorConfig::new(1e-2, 1.0) }
                .with_seed(5, id);
            integrate_birkhoff_system(&sys, Epsilon::new(0.05).unwrap(), &init, &cfg, &StoppingRule::None)
        })
        .unwrap();
        let last = ens.times().len() - 1;
        let joint: Vec<Vec<f64>> = ens.paths().iter().map(|p| actions_of(p.state(last))).collect();
        // pair block 1 of path i with block 2 of path i + n/2
        let product: Vec<Vec<f64>> =
            (0..n).map(|i| vec![joint[i][0], joint[(i + n / 2) % n][1]]).collect();
        let d = bl_distance_sliced(
            &EmpiricalMeasure::from_rows(&joint).unwrap(),
            &EmpiricalMeasure::from_rows(&product).unwrap(),
            64,
            1,
        )
        .unwrap();
        assert!(d.value < 0.05, "{}", d.value);
    }
}
