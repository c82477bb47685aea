//! States, coordinate changes and the two perturbed system classes.
//!
//! Cartesian vectors in `R^{2n}` are stored block-interleaved: block `k`
//! occupies entries `2k` and `2k + 1`, i.e. `(v_k, v_{-k})`. The polar
//! convention is `v_k = sqrt(2 I_k) (cos phi_k, sin phi_k)`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reduce an angle into `[0, 2pi)`.
#[inline]
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid rounds tiny negative inputs up to exactly TAU
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Small parameter of the perturbation, `0 < eps <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize)]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Epsilon(value))
        } else {
            Err(Error::domain(format!("epsilon must lie in (0, 1], got {value}")))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Actions and angles; every angle is kept reduced modulo `2pi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionAngleState {
    actions: Vec<f64>,
    angles: Vec<f64>,
}

impl ActionAngleState {
    pub fn new(actions: Vec<f64>, angles: Vec<f64>) -> Self {
        let angles = angles.into_iter().map(wrap_angle).collect();
        ActionAngleState { actions, angles }
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Concatenated `(I, phi)` vector as used by the integrators.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.actions.clone();
        out.extend_from_slice(&self.angles);
        out
    }
}

/// A point of `R^{2n}` seen as `n` planar blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CartesianState {
    v: Vec<f64>,
}

impl CartesianState {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() % 2 != 0 {
            return Err(Error::domain(format!(
                "cartesian state needs an even length, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("cartesian state has non-finite entries"));
        }
        Ok(CartesianState { v })
    }

    pub fn blocks(&self) -> usize {
        self.v.len() / 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.v
    }

    pub fn block(&self, k: usize) -> [f64; 2] {
        [self.v[2 * k], self.v[2 * k + 1]]
    }

    pub fn actions(&self) -> Vec<f64> {
        actions_of(&self.v)
    }
}

/// `I_k = |v_k|^2 / 2` for every block.
pub fn actions_of(v: &[f64]) -> Vec<f64> {
    v.chunks_exact(2)
        .map(|b| 0.5 * (b[0] * b[0] + b[1] * b[1]))
        .collect()
}

pub fn action_angle_of(v: &CartesianState) -> ActionAngleState {
    let mut actions = Vec::with_capacity(v.blocks());
    let mut angles = Vec::with_capacity(v.blocks());
    for b in v.v.chunks_exact(2) {
        actions.push(0.5 * (b[0] * b[0] + b[1] * b[1]));
        let phi = if b[0] == 0.0 && b[1] == 0.0 {
            0.0
        } else {
            b[1].atan2(b[0])
        };
        angles.push(phi);
    }
    ActionAngleState::new(actions, angles)
}

pub fn cartesian_of(s: &ActionAngleState) -> Result<CartesianState> {
    if s.actions.len() != s.angles.len() {
        return Err(Error::domain(format!(
            "{} actions but {} angles",
            s.actions.len(),
            s.angles.len()
        )));
    }
    let mut v = vec![0.0; 2 * s.actions.len()];
    polar_into(&s.actions, &s.angles, &mut v)?;
    Ok(CartesianState { v })
}

/// Write `sqrt(2 I_k) (cos phi_k, sin phi_k)` into `out`.
pub(crate) fn polar_into(actions: &[f64], angles: &[f64], out: &mut [f64]) -> Result<()> {
    for (k, (&i, &phi)) in actions.iter().zip(angles).enumerate() {
        if i < 0.0 || !i.is_finite() {
            return Err(Error::domain(format!("action I_{k} = {i} is not a nonnegative number")));
        }
        let r = (2.0 * i).sqrt();
        let (s, c) = phi.sin_cos();
        out[2 * k] = r * c;
        out[2 * k + 1] = r * s;
    }
    Ok(())
}

/// Rotate one planar block by angle `theta` in place.
#[inline]
pub(crate) fn rotate_block(b: &mut [f64], theta: f64) {
    let (s, c) = theta.sin_cos();
    let x = b[0];
    let y = b[1];
    b[0] = c * x - s * y;
    b[1] = s * x + c * y;
}

/// Block-diagonal torus action on `R^{2n}`.
pub fn torus_rotate(theta: &[f64], v: &CartesianState) -> CartesianState {
    let mut out = v.v.clone();
    rotate_in_place(theta, &mut out);
    CartesianState { v: out }
}

pub(crate) fn rotate_in_place(theta: &[f64], v: &mut [f64]) {
    for (b, &t) in v.chunks_exact_mut(2).zip(theta) {
        rotate_block(b, t);
    }
}

/// The rotation `U` of the plane with `U (z2/|z2|) = z1/|z1|`.
pub fn planar_aligner(z1: [f64; 2], z2: [f64; 2]) -> Result<Matrix2<f64>> {
    let n1 = z1[0].hypot(z1[1]);
    let n2 = z2[0].hypot(z2[1]);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::domain("planar_aligner needs two nonzero vectors"));
    }
    let (a, b) = (z1[0] / n1, z1[1] / n1);
    let (c, d) = (z2[0] / n2, z2[1] / n2);
    let cos = a * c + b * d;
    let sin = c * b - d * a;
    let norm = cos.hypot(sin);
    let (cos, sin) = (cos / norm, sin / norm);
    Ok(Matrix2::new(cos, -sin, sin, cos))
}

/// Smallest action component; `+inf` for an empty vector.
pub fn min_action(actions: &[f64]) -> f64 {
    actions.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `I -> R^m` (frequencies).
pub type FrequencyMap = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// `(I, phi) -> R^m`.
pub type AngleField = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(I, phi) -> matrix`.
pub type AngleMatrix = dyn Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync;
/// `v -> R^{2n}`.
pub type CartesianField = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// `v -> 2n x 2n1 matrix`.
pub type CartesianMatrix = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;

/// Outcome of sampling coefficient maps at probe points.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub points: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub max_abs_coefficient: f64,
}

fn check_finite(name: &str, values: &[f64]) -> Result<f64> {
    let mut m: f64 = 0.0;
    for &x in values {
        if !x.is_finite() {
            return Err(Error::domain(format!("{name} returned a non-finite value")));
        }
        m = m.max(x.abs());
    }
    Ok(m)
}

fn gram_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let g = m * m.transpose();
    let eig = SymmetricEigen::new(g).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn check_ellipticity(lo: f64, hi: f64, lambda: Option<f64>, what: &str) -> Result<()> {
    let ok = match lambda {
        Some(l) => lo >= l * (1.0 - 1e-12) && hi <= (1.0 + 1e-12) / l,
        None => lo > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{what} violates ellipticity: eigenvalues in [{lo:e}, {hi:e}], declared lambda {lambda:?}"
        )))
    }
}

/// Perturbed integrable system in action-angle form, written in slow time:
///
/// ```text
/// dI   = P^I(I, phi) dtau + Psi^I(I, phi) dbeta
/// dphi = [theta(I)/eps + P^phi(I, phi)] dtau + Psi^phi(I, phi) dbeta
/// ```
///
/// Both equations are driven by the same `d1`-dimensional Wiener process.
/// Output buffers handed to the coefficient maps are zeroed before each call.
#[derive(Clone)]
pub struct TorusSystem {
    pub(crate) d: usize,
    pub(crate) n: usize,
    pub(crate) d1: usize,
    pub(crate) theta: Arc<FrequencyMap>,
    pub(crate) drift_actions: Arc<AngleField>,
    pub(crate) drift_angles: Arc<AngleField>,
    pub(crate) disp_actions: Arc<AngleMatrix>,
    pub(crate) disp_angles: Arc<AngleMatrix>,
    pub(crate) ellipticity: Option<f64>,
    pub(crate) growth_q: f64,
}

impl fmt::Debug for TorusSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusSystem")
            .field("d", &self.d)
            .field("n", &self.n)
            .field("d1", &self.d1)
            .field("ellipticity", &self.ellipticity)
            .field("growth_q", &self.growth_q)
            .finish_non_exhaustive()
    }
}

impl TorusSystem {
    pub fn builder(d: usize, n: usize, d1: usize) -> TorusSystemBuilder {
        TorusSystemBuilder {
            sys: TorusSystem {
                d,
                n,
                d1,
                theta: Arc::new(|_, _| {}),
                drift_actions: Arc::new(|_, _, _| {}),
                drift_angles: Arc::new(|_, _, _| {}),
                disp_actions: Arc::new(|_, _, _| {}),
                disp_angles: Arc::new(|_, _, _| {}),
                ellipticity: None,
                growth_q: 1.0,
            },
        }
    }

    pub fn action_dim(&self) -> usize {
        self.d
    }

    pub fn angle_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.d1
    }

    pub fn growth_exponent(&self) -> f64 {
        self.growth_q
    }

    pub fn ellipticity(&self) -> Option<f64> {
        self.ellipticity
    }

    pub fn frequency(&self, actions: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.theta)(actions, out)
    }

    pub fn drift_actions(&self, actions: &[f64], angles: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.drift_actions)(actions, angles, out)
    }

    pub fn drift_angles(&self, actions: &[f64], angles: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.drift_angles)(actions, angles, out)
    }

    pub fn dispersion_actions(&self, actions: &[f64], angles: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        (self.disp_actions)(actions, angles, out)
    }

    pub fn dispersion_angles(&self, actions: &[f64], angles: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        (self.disp_angles)(actions, angles, out)
    }

    /// Evaluate every coefficient at the given points, checking finiteness
    /// and ellipticity of `Psi^I (Psi^I)^t`.
    pub fn probe(&self, points: &[(Vec<f64>, Vec<f64>)]) -> Result<ProbeReport> {
        let mut report = ProbeReport {
            points: points.len(),
            min_eigenvalue: f64::INFINITY,
            max_eigenvalue: f64::NEG_INFINITY,
            max_abs_coefficient: 0.0,
        };
        let mut th = vec![0.0; self.n];
        let mut pi = vec![0.0; self.d];
        let mut pp = vec![0.0; self.n];
        let mut si = DMatrix::zeros(self.d, self.d1);
        let mut sp = DMatrix::zeros(self.n, self.d1);
        for (actions, angles) in points {
            if actions.len() != self.d || angles.len() != self.n {
                return Err(Error::precondition("probe point has wrong dimensions"));
            }
            self.frequency(actions, &mut th);
            self.drift_actions(actions, angles, &mut pi);
            self.drift_angles(actions, angles, &mut pp);
            self.dispersion_actions(actions, angles, &mut si);
            self.dispersion_angles(actions, angles, &mut sp);
            let mut m = check_finite("theta", &th)?;
            m = m.max(check_finite("P^I", &pi)?);
            m = m.max(check_finite("P^phi", &pp)?);
            m = m.max(check_finite("Psi^I", si.as_slice())?);
            m = m.max(check_finite("Psi^phi", sp.as_slice())?);
            report.max_abs_coefficient = report.max_abs_coefficient.max(m);
            let (lo, hi) = gram_eigen_range(&si);
            check_ellipticity(lo, hi, self.ellipticity, "Psi^I (Psi^I)^t")?;
            report.min_eigenvalue = report.min_eigenvalue.min(lo);
            report.max_eigenvalue = report.max_eigenvalue.max(hi);
        }
        Ok(report)
    }

    /// Probe at `count` random points with `I` in `[-radius, radius]^d`.
    pub fn probe_random(&self, radius: f64, count: usize, seed: u64) -> Result<ProbeReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<_> = (0..count)
            .map(|_| {
                let i = (0..self.d).map(|_| rng.random_range(-radius..=radius)).collect();
                let p = (0..self.n).map(|_| rng.random_range(0.0..TAU)).collect();
                (i, p)
            })
            .collect();
        self.probe(&points)
    }
}

pub struct TorusSystemBuilder {
    sys: TorusSystem,
}

impl TorusSystemBuilder {
    pub fn frequency(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sys.theta = Arc::new(f);
        self
    }

    pub fn drift_actions(
        mut self,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.sys.drift_actions = Arc::new(f);
        self
    }

    pub fn drift_angles(
        mut self,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.sys.drift_angles = Arc::new(f);
        self
    }

    pub fn dispersion_actions(
        mut self,
        f: impl Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.sys.disp_actions = Arc::new(f);
        self
    }

    pub fn dispersion_angles(
        mut self,
        f: impl Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.sys.disp_angles = Arc::new(f);
        self
    }

    /// Declared ellipticity constant `lambda` used by the probes.
    pub fn ellipticity(mut self, lambda: f64) -> Self {
        self.sys.ellipticity = Some(lambda);
        self
    }

    pub fn growth_exponent(mut self, q: f64) -> Self {
        self.sys.growth_q = q;
        self
    }

    pub fn build(self) -> Result<TorusSystem> {
        let s = &self.sys;
        if s.d == 0 || s.n == 0 || s.d1 == 0 {
            return Err(Error::domain("torus system dimensions must be positive"));
        }
        if let Some(l) = s.ellipticity {
            if !(l > 0.0 && l <= 1.0) {
                return Err(Error::domain(format!("ellipticity constant {l} not in (0, 1]")));
            }
        }
        Ok(self.sys)
    }
}

/// Perturbed Birkhoff-integrable system in slow time:
///
/// ```text
/// dv_k = eps^{-1} W_k(I) v_k^perp dtau + P_k(v) dtau + sum_j B_kj(v) dbeta_j
/// ```
///
/// with `n1` independent planar Wiener processes `beta_j`. `B(v)` is the
/// full `2n x 2n1` matrix made of `2 x 2` blocks `B_kj`.
#[derive(Clone)]
pub struct BirkhoffSystem {
    pub(crate) n: usize,
    pub(crate) n1: usize,
    pub(crate) frequencies: Arc<FrequencyMap>,
    pub(crate) drift: Arc<CartesianField>,
    pub(crate) dispersion: Arc<CartesianMatrix>,
    pub(crate) ellipticity: Option<f64>,
}

impl fmt::Debug for BirkhoffSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BirkhoffSystem")
            .field("n", &self.n)
            .field("n1", &self.n1)
            .field("ellipticity", &self.ellipticity)
            .finish_non_exhaustive()
    }
}

impl BirkhoffSystem {
    pub fn builder(n: usize, n1: usize) -> BirkhoffSystemBuilder {
        BirkhoffSystemBuilder {
            sys: BirkhoffSystem {
                n,
                n1,
                frequencies: Arc::new(|_, _| {}),
                drift: Arc::new(|_, _| {}),
                dispersion: Arc::new(|_, _| {}),
                ellipticity: None,
            },
        }
    }

    pub fn blocks(&self) -> usize {
        self.n
    }

    pub fn noise_blocks(&self) -> usize {
        self.n1
    }

    pub fn ellipticity(&self) -> Option<f64> {
        self.ellipticity
    }

    pub fn frequencies(&self, actions: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.frequencies)(actions, out)
    }

    pub fn drift(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.drift)(v, out)
    }

    pub fn dispersion(&self, v: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        (self.dispersion)(v, out)
    }

    pub(crate) fn zero_dispersion(&self) -> DMatrix<f64> {
        DMatrix::zeros(2 * self.n, 2 * self.n1)
    }

    /// Check finiteness and two-sided ellipticity of `B B^t` at `points`.
    /// With `require_elliptic == false` only finiteness is checked, which is
    /// what unperturbed test systems (`B = 0`) need.
    pub fn probe(&self, points: &[Vec<f64>], require_elliptic: bool) -> Result<ProbeReport> {
        let mut report = ProbeReport {
            points: points.len(),
            min_eigenvalue: f64::INFINITY,
            max_eigenvalue: f64::NEG_INFINITY,
            max_abs_coefficient: 0.0,
        };
        let mut w = vec![0.0; self.n];
        let mut p = vec![0.0; 2 * self.n];
        let mut b = self.zero_dispersion();
        for v in points {
            if v.len() != 2 * self.n {
                return Err(Error::precondition("probe point has wrong dimension"));
            }
            self.frequencies(&actions_of(v), &mut w);
            self.drift(v, &mut p);
            self.dispersion(v, &mut b);
            let mut m = check_finite("W", &w)?;
            m = m.max(check_finite("P", &p)?);
            m = m.max(check_finite("B", b.as_slice())?);
            report.max_abs_coefficient = report.max_abs_coefficient.max(m);
            let (lo, hi) = gram_eigen_range(&b);
            if require_elliptic {
                check_ellipticity(lo, hi, self.ellipticity, "B B^t")?;
            }
            report.min_eigenvalue = report.min_eigenvalue.min(lo);
            report.max_eigenvalue = report.max_eigenvalue.max(hi);
        }
        Ok(report)
    }

    pub fn probe_random(&self, radius: f64, count: usize, seed: u64) -> Result<ProbeReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..2 * self.n).map(|_| rng.random_range(-radius..=radius)).collect())
            .collect();
        self.probe(&points, true)
    }
}

pub struct BirkhoffSystemBuilder {
    sys: BirkhoffSystem,
}

impl BirkhoffSystemBuilder {
    pub fn frequencies(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sys.frequencies = Arc::new(f);
        self
    }

    pub fn drift(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sys.drift = Arc::new(f);
        self
    }

    pub fn dispersion(
        mut self,
        f: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.sys.dispersion = Arc::new(f);
        self
    }

    pub fn ellipticity(mut self, lambda: f64) -> Self {
        self.sys.ellipticity = Some(lambda);
        self
    }

    pub fn build(self) -> Result<BirkhoffSystem> {
        if self.sys.n == 0 || self.sys.n1 == 0 {
            return Err(Error::domain("Birkhoff system dimensions must be positive"));
        }
        if let Some(l) = self.sys.ellipticity {
            if !(l > 0.0 && l <= 1.0) {
                return Err(Error::domain(format!("ellipticity constant {l} not in (0, 1]")));
            }
        }
        Ok(self.sys)
    }
}

/// Result of sampling a frequency map for integer resonances.
#[derive(Clone, Debug, Serialize)]
pub struct ResonanceProbe {
    pub draws: usize,
    pub max_order: i32,
    /// Draws where some `0 < |k|_inf <= max_order` had `|k . W| <= tol`.
    pub collapses: usize,
    /// Smallest `|k . W|` seen over all draws and all `k`.
    pub min_abs_combination: f64,
}

/// Sample actions uniformly in `[lo, hi]^n` and look for integer relations
/// `k . W(I) = 0` among the frequencies.
pub fn probe_frequency_nonresonance(
    frequency: &FrequencyMap,
    n: usize,
    range: (f64, f64),
    max_order: i32,
    draws: usize,
    tol: f64,
    seed: u64,
) -> ResonanceProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut k = vec![0i32; n];
    let mut collapses = 0;
    let mut min_abs = f64::INFINITY;
    for _ in 0..draws {
        for a in actions.iter_mut() {
            *a = rng.random_range(range.0..=range.1);
        }
        w.fill(0.0);
        frequency(&actions, &mut w);
        let mut hit = false;
        // odometer over {-K..K}^n
        k.fill(-max_order);
        loop {
            if k.iter().any(|&x| x != 0) {
                let dot: f64 = k.iter().zip(&w).map(|(&ki, &wi)| ki as f64 * wi).sum();
                min_abs = min_abs.min(dot.abs());
                if dot.abs() <= tol {
                    hit = true;
                }
            }
            let mut pos = 0;
            while pos < n {
                if k[pos] < max_order {
                    k[pos] += 1;
                    break;
                }
                k[pos] = -max_order;
                pos += 1;
            }
            if pos == n {
                break;
            }
        }
        if hit {
            collapses += 1;
        }
    }
    ResonanceProbe {
        draws,
        max_order,
        collapses,
        min_abs_combination: min_abs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

    fn cs(v: &[f64]) -> CartesianState {
        CartesianState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn action_angle_examples() {
        let s = action_angle_of(&cs(&[SQRT_2, 0.0]));
        assert!((s.actions()[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.angles()[0], 0.0);

        let s = action_angle_of(&cs(&[0.0, SQRT_2]));
        assert!((s.actions()[0] - 1.0).abs() < 1e-15);
        assert!((s.angles()[0] - FRAC_PI_2).abs() < 1e-15);

        let s = action_angle_of(&cs(&[0.0, 0.0]));
        assert_eq!(s.actions(), &[0.0]);
        assert_eq!(s.angles(), &[0.0]);
    }

    #[test]
    fn cartesian_examples() {
        let v = cartesian_of(&ActionAngleState::new(vec![1.0], vec![0.0])).unwrap();
        assert!((v.as_slice()[0] - SQRT_2).abs() < 1e-15);
        assert_eq!(v.as_slice()[1], 0.0);

        let v = cartesian_of(&ActionAngleState::new(vec![0.0], vec![1.234])).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0]);

        let v = cartesian_of(&ActionAngleState::new(vec![2.0], vec![PI])).unwrap();
        assert!((v.as_slice()[0] + 2.0).abs() < 1e-15);
        assert!(v.as_slice()[1].abs() < 1e-15);
    }

    #[test]
    fn negative_action_is_rejected() {
        let err = cartesian_of(&ActionAngleState::new(vec![1.0, -0.5], vec![0.0, 0.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn odd_length_cartesian_is_rejected() {
        assert!(CartesianState::new(vec![1.0, 2.0, 3.0]).is_err());
        assert!(CartesianState::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn angles_are_wrapped() {
        let s = ActionAngleState::new(vec![1.0, 1.0], vec![-0.5, 7.0]);
        for &a in s.angles() {
            assert!((0.0..TAU).contains(&a));
        }
        assert_eq!(wrap_angle(-1e-300), 0.0);
    }

    #[test]
    fn rotation_examples() {
        let v = cs(&[1.0, 0.0]);
        assert_eq!(torus_rotate(&[0.0], &v), v);
        let r = torus_rotate(&[FRAC_PI_2], &v);
        assert!(r.as_slice()[0].abs() < 1e-16);
        assert!((r.as_slice()[1] - 1.0).abs() < 1e-16);
    }

    #[test]
    fn aligner_examples() {
        let u = planar_aligner([0.0, 1.0], [1.0, 0.0]).unwrap();
        let x = u * nalgebra::Vector2::new(1.0, 0.0);
        assert!(x[0].abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);

        let u = planar_aligner([0.3, -2.0], [0.3, -2.0]).unwrap();
        assert!((u - Matrix2::identity()).abs().max() < 1e-15);

        assert!(planar_aligner([0.0, 0.0], [1.0, 0.0]).is_err());
        assert!(planar_aligner([1.0, 0.0], [0.0, 0.0]).is_err());
    }

    #[test]
    fn min_action_examples() {
        assert_eq!(min_action(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(min_action(&[0.0, 5.0]), 0.0);
        assert_eq!(min_action(&[7.0]), 7.0);
    }

    #[test]
    fn epsilon_range() {
        assert!(Epsilon::new(1.0).is_ok());
        assert!(Epsilon::new(1e-6).is_ok());
        assert!(Epsilon::new(0.0).is_err());
        assert!(Epsilon::new(1.5).is_err());
        assert!(Epsilon::new(f64::NAN).is_err());
    }

    #[test]
    fn probe_detects_degenerate_noise() {
        let sys = TorusSystem::builder(1, 1, 1)
            .frequency(|_, w| w[0] = 1.0)
            .dispersion_actions(|i, _, m| m[(0, 0)] = i[0])
            .build()
            .unwrap();
        assert!(sys.probe(&[(vec![0.0], vec![0.0])]).is_err());
        assert!(sys.probe(&[(vec![2.0], vec![0.0])]).is_ok());

        let b = BirkhoffSystem::builder(1, 1)
            .dispersion(|_, m| {
                m[(0, 0)] = 1.0;
                m[(1, 1)] = 1.0;
            })
            .ellipticity(0.5)
            .build()
            .unwrap();
        let r = b.probe_random(2.0, 20, 1).unwrap();
        assert!((r.min_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonresonance_probe_finds_constant_resonance() {
        let f = |_: &[f64], w: &mut [f64]| {
            w[0] = 1.0;
            w[1] = 2.0;
        };
        let p = probe_frequency_nonresonance(&f, 2, (0.0, 1.0), 2, 10, 1e-12, 3);
        assert_eq!(p.collapses, 10);
    }

    proptest! {
        #[test]
        fn round_trip(v in proptest::collection::vec(-5.0f64..5.0, 2..8usize)) {
            let mut v = v;
            if v.len() % 2 == 1 { v.pop(); }
            let state = cs(&v);
            prop_assume!(min_action(&state.actions()) > 1e-6);
            let back = cartesian_of(&action_angle_of(&state)).unwrap();
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (a, b) in back.as_slice().iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
            }
        }

        #[test]
        fn rotation_preserves_actions(
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            t in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let state = cs(&v);
            let rot = torus_rotate(&t, &state);
            for (a, b) in rot.actions().iter().zip(state.actions()) {
                prop_assert!((a - b).abs() <= 1e-14 * b.max(1.0));
            }
        }

        #[test]
        fn rotation_group_law(
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            t1 in proptest::collection::vec(-4.0f64..4.0, 2),
            t2 in proptest::collection::vec(-4.0f64..4.0, 2),
        ) {
            let state = cs(&v);
            let a = torus_rotate(&t1, &torus_rotate(&t2, &state));
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| x + y).collect();
            let b = torus_rotate(&sum, &state);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn aligner_is_rotation(
            z1 in (-3.0f64..3.0, -3.0f64..3.0),
            z2 in (-3.0f64..3.0, -3.0f64..3.0),
        ) {
            let z1 = [z1.0, z1.1];
            let z2 = [z2.0, z2.1];
            prop_assume!(z1[0].hypot(z1[1]) > 1e-3 && z2[0].hypot(z2[1]) > 1e-3);
            let u = planar_aligner(z1, z2).unwrap();
            prop_assert!((u.transpose() * u - Matrix2::identity()).abs().max() < 1e-12);
            prop_assert!((u.determinant() - 1.0).abs() < 1e-12);
            let img = u * nalgebra::Vector2::new(z2[0], z2[1]);
            prop_assert!((img.norm() - z2[0].hypot(z2[1])).abs() < 1e-12);
            // parallel and same orientation as z1
            let cross = img[0] * z1[1] - img[1] * z1[0];
            let dot = img[0] * z1[0] + img[1] * z1[1];
            prop_assert!(cross.abs() < 1e-10 * img.norm() * z1[0].hypot(z1[1]));
            prop_assert!(dot > 0.0);
            let back = planar_aligner(z2, z1).unwrap();
            prop_assert!((back - u.transpose()).abs().max() < 1e-12);
        }
    }
}
