//! Averaging over the angle torus.
//!
//! Holds the quadrature rules on `T^n`, the averaged drift and diffusion of
//! an action-angle system, the principal square root used for every
//! averaged dispersion in the crate, the finite-window flow average and the
//! Monte Carlo estimate of the set of poorly averaging actions.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap_angle, TorusSystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuadratureKind {
    TensorTrapezoid { points_per_dim: usize },
    Rank1Lattice { size: usize, generator: Vec<u64> },
}

/// Equal-weight node set on `T^n`.
#[derive(Clone, Debug)]
pub struct TorusQuadrature {
    kind: QuadratureKind,
    dim: usize,
    nodes: Vec<f64>,
    /// `(cos, sin)` of every node coordinate, same layout as `nodes`.
    trig: Vec<(f64, f64)>,
    weight: f64,
}

impl TorusQuadrature {
    /// Tensor product of the `p`-point trapezoid rule in every angle.
    pub fn tensor(dim: usize, points_per_dim: usize) -> Result<Self> {
        if dim == 0 || points_per_dim == 0 {
            return Err(Error::domain("tensor quadrature needs dim >= 1 and points >= 1"));
        }
        let count = points_per_dim
            .checked_pow(dim as u32)
            .filter(|&c| c <= 1 << 26)
            .ok_or_else(|| Error::domain("tensor quadrature too large; use a lattice rule"))?;
        let step = TAU / points_per_dim as f64;
        let mut nodes = Vec::with_capacity(count * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            nodes.extend(idx.iter().map(|&i| i as f64 * step));
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < points_per_dim {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(TorusQuadrature {
            kind: QuadratureKind::TensorTrapezoid { points_per_dim },
            dim,
            trig: nodes.iter().map(|t| { let (s, c) = t.sin_cos(); (c, s) }).collect(),
            nodes,
            weight: 1.0 / count as f64,
        })
    }

    /// Rank-1 lattice `{2pi * frac(i z / M)}` for `i = 0..M`.
    pub fn lattice(dim: usize, size: usize, generator: Vec<u64>) -> Result<Self> {
        if dim == 0 || size == 0 || generator.len() != dim {
            return Err(Error::domain("lattice needs size >= 1 and a generator of length dim"));
        }
        let m = size as u64;
        let mut nodes = Vec::with_capacity(size * dim);
        for i in 0..m {
            for &z in &generator {
                let r = ((i as u128 * z as u128) % m as u128) as f64;
                nodes.push(TAU * r / size as f64);
            }
        }
        Ok(TorusQuadrature {
            kind: QuadratureKind::Rank1Lattice { size, generator },
            dim,
            trig: nodes.iter().map(|t| { let (s, c) = t.sin_cos(); (c, s) }).collect(),
            nodes,
            weight: 1.0 / size as f64,
        })
    }

    /// Korobov lattice `z = (1, a, a^2, ...) mod M` with `a` picked by the
    /// `P_2` figure of merit.
    pub fn korobov(dim: usize, size: usize) -> Result<Self> {
        let generator = korobov_generator(dim, size);
        Self::lattice(dim, size, generator)
    }

    /// 64-point trapezoid per angle up to three angles, a 4093-point
    /// Korobov lattice beyond.
    pub fn default_for(dim: usize) -> Result<Self> {
        if dim <= 3 {
            Self::tensor(dim, 64)
        } else {
            Self::korobov(dim, 4093)
        }
    }

    pub fn kind(&self) -> &QuadratureKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim)
    }

    /// `(cos, sin)` pairs per node, for rotations without trig calls.
    pub(crate) fn trig_nodes(&self) -> impl Iterator<Item = &[(f64, f64)]> {
        self.trig.chunks_exact(self.dim)
    }
}

fn korobov_generator(dim: usize, size: usize) -> Vec<u64> {
    let m = size as u64;
    let powers = |a: u64| {
        let mut z = Vec::with_capacity(dim);
        let mut p = 1u64;
        for _ in 0..dim {
            z.push(p);
            p = ((p as u128 * a as u128) % m as u128) as u64;
        }
        z
    };
    if dim == 1 || size < 4 {
        return powers(1);
    }
    // P_2 = -1 + (1/M) sum_i prod_j (1 + 2 pi^2 B_2({i z_j / M}))
    let p2 = |z: &[u64]| -> f64 {
        let mut total = 0.0;
        for i in 0..m {
            let mut prod = 1.0;
            for &zj in z {
                let x = ((i as u128 * zj as u128) % m as u128) as f64 / size as f64;
                prod *= 1.0 + 2.0 * PI * PI * (x * x - x + 1.0 / 6.0);
            }
            total += prod;
        }
        total / size as f64 - 1.0
    };
    let stride = (size / 512).max(1);
    let mut best = (f64::INFINITY, 1u64);
    let mut a = 2u64;
    while a < m / 2 {
        if gcd(a, m) == 1 {
            let z = powers(a);
            if z.iter().all(|&x| gcd(x, m) == 1) {
                let v = p2(&z);
                if v < best.0 {
                    best = (v, a);
                }
            }
        }
        a += stride as u64;
    }
    powers(best.1)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Weighted node sum of `f: T^n -> R^m`.
pub fn average_over_torus<F>(f: F, m: usize, quadrature: &TorusQuadrature) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut acc = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for node in quadrature.nodes() {
        buf.fill(0.0);
        f(node, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    for a in acc.iter_mut() {
        *a *= quadrature.weight();
    }
    acc
}

/// `<P^I>(I)`.
pub fn averaged_drift(
    sys: &TorusSystem,
    actions: &[f64],
    quadrature: &TorusQuadrature,
) -> Vec<f64> {
    average_over_torus(
        |phi, out| sys.drift_actions(actions, phi, out),
        sys.action_dim(),
        quadrature,
    )
}

/// `<a^I>(I) = <Psi^I (Psi^I)^t>(I)`.
pub fn averaged_diffusion(
    sys: &TorusSystem,
    actions: &[f64],
    quadrature: &TorusQuadrature,
) -> Result<DMatrix<f64>> {
    let d = sys.action_dim();
    let mut psi = DMatrix::zeros(d, sys.noise_dim());
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for phi in quadrature.nodes() {
        sys.dispersion_actions(actions, phi, &mut psi);
        acc.gemm(1.0, &psi, &psi.transpose(), 1.0);
    }
    acc *= quadrature.weight();
    check_symmetric(&acc, "averaged diffusion")?;
    Ok(acc)
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn check_symmetric(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = max_abs(a);
    let asym = (a - a.transpose()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::Internal(format!("{what} is not symmetric (defect {asym:e})")));
    }
    Ok(())
}

/// Principal (symmetric, positive semidefinite) square root.
///
/// Eigenvalues down to `-1e-12 * max(1, |A|)` are treated as round-off and
/// clamped to zero; anything more negative is a domain error.
pub fn principal_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::domain("principal_sqrt needs a square matrix"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("principal_sqrt got non-finite entries"));
    }
    let n = a.nrows();
    let scale = max_abs(a);
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .fold(0.0f64, |m, (i, j)| m.max((a[(i, j)] - a[(j, i)]).abs()));
    if asym > 1e-10 * scale {
        return Err(Error::domain(format!("matrix is not symmetric (defect {asym:e})")));
    }
    let neg_tol = 1e-12 * scale.max(1.0);
    match n {
        0 => Ok(a.clone()),
        1 => {
            let x = a[(0, 0)];
            if x < -neg_tol {
                return Err(Error::domain(format!("negative eigenvalue {x:e}")));
            }
            Ok(DMatrix::from_element(1, 1, x.max(0.0).sqrt()))
        }
        2 => {
            // K = (A + sqrt(det) I) / sqrt(tr + 2 sqrt(det))
            let (p, q, r) = (a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);
            let half_tr = 0.5 * (p + r);
            let rad = (0.5 * (p - r)).hypot(q);
            let lo = half_tr - rad;
            if lo < -neg_tol {
                return Err(Error::domain(format!("negative eigenvalue {lo:e}")));
            }
            let hi = (half_tr + rad).max(0.0);
            let lo = lo.max(0.0);
            let s = (lo * hi).sqrt();
            let t = (lo.sqrt() + hi.sqrt()).max(0.0);
            if t == 0.0 {
                return Ok(DMatrix::zeros(2, 2));
            }
            Ok(DMatrix::from_row_slice(
                2,
                2,
                &[(p + s) / t, q / t, q / t, (r + s) / t],
            ))
        }
        _ => {
            let sym = 0.5 * (a + a.transpose());
            let eig = SymmetricEigen::new(sym);
            let mut roots = eig.eigenvalues.clone();
            for x in roots.iter_mut() {
                if *x < -neg_tol {
                    return Err(Error::domain(format!("negative eigenvalue {x:e}")));
                }
                *x = x.max(0.0).sqrt();
            }
            let q = &eig.eigenvectors;
            let k = q * DMatrix::from_diagonal(&roots) * q.transpose();
            Ok(0.5 * (&k + k.transpose()))
        }
    }
}

/// Averaged coefficients of an action-angle system.
#[derive(Clone, Debug)]
pub struct AveragedModel {
    system: Arc<TorusSystem>,
    quadrature: TorusQuadrature,
}

impl AveragedModel {
    pub fn new(system: Arc<TorusSystem>, quadrature: TorusQuadrature) -> Result<Self> {
        if quadrature.dim() != system.angle_dim() {
            return Err(Error::precondition(format!(
                "quadrature dimension {} does not match {} angles",
                quadrature.dim(),
                system.angle_dim()
            )));
        }
        Ok(AveragedModel { system, quadrature })
    }

    pub fn system(&self) -> &TorusSystem {
        &self.system
    }

    pub fn quadrature(&self) -> &TorusQuadrature {
        &self.quadrature
    }

    pub fn drift(&self, actions: &[f64]) -> Vec<f64> {
        averaged_drift(&self.system, actions, &self.quadrature)
    }

    pub fn diffusion(&self, actions: &[f64]) -> Result<DMatrix<f64>> {
        averaged_diffusion(&self.system, actions, &self.quadrature)
    }

    /// `<<Psi^I>>(I)`, the principal root of the averaged diffusion.
    pub fn dispersion(&self, actions: &[f64]) -> Result<DMatrix<f64>> {
        principal_sqrt(&self.diffusion(actions)?)
    }
}

const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

/// `(1/N) int_0^N P^I(I, phi0 + t theta(I)) dt` by composite 8-point
/// Gauss-Legendre, with panels short enough that no angle turns by more
/// than half a radian within one panel.
pub fn flow_time_average(
    sys: &TorusSystem,
    actions: &[f64],
    phi0: &[f64],
    window: f64,
) -> Result<Vec<f64>> {
    if !(window > 0.0) {
        return Err(Error::domain(format!("averaging window must be positive, got {window}")));
    }
    let mut theta = vec![0.0; sys.angle_dim()];
    sys.frequency(actions, &mut theta);
    let speed = theta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let panels = ((window * speed / 0.5).ceil() as usize).clamp(1, 50_000_000);
    let len = window / panels as f64;
    let d = sys.action_dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut phi = vec![0.0; sys.angle_dim()];
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * len;
        for &(x, w) in &GL8 {
            let t = mid + 0.5 * len * x;
            for ((slot, &a), &th) in phi.iter_mut().zip(phi0).zip(&theta) {
                *slot = wrap_angle(a + t * th);
            }
            sys.drift_actions(actions, &phi, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += 0.5 * len * w * b;
            }
        }
    }
    for a in acc.iter_mut() {
        *a /= window;
    }
    Ok(acc)
}

/// Monte Carlo estimate of the Lebesgue measure of the set of actions in
/// the ball `|I| < R` whose finite-window flow averages deviate from the
/// torus average by more than `delta` somewhere on the angle grid.
#[derive(Clone, Debug, Serialize)]
pub struct ResonanceDiagnostic {
    pub window: f64,
    pub delta: f64,
    pub radius: f64,
    pub samples: usize,
    pub hits: usize,
    pub ball_volume: f64,
    pub estimate: f64,
    /// 95% normal-approximation half-width, scaled by the ball volume.
    pub half_width: f64,
}

pub fn ball_volume(dim: usize, radius: f64) -> f64 {
    // V_d = V_{d-2} 2 pi R^2 / d with V_0 = 1, V_1 = 2R
    let mut v = if dim % 2 == 0 { 1.0 } else { 2.0 * radius };
    let mut k = if dim % 2 == 0 { 2 } else { 3 };
    while k <= dim {
        v *= TAU * radius * radius / k as f64;
        k += 2;
    }
    v
}

#[derive(Clone, Debug)]
pub struct ResonanceOptions {
    pub window: f64,
    pub delta: f64,
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

pub fn resonant_set_measure(
    sys: &TorusSystem,
    averaging: &TorusQuadrature,
    angle_grid: &TorusQuadrature,
    opts: &ResonanceOptions,
) -> Result<ResonanceDiagnostic> {
    if opts.samples == 0 {
        return Err(Error::domain("resonance scan needs at least one sample"));
    }
    let d = sys.action_dim();
    let hits: Vec<bool> = (0..opts.samples)
        .into_par_iter()
        .map(|s| -> Result<bool> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rng.random();
            let r = opts.radius * u.powf(1.0 / d as f64);
            for x in dir.iter_mut() {
                *x *= r / norm;
            }
            let mean = averaged_drift(sys, &dir, averaging);
            for phi in angle_grid.nodes() {
                let avg = flow_time_average(sys, &dir, phi, opts.window)?;
                let dev = avg
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dev > opts.delta {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect::<Result<Vec<_>>>()?;
    let count = hits.iter().filter(|&&h| h).count();
    let p = count as f64 / opts.samples as f64;
    let vol = ball_volume(d, opts.radius);
    Ok(ResonanceDiagnostic {
        window: opts.window,
        delta: opts.delta,
        radius: opts.radius,
        samples: opts.samples,
        hits: count,
        ball_volume: vol,
        estimate: p * vol,
        half_width: 1.96 * (p * (1.0 - p) / opts.samples as f64).sqrt() * vol,
    })
}
