//! Effective equation of a Birkhoff system and its averaged action equation.
//!
//! The effective drift and Gram matrix are group averages over the torus
//! action `Phi_theta` on `R^{2n}`:
//!
//! ```text
//! R_k(v)  = int Phi^k_{-theta} P_k(Phi_theta v) dtheta
//! X_km(v) = sum_j int Phi^k_{-theta} B_kj(Phi_theta v) B_mj(Phi_theta v)^t Phi^m_theta dtheta
//! ```
//!
//! and the effective dispersion `<<B>>(v)` is the principal root of `X(v)`.
//! The averaged action coefficients `F`, `S`, `K` are torus averages taken
//! along `v = V_phi(I)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{actions_of, min_action, polar_into, rotate_block, BirkhoffSystem};
use crate::torus::{principal_sqrt, TorusQuadrature};

fn check_quadrature(sys: &BirkhoffSystem, q: &TorusQuadrature) -> Result<()> {
    if q.dim() != sys.blocks() {
        return Err(Error::precondition(format!(
            "quadrature has {} angles, system has {} blocks",
            q.dim(),
            sys.blocks()
        )));
    }
    Ok(())
}

fn check_state(sys: &BirkhoffSystem, v: &[f64]) -> Result<()> {
    if v.len() != 2 * sys.blocks() {
        return Err(Error::precondition(format!(
            "state has length {}, expected {}",
            v.len(),
            2 * sys.blocks()
        )));
    }
    Ok(())
}

/// `R(v)`.
pub fn effective_drift(sys: &BirkhoffSystem, v: &[f64], q: &TorusQuadrature) -> Result<Vec<f64>> {
    check_quadrature(sys, q)?;
    check_state(sys, v)?;
    let dim = v.len();
    let mut rotated = vec![0.0; dim];
    let mut p = vec![0.0; dim];
    let mut acc = vec![0.0; dim];
    for cs in q.trig_nodes() {
        rotated.copy_from_slice(v);
        for (b, &(c, s)) in rotated.chunks_exact_mut(2).zip(cs) {
            rotate_cs(b, c, s);
        }
        sys.drift(&rotated, &mut p);
        for (b, &(c, s)) in p.chunks_exact_mut(2).zip(cs) {
            rotate_cs(b, c, -s);
        }
        for (a, x) in acc.iter_mut().zip(&p) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a *= q.weight();
    }
    Ok(acc)
}

#[inline]
fn rotate_cs(b: &mut [f64], c: f64, s: f64) {
    let (x, y) = (b[0], b[1]);
    b[0] = c * x - s * y;
    b[1] = s * x + c * y;
}

/// Left-multiply the rows of `m` block-wise by `Phi_{angle}`.
fn rotate_rows(m: &mut DMatrix<f64>, theta: &[f64], sign: f64) {
    for (k, &t) in theta.iter().enumerate() {
        let (s, c) = (sign * t).sin_cos();
        for j in 0..m.ncols() {
            let x = m[(2 * k, j)];
            let y = m[(2 * k + 1, j)];
            m[(2 * k, j)] = c * x - s * y;
            m[(2 * k + 1, j)] = s * x + c * y;
        }
    }
}

/// `X(v)`.
pub fn effective_gram(
    sys: &BirkhoffSystem,
    v: &[f64],
    q: &TorusQuadrature,
) -> Result<DMatrix<f64>> {
    check_quadrature(sys, q)?;
    check_state(sys, v)?;
    let dim = v.len();
    let mut rotated = vec![0.0; dim];
    let mut b = sys.zero_dispersion();
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let cols = b.ncols();
    for cs in q.trig_nodes() {
        rotated.copy_from_slice(v);
        for (blk, &(c, s)) in rotated.chunks_exact_mut(2).zip(cs) {
            rotate_cs(blk, c, s);
        }
        sys.dispersion(&rotated, &mut b);
        // Phi_{-theta} B (Phi_{-theta} B)^t = Phi_{-theta} B B^t Phi_theta
        for (k, &(c, s)) in cs.iter().enumerate() {
            for j in 0..cols {
                let (x, y) = (b[(2 * k, j)], b[(2 * k + 1, j)]);
                b[(2 * k, j)] = c * x + s * y;
                b[(2 * k + 1, j)] = -s * x + c * y;
            }
        }
        // lower triangle only; mirrored below
        for i in 0..dim {
            for m in 0..=i {
                let mut t = 0.0;
                for j in 0..cols {
                    t += b[(i, j)] * b[(m, j)];
                }
                acc[(i, m)] += t;
            }
        }
    }
    for i in 0..dim {
        for m in 0..i {
            acc[(m, i)] = acc[(i, m)];
        }
    }
    acc *= q.weight();
    symmetrize_checked(acc, "effective Gram matrix")
}

fn symmetrize_checked(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let asym = (&m - m.transpose()).iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if asym > 1e-10 * scale {
        return Err(Error::Internal(format!("{what} is not symmetric (defect {asym:e})")));
    }
    Ok(0.5 * (&m + m.transpose()))
}

/// `<<B>>(v)`, the principal root of `X(v)`.
pub fn effective_dispersion(
    sys: &BirkhoffSystem,
    v: &[f64],
    q: &TorusQuadrature,
) -> Result<DMatrix<f64>> {
    principal_sqrt(&effective_gram(sys, v, q)?)
}

fn check_actions(sys: &BirkhoffSystem, actions: &[f64]) -> Result<()> {
    if actions.len() != sys.blocks() {
        return Err(Error::precondition(format!(
            "{} actions for {} blocks",
            actions.len(),
            sys.blocks()
        )));
    }
    if let Some(k) = actions.iter().position(|&x| !(x >= 0.0)) {
        return Err(Error::domain(format!("action I_{k} = {} is negative", actions[k])));
    }
    Ok(())
}

/// `F_k(I) = <v_k . P_k>(I) + 1/2 <sum_j |B_kj|_HS^2>(I)`.
pub fn averaged_action_drift(
    sys: &BirkhoffSystem,
    actions: &[f64],
    q: &TorusQuadrature,
) -> Result<Vec<f64>> {
    check_quadrature(sys, q)?;
    check_actions(sys, actions)?;
    let n = sys.blocks();
    let mut v = vec![0.0; 2 * n];
    let mut p = vec![0.0; 2 * n];
    let mut b = sys.zero_dispersion();
    let mut acc = vec![0.0; n];
    for phi in q.nodes() {
        polar_into(actions, phi, &mut v)?;
        sys.drift(&v, &mut p);
        sys.dispersion(&v, &mut b);
        for (k, slot) in acc.iter_mut().enumerate() {
            let hs: f64 = (0..b.ncols())
                .map(|j| b[(2 * k, j)].powi(2) + b[(2 * k + 1, j)].powi(2))
                .sum();
            *slot += v[2 * k] * p[2 * k] + v[2 * k + 1] * p[2 * k + 1] + 0.5 * hs;
        }
    }
    for a in acc.iter_mut() {
        *a *= q.weight();
    }
    Ok(acc)
}

/// `S_km(I) = <sum_j v_k^t B_kj B_mj^t v_m>(I)` and its principal root `K`.
pub fn averaged_action_diffusion(
    sys: &BirkhoffSystem,
    actions: &[f64],
    q: &TorusQuadrature,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_quadrature(sys, q)?;
    check_actions(sys, actions)?;
    let n = sys.blocks();
    let cols = 2 * sys.noise_blocks();
    let mut v = vec![0.0; 2 * n];
    let mut b = sys.zero_dispersion();
    let mut g = DMatrix::<f64>::zeros(n, cols);
    let mut s = DMatrix::<f64>::zeros(n, n);
    for phi in q.nodes() {
        polar_into(actions, phi, &mut v)?;
        sys.dispersion(&v, &mut b);
        // g_k = v_k^t B_{k, :}
        for k in 0..n {
            for j in 0..cols {
                g[(k, j)] = v[2 * k] * b[(2 * k, j)] + v[2 * k + 1] * b[(2 * k + 1, j)];
            }
        }
        s.gemm(1.0, &g, &g.transpose(), 1.0);
    }
    s *= q.weight();
    let s = symmetrize_checked(s, "averaged action diffusion")?;
    let k = principal_sqrt(&s)?;
    Ok((s, k))
}

/// Drift `R` and dispersion `<<B>>` of the effective equation.
#[derive(Clone, Debug)]
pub struct EffectiveModel {
    system: Arc<BirkhoffSystem>,
    quadrature: TorusQuadrature,
}

impl EffectiveModel {
    pub fn new(system: Arc<BirkhoffSystem>, quadrature: TorusQuadrature) -> Result<Self> {
        check_quadrature(&system, &quadrature)?;
        Ok(EffectiveModel { system, quadrature })
    }

    pub fn system(&self) -> &BirkhoffSystem {
        &self.system
    }

    pub fn quadrature(&self) -> &TorusQuadrature {
        &self.quadrature
    }

    pub fn drift(&self, v: &[f64]) -> Result<Vec<f64>> {
        effective_drift(&self.system, v, &self.quadrature)
    }

    pub fn gram(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        effective_gram(&self.system, v, &self.quadrature)
    }

    pub fn dispersion(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        effective_dispersion(&self.system, v, &self.quadrature)
    }
}

/// Coefficients `F`, `S`, `K` of the averaged action equation.
#[derive(Clone, Debug)]
pub struct AveragedActionModel {
    system: Arc<BirkhoffSystem>,
    quadrature: TorusQuadrature,
}

impl AveragedActionModel {
    pub fn new(system: Arc<BirkhoffSystem>, quadrature: TorusQuadrature) -> Result<Self> {
        check_quadrature(&system, &quadrature)?;
        Ok(AveragedActionModel { system, quadrature })
    }

    pub fn system(&self) -> &BirkhoffSystem {
        &self.system
    }

    pub fn drift(&self, actions: &[f64]) -> Result<Vec<f64>> {
        averaged_action_drift(&self.system, actions, &self.quadrature)
    }

    pub fn diffusion(&self, actions: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        averaged_action_diffusion(&self.system, actions, &self.quadrature)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    /// `max |R(Phi_t v) - Phi_t R(v)|`
    pub drift_defect: f64,
    /// `max |<<B>>(Phi_t v) - Phi_t <<B>>(v) Phi_{-t}|`
    pub dispersion_defect: f64,
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, radius: (f64, f64)) -> Vec<f64> {
    let mut v = vec![0.0; 2 * n];
    for b in v.chunks_exact_mut(2) {
        let r = rng.random_range(radius.0..=radius.1);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        b[0] = r * a.cos();
        b[1] = r * a.sin();
    }
    v
}

/// Sample `trials` pairs `(v, t)` with block norms in `radius` and measure
/// how far `R` and `<<B>>` are from commuting with the torus action.
pub fn check_equivariance(
    sys: &BirkhoffSystem,
    q: &TorusQuadrature,
    trials: usize,
    radius: (f64, f64),
    seed: u64,
) -> Result<EquivarianceReport> {
    if trials == 0 {
        return Err(Error::domain("equivariance check needs at least one trial"));
    }
    let n = sys.blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drift_defect: f64 = 0.0;
    let mut dispersion_defect: f64 = 0.0;
    for _ in 0..trials {
        let v = random_state(&mut rng, n, radius);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let mut rv = v.clone();
        for (b, &a) in rv.chunks_exact_mut(2).zip(&t) {
            rotate_block(b, a);
        }
        let mut lhs = effective_drift(sys, &rv, q)?;
        let mut rhs = effective_drift(sys, &v, q)?;
        for (b, &a) in rhs.chunks_exact_mut(2).zip(&t) {
            rotate_block(b, a);
        }
        for (x, y) in lhs.iter_mut().zip(&rhs) {
            drift_defect = drift_defect.max((*x - y).abs());
        }
        let lhs_b = effective_dispersion(sys, &rv, q)?;
        // Phi_t <<B>>(v) Phi_{-t}
        let mut rhs_b = effective_dispersion(sys, &v, q)?;
        rotate_rows(&mut rhs_b, &t, 1.0);
        let mut rhs_bt = rhs_b.transpose();
        rotate_rows(&mut rhs_bt, &t, 1.0);
        let rhs_b = rhs_bt.transpose();
        dispersion_defect = dispersion_defect.max((lhs_b - rhs_b).abs().max());
    }
    Ok(EquivarianceReport { trials, drift_defect, dispersion_defect })
}

#[derive(Clone, Debug, Serialize)]
pub struct ActionConsistencyReport {
    pub trials: usize,
    /// max over k of `|v_k . R_k + 1/2 sum_j |<<B>>_kj|^2 - F_k(I(v))|`
    pub drift_mismatch: f64,
    /// max entry of `|G(v) - S(I(v))|` with `G_km = sum_j (v_k^t <<B>>_kj)(v_m^t <<B>>_mj)^t`
    pub gram_mismatch: f64,
}

/// Compare the Ito drift and diffusion of the action process of the
/// effective equation against `F(I)` and `S(I)` at random `v`.
pub fn check_action_consistency(
    sys: &BirkhoffSystem,
    q: &TorusQuadrature,
    trials: usize,
    radius: (f64, f64),
    seed: u64,
) -> Result<ActionConsistencyReport> {
    if trials == 0 {
        return Err(Error::domain("consistency check needs at least one trial"));
    }
    let n = sys.blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drift_mismatch: f64 = 0.0;
    let mut gram_mismatch: f64 = 0.0;
    for _ in 0..trials {
        let v = random_state(&mut rng, n, radius);
        let actions = actions_of(&v);
        debug_assert!(min_action(&actions) >= 0.0);
        let r = effective_drift(sys, &v, q)?;
        let disp = effective_dispersion(sys, &v, q)?;
        let f = averaged_action_drift(sys, &actions, q)?;
        let (s, _) = averaged_action_diffusion(sys, &actions, q)?;
        let mut g = DMatrix::<f64>::zeros(n, disp.ncols());
        for k in 0..n {
            let hs: f64 = (0..disp.ncols())
                .map(|j| disp[(2 * k, j)].powi(2) + disp[(2 * k + 1, j)].powi(2))
                .sum();
            let drift = v[2 * k] * r[2 * k] + v[2 * k + 1] * r[2 * k + 1] + 0.5 * hs;
            drift_mismatch = drift_mismatch.max((drift - f[k]).abs());
            for j in 0..disp.ncols() {
                g[(k, j)] = v[2 * k] * disp[(2 * k, j)] + v[2 * k + 1] * disp[(2 * k + 1, j)];
            }
        }
        let gram = &g * g.transpose();
        gram_mismatch = gram_mismatch.max((gram - s).abs().max());
    }
    Ok(ActionConsistencyReport { trials, drift_mismatch, gram_mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: usize, p: usize) -> TorusQuadrature {
        TorusQuadrature::tensor(n, p).unwrap()
    }

    fn ou(n: usize, sigma: f64) -> BirkhoffSystem {
        BirkhoffSystem::builder(n, n)
            .frequencies(|_, w| w.fill(1.0))
            .drift(|v, p| {
                for (a, b) in p.iter_mut().zip(v) {
                    *a = -b;
                }
            })
            .dispersion(move |_, m| {
                for i in 0..m.nrows() {
                    m[(i, i)] = sigma;
                }
            })
            .build()
            .unwrap()
    }

    fn constant_shift() -> BirkhoffSystem {
        BirkhoffSystem::builder(2, 2)
            .drift(|_, p| p.copy_from_slice(&[1.0, -2.0, 0.5, 3.0]))
            .dispersion(|_, m| m.fill_with_identity())
            .build()
            .unwrap()
    }

    fn radial(n: usize) -> BirkhoffSystem {
        BirkhoffSystem::builder(n, n)
            .drift(|v, p| {
                for (a, b) in p.iter_mut().zip(v) {
                    *a = -b;
                }
            })
            .dispersion(|v, m| {
                for k in 0..v.len() / 2 {
                    let r2 = v[2 * k].powi(2) + v[2 * k + 1].powi(2);
                    let b = 1.0 + 0.5 * r2 / (1.0 + r2);
                    m[(2 * k, 2 * k)] = b;
                    m[(2 * k + 1, 2 * k + 1)] = b;
                }
            })
            .build()
            .unwrap()
    }

    #[test]
    fn drift_examples() {
        let sys = ou(2, 1.0);
        let v = [0.3, -1.2, 2.0, 0.1];
        let r = effective_drift(&sys, &v, &q(2, 16)).unwrap();
        for (a, b) in r.iter().zip(&v) {
            assert!((a + b).abs() < 1e-14);
        }

        let r = effective_drift(&constant_shift(), &v, &q(2, 16)).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-14));

        let cubic = BirkhoffSystem::builder(2, 2)
            .drift(|v, p| {
                let n2: f64 = v.iter().map(|x| x * x).sum();
                for (a, b) in p.iter_mut().zip(v) {
                    *a = n2 * b;
                }
            })
            .build()
            .unwrap();
        let r = effective_drift(&cubic, &v, &q(2, 16)).unwrap();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        for (a, b) in r.iter().zip(&v) {
            assert!((a - n2 * b).abs() < 1e-13);
        }
    }

    #[test]
    fn gram_examples() {
        let v = [0.3, -1.2, 2.0, 0.1];
        let x = effective_gram(&ou(2, 1.0), &v, &q(2, 16)).unwrap();
        assert!((x - DMatrix::identity(4, 4)).abs().max() < 1e-14);
        let x = effective_gram(&ou(2, 0.7), &v, &q(2, 16)).unwrap();
        assert!((x - DMatrix::identity(4, 4) * 0.49).abs().max() < 1e-14);
        let k = effective_dispersion(&ou(2, 0.7), &v, &q(2, 16)).unwrap();
        assert!((k - DMatrix::identity(4, 4) * 0.7).abs().max() < 1e-14);
    }

    /// Dense quadrature oracle: plain Riemann sum over a 400x400 angle grid,
    /// written independently of the library loops.
    fn dense_gram_oracle(sys: &BirkhoffSystem, v: &[f64]) -> DMatrix<f64> {
        let m = 400;
        let mut acc = DMatrix::zeros(4, 4);
        let mut b = DMatrix::zeros(4, 4);
        for i in 0..m {
            for j in 0..m {
                let t = [i as f64 * std::f64::consts::TAU / m as f64, j as f64 * std::f64::consts::TAU / m as f64];
                let mut phi = DMatrix::zeros(4, 4);
                for k in 0..2 {
                    let (s, c) = t[k].sin_cos();
                    phi[(2 * k, 2 * k)] = c;
                    phi[(2 * k, 2 * k + 1)] = -s;
                    phi[(2 * k + 1, 2 * k)] = s;
                    phi[(2 * k + 1, 2 * k + 1)] = c;
                }
                let vv = &phi * nalgebra::DVector::from_column_slice(v);
                b.fill(0.0);
                sys.dispersion(vv.as_slice(), &mut b);
                acc += phi.transpose() * &b * b.transpose() * &phi;
            }
        }
        acc / (m * m) as f64
    }

    #[test]
    fn radial_gram_matches_dense_oracle() {
        let sys = radial(2);
        let v = [0.3, -1.2, 2.0, 0.1];
        let x = effective_gram(&sys, &v, &q(2, 64)).unwrap();
        let oracle = dense_gram_oracle(&sys, &v);
        assert!((&x - &oracle).abs().max() < 1e-9);
        let k = effective_dispersion(&sys, &v, &q(2, 64)).unwrap();
        assert!((&k * k.transpose() - &x).abs().max() < 1e-10 * x.abs().max());
    }

    #[test]
    fn averaged_action_examples() {
        let sys = ou(2, 1.0);
        let i = [0.4, 1.3];
        let f = averaged_action_drift(&sys, &i, &q(2, 16)).unwrap();
        for (fk, ik) in f.iter().zip(&i) {
            assert!((fk - (1.0 - 2.0 * ik)).abs() < 1e-13);
        }
        let (s, k) = averaged_action_diffusion(&sys, &i, &q(2, 16)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 2.0 * i[a] } else { 0.0 };
                assert!((s[(a, b)] - want).abs() < 1e-13);
                let want = if a == b { (2.0 * i[a]).sqrt() } else { 0.0 };
                assert!((k[(a, b)] - want).abs() < 1e-13);
            }
        }

        let zero = BirkhoffSystem::builder(2, 2).build().unwrap();
        assert!(averaged_action_drift(&zero, &i, &q(2, 8)).unwrap().iter().all(|&x| x == 0.0));

        let f = averaged_action_drift(&constant_shift(), &i, &q(2, 16)).unwrap();
        assert!(f.iter().all(|x| (x - 1.0).abs() < 1e-13));

        let (s, k) = averaged_action_diffusion(&sys, &[0.0, 0.0], &q(2, 8)).unwrap();
        assert_eq!(s.abs().max(), 0.0);
        assert_eq!(k.abs().max(), 0.0);

        let (s, _) = averaged_action_diffusion(&ou(1, 0.6), &[0.8], &q(1, 16)).unwrap();
        assert!((s[(0, 0)] - 2.0 * 0.36 * 0.8).abs() < 1e-14);

        assert!(matches!(
            averaged_action_drift(&sys, &[-0.1, 1.0], &q(2, 8)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn degenerate_action_row_vanishes() {
        let (s, _) = averaged_action_diffusion(&radial(2), &[0.0, 0.9], &q(2, 16)).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(s[(0, 1)], 0.0);
        assert!(s[(1, 1)] > 0.0);
    }

    #[test]
    fn equivariant_system_has_no_defect() {
        let r = check_equivariance(&ou(2, 1.0), &q(2, 16), 20, (0.1, 2.0), 1).unwrap();
        assert!(r.drift_defect < 1e-12 && r.dispersion_defect < 1e-12);
        let r = check_equivariance(&radial(2), &q(2, 32), 20, (0.1, 2.0), 1).unwrap();
        assert!(r.drift_defect < 1e-12 && r.dispersion_defect < 1e-10);
    }

    #[test]
    fn consistency_on_ou() {
        let r = check_action_consistency(&ou(2, 1.0), &q(2, 16), 20, (0.2, 2.0), 4).unwrap();
        assert!(r.drift_mismatch < 1e-10 && r.gram_mismatch < 1e-10);
        let zero = BirkhoffSystem::builder(1, 1).build().unwrap();
        let r = check_action_consistency(&zero, &q(1, 8), 5, (0.2, 2.0), 4).unwrap();
        assert_eq!(r.gram_mismatch, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(effective_drift(&ou(2, 1.0), &[1.0, 2.0], &q(2, 8)).is_err());
        assert!(effective_drift(&ou(2, 1.0), &[1.0, 2.0, 0.0, 0.0], &q(1, 8)).is_err());
        assert!(EffectiveModel::new(Arc::new(ou(2, 1.0)), q(3, 4)).is_err());
    }
}
