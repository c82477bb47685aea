use nalgebra::DMatrix;

use super::{drive, IntegratorConfig, NoiseStream, Scheme, SdePath, Stepper, StoppingRule};
use crate::effective::{AveragedActionModel, EffectiveModel};
use crate::error::{Error, Result};
use crate::model::{
    actions_of, polar_into, rotate_block, wrap_angle, ActionAngleState, BirkhoffSystem,
    CartesianState, Epsilon, TorusSystem,
};
use crate::torus::AveragedModel;

/// `out += m * x`.
#[inline]
fn gemv_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
}

struct TorusStepper<'a> {
    sys: &'a TorusSystem,
    inv_eps: f64,
    scheme: Scheme,
    theta: Vec<f64>,
    angles: Vec<f64>,
    p_i: Vec<f64>,
    p_phi: Vec<f64>,
    psi_i: DMatrix<f64>,
    psi_phi: DMatrix<f64>,
}

impl Stepper for TorusStepper<'_> {
    fn dim(&self) -> usize {
        self.sys.action_dim() + self.sys.angle_dim()
    }

    fn noise_dim(&self) -> usize {
        self.sys.noise_dim()
    }

    fn step(&mut self, x: &mut [f64], h: f64, dw: &[f64]) -> Result<()> {
        let d = self.sys.action_dim();
        let (actions, angles) = x.split_at_mut(d);
        self.sys.frequency(actions, &mut self.theta);
        let fast = h * self.inv_eps;
        for ((a, phi), th) in self.angles.iter_mut().zip(angles.iter()).zip(&self.theta) {
            *a = match self.scheme {
                Scheme::RotationSplitEm => wrap_angle(phi + th * fast),
                Scheme::EulerMaruyama => *phi,
            };
        }
        self.sys.drift_actions(actions, &self.angles, &mut self.p_i);
        self.sys.drift_angles(actions, &self.angles, &mut self.p_phi);
        self.sys.dispersion_actions(actions, &self.angles, &mut self.psi_i);
        self.sys.dispersion_angles(actions, &self.angles, &mut self.psi_phi);
        if self.scheme == Scheme::EulerMaruyama {
            for (a, th) in self.angles.iter_mut().zip(&self.theta) {
                *a += th * fast;
            }
        }
        for (a, p) in actions.iter_mut().zip(&self.p_i) {
            *a += p * h;
        }
        gemv_add(&self.psi_i, dw, actions);
        for (a, p) in self.angles.iter_mut().zip(&self.p_phi) {
            *a += p * h;
        }
        gemv_add(&self.psi_phi, dw, &mut self.angles);
        for (phi, a) in angles.iter_mut().zip(&self.angles) {
            *phi = wrap_angle(*a);
        }
        Ok(())
    }

    fn actions(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&x[..self.sys.action_dim()]);
    }
}

/// Integrate the perturbed torus system. States are `[I, phi]`.
pub fn integrate_torus_system(
    sys: &TorusSystem,
    eps: Epsilon,
    init: &ActionAngleState,
    cfg: &IntegratorConfig,
    stop: &StoppingRule,
) -> Result<SdePath> {
    if init.actions().len() != sys.action_dim() || init.angles().len() != sys.angle_dim() {
        return Err(Error::precondition("initial state does not match system dimensions"));
    }
    let mut s = TorusStepper {
        sys,
        inv_eps: 1.0 / eps.get(),
        scheme: cfg.scheme,
        theta: vec![0.0; sys.angle_dim()],
        angles: vec![0.0; sys.angle_dim()],
        p_i: vec![0.0; sys.action_dim()],
        p_phi: vec![0.0; sys.angle_dim()],
        psi_i: DMatrix::zeros(sys.action_dim(), sys.noise_dim()),
        psi_phi: DMatrix::zeros(sys.angle_dim(), sys.noise_dim()),
    };
    let noise = NoiseStream::new(cfg.seed, cfg.trajectory_id);
    drive(&mut s, &init.to_flat(), cfg, stop, noise)
}

pub(crate) struct BirkhoffStepper<'a> {
    sys: &'a BirkhoffSystem,
    inv_eps: f64,
    scheme: Scheme,
    actions: Vec<f64>,
    w: Vec<f64>,
    p: Vec<f64>,
    b: DMatrix<f64>,
}

impl<'a> BirkhoffStepper<'a> {
    pub(crate) fn new(sys: &'a BirkhoffSystem, eps: f64, scheme: Scheme) -> Self {
        let n = sys.blocks();
        BirkhoffStepper {
            sys,
            inv_eps: 1.0 / eps,
            scheme,
            actions: vec![0.0; n],
            w: vec![0.0; n],
            p: vec![0.0; 2 * n],
            b: sys.zero_dispersion(),
        }
    }

    /// The exact fast substep `v -> Phi_{W(I(v)) h / eps} v`.
    pub(crate) fn rotate(&mut self, v: &mut [f64], h: f64) {
        for (a, b) in self.actions.iter_mut().zip(v.chunks_exact(2)) {
            *a = 0.5 * (b[0] * b[0] + b[1] * b[1]);
        }
        self.sys.frequencies(&self.actions, &mut self.w);
        let fast = h * self.inv_eps;
        for (b, &w) in v.chunks_exact_mut(2).zip(&self.w) {
            rotate_block(b, w * fast);
        }
    }

    /// Slow coefficients at `v`, left in `self.p` and `self.b`.
    pub(crate) fn coefficients(&mut self, v: &[f64]) -> (&[f64], &DMatrix<f64>) {
        self.sys.drift(v, &mut self.p);
        self.sys.dispersion(v, &mut self.b);
        (&self.p, &self.b)
    }
}

impl Stepper for BirkhoffStepper<'_> {
    fn dim(&self) -> usize {
        2 * self.sys.blocks()
    }

    fn noise_dim(&self) -> usize {
        2 * self.sys.noise_blocks()
    }

    fn step(&mut self, v: &mut [f64], h: f64, dw: &[f64]) -> Result<()> {
        match self.scheme {
            Scheme::RotationSplitEm => {
                self.rotate(v, h);
                self.sys.drift(v, &mut self.p);
                self.sys.dispersion(v, &mut self.b);
                for (x, p) in v.iter_mut().zip(&self.p) {
                    *x += p * h;
                }
                gemv_add(&self.b, dw, v);
            }
            Scheme::EulerMaruyama => {
                for (a, b) in self.actions.iter_mut().zip(v.chunks_exact(2)) {
                    *a = 0.5 * (b[0] * b[0] + b[1] * b[1]);
                }
                self.sys.frequencies(&self.actions, &mut self.w);
                self.sys.drift(v, &mut self.p);
                self.sys.dispersion(v, &mut self.b);
                let old = v.to_vec();
                for (k, b) in v.chunks_exact_mut(2).enumerate() {
                    let f = self.w[k] * self.inv_eps;
                    b[0] += (-f * old[2 * k + 1] + self.p[2 * k]) * h;
                    b[1] += (f * old[2 * k] + self.p[2 * k + 1]) * h;
                }
                let mut inc = vec![0.0; v.len()];
                gemv_add(&self.b, dw, &mut inc);
                for (x, i) in v.iter_mut().zip(&inc) {
                    *x += i;
                }
            }
        }
        Ok(())
    }

    fn actions(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(v.chunks_exact(2).map(|b| 0.5 * (b[0] * b[0] + b[1] * b[1])));
    }
}

/// Integrate the perturbed Birkhoff system in Cartesian variables.
pub fn integrate_birkhoff_system(
    sys: &BirkhoffSystem,
    eps: Epsilon,
    init: &CartesianState,
    cfg: &IntegratorConfig,
    stop: &StoppingRule,
) -> Result<SdePath> {
    let mut s = BirkhoffStepper::new(sys, eps.get(), cfg.scheme);
    let noise = NoiseStream::new(cfg.seed, cfg.trajectory_id);
    drive(&mut s, init.as_slice(), cfg, stop, noise)
}

struct EffectiveStepper<'a> {
    model: &'a EffectiveModel,
}

impl Stepper for EffectiveStepper<'_> {
    fn dim(&self) -> usize {
        2 * self.model.system().blocks()
    }

    fn noise_dim(&self) -> usize {
        2 * self.model.system().blocks()
    }

    fn step(&mut self, v: &mut [f64], h: f64, dw: &[f64]) -> Result<()> {
        let r = self.model.drift(v)?;
        let b = self.model.dispersion(v)?;
        let mut inc = vec![0.0; v.len()];
        gemv_add(&b, dw, &mut inc);
        for ((x, r), i) in v.iter_mut().zip(&r).zip(&inc) {
            *x += r * h + i;
        }
        Ok(())
    }

    fn actions(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(v.chunks_exact(2).map(|b| 0.5 * (b[0] * b[0] + b[1] * b[1])));
    }
}

/// Euler-Maruyama for the effective equation. Its Wiener process has one
/// component per Cartesian coordinate since `<<B>>` is square.
pub fn integrate_effective(
    model: &EffectiveModel,
    init: &CartesianState,
    cfg: &IntegratorConfig,
    stop: &StoppingRule,
) -> Result<SdePath> {
    let mut s = EffectiveStepper { model };
    let noise = NoiseStream::new(cfg.seed, cfg.trajectory_id);
    drive(&mut s, init.as_slice(), cfg, stop, noise)
}

/// Averaged equation for actions: drift and dispersion as functions of `I`.
pub trait ActionModel: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, actions: &[f64]) -> Result<Vec<f64>>;
    fn dispersion(&self, actions: &[f64]) -> Result<DMatrix<f64>>;
    /// Actions live in `R_+^n` and need a boundary policy.
    fn nonnegative(&self) -> bool;
}

impl ActionModel for AveragedModel {
    fn dim(&self) -> usize {
        self.system().action_dim()
    }

    fn noise_dim(&self) -> usize {
        self.system().action_dim()
    }

    fn drift(&self, actions: &[f64]) -> Result<Vec<f64>> {
        Ok(AveragedModel::drift(self, actions))
    }

    fn dispersion(&self, actions: &[f64]) -> Result<DMatrix<f64>> {
        AveragedModel::dispersion(self, actions)
    }

    fn nonnegative(&self) -> bool {
        false
    }
}

impl ActionModel for AveragedActionModel {
    fn dim(&self) -> usize {
        self.system().blocks()
    }

    fn noise_dim(&self) -> usize {
        self.system().blocks()
    }

    fn drift(&self, actions: &[f64]) -> Result<Vec<f64>> {
        AveragedActionModel::drift(self, actions)
    }

    fn dispersion(&self, actions: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.diffusion(actions)?.1)
    }

    fn nonnegative(&self) -> bool {
        true
    }
}

struct ActionStepper<'a, M: ActionModel + ?Sized> {
    model: &'a M,
    cfg: &'a IntegratorConfig,
}

impl<M: ActionModel + ?Sized> Stepper for ActionStepper<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn noise_dim(&self) -> usize {
        self.model.noise_dim()
    }

    fn step(&mut self, x: &mut [f64], h: f64, dw: &[f64]) -> Result<()> {
        let f = self.model.drift(x)?;
        let k = self.model.dispersion(x)?;
        let mut inc = vec![0.0; x.len()];
        gemv_add(&k, dw, &mut inc);
        for ((a, f), i) in x.iter_mut().zip(&f).zip(&inc) {
            *a += f * h + i;
        }
        if self.model.nonnegative() {
            for a in x.iter_mut() {
                self.cfg.boundary.apply(a);
            }
        }
        Ok(())
    }

    fn actions(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
    }
}

/// Euler-Maruyama for an averaged action equation. For Birkhoff-derived
/// models the configured boundary policy keeps the actions in `R_+^n`.
pub fn integrate_averaged_actions<M: ActionModel + ?Sized>(
    model: &M,
    init: &[f64],
    cfg: &IntegratorConfig,
    stop: &StoppingRule,
) -> Result<SdePath> {
    if model.nonnegative() && init.iter().any(|&x| x < 0.0) {
        return Err(Error::domain("initial actions must be nonnegative"));
    }
    let mut s = ActionStepper { model, cfg };
    let noise = NoiseStream::new(cfg.seed, cfg.trajectory_id);
    drive(&mut s, init, cfg, stop, noise)
}

/// Itô consistency of the action process.
///
/// Runs the Cartesian splitting scheme next to a direct Euler-Maruyama
/// discretisation of
///
/// ```text
/// dI_k = (v_k . P_k + 1/2 sum_j |B_kj|_HS^2) dtau + sum_j v_k^t B_kj dbeta_j
/// ```
///
/// with `v = V_phi(I)` and the angles read off the Cartesian path. Both use
/// the same Brownian path, sampled at `fine_step` and summed for the coarser
/// levels. Returns `(step, sup_tau max_k |I_k(v) - I_k|)` for steps
/// `fine_step * 2^l`, `l = levels-1, .., 0` (coarse first).
#[allow(clippy::too_many_arguments)]
pub fn ito_consistency(
    sys: &BirkhoffSystem,
    eps: Epsilon,
    init: &CartesianState,
    fine_step: f64,
    horizon: f64,
    levels: usize,
    seed: u64,
    trajectory_id: u64,
) -> Result<Vec<(f64, f64)>> {
    if levels == 0 {
        return Err(Error::domain("need at least one level"));
    }
    let m_fine = IntegratorConfig::new(fine_step, horizon).steps();
    let factor_max = 1usize << (levels - 1);
    if m_fine == 0 || m_fine % factor_max != 0 || (m_fine as f64 * fine_step - horizon).abs() > 1e-9 {
        return Err(Error::domain(
            "horizon must be a multiple of the coarsest step in the hierarchy",
        ));
    }
    let n = sys.blocks();
    let nd = 2 * sys.noise_blocks();
    let mut fine = vec![0.0; m_fine * nd];
    NoiseStream::new(seed, trajectory_id).fill(&mut fine, fine_step);

    let mut out = Vec::with_capacity(levels);
    for l in (0..levels).rev() {
        let f = 1usize << l;
        let h = fine_step * f as f64;
        let steps = m_fine / f;
        let mut stepper = BirkhoffStepper::new(sys, eps.get(), Scheme::RotationSplitEm);
        let mut v = init.as_slice().to_vec();
        let mut direct = actions_of(&v);
        let mut vhat = vec![0.0; 2 * n];
        let mut angles = vec![0.0; n];
        let mut ph = vec![0.0; 2 * n];
        let mut bh = sys.zero_dispersion();
        let mut dw = vec![0.0; nd];
        let mut err: f64 = 0.0;
        for s in 0..steps {
            dw.fill(0.0);
            for r in 0..f {
                let row = &fine[(s * f + r) * nd..(s * f + r + 1) * nd];
                for (a, b) in dw.iter_mut().zip(row) {
                    *a += b;
                }
            }
            stepper.rotate(&mut v, h);
            for (a, b) in angles.iter_mut().zip(v.chunks_exact(2)) {
                *a = b[1].atan2(b[0]);
            }
            let clamped: Vec<f64> = direct.iter().map(|&x| x.max(0.0)).collect();
            polar_into(&clamped, &angles, &mut vhat)?;
            sys.drift(&vhat, &mut ph);
            sys.dispersion(&vhat, &mut bh);
            for (k, ik) in direct.iter_mut().enumerate() {
                let (x, y) = (vhat[2 * k], vhat[2 * k + 1]);
                let mut hs = 0.0;
                let mut mart = 0.0;
                for j in 0..nd {
                    let (a, b) = (bh[(2 * k, j)], bh[(2 * k + 1, j)]);
                    hs += a * a + b * b;
                    mart += (x * a + y * b) * dw[j];
                }
                *ik += (x * ph[2 * k] + y * ph[2 * k + 1] + 0.5 * hs) * h + mart;
            }
            let (p, b) = stepper.coefficients(&v);
            let p = p.to_vec();
            let b = b.clone();
            for (x, p) in v.iter_mut().zip(&p) {
                *x += p * h;
            }
            gemv_add(&b, &dw, &mut v);
            for (k, blk) in v.chunks_exact(2).enumerate() {
                let iv = 0.5 * (blk[0] * blk[0] + blk[1] * blk[1]);
                err = err.max((iv - direct[k]).abs());
            }
            if !err.is_finite() {
                return Err(Error::Integration { step: s, reason: "non-finite action".into() });
            }
        }
        out.push((h, err));
    }
    Ok(out)
}
