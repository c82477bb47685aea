//! Rotation-lifted companion of a Birkhoff path.
//!
//! Away from the locus `{min_k |v_k| <= delta} u {|v| >= 1/delta}` the
//! companion `vbar_k` is driven by the increments of `v_k` rotated by the
//! planar aligner `U(vbar_k, v_k)`, so it feels the slow drift and noise
//! but not the fast rotation. Inside the locus it is a frozen rotation of
//! `v_k`. Either way `|vbar_k| = |v_k|`.

use serde::Serialize;

use super::integrate::BirkhoffStepper;
use super::{Scheme, SdePath};
use crate::error::{Error, Result};
use crate::model::{planar_aligner, BirkhoffSystem, Epsilon};

#[derive(Clone, Debug, Serialize)]
pub struct LiftedCompanion {
    pub block: usize,
    pub delta: f64,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 2]>,
    /// Entry times into the locus.
    pub tau_minus: Vec<f64>,
    /// Return times to the good set.
    pub tau_plus: Vec<f64>,
    /// `max_tau ||vbar_k| - |v_k|| / max_tau |v_k|`.
    pub norm_mismatch: f64,
    /// Largest `|Pbar_k| = |P_k|` seen on good steps (`NaN` if none).
    pub drift_bound: f64,
    pub good_steps: usize,
    pub bad_steps: usize,
}

fn norm2(b: &[f64]) -> f64 {
    b[0].hypot(b[1])
}

fn apply(u: &nalgebra::Matrix2<f64>, z: [f64; 2]) -> [f64; 2] {
    [u[(0, 0)] * z[0] + u[(0, 1)] * z[1], u[(1, 0)] * z[0] + u[(1, 1)] * z[1]]
}

/// Build the companion of block `k` along a path produced by
/// [`integrate_birkhoff_system`](super::integrate_birkhoff_system) with the
/// splitting scheme, `record_every = 1` and `record_noise = true`.
pub fn lifted_companion(
    sys: &BirkhoffSystem,
    eps: Epsilon,
    path: &SdePath,
    k: usize,
    delta: f64,
) -> Result<LiftedCompanion> {
    let n = sys.blocks();
    if k >= n {
        return Err(Error::precondition(format!("block {k} out of range")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::domain("delta must lie in (0, 1/2)"));
    }
    if !path.has_noise() {
        return Err(Error::precondition("path carries no Wiener increments"));
    }
    if path.dim() != 2 * n || path.noise_dim() != 2 * sys.noise_blocks() {
        return Err(Error::precondition("path does not belong to this system"));
    }
    let steps = path.len() - 1;
    if path.noise(steps.saturating_sub(1)).is_none()
        || path.times().windows(2).any(|w| w[1] - w[0] > path.step() * (1.0 + 1e-9))
    {
        return Err(Error::precondition("path must record every step"));
    }
    let last = path.stopped_at().map_or(steps, |s| s.min(steps));

    let bad = |v: &[f64]| {
        let m = v.chunks_exact(2).map(norm2).fold(f64::INFINITY, f64::min);
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        m <= delta || r >= 1.0 / delta
    };
    let good = |v: &[f64]| {
        let m = v.chunks_exact(2).map(norm2).fold(f64::INFINITY, f64::min);
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        m >= 2.0 * delta && r <= 0.5 / delta
    };

    let mut stepper = BirkhoffStepper::new(sys, eps.get(), Scheme::RotationSplitEm);
    let mut vprime = vec![0.0; 2 * n];
    let v0 = path.state(0);
    let mut vbar = [v0[2 * k], v0[2 * k + 1]];
    let mut frozen: Option<nalgebra::Matrix2<f64>> = None;
    let mut out = LiftedCompanion {
        block: k,
        delta,
        times: Vec::with_capacity(last + 1),
        states: Vec::with_capacity(last + 1),
        tau_minus: Vec::new(),
        tau_plus: Vec::new(),
        norm_mismatch: 0.0,
        drift_bound: f64::NAN,
        good_steps: 0,
        bad_steps: 0,
    };
    let mut max_norm: f64 = 0.0;
    let mut max_gap: f64 = 0.0;

    for i in 0..=last {
        let v = path.state(i);
        let t = path.times()[i];
        let vk = [v[2 * k], v[2 * k + 1]];
        match frozen {
            None if bad(v) => {
                let u = if norm2(&vk) > 0.0 {
                    planar_aligner(vbar, vk)?
                } else {
                    nalgebra::Matrix2::identity()
                };
                frozen = Some(u);
                out.tau_minus.push(t);
            }
            Some(u) if good(v) => {
                vbar = apply(&u, vk);
                frozen = None;
                out.tau_plus.push(t);
            }
            _ => {}
        }
        if let Some(u) = &frozen {
            vbar = apply(u, vk);
        }
        out.times.push(t);
        out.states.push(vbar);
        let nv = norm2(&vk);
        max_norm = max_norm.max(nv);
        max_gap = max_gap.max((norm2(&vbar) - nv).abs());
        if i == last {
            break;
        }
        if frozen.is_some() {
            out.bad_steps += 1;
            continue;
        }
        // Replay the splitting step to recover the increment of block k.
        let h = path.times()[i + 1] - t;
        let dw = path.noise(i).expect("checked above");
        vprime.copy_from_slice(v);
        stepper.rotate(&mut vprime, h);
        let (p, b) = stepper.coefficients(&vprime);
        let mut inc = [p[2 * k] * h, p[2 * k + 1] * h];
        for (j, &w) in dw.iter().enumerate() {
            inc[0] += b[(2 * k, j)] * w;
            inc[1] += b[(2 * k + 1, j)] * w;
        }
        let pk = p[2 * k].hypot(p[2 * k + 1]);
        out.drift_bound = if out.drift_bound.is_nan() { pk } else { out.drift_bound.max(pk) };
        let u = planar_aligner(vbar, [vprime[2 * k], vprime[2 * k + 1]])?;
        let du = apply(&u, inc);
        vbar = [vbar[0] + du[0], vbar[1] + du[1]];
        out.good_steps += 1;
    }
    out.norm_mismatch = if max_norm > 0.0 { max_gap / max_norm } else { max_gap };
    Ok(out)
}
