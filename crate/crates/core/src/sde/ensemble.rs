use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::{integrate_birkhoff_system, integrate_effective, IntegratorConfig, SdePath, StoppingRule};
use crate::effective::EffectiveModel;
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::model::{actions_of, BirkhoffSystem, CartesianState, Epsilon};
use crate::torus::TorusQuadrature;

/// Paths in trajectory-id order.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    paths: Vec<SdePath>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

/// Run `task(i)` for `i in 0..n_paths` on a pool of `threads` workers.
///
/// The task receives the trajectory id and must derive all randomness from
/// it, so the result does not depend on `threads`. A failing or panicking
/// task is reported with its index.
pub fn run_ensemble<F>(n_paths: usize, threads: usize, task: F) -> Result<PathEnsemble>
where
    F: Fn(u64) -> Result<SdePath> + Sync + Send,
{
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("cannot build thread pool: {e}")))?;
    let results: Vec<Result<SdePath>> = pool.install(|| {
        (0..n_paths)
            .into_par_iter()
            .map(|i| match catch_unwind(AssertUnwindSafe(|| task(i as u64))) {
                Ok(r) => r,
                Err(p) => Err(Error::Internal(panic_message(p))),
            })
            .collect()
    });
    let mut paths = Vec::with_capacity(n_paths);
    for (index, r) in results.into_iter().enumerate() {
        paths.push(r.map_err(|e| Error::Path { index, source: Box::new(e) })?);
    }
    Ok(PathEnsemble { paths })
}

impl PathEnsemble {
    pub fn from_paths(paths: Vec<SdePath>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::precondition("ensemble needs at least one path"));
        }
        let t = paths[0].times();
        if paths.iter().any(|p| p.times() != t || p.dim() != paths[0].dim()) {
            return Err(Error::precondition("paths do not share a time grid"));
        }
        Ok(PathEnsemble { paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[SdePath] {
        &self.paths
    }

    pub fn path(&self, i: usize) -> &SdePath {
        &self.paths[i]
    }

    pub fn times(&self) -> &[f64] {
        self.paths[0].times()
    }

    pub fn dim(&self) -> usize {
        self.paths[0].dim()
    }

    /// Law of `map(state)` at record `index`, one atom per path.
    pub fn marginal<F>(&self, index: usize, map: F) -> Result<EmpiricalMeasure>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        if index >= self.times().len() {
            return Err(Error::precondition(format!("record {index} out of range")));
        }
        let rows: Vec<Vec<f64>> = self.paths.iter().map(|p| map(p.state(index))).collect();
        EmpiricalMeasure::from_rows(&rows)
    }

    /// Law of the raw state at record `index`.
    pub fn state_marginal(&self, index: usize) -> Result<EmpiricalMeasure> {
        self.marginal(index, |s| s.to_vec())
    }

    pub fn exit_times(&self, horizon: f64) -> Vec<f64> {
        self.paths.iter().map(|p| p.exit_time_or(horizon)).collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OccupationEstimate {
    /// Mean over paths of `int_0^T 1_region(x(tau)) dtau`.
    pub value: f64,
    /// 95% normal half-width across paths.
    pub half_width: f64,
    pub horizon: f64,
}

/// Expected time spent in `region`, from the recorded grid (left sums).
pub fn occupation_fraction<F>(ensemble: &PathEnsemble, region: F) -> OccupationEstimate
where
    F: Fn(&[f64]) -> bool,
{
    let t = ensemble.times();
    let horizon = *t.last().unwrap_or(&0.0);
    let per_path: Vec<f64> = ensemble
        .paths()
        .iter()
        .map(|p| {
            t.windows(2)
                .enumerate()
                .filter(|(i, _)| region(p.state(*i)))
                .map(|(_, w)| w[1] - w[0])
                .sum()
        })
        .collect();
    let n = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / n;
    let var = if per_path.len() > 1 {
        per_path.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    OccupationEstimate { value: mean, half_width: 1.96 * (var / n).sqrt(), horizon }
}

/// Stopped action paths of one ensemble.
#[derive(Clone, Debug)]
pub struct ExitLaw {
    /// `None` for the effective-equation reference.
    pub eps: Option<f64>,
    pub ensemble: PathEnsemble,
}

impl ExitLaw {
    pub fn exit_times(&self, horizon: f64) -> Vec<f64> {
        self.ensemble.exit_times(horizon)
    }

    /// Fraction of paths with `tau_R < s`.
    pub fn early_exit_probability(&self, s: f64) -> f64 {
        let hits = self
            .ensemble
            .paths()
            .iter()
            .filter(|p| p.exit_time().is_some_and(|t| t < s))
            .count();
        hits as f64 / self.ensemble.len() as f64
    }

    /// Law of `I(v(tau ^ tau_R))` at record `index`.
    pub fn action_marginal(&self, index: usize) -> Result<EmpiricalMeasure> {
        self.ensemble.marginal(index, actions_of)
    }
}

#[derive(Clone, Debug)]
pub struct ExitTimeReport {
    pub radius: f64,
    pub horizon: f64,
    pub laws: Vec<ExitLaw>,
    pub reference: ExitLaw,
}

/// Stopped Birkhoff paths for each `eps`, plus the stopped effective
/// equation as the `eps = 0` reference. Paths stop when `|I(v)| >= radius`.
/// The reference uses seed `cfg.seed + 1`.
#[allow(clippy::too_many_arguments)]
pub fn exit_time_experiment(
    sys: Arc<BirkhoffSystem>,
    eps_list: &[f64],
    init: &CartesianState,
    radius: f64,
    cfg: &IntegratorConfig,
    n_paths: usize,
    threads: usize,
    quadrature: TorusQuadrature,
) -> Result<ExitTimeReport> {
    let i0 = init.actions();
    if i0.iter().map(|x| x * x).sum::<f64>().sqrt() >= radius {
        return Err(Error::domain("initial actions must lie inside the ball"));
    }
    let stop = StoppingRule::ExitActionBall(radius);
    let mut laws = Vec::with_capacity(eps_list.len());
    for &e in eps_list {
        let eps = Epsilon::new(e)?;
        let ensemble = run_ensemble(n_paths, threads, |id| {
            let c = cfg.clone().with_seed(cfg.seed, id);
            integrate_birkhoff_system(&sys, eps, init, &c, &stop)
        })?;
        laws.push(ExitLaw { eps: Some(e), ensemble });
    }
    let model = EffectiveModel::new(sys.clone(), quadrature)?;
    let ensemble = run_ensemble(n_paths, threads, |id| {
        let c = cfg.clone().with_seed(cfg.seed.wrapping_add(1), id);
        integrate_effective(&model, init, &c, &stop)
    })?;
    Ok(ExitTimeReport {
        radius,
        horizon: cfg.horizon,
        laws,
        reference: ExitLaw { eps: None, ensemble },
    })
}
