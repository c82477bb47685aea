//! Time stepping for the perturbed, effective and averaged equations.
//!
//! All integrators share one driver: a fixed slow-time grid, Wiener
//! increments drawn from a per-path ChaCha stream, a stopping rule checked
//! after every step and a recording stride. Stopped paths keep their last
//! state until the horizon.

mod ensemble;
mod export;
mod integrate;
mod lifting;

pub use ensemble::{
    exit_time_experiment, occupation_fraction, run_ensemble, ExitLaw, ExitTimeReport,
    OccupationEstimate, PathEnsemble,
};
pub use export::{read_binary, write_binary, write_csv, BinaryFrame};
pub use integrate::{
    integrate_averaged_actions, integrate_birkhoff_system, integrate_effective,
    integrate_torus_system, ito_consistency, ActionModel,
};
pub use lifting::{lifted_companion, LiftedCompanion};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Plain explicit Euler-Maruyama, fast term included. Needs `h << eps`.
    EulerMaruyama,
    /// Exact fast rotation followed by an Euler-Maruyama step for the rest.
    #[default]
    RotationSplitEm,
}

/// What to do when an averaged Birkhoff action leaves `R_+`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    #[default]
    ClampAtZero,
    ReflectAtZero,
}

impl BoundaryPolicy {
    pub(crate) fn apply(self, x: &mut f64) {
        if *x < 0.0 {
            *x = match self {
                BoundaryPolicy::ClampAtZero => 0.0,
                BoundaryPolicy::ReflectAtZero => -*x,
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
    pub horizon: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trajectory_id: u64,
    /// Keep every `record_every`-th state (the final state is always kept).
    #[serde(default = "one")]
    pub record_every: usize,
    /// Keep all Wiener increments.
    #[serde(default)]
    pub record_noise: bool,
}

fn one() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(step: f64, horizon: f64) -> Self {
        IntegratorConfig {
            step,
            horizon,
            scheme: Scheme::default(),
            boundary: BoundaryPolicy::default(),
            seed: 0,
            trajectory_id: 0,
            record_every: 1,
            record_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened to land on the horizon.
    pub fn steps(&self) -> usize {
        let r = self.horizon / self.step;
        let m = r.round();
        if (r - m).abs() <= 1e-9 * r.max(1.0) {
            m as usize
        } else {
            r.ceil() as usize
        }
    }

    pub(crate) fn time_of(&self, step: usize) -> f64 {
        let m = self.steps();
        if step >= m {
            self.horizon
        } else {
            step as f64 * self.step
        }
    }

    /// Record indices land on steps `0, r, 2r, ..` and on the last step.
    pub fn record_count(&self) -> usize {
        let m = self.steps();
        m / self.record_every + 1 + usize::from(m % self.record_every != 0)
    }

    pub fn with_seed(mut self, seed: u64, trajectory_id: u64) -> Self {
        self.seed = seed;
        self.trajectory_id = trajectory_id;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "kebab-case")]
pub enum StoppingRule {
    #[default]
    None,
    /// Stop once the Euclidean norm of the action vector reaches `R`.
    ExitActionBall(f64),
    /// Stop once the Euclidean norm of the state reaches `R`.
    ExitNormBall(f64),
    /// Stop once some action drops to `delta` or below.
    ActionFloor(f64),
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StoppingRule::None => Ok(()),
            StoppingRule::ExitActionBall(x)
            | StoppingRule::ExitNormBall(x)
            | StoppingRule::ActionFloor(x) => {
                if x > 0.0 && x.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("stopping threshold must be positive, got {x}")))
                }
            }
        }
    }

    /// `state` is the raw integrator state, `actions` its action vector.
    pub fn triggered(&self, state: &[f64], actions: &[f64]) -> bool {
        match *self {
            StoppingRule::None => false,
            StoppingRule::ExitActionBall(r) => {
                actions.iter().map(|x| x * x).sum::<f64>().sqrt() >= r
            }
            StoppingRule::ExitNormBall(r) => state.iter().map(|x| x * x).sum::<f64>().sqrt() >= r,
            StoppingRule::ActionFloor(d) => actions.iter().any(|&x| x <= d),
        }
    }
}

/// Gaussian stream of one trajectory.
///
/// ChaCha8 keyed by `seed`, with `trajectory_id` selecting the stream, so
/// every path owns an independent, schedule-free sequence.
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, trajectory_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trajectory_id);
        NoiseStream { rng }
    }

    /// Fill `out` with independent `N(0, variance)` samples.
    pub fn fill(&mut self, out: &mut [f64], variance: f64) {
        let s = variance.sqrt();
        for x in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *x = s * z;
        }
    }
}

/// A recorded trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdePath {
    dim: usize,
    noise_dim: usize,
    step: f64,
    times: Vec<f64>,
    states: Vec<f64>,
    noise: Option<Vec<f64>>,
    stopped_at: Option<usize>,
    exit_time: Option<f64>,
}

impl SdePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Increments of step `i` (between grid steps `i` and `i + 1`).
    pub fn noise(&self, i: usize) -> Option<&[f64]> {
        self.noise
            .as_ref()
            .map(|w| &w[i * self.noise_dim..(i + 1) * self.noise_dim])
    }

    pub fn has_noise(&self) -> bool {
        self.noise.is_some()
    }

    /// Index of the first record at which the stopping rule fired.
    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    /// Exit time, if the stopping rule fired before the horizon.
    pub fn exit_time(&self) -> Option<f64> {
        self.exit_time
    }

    /// Exit time, with the horizon standing in for "never".
    pub fn exit_time_or(&self, horizon: f64) -> f64 {
        self.exit_time.unwrap_or(horizon)
    }
}

/// One step of some SDE family. `dw` holds the Wiener increments of the step.
pub(crate) trait Stepper {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn step(&mut self, state: &mut [f64], h: f64, dw: &[f64]) -> Result<()>;
    fn actions(&self, state: &[f64], out: &mut Vec<f64>);
}

pub(crate) fn drive<S: Stepper>(
    stepper: &mut S,
    init: &[f64],
    cfg: &IntegratorConfig,
    stop: &StoppingRule,
    mut noise: NoiseStream,
) -> Result<SdePath> {
    cfg.validate()?;
    stop.validate()?;
    let dim = stepper.dim();
    let nd = stepper.noise_dim();
    if init.len() != dim {
        return Err(Error::precondition(format!(
            "initial state has length {}, expected {dim}",
            init.len()
        )));
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("initial state is not finite"));
    }
    let m = cfg.steps();
    let records = cfg.record_count();
    let mut times = Vec::with_capacity(records);
    let mut states = Vec::with_capacity(records * dim);
    let mut kept_noise = cfg.record_noise.then(|| Vec::with_capacity(m * nd));
    let mut x = init.to_vec();
    let mut dw = vec![0.0; nd];
    let mut actions = Vec::with_capacity(dim);

    times.push(0.0);
    states.extend_from_slice(&x);
    stepper.actions(&x, &mut actions);
    let mut stopped_at = stop.triggered(&x, &actions).then_some(0);
    let mut exit_time = stopped_at.map(|_| 0.0);

    for n in 0..m {
        let t0 = cfg.time_of(n);
        let t1 = cfg.time_of(n + 1);
        let h = t1 - t0;
        noise.fill(&mut dw, h);
        if let Some(k) = kept_noise.as_mut() {
            k.extend_from_slice(&dw);
        }
        if stopped_at.is_none() {
            stepper.step(&mut x, h, &dw).map_err(|e| match e {
                Error::Integration { reason, .. } => Error::Integration { step: n, reason },
                other => other,
            })?;
            if let Some(i) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Integration {
                    step: n,
                    reason: format!("state component {i} became {}", x[i]),
                });
            }
            stepper.actions(&x, &mut actions);
            if stop.triggered(&x, &actions) {
                exit_time = Some(t1);
            }
        }
        let record = (n + 1) % cfg.record_every == 0 || n + 1 == m;
        if record {
            times.push(t1);
            states.extend_from_slice(&x);
            if exit_time.is_some() && stopped_at.is_none() {
                stopped_at = Some(times.len() - 1);
            }
        } else if exit_time.is_some() && stopped_at.is_none() {
            // Stopped between records: the next record carries the stopped state.
            stopped_at = Some(times.len());
        }
    }
    Ok(SdePath {
        dim,
        noise_dim: nd,
        step: cfg.step,
        times,
        states,
        noise: kept_noise,
        stopped_at,
        exit_time,
    })
}
