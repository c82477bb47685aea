//! Configuration-driven experiments.
//!
//! A scenario is a TOML document naming a builtin system, an experiment
//! kind, an `eps` grid and the simulation budget. [`run_scenario`] wires the
//! system through averaging, runs the ensembles and writes
//!
//! * `report.json`: config echo, config hash, distance rows, details,
//! * `distances.csv`: one row per `eps` (distance experiments only),
//! * `series/*.csv`: per-`tau` curves, histograms, tables,
//! * `timing.json`: wall clock, kept apart so the other files are
//!   reproducible bitwise,
//! * `paths/*.sfav`: binary path dumps when `dump_paths = true`.
//!
//! All quantities are in slow time. Laws at different `eps` share trajectory
//! ids and seed (common random numbers); reference laws are simulated from
//! the averaged or effective equation with seed `seed + 1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::effective::{AveragedActionModel, EffectiveModel};
use crate::error::{Error, Result};
use crate::measures::{
    bl_distance, convergence_curve, uniform_in_time_sup, BlOptions, BoundKind, CurveOptions,
    EmpiricalMeasure, Method, SliceReduce,
};
use crate::model::{
    actions_of, ActionAngleState, BirkhoffSystem, CartesianState, Epsilon,
    TorusSystem,
};
use crate::normal_form::{
    build_action_profile, uniform_levels, ActionProfile, Hamiltonian1D,
};
use crate::sde::{
    exit_time_experiment, integrate_averaged_actions, integrate_birkhoff_system,
    integrate_effective, integrate_torus_system, lifted_companion, occupation_fraction,
    run_ensemble, write_binary, BoundaryPolicy, IntegratorConfig, PathEnsemble, Scheme,
    StoppingRule,
};
use crate::torus::{resonant_set_measure, AveragedModel, ResonanceOptions, TorusQuadrature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    AveragingConvergence,
    StationaryMixing,
    UniformInTime,
    ExitTime,
    LiftingDiagnostic,
    ResonanceScan,
    NormalFormBuild,
}

impl ExperimentKind {
    fn needs_eps(self) -> bool {
        self != ExperimentKind::NormalFormBuild
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub builtin: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Action profile JSON (from a `normal-form-build` run); `duffing-chain`
    /// only. Relative paths are taken from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    Tensor,
    Korobov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    pub rule: QuadratureRule,
    /// Nodes per angle for tensor rules, total nodes for Korobov rules.
    pub points: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { rule: QuadratureRule::Tensor, points: 64 }
    }
}

impl QuadratureSpec {
    fn build(&self, dim: usize) -> Result<TorusQuadrature> {
        match self.rule {
            QuadratureRule::Tensor => TorusQuadrature::tensor(dim, self.points),
            QuadratureRule::Korobov => TorusQuadrature::korobov(dim, self.points),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub slices: usize,
    pub cap: usize,
    pub reduce: SliceReduce,
    pub prefer_sliced: bool,
    /// Bootstrap replicates for confidence intervals.
    pub replicates: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        let bl = BlOptions::default();
        MetricSpec {
            slices: bl.slices,
            cap: bl.cap,
            reduce: bl.reduce,
            prefer_sliced: false,
            replicates: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// Cartesian effective equation (Birkhoff systems).
    Effective,
    /// Averaged equation for the actions.
    AveragedActions,
}

/// Experiment-specific knobs; anything unset takes the documented default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    /// Reference law for Birkhoff systems (default `effective`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceKind>,
    /// Paths for the reference law (default `n_paths`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_paths: Option<usize>,
    /// Locus thresholds for occupation fractions (stationary-mixing).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_grid: Option<Vec<f64>>,
    /// Action-ball radius (exit-time, resonance-scan).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Early-exit time for `P(tau_R < sbar)` (exit-time, default `T/10`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbar: Option<f64>,
    /// Locus threshold of the lifted companion, or resonance deviation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    /// Monte Carlo action samples for resonance-scan.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Angle nodes per dimension on which resonance deviations are probed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_points: Option<usize>,
    /// `harmonic`, `quartic-radial` or `duffing` (normal-form-build).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
    /// Record every k-th step (default: 1/10 of the steps, at least 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub options: ExperimentOptions,
    #[serde(default)]
    pub dump_paths: bool,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_paths() -> usize {
    1000
}

fn default_step() -> f64 {
    0.01
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("malformed scenario: {e}")))
    }

    /// Parse a file; relative `output_dir` and `profile` paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(sys) = cfg.system.as_mut() {
            if let Some(p) = sys.profile.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("cannot serialise scenario: {e}")))
    }

    /// SHA-256 over the crate version and the config without its output
    /// directory, so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn integrator(&self) -> IntegratorConfig {
        let mut c = IntegratorConfig::new(self.step, self.horizon);
        c.scheme = self.scheme;
        c.boundary = self.boundary;
        c.seed = self.seed;
        c.record_every = self.record_every.unwrap_or((c.steps() / 10).max(1));
        c
    }

    fn curve_options(&self) -> CurveOptions {
        CurveOptions {
            bl: BlOptions {
                cap: self.metric.cap,
                slices: self.metric.slices,
                seed: self.seed.wrapping_add(3),
                prefer_sliced: self.metric.prefer_sliced,
                reduce: self.metric.reduce,
                ..BlOptions::default()
            },
            replicates: self.metric.replicates,
            seed: self.seed.wrapping_add(2),
        }
    }

    fn reference_paths(&self) -> usize {
        self.options.reference_paths.unwrap_or(self.n_paths)
    }

    fn check_shape(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment.needs_eps() {
            if self.eps_grid.is_empty() {
                return bad("eps_grid must not be empty".into());
            }
            if let Some(e) = self.eps_grid.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
                return bad(format!("eps_grid entries must lie in (0, 1], got {e}"));
            }
            if self.system.is_none() {
                return bad("this experiment needs a [system] table".into());
            }
        }
        if self.n_paths == 0 {
            return bad("n_paths must be >= 1".into());
        }
        if self.options.reference_paths == Some(0) {
            return bad("options.reference_paths must be >= 1".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.metric.replicates == 0 || self.metric.slices == 0 {
            return bad("metric.replicates and metric.slices must be >= 1".into());
        }
        if self.quadrature.points == 0 {
            return bad("quadrature.points must be >= 1".into());
        }
        self.integrator().validate()
    }
}

// ---------------------------------------------------------------- builtins

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemForm {
    /// Action-angle form on `R^d x T^n`.
    Torus,
    /// Cartesian Birkhoff form on `R^{2n}`.
    Birkhoff,
}

#[derive(Clone, Debug, Serialize)]
pub struct BuiltinInfo {
    pub name: &'static str,
    pub form: SystemForm,
    pub summary: &'static str,
    /// `(name, default, meaning)`.
    pub params: Vec<(&'static str, f64, &'static str)>,
    pub needs_profile: bool,
}

pub fn list_builtins() -> Vec<BuiltinInfo> {
    vec![
        BuiltinInfo {
            name: "rotator",
            form: SystemForm::Torus,
            summary: "one action, one angle: dI = -(rate + shape cos^2 phi) I dtau + sigma dbeta_1, \
                      dphi = theta/eps dtau + phase_noise dbeta_2",
            params: vec![
                ("theta", 1.0, "rotation frequency"),
                ("rate", 2.0, "angle-free damping"),
                ("shape", 1.0, "amplitude of the cos^2 phi damping"),
                ("sigma", 1.0, "action noise"),
                ("phase_noise", 1.0, "angle noise, independent of the action noise"),
                ("i0", 10.0, "initial action"),
                ("phi0", 0.0, "initial angle"),
            ],
            needs_profile: false,
        },
        BuiltinInfo {
            name: "ou-benchmark",
            form: SystemForm::Birkhoff,
            summary: "P = -rate v, B = sigma Id, constant frequencies omega_k = omega (1 + (k) (sqrt 2 - 1))",
            params: vec![
                ("blocks", 1.0, "number of oscillators"),
                ("rate", 1.0, "damping"),
                ("sigma", 1.0, "noise"),
                ("omega", 1.0, "base frequency"),
                ("x0", 1.0, "initial x of every block"),
            ],
            needs_profile: false,
        },
        BuiltinInfo {
            name: "constant-shift",
            form: SystemForm::Birkhoff,
            summary: "one oscillator, P = -rate v + (c, 0), B = sigma Id; the shift averages out",
            params: vec![
                ("c", 3.0, "shift"),
                ("rate", 1.0, "damping"),
                ("sigma", 1.0, "noise"),
                ("omega", 1.0, "frequency"),
                ("x0", 1.0, "initial x"),
            ],
            needs_profile: false,
        },
        BuiltinInfo {
            name: "radial-noise",
            form: SystemForm::Birkhoff,
            summary: "one oscillator, P = -rate v, B = sigma (Id + gain v v^t / (1 + |v|^2))",
            params: vec![
                ("rate", 1.0, "damping"),
                ("sigma", 1.0, "noise"),
                ("gain", 1.0, "extra radial noise"),
                ("omega", 1.0, "frequency"),
                ("x0", 1.0, "initial x"),
            ],
            needs_profile: false,
        },
        BuiltinInfo {
            name: "anharmonic-drift",
            form: SystemForm::Birkhoff,
            summary: "two oscillators with twist W_k = omega_k + twist I_k, cubic damping and a \
                      cross-coupling that averages out",
            params: vec![
                ("twist", 1.0, "frequency shift per unit action"),
                ("rate", 1.0, "linear damping"),
                ("cubic", 0.1, "cubic damping"),
                ("coupling", 0.5, "cross-coupling strength"),
                ("sigma", 1.0, "noise"),
                ("x0", 1.0, "initial x of both blocks"),
            ],
            needs_profile: false,
        },
        BuiltinInfo {
            name: "duffing-chain",
            form: SystemForm::Birkhoff,
            summary: "chain of Duffing oscillators in normal-form coordinates, frequencies from an \
                      action profile, nearest-neighbour diffusive coupling",
            params: vec![
                ("blocks", 2.0, "chain length"),
                ("rate", 1.0, "damping"),
                ("coupling", 0.2, "neighbour coupling"),
                ("sigma", 0.5, "noise"),
                ("x0", 0.5, "initial x of every block"),
            ],
            needs_profile: true,
        },
    ]
}

/// A constructed builtin together with its initial state.
#[derive(Clone, Debug)]
pub enum BuiltSystem {
    Torus { sys: Arc<TorusSystem>, init: ActionAngleState },
    Birkhoff { sys: Arc<BirkhoffSystem>, init: CartesianState },
}

impl BuiltSystem {
    pub fn form(&self) -> SystemForm {
        match self {
            BuiltSystem::Torus { .. } => SystemForm::Torus,
            BuiltSystem::Birkhoff { .. } => SystemForm::Birkhoff,
        }
    }

    fn angle_dim(&self) -> usize {
        match self {
            BuiltSystem::Torus { sys, .. } => sys.angle_dim(),
            BuiltSystem::Birkhoff { sys, .. } => sys.blocks(),
        }
    }

    fn initial_actions(&self) -> Vec<f64> {
        match self {
            BuiltSystem::Torus { init, .. } => init.actions().to_vec(),
            BuiltSystem::Birkhoff { init, .. } => init.actions(),
        }
    }
}

fn resolve_params(info: &BuiltinInfo, given: &BTreeMap<String, f64>) -> Result<BTreeMap<&'static str, f64>> {
    if let Some(k) = given.keys().find(|k| !info.params.iter().any(|p| p.0 == k.as_str())) {
        let known: Vec<_> = info.params.iter().map(|p| p.0).collect();
        return Err(Error::Config(format!(
            "unknown parameter `{k}` for builtin `{}`; known: {}",
            info.name,
            known.join(", ")
        )));
    }
    let mut out = BTreeMap::new();
    for &(name, default, _) in &info.params {
        let v = given.get(name).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::Config(format!("parameter `{name}` must be finite")));
        }
        out.insert(name, v);
    }
    Ok(out)
}

fn count_param(p: &BTreeMap<&str, f64>, name: &str) -> Result<usize> {
    let v = p[name];
    if v >= 1.0 && v.fract() == 0.0 && v <= 64.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("`{name}` must be an integer in 1..=64, got {v}")))
    }
}

fn positive(p: &BTreeMap<&str, f64>, names: &[&str]) -> Result<()> {
    for &n in names {
        if p[n] <= 0.0 {
            return Err(Error::Config(format!("`{n}` must be positive, got {}", p[n])));
        }
    }
    Ok(())
}

fn uniform_init(blocks: usize, x0: f64) -> Result<CartesianState> {
    CartesianState::new((0..blocks).flat_map(|_| [x0, 0.0]).collect())
}

/// `B = sigma Id` has Gram eigenvalue `sigma^2`.
fn ellipticity_of(lo: f64, hi: f64) -> f64 {
    lo.min(1.0 / hi).min(1.0)
}

/// Build a builtin and run the probe suite on it.
pub fn build_system(spec: &SystemSpec) -> Result<BuiltSystem> {
    let catalog = list_builtins();
    let info = catalog.iter().find(|b| b.name == spec.builtin).ok_or_else(|| {
        let names: Vec<_> = catalog.iter().map(|b| b.name).collect();
        Error::Config(format!("unknown builtin `{}`; available: {}", spec.builtin, names.join(", ")))
    })?;
    if spec.profile.is_some() && !info.needs_profile {
        return Err(Error::Config(format!("builtin `{}` takes no profile", info.name)));
    }
    let p = resolve_params(info, &spec.params)?;
    let built = match info.name {
        "rotator" => {
            positive(&p, &["sigma"])?;
            let (theta, rate, shape) = (p["theta"], p["rate"], p["shape"]);
            let (sigma, noise) = (p["sigma"], p["phase_noise"]);
            let sys = TorusSystem::builder(1, 1, 2)
                .frequency(move |_, w| w[0] = theta)
                .drift_actions(move |i, phi, out| {
                    let c = phi[0].cos();
                    out[0] = -(rate + shape * c * c) * i[0];
                })
                .dispersion_actions(move |_, _, m| m[(0, 0)] = sigma)
                .dispersion_angles(move |_, _, m| m[(0, 1)] = noise)
                .ellipticity(ellipticity_of(sigma * sigma, sigma * sigma))
                .build()?;
            sys.probe_random(p["i0"].abs().max(1.0), 64, 0)?;
            let init = ActionAngleState::new(vec![p["i0"]], vec![p["phi0"]]);
            BuiltSystem::Torus { sys: Arc::new(sys), init }
        }
        "ou-benchmark" => {
            positive(&p, &["sigma"])?;
            let n = count_param(&p, "blocks")?;
            let (rate, sigma, omega) = (p["rate"], p["sigma"], p["omega"]);
            let sys = BirkhoffSystem::builder(n, n)
                .frequencies(move |_, w| {
                    for (k, wk) in w.iter_mut().enumerate() {
                        *wk = omega * (1.0 + k as f64 * (std::f64::consts::SQRT_2 - 1.0));
                    }
                })
                .drift(move |v, out| {
                    for (o, x) in out.iter_mut().zip(v) {
                        *o = -rate * x;
                    }
                })
                .dispersion(move |_, m| m.fill_diagonal(sigma))
                .ellipticity(ellipticity_of(sigma * sigma, sigma * sigma))
                .build()?;
            BuiltSystem::Birkhoff { sys: Arc::new(sys), init: uniform_init(n, p["x0"])? }
        }
        "constant-shift" => {
            positive(&p, &["sigma"])?;
            let (c, rate, sigma, omega) = (p["c"], p["rate"], p["sigma"], p["omega"]);
            let sys = BirkhoffSystem::builder(1, 1)
                .frequencies(move |_, w| w[0] = omega)
                .drift(move |v, out| {
                    out[0] = -rate * v[0] + c;
                    out[1] = -rate * v[1];
                })
                .dispersion(move |_, m| m.fill_diagonal(sigma))
                .ellipticity(ellipticity_of(sigma * sigma, sigma * sigma))
                .build()?;
            BuiltSystem::Birkhoff { sys: Arc::new(sys), init: uniform_init(1, p["x0"])? }
        }
        "radial-noise" => {
            positive(&p, &["sigma"])?;
            let (rate, sigma, gain, omega) = (p["rate"], p["sigma"], p["gain"], p["omega"]);
            if gain < 0.0 {
                return Err(Error::Config("`gain` must be >= 0".into()));
            }
            let sys = BirkhoffSystem::builder(1, 1)
                .frequencies(move |_, w| w[0] = omega)
                .drift(move |v, out| {
                    out[0] = -rate * v[0];
                    out[1] = -rate * v[1];
                })
                .dispersion(move |v, m| {
                    let s = gain / (1.0 + v[0] * v[0] + v[1] * v[1]);
                    m[(0, 0)] = sigma * (1.0 + s * v[0] * v[0]);
                    m[(0, 1)] = sigma * s * v[0] * v[1];
                    m[(1, 0)] = sigma * s * v[0] * v[1];
                    m[(1, 1)] = sigma * (1.0 + s * v[1] * v[1]);
                })
                .ellipticity(ellipticity_of(sigma * sigma, (sigma * (1.0 + gain)).powi(2)))
                .build()?;
            BuiltSystem::Birkhoff { sys: Arc::new(sys), init: uniform_init(1, p["x0"])? }
        }
        "anharmonic-drift" => {
            positive(&p, &["sigma"])?;
            let (twist, rate, cubic) = (p["twist"], p["rate"], p["cubic"]);
            let (kappa, sigma) = (p["coupling"], p["sigma"]);
            if twist < 0.0 || cubic < 0.0 {
                return Err(Error::Config("`twist` and `cubic` must be >= 0".into()));
            }
            let sys = BirkhoffSystem::builder(2, 2)
                .frequencies(move |i, w| {
                    w[0] = 1.0 + twist * i[0];
                    w[1] = std::f64::consts::SQRT_2 + twist * i[1];
                })
                .drift(move |v, out| {
                    let r2: f64 = v.iter().map(|x| x * x).sum();
                    for (o, x) in out.iter_mut().zip(v) {
                        *o = -(rate + cubic * r2) * x;
                    }
                    out[0] += kappa * v[2];
                    out[2] += kappa * v[0];
                })
                .dispersion(move |_, m| m.fill_diagonal(sigma))
                .ellipticity(ellipticity_of(sigma * sigma, sigma * sigma))
                .build()?;
            BuiltSystem::Birkhoff { sys: Arc::new(sys), init: uniform_init(2, p["x0"])? }
        }
        "duffing-chain" => {
            let path = spec.profile.as_ref().ok_or_else(|| {
                Error::Config(
                    "duffing-chain needs a prebuilt action profile: run a normal-form-build \
                     scenario and set system.profile to its profile.json"
                        .into(),
                )
            })?;
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read action profile {}: {e}", path.display()))
            })?;
            let profile = Arc::new(ActionProfile::from_json(&text)?);
            positive(&p, &["sigma"])?;
            let n = count_param(&p, "blocks")?;
            let (rate, kappa, sigma) = (p["rate"], p["coupling"], p["sigma"]);
            let sys = crate::normal_form::build_oscillator_chain(
                profile,
                n,
                move |_, prev, z, next| {
                    let mut out = [-rate * z[0], -rate * z[1]];
                    for nb in [prev, next].into_iter().flatten() {
                        out[0] += kappa * (nb[0] - z[0]);
                        out[1] += kappa * (nb[1] - z[1]);
                    }
                    out
                },
                move |_, m: &mut DMatrix<f64>| m.fill_diagonal(sigma),
            )?;
            BuiltSystem::Birkhoff { sys: Arc::new(sys), init: uniform_init(n, p["x0"])? }
        }
        other => return Err(Error::Internal(format!("builtin `{other}` has no constructor"))),
    };
    if let BuiltSystem::Birkhoff { sys, init } = &built {
        let radius = init.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs())) * 2.0;
        sys.probe_random(radius, 64, 0)?;
    }
    Ok(built)
}

// ------------------------------------------------------------------ report

/// One line of `distances.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub eps: f64,
    /// `tau` at which the distance is taken (for sup rows: the argmax).
    pub tau: f64,
    pub value: f64,
    pub method: Method,
    pub bound_kind: BoundKind,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// 95% bootstrap interval of `value - value(next eps)`.
    pub diff_lo: Option<f64>,
    pub diff_hi: Option<f64>,
    pub n_paths: usize,
    pub reference_paths: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemSummary {
    pub builtin: String,
    pub form: String,
    pub angle_dim: usize,
    pub probe_points: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: ScenarioConfig,
    pub config_hash: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSummary>,
    /// Description of the reference law, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub rows: Vec<DistanceRow>,
    pub details: Value,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

impl ExperimentReport {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
    pub threads: usize,
    pub paths_simulated: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { threads: std::thread::available_parallelism().map_or(1, |n| n.get()) }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub timing: Timing,
}

/// Check a config without simulating: shape invariants, builtin lookup and
/// probes, experiment/system compatibility.
pub fn validate(cfg: &ScenarioConfig) -> Result<Option<BuiltSystem>> {
    cfg.check_shape()?;
    let built = match &cfg.system {
        Some(s) => Some(build_system(s)?),
        None => None,
    };
    let need = |form: SystemForm| -> Result<()> {
        match &built {
            Some(b) if b.form() == form => Ok(()),
            _ => Err(Error::Config(format!(
                "{:?} needs a {form:?} system",
                cfg.experiment
            ))),
        }
    };
    let o = &cfg.options;
    match cfg.experiment {
        ExperimentKind::ExitTime => {
            need(SystemForm::Birkhoff)?;
            let r = o.radius.ok_or_else(|| Error::Config("exit-time needs options.radius".into()))?;
            let i0 = built.as_ref().map(|b| b.initial_actions()).unwrap_or_default();
            if !(r > 0.0) || i0.iter().map(|x| x * x).sum::<f64>().sqrt() >= r {
                return Err(Error::Config("options.radius must exceed |I(init)|".into()));
            }
            if let Some(s) = o.sbar {
                if !(s > 0.0 && s <= cfg.horizon) {
                    return Err(Error::Config("options.sbar must lie in (0, horizon]".into()));
                }
            }
        }
        ExperimentKind::LiftingDiagnostic => {
            need(SystemForm::Birkhoff)?;
            if cfg.scheme != Scheme::RotationSplitEm {
                return Err(Error::Config("lifting-diagnostic needs the rotation-split-em scheme".into()));
            }
            let blocks = built.as_ref().map_or(0, |b| b.angle_dim());
            if o.block.unwrap_or(0) >= blocks {
                return Err(Error::Config(format!("options.block must be < {blocks}")));
            }
            if let Some(d) = o.delta {
                if !(d > 0.0 && d < 0.5) {
                    return Err(Error::Config("options.delta must lie in (0, 1/2)".into()));
                }
            }
        }
        ExperimentKind::ResonanceScan => need(SystemForm::Torus)?,
        ExperimentKind::NormalFormBuild => {
            let name = o.hamiltonian.as_deref().unwrap_or("duffing");
            hamiltonian_named(name, o.a_max.unwrap_or(4.0))?;
            if o.levels.unwrap_or(64) < 8 {
                return Err(Error::Config("options.levels must be >= 8".into()));
            }
        }
        ExperimentKind::StationaryMixing => {
            if let Some(g) = &o.delta_grid {
                if g.iter().any(|&d| !(d > 0.0)) {
                    return Err(Error::Config("options.delta_grid entries must be positive".into()));
                }
            }
        }
        ExperimentKind::AveragingConvergence | ExperimentKind::UniformInTime => {}
    }
    if let (Some(r), Some(b)) = (o.reference, &built) {
        if r == ReferenceKind::Effective && b.form() == SystemForm::Torus {
            return Err(Error::Config("torus systems only have an averaged-actions reference".into()));
        }
    }
    Ok(built)
}

fn hamiltonian_named(name: &str, a_max: f64) -> Result<Hamiltonian1D> {
    if !(a_max > 0.0 && a_max.is_finite()) {
        return Err(Error::Config("options.a_max must be positive".into()));
    }
    match name {
        "harmonic" => Ok(Hamiltonian1D::harmonic(a_max)),
        "quartic-radial" => Ok(Hamiltonian1D::quartic_radial(a_max)),
        "duffing" => Ok(Hamiltonian1D::duffing(a_max)),
        other => Err(Error::Config(format!(
            "unknown hamiltonian `{other}`; available: harmonic, quartic-radial, duffing"
        ))),
    }
}

/// Run a scenario and write its files into `cfg.output_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let start = Instant::now();
    let built = validate(cfg)?;
    let threads = opts.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(format!("cannot build thread pool: {e}")))?;
    let mut run = Run { cfg, threads, files: Files::default(), paths: 0 };
    let (rows, details, reference) = pool.install(|| run.dispatch(built.as_ref()))?;
    let report = ExperimentReport {
        scenario: cfg.clone(),
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        system: cfg.system.as_ref().zip(built.as_ref()).map(|(s, b)| SystemSummary {
            builtin: s.builtin.clone(),
            form: format!("{:?}", b.form()).to_lowercase(),
            angle_dim: b.angle_dim(),
            probe_points: 64,
        }),
        reference,
        rows,
        details,
        files: Vec::new(),
    };
    let outcome = run.finish(report, start)?;
    Ok(outcome)
}

/// Pending output files, written in one go at the end.
#[derive(Default)]
struct Files {
    text: Vec<(String, String)>,
    binary: Vec<(String, Vec<u8>)>,
}

fn csv_table(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|x| format!("{x}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn eps_label(e: f64) -> String {
    format!("eps={e}")
}

/// Maps a raw path state to its action vector.
#[derive(Clone, Copy)]
enum ActionMap {
    /// Torus state `[I, phi]` with `d` actions.
    Leading(usize),
    /// Cartesian state.
    Cartesian,
    /// Already actions.
    Identity,
}

impl ActionMap {
    fn apply(self, s: &[f64]) -> Vec<f64> {
        match self {
            ActionMap::Leading(d) => s[..d].to_vec(),
            ActionMap::Cartesian => actions_of(s),
            ActionMap::Identity => s.to_vec(),
        }
    }
}

struct Law {
    ensemble: PathEnsemble,
    map: ActionMap,
}

impl Law {
    fn at(&self, index: usize) -> Result<EmpiricalMeasure> {
        let m = self.map;
        self.ensemble.marginal(index, move |s| m.apply(s))
    }

    fn mean_action_sum(&self, index: usize) -> f64 {
        let n = self.ensemble.len() as f64;
        self.ensemble
            .paths()
            .iter()
            .map(|p| self.map.apply(p.state(index)).iter().sum::<f64>())
            .sum::<f64>()
            / n
    }
}

type Dispatched = (Vec<DistanceRow>, Value, Option<String>);

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    threads: usize,
    files: Files,
    paths: usize,
}

impl Run<'_> {
    fn dispatch(&mut self, built: Option<&BuiltSystem>) -> Result<Dispatched> {
        let b = || built.ok_or_else(|| Error::Internal("system missing after validation".into()));
        match self.cfg.experiment {
            ExperimentKind::AveragingConvergence => self.averaging_convergence(b()?),
            ExperimentKind::StationaryMixing => self.stationary_mixing(b()?),
            ExperimentKind::UniformInTime => self.uniform_in_time(b()?),
            ExperimentKind::ExitTime => self.exit_time(b()?),
            ExperimentKind::LiftingDiagnostic => self.lifting(b()?),
            ExperimentKind::ResonanceScan => self.resonance(b()?),
            ExperimentKind::NormalFormBuild => self.normal_form(),
        }
    }

    fn simulate(&mut self, built: &BuiltSystem, eps: f64, cfg: &IntegratorConfig) -> Result<Law> {
        let e = Epsilon::new(eps)?;
        let stop = StoppingRule::None;
        let seed = cfg.seed;
        let n = self.cfg.n_paths;
        self.paths += n;
        let (ensemble, map) = match built {
            BuiltSystem::Torus { sys, init } => (
                run_ensemble(n, self.threads, |id| {
                    integrate_torus_system(sys, e, init, &cfg.clone().with_seed(seed, id), &stop)
                })?,
                ActionMap::Leading(sys.action_dim()),
            ),
            BuiltSystem::Birkhoff { sys, init } => (
                run_ensemble(n, self.threads, |id| {
                    integrate_birkhoff_system(sys, e, init, &cfg.clone().with_seed(seed, id), &stop)
                })?,
                ActionMap::Cartesian,
            ),
        };
        let law = Law { ensemble, map };
        self.dump(&format!("paths/eps_{eps}.sfav"), &law.ensemble)?;
        Ok(law)
    }

    fn reference(&mut self, built: &BuiltSystem, cfg: &IntegratorConfig) -> Result<(Law, String)> {
        let q = self.cfg.quadrature.build(built.angle_dim())?;
        let seed = cfg.seed.wrapping_add(1);
        let n = self.cfg.reference_paths();
        self.paths += n;
        let stop = StoppingRule::None;
        let c = |id| cfg.clone().with_seed(seed, id);
        let (law, what) = match built {
            BuiltSystem::Torus { sys, init } => {
                let model = AveragedModel::new(sys.clone(), q)?;
                let i0 = init.actions();
                let ens = run_ensemble(n, self.threads, |id| {
                    integrate_averaged_actions(&model, i0, &c(id), &stop)
                })?;
                (Law { ensemble: ens, map: ActionMap::Identity }, "averaged action equation")
            }
            BuiltSystem::Birkhoff { sys, init } => {
                match self.cfg.options.reference.unwrap_or(ReferenceKind::Effective) {
                    ReferenceKind::Effective => {
                        let model = EffectiveModel::new(sys.clone(), q)?;
                        let ens = run_ensemble(n, self.threads, |id| {
                            integrate_effective(&model, init, &c(id), &stop)
                        })?;
                        (Law { ensemble: ens, map: ActionMap::Cartesian }, "effective equation")
                    }
                    ReferenceKind::AveragedActions => {
                        let model = AveragedActionModel::new(sys.clone(), q)?;
                        let i0 = init.actions();
                        let ens = run_ensemble(n, self.threads, |id| {
                            integrate_averaged_actions(&model, &i0, &c(id), &stop)
                        })?;
                        (Law { ensemble: ens, map: ActionMap::Identity }, "averaged action equation")
                    }
                }
            }
        };
        self.dump("paths/reference.sfav", &law.ensemble)?;
        let desc = format!("{what}, seed {seed}, {n} paths");
        Ok((law, desc))
    }

    fn dump(&mut self, name: &str, ens: &PathEnsemble) -> Result<()> {
        if self.cfg.dump_paths {
            let mut buf = Vec::new();
            write_binary(ens, &mut buf)?;
            self.files.binary.push((name.to_string(), buf));
        }
        Ok(())
    }

    fn text(&mut self, name: &str, body: String) {
        self.files.text.push((name.to_string(), body));
    }

    /// Per-`tau` mean of `sum_k I_k` for each law and the reference.
    fn mean_series(&mut self, laws: &[(f64, Law)], reference: &Law) {
        let times = reference.ensemble.times().to_vec();
        let mut header = vec!["tau".to_string(), "reference".to_string()];
        header.extend(laws.iter().map(|(e, _)| eps_label(*e)));
        let rows: Vec<Vec<f64>> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut r = vec![t, reference.mean_action_sum(i)];
                r.extend(laws.iter().map(|(_, l)| l.mean_action_sum(i)));
                r
            })
            .collect();
        self.text("series/mean_actions.csv", csv_table(&header, &rows));
    }

    /// Distances at record `index` between each law and the reference.
    fn curve_at(&self, laws: &[(f64, Law)], reference: &Law, index: usize) -> Result<(Vec<DistanceRow>, Value)> {
        let measures = laws
            .iter()
            .map(|(e, l)| Ok((*e, l.at(index)?)))
            .collect::<Result<Vec<_>>>()?;
        let r = reference.at(index)?;
        let curve = convergence_curve(&measures, &r, &self.cfg.curve_options())?;
        let tau = reference.ensemble.times()[index];
        let b = &curve.bootstrap;
        let rows = curve
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| DistanceRow {
                eps: row.eps,
                tau,
                value: row.distance.value,
                method: row.distance.method,
                bound_kind: row.distance.bound_kind,
                ci_lo: row.ci_lo,
                ci_hi: row.ci_hi,
                diff_lo: b.diff_lo.get(i).copied(),
                diff_hi: b.diff_hi.get(i).copied(),
                n_paths: measures[i].1.len(),
                reference_paths: r.len(),
            })
            .collect();
        let details = json!({
            "strictly_decreasing": b.strictly_decreasing(),
            "bootstrap_replicates": b.replicates,
        });
        Ok((rows, details))
    }

    fn simulate_grid(&mut self, built: &BuiltSystem, cfg: &IntegratorConfig) -> Result<Vec<(f64, Law)>> {
        self.cfg.eps_grid.iter().map(|&e| Ok((e, self.simulate(built, e, cfg)?))).collect()
    }

    fn averaging_convergence(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let cfg = self.cfg.integrator();
        let laws = self.simulate_grid(built, &cfg)?;
        let (reference, desc) = self.reference(built, &cfg)?;
        let last = reference.ensemble.times().len() - 1;
        let (rows, details) = self.curve_at(&laws, &reference, last)?;
        self.mean_series(&laws, &reference);
        Ok((rows, details, Some(desc)))
    }

    fn stationary_mixing(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let cfg = self.cfg.integrator();
        let laws = self.simulate_grid(built, &cfg)?;
        let (reference, desc) = self.reference(built, &cfg)?;
        let times = reference.ensemble.times().to_vec();
        let last = times.len() - 1;
        let (rows, mut details) = self.curve_at(&laws, &reference, last)?;
        // relaxation of the reference towards its terminal law
        let terminal = reference.at(last)?;
        let bl = self.cfg.curve_options().bl;
        let mut mixing = Vec::with_capacity(times.len());
        for (i, &t) in times.iter().enumerate() {
            let d = bl_distance(&reference.at(i)?, &terminal, &bl)?;
            mixing.push(vec![t, d.value]);
        }
        self.text(
            "series/mixing.csv",
            csv_table(&["tau".into(), "distance_to_terminal".into()], &mixing),
        );
        let deltas = self.cfg.options.delta_grid.clone().unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]);
        let mut header = vec!["delta".to_string()];
        for (e, _) in &laws {
            header.push(eps_label(*e));
            header.push(format!("{}_half_width", eps_label(*e)));
        }
        let mut occ = Vec::new();
        for &d in &deltas {
            let mut row = vec![d];
            for (_, law) in &laws {
                let m = law.map;
                let est = occupation_fraction(&law.ensemble, move |s| {
                    m.apply(s).iter().any(|&a| a <= d)
                });
                row.push(est.value);
                row.push(est.half_width);
            }
            occ.push(row);
        }
        let mut sorted = occ.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let monotone = sorted
            .windows(2)
            .all(|w| w[0].iter().skip(1).step_by(2).zip(w[1].iter().skip(1).step_by(2)).all(|(a, b)| a <= b));
        self.text("series/occupation.csv", csv_table(&header, &occ));
        self.mean_series(&laws, &reference);
        details["occupation_monotone_in_delta"] = json!(monotone);
        details["terminal_tau"] = json!(times[last]);
        Ok((rows, details, Some(desc)))
    }

    fn uniform_in_time(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let cfg = self.cfg.integrator();
        let laws = self.simulate_grid(built, &cfg)?;
        let (reference, desc) = self.reference(built, &cfg)?;
        let times = reference.ensemble.times().to_vec();
        // tau = 0 is a shared Dirac mass
        let grid: Vec<usize> = (1..times.len()).collect();
        let family = laws
            .iter()
            .map(|(e, l)| Ok((*e, grid.iter().map(|&i| l.at(i)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        let refs = grid.iter().map(|&i| reference.at(i)).collect::<Result<Vec<_>>>()?;
        let curve = uniform_in_time_sup(&family, &refs, &self.cfg.curve_options())?;
        let b = &curve.bootstrap;
        let rows = curve
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| DistanceRow {
                eps: r.eps,
                tau: times[grid[r.argmax]],
                value: r.sup,
                method: r.method,
                bound_kind: r.bound_kind,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                diff_lo: b.diff_lo.get(i).copied(),
                diff_hi: b.diff_hi.get(i).copied(),
                n_paths: self.cfg.n_paths,
                reference_paths: self.cfg.reference_paths(),
            })
            .collect();
        let mut header = vec!["tau".to_string()];
        header.extend(laws.iter().map(|(e, _)| eps_label(*e)));
        let table: Vec<Vec<f64>> = grid
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut r = vec![times[i]];
                r.extend(curve.rows.iter().map(|row| row.per_tau[j]));
                r
            })
            .collect();
        self.text("series/per_tau.csv", csv_table(&header, &table));
        self.mean_series(&laws, &reference);
        let details = json!({
            "strictly_decreasing": b.strictly_decreasing(),
            "bootstrap_replicates": b.replicates,
        });
        Ok((rows, details, Some(desc)))
    }

    fn exit_time(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let BuiltSystem::Birkhoff { sys, init } = built else {
            return Err(Error::Internal("exit-time needs a Birkhoff system".into()));
        };
        let cfg = self.cfg.integrator();
        let o = &self.cfg.options;
        let radius = o.radius.ok_or_else(|| Error::Config("exit-time needs options.radius".into()))?;
        let sbar = o.sbar.unwrap_or(self.cfg.horizon / 10.0);
        let q = self.cfg.quadrature.build(sys.blocks())?;
        let n = self.cfg.n_paths;
        self.paths += n * (self.cfg.eps_grid.len() + 1);
        let rep = exit_time_experiment(sys.clone(), &self.cfg.eps_grid, init, radius, &cfg, n, self.threads, q)?;
        let laws: Vec<(f64, Law)> = rep
            .laws
            .iter()
            .map(|l| (l.eps.unwrap_or(0.0), Law { ensemble: l.ensemble.clone(), map: ActionMap::Cartesian }))
            .collect();
        let reference = Law { ensemble: rep.reference.ensemble.clone(), map: ActionMap::Cartesian };
        for (e, l) in &laws {
            self.dump(&format!("paths/eps_{e}.sfav"), &l.ensemble)?;
        }
        self.dump("paths/reference.sfav", &reference.ensemble)?;
        let last = reference.ensemble.times().len() - 1;
        let (rows, mut details) = self.curve_at(&laws, &reference, last)?;
        let early: Vec<f64> = rep.laws.iter().map(|l| l.early_exit_probability(sbar)).collect();
        let early_ref = rep.reference.early_exit_probability(sbar);
        // exit-time histogram on [0, T]; the last column counts survivors
        let bins = 20;
        let t = self.cfg.horizon;
        let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string(), "reference".to_string()];
        header.extend(laws.iter().map(|(e, _)| eps_label(*e)));
        let hist = |l: &crate::sde::ExitLaw| {
            let mut c = vec![0.0; bins + 1];
            for p in l.ensemble.paths() {
                match p.exit_time() {
                    Some(s) => c[((s / t * bins as f64) as usize).min(bins - 1)] += 1.0,
                    None => c[bins] += 1.0,
                }
            }
            c
        };
        let hr = hist(&rep.reference);
        let hl: Vec<Vec<f64>> = rep.laws.iter().map(hist).collect();
        let table: Vec<Vec<f64>> = (0..=bins)
            .map(|b| {
                let (lo, hi) = if b < bins {
                    (t * b as f64 / bins as f64, t * (b + 1) as f64 / bins as f64)
                } else {
                    (t, f64::INFINITY)
                };
                let mut r = vec![lo, hi, hr[b]];
                r.extend(hl.iter().map(|h| h[b]));
                r
            })
            .collect();
        self.text("series/exit_times.csv", csv_table(&header, &table));
        self.mean_series(&laws, &reference);
        details["radius"] = json!(radius);
        details["sbar"] = json!(sbar);
        details["early_exit_probability"] = json!(early);
        details["early_exit_probability_reference"] = json!(early_ref);
        details["max_early_exit_probability"] = json!(early.iter().copied().fold(early_ref, f64::max));
        let desc = format!("stopped effective equation, seed {}, {n} paths", cfg.seed.wrapping_add(1));
        Ok((rows, details, Some(desc)))
    }

    fn lifting(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let BuiltSystem::Birkhoff { sys, init } = built else {
            return Err(Error::Internal("lifting-diagnostic needs a Birkhoff system".into()));
        };
        let mut cfg = self.cfg.integrator();
        cfg.record_every = 1;
        cfg.record_noise = true;
        let k = self.cfg.options.block.unwrap_or(0);
        let delta = self.cfg.options.delta.unwrap_or(0.05);
        let n = self.cfg.n_paths;
        let mut table = Vec::new();
        let mut per_eps = Vec::new();
        for &e in &self.cfg.eps_grid {
            let eps = Epsilon::new(e)?;
            self.paths += n;
            let seed = cfg.seed;
            let lifts = (0..n as u64)
                .into_par_iter()
                .map(|id| {
                    let c = cfg.clone().with_seed(seed, id);
                    let path = integrate_birkhoff_system(sys, eps, init, &c, &StoppingRule::None)?;
                    lifted_companion(sys, eps, &path, k, delta)
                })
                .collect::<Result<Vec<_>>>()?;
            let mismatch = lifts.iter().map(|l| l.norm_mismatch).fold(0.0, f64::max);
            // per-path sup of |Pbar| on good steps: mean over paths, and worst path
            let sups: Vec<f64> = lifts.iter().map(|l| l.drift_bound).filter(|x| x.is_finite()).collect();
            let drift = sups.iter().sum::<f64>() / sups.len().max(1) as f64;
            let drift_max = sups.iter().copied().fold(0.0, f64::max);
            let good: usize = lifts.iter().map(|l| l.good_steps).sum();
            let bad: usize = lifts.iter().map(|l| l.bad_steps).sum();
            let excursions: usize = lifts.iter().map(|l| l.tau_minus.len()).sum();
            let frac = good as f64 / (good + bad).max(1) as f64;
            table.push(vec![e, mismatch, drift, drift_max, frac, excursions as f64]);
            per_eps.push(json!({
                "eps": e,
                "norm_mismatch": mismatch,
                "drift_bound": drift,
                "drift_bound_max": drift_max,
                "good_fraction": frac,
                "locus_entries": excursions,
            }));
        }
        let header: Vec<String> = ["eps", "norm_mismatch", "drift_bound", "drift_bound_max", "good_fraction", "locus_entries"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        self.text("series/lifting.csv", csv_table(&header, &table));
        let mismatch = table.iter().map(|r| r[1]).fold(0.0, f64::max);
        let drifts: Vec<f64> = table.iter().map(|r| r[2]).collect();
        let (lo, hi) = drifts.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        let details = json!({
            "block": k,
            "delta": delta,
            "max_norm_mismatch": mismatch,
            "drift_bound_variation": if hi > 0.0 { (hi - lo) / hi } else { 0.0 },
            "per_eps": per_eps,
        });
        Ok((Vec::new(), details, None))
    }

    fn resonance(&mut self, built: &BuiltSystem) -> Result<Dispatched> {
        let BuiltSystem::Torus { sys, init } = built else {
            return Err(Error::Internal("resonance-scan needs a torus system".into()));
        };
        let o = &self.cfg.options;
        let n = sys.angle_dim();
        let averaging = self.cfg.quadrature.build(n)?;
        let grid = TorusQuadrature::tensor(n, o.angle_points.unwrap_or(8))?;
        let i0 = init.actions().iter().map(|x| x * x).sum::<f64>().sqrt();
        let radius = o.radius.unwrap_or(i0.max(1.0));
        let mut table = Vec::new();
        let mut diags = Vec::new();
        for &e in &self.cfg.eps_grid {
            // the fast flow covers 1/eps time units per unit of slow time
            let opts = ResonanceOptions {
                window: 1.0 / e,
                delta: o.delta.unwrap_or(0.05),
                radius,
                samples: o.samples.unwrap_or(2000),
                seed: self.cfg.seed,
            };
            let d = resonant_set_measure(sys, &averaging, &grid, &opts)?;
            table.push(vec![e, d.window, d.estimate, d.half_width, d.hits as f64]);
            diags.push(d);
        }
        let header: Vec<String> = ["eps", "window", "measure", "half_width", "hits"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        self.text("series/resonance.csv", csv_table(&header, &table));
        Ok((Vec::new(), json!({ "scans": diags }), None))
    }

    fn normal_form(&mut self) -> Result<Dispatched> {
        let o = &self.cfg.options;
        let name = o.hamiltonian.clone().unwrap_or_else(|| "duffing".into());
        let a_max = o.a_max.unwrap_or(4.0);
        let ham = hamiltonian_named(&name, a_max)?;
        let levels = uniform_levels(&ham, o.levels.unwrap_or(64));
        let profile = build_action_profile(&ham, &levels)?;
        let check = profile.cross_check(&ham)?;
        let rows: Vec<Vec<f64>> = profile
            .levels()
            .iter()
            .zip(profile.actions())
            .zip(profile.periods())
            .map(|((&a, &i), &t)| vec![a, i, t, profile.omega(i)])
            .collect();
        let header: Vec<String> =
            ["level", "action", "period", "omega"].iter().map(|s| s.to_string()).collect();
        self.text("series/profile.csv", csv_table(&header, &rows));
        self.text("profile.json", profile.to_json()?);
        let details = json!({
            "hamiltonian": name,
            "a_max": a_max,
            "knots": profile.actions().len(),
            "max_action": profile.max_action(),
            "limited_slopes": profile.limited_slopes(),
            "cross_check": check,
        });
        Ok((Vec::new(), details, None))
    }

    fn finish(self, mut report: ExperimentReport, start: Instant) -> Result<RunOutcome> {
        let dir = &self.cfg.output_dir;
        fs::create_dir_all(dir.join("series"))?;
        let mut files: Vec<String> = Vec::new();
        if !report.rows.is_empty() {
            let mut s = String::from(
                "eps,tau,value,method,bound_kind,ci_lo,ci_hi,diff_lo,diff_hi,n_paths,reference_paths\n",
            );
            for r in &report.rows {
                let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.eps,
                    r.tau,
                    r.value,
                    tag(&r.method),
                    tag(&r.bound_kind),
                    r.ci_lo,
                    r.ci_hi,
                    opt(r.diff_lo),
                    opt(r.diff_hi),
                    r.n_paths,
                    r.reference_paths
                );
            }
            fs::write(dir.join("distances.csv"), s)?;
            files.push("distances.csv".into());
        }
        for (name, body) in &self.files.text {
            let p = dir.join(name);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, body)?;
            files.push(name.clone());
        }
        for (name, body) in &self.files.binary {
            let p = dir.join(name);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, body)?;
            files.push(name.clone());
        }
        files.push("report.json".into());
        files.push("timing.json".into());
        report.files = files;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        let timing = Timing {
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            threads: self.threads,
            paths_simulated: self.paths,
        };
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
        Ok(RunOutcome { report, timing })
    }
}

/// Kebab-case serde tag of a unit enum.
fn tag<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}
