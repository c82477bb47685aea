//! Acceptance suite. Each test prints one `PASS`/`FAIL` line (straight to
//! the stderr handle, so it shows without `--nocapture`) and then asserts.
//! Tests take a shared lock so wall-clock budgets are measured one at a time.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slowfast::effective::{
    check_action_consistency, check_equivariance, effective_dispersion, effective_gram, EffectiveModel,
};
use slowfast::measures::{bl_distance, bl_distance_exact, BlOptions, EmpiricalMeasure};
use slowfast::model::{actions_of, BirkhoffSystem, CartesianState, Epsilon};
use slowfast::normal_form::{
    aa_inverse_1dof, aa_jacobian_determinant, aa_transform_1dof, action_of_level, build_action_profile,
    uniform_levels, Hamiltonian1D,
};
use slowfast::scenario::{build_system, run_scenario, BuiltSystem, RunOptions, RunOutcome, ScenarioConfig, SystemSpec};
use slowfast::sde::{
    integrate_birkhoff_system, integrate_effective, ito_consistency, run_ensemble, IntegratorConfig, StoppingRule,
};
use slowfast::torus::{principal_sqrt, TorusQuadrature};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Option<u64>) {
    let secs = elapsed.as_secs_f64();
    let in_time = budget.is_none_or(|b| secs <= b as f64);
    let pass = ok && in_time;
    let budget = budget.map_or(String::new(), |b| format!(" / {b} s"));
    let line = format!(
        "{} criterion {n:>2} {name}: {detail} [{secs:.1} s{budget}]\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n}: {detail}");
    assert!(in_time, "criterion {n}: over budget ({secs:.1} s)");
}

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    ScenarioConfig::load(&path).unwrap()
}

fn run_in_tempdir(mut cfg: ScenarioConfig, threads: usize) -> (RunOutcome, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let out = run_scenario(&cfg, &RunOptions { threads }).unwrap();
    let csv = std::fs::read(dir.path().join("distances.csv")).unwrap_or_default();
    (out, csv)
}

fn birkhoff_builtin(name: &str) -> Arc<BirkhoffSystem> {
    let spec = SystemSpec { builtin: name.into(), params: Default::default(), profile: None };
    match build_system(&spec).unwrap() {
        BuiltSystem::Birkhoff { sys, .. } => sys,
        BuiltSystem::Torus { .. } => panic!("{name} is not a Birkhoff system"),
    }
}

const BIRKHOFF_BUILTINS: [&str; 4] = ["ou-benchmark", "constant-shift", "radial-noise", "anharmonic-drift"];

fn random_state(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for b in v.chunks_exact_mut(2) {
        let r = rng.random_range(lo..hi);
        let a = rng.random_range(0.0..TAU);
        b[0] = r * a.cos();
        b[1] = r * a.sin();
    }
    v
}

#[test]
fn criterion_01_gram_roots() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sqrt: f64 = 0.0;
    for i in 0..200 {
        let d = 1 + i % 8;
        let m = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let a = &m * m.transpose() + DMatrix::<f64>::identity(d, d) * 0.1;
        let k = principal_sqrt(&a).unwrap();
        worst_sqrt = worst_sqrt.max((&k * &k - &a).norm() / a.norm());
    }
    let q = TorusQuadrature::tensor(1, 64).unwrap();
    let mut worst_gram: f64 = 0.0;
    for name in BIRKHOFF_BUILTINS {
        let sys = birkhoff_builtin(name);
        let q = if sys.blocks() == 1 { q.clone() } else { TorusQuadrature::tensor(sys.blocks(), 16).unwrap() };
        for _ in 0..50 {
            let v = random_state(&mut rng, 2 * sys.blocks(), 0.05, 3.0);
            let x = effective_gram(&sys, &v, &q).unwrap();
            let b = effective_dispersion(&sys, &v, &q).unwrap();
            worst_gram = worst_gram.max((&b * b.transpose() - &x).norm() / x.norm());
        }
    }
    let ok = worst_sqrt <= 1e-10 && worst_gram <= 1e-10;
    let detail = format!("max |K^2-A|/|A| = {worst_sqrt:.1e}, max |BB^t-X|/|X| = {worst_gram:.1e}");
    verdict(1, "gram roots", ok, &detail, t.elapsed(), Some(10));
}

/// Angle dependence through `1/(s - x)`: infinitely many Fourier modes with
/// geometric decay, so the quadrature error is visible at 64 nodes.
fn rational_system() -> BirkhoffSystem {
    let s = 1.6;
    BirkhoffSystem::builder(1, 1)
        .frequencies(|_, w| w[0] = 1.0)
        .drift(move |v, p| {
            p[0] = -v[0] + 0.3 / (s - v[0]);
            p[1] = -v[1];
        })
        .dispersion(move |v, m| {
            m.fill(0.0);
            m[(0, 0)] = 1.0 + 0.2 / (s - v[0]);
            m[(1, 1)] = 1.0;
            m[(0, 1)] = 0.1 / (s - v[0]);
        })
        .build()
        .unwrap()
}

#[test]
fn criterion_02_equivariance() {
    let _g = serial();
    let t = Instant::now();
    let defect = |sys: &BirkhoffSystem, p: usize| {
        let q = TorusQuadrature::tensor(sys.blocks(), p).unwrap();
        let r = check_equivariance(sys, &q, 100, (0.5, 1.5), 5).unwrap();
        r.drift_defect.max(r.dispersion_defect)
    };
    let sys = rational_system();
    let (d64, d128) = (defect(&sys, 64), defect(&sys, 128));
    // trigonometric-polynomial builtins are integrated exactly: round-off only
    let ou = birkhoff_builtin("ou-benchmark");
    let floor = defect(&ou, 64);
    let ok = d64 <= 1e-8 && d128 * 4.0 <= d64 && floor <= 1e-8;
    let detail = format!(
        "defect 64 nodes {d64:.2e}, 128 nodes {d128:.2e} (ratio {:.1e}), ou-benchmark {floor:.1e}",
        d64 / d128.max(f64::MIN_POSITIVE)
    );
    verdict(2, "equivariance", ok, &detail, t.elapsed(), Some(30));
}

#[test]
fn criterion_03_action_consistency() {
    let _g = serial();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    // block norms >= 0.15 keep every action >= 0.01
    for name in BIRKHOFF_BUILTINS {
        let sys = birkhoff_builtin(name);
        let q = TorusQuadrature::tensor(sys.blocks(), if sys.blocks() == 1 { 64 } else { 16 }).unwrap();
        let r = check_action_consistency(&sys, &q, 50, (0.15, 2.5), 3).unwrap();
        let m = r.drift_mismatch.max(r.gram_mismatch);
        worst = worst.max(m);
        parts.push(format!("{name} {m:.1e}"));
    }
    let sys = rational_system();
    let r = check_action_consistency(&sys, &TorusQuadrature::tensor(1, 64).unwrap(), 50, (0.15, 1.5), 3).unwrap();
    let m = r.drift_mismatch.max(r.gram_mismatch);
    worst = worst.max(m);
    parts.push(format!("rational {m:.1e}"));
    let detail = format!("max mismatch {worst:.1e} ({})", parts.join(", "));
    verdict(3, "action consistency", worst <= 1e-8, &detail, t.elapsed(), Some(30));
}

#[test]
fn criterion_04_integrable_conservation() {
    let _g = serial();
    let t = Instant::now();
    let sys = BirkhoffSystem::builder(2, 2)
        .frequencies(|i, w| {
            w[0] = 1.0 + i[0] + 0.5 * i[1];
            w[1] = 2f64.sqrt() + i[0] * i[1];
        })
        .build()
        .unwrap();
    let init = CartesianState::new(vec![0.3, -1.1, 2.0, 0.4]).unwrap();
    let i0 = init.actions();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for e in [1e-1, 1e-3] {
        let cfg = IntegratorConfig { record_every: 1000, ..IntegratorConfig::new(1e-4, 100.0) };
        steps = cfg.steps();
        let p = integrate_birkhoff_system(&sys, Epsilon::new(e).unwrap(), &init, &cfg, &StoppingRule::None).unwrap();
        for s in p.states() {
            for (a, b) in actions_of(s).iter().zip(&i0) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let detail = format!("max |I_k(tau) - I_k(0)| = {worst:.1e} over {steps} steps, eps in {{1e-1, 1e-3}}");
    verdict(4, "integrable conservation", worst <= 1e-10 && steps == 1_000_000, &detail, t.elapsed(), Some(60));
}

#[test]
fn criterion_05_ito_consistency() {
    let _g = serial();
    let t = Instant::now();
    let sys = birkhoff_builtin("ou-benchmark");
    let init = CartesianState::new(vec![1.0, 0.0]).unwrap();
    let eps = Epsilon::new(0.1).unwrap();
    let levels = 5;
    let halvings = (levels - 1) as f64;
    let mut rates = Vec::new();
    let mut pairs = vec![Vec::new(); levels - 1];
    for id in 0..100 {
        let e = ito_consistency(&sys, eps, &init, 2.5e-4, 1.0, levels, 41, id).unwrap();
        // coarse first; the per-halving rate is the geometric mean over the hierarchy
        rates.push((e[0].1 / e[levels - 1].1).powf(1.0 / halvings));
        for (l, r) in pairs.iter_mut().enumerate() {
            r.push(e[l].1 / e[l + 1].1);
        }
    }
    let median = |r: &mut Vec<f64>| {
        r.sort_by(f64::total_cmp);
        0.5 * (r[49] + r[50])
    };
    let rate = median(&mut rates);
    let each: Vec<String> = pairs.iter_mut().map(|r| format!("{:.2}", median(r))).collect();
    let detail = format!(
        "median error ratio per step halving {rate:.3} (order 1/2 gives 1.414; single halvings {})",
        each.join(", ")
    );
    let ok = rate >= 1.3;
    verdict(5, "ito consistency", ok, &detail, t.elapsed(), Some(120));
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn criterion_06_ou_oracle() {
    let _g = serial();
    let t = Instant::now();
    let sys = Arc::new(
        BirkhoffSystem::builder(1, 1)
            .frequencies(|_, w| w[0] = 1.0)
            .drift(|v, p| {
                p[0] = -v[0];
                p[1] = -v[1];
            })
            .dispersion(|_, m| m.fill_with_identity())
            .build()
            .unwrap(),
    );
    let model = EffectiveModel::new(sys, TorusQuadrature::tensor(1, 8).unwrap()).unwrap();
    let v0 = [1.0, -0.5];
    let init = CartesianState::new(v0.to_vec()).unwrap();
    let h = 0.005;
    let n = 10_000;
    // records at tau = 0, 1, .., 8
    let ens = run_ensemble(n, 1, |id| {
        let cfg = IntegratorConfig { record_every: 200, ..IntegratorConfig::new(h, 8.0) }.with_seed(61, id);
        integrate_effective(&model, &init, &cfg, &StoppingRule::None)
    })
    .unwrap();
    let mut z_max: f64 = 0.0;
    let mut parts = Vec::new();
    let var1 = 0.5 * (1.0 - (-2.0f64).exp());
    for c in 0..2 {
        let xs: Vec<f64> = ens.paths().iter().map(|p| p.state(1)[c]).collect();
        let (m, se) = mean_and_se(&xs);
        let want = v0[c] * (-1.0f64).exp();
        let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        let (var, var_se) = mean_and_se(&sq);
        let zm = (m - want).abs() / se;
        let zv = (var - var1).abs() / var_se;
        z_max = z_max.max(zm).max(zv);
        parts.push(format!("v{c}: mean z {zm:.2}, var z {zv:.2}"));
    }
    let last = ens.times().len() - 1;
    let is: Vec<f64> = ens.paths().iter().map(|p| actions_of(p.state(last))[0]).collect();
    let (ei, se) = mean_and_se(&is);
    let zi = (ei - 0.5).abs() / se;
    z_max = z_max.max(zi);
    let detail = format!("{}; E I(8) = {ei:.4} (z {zi:.2}); all within 3 SE", parts.join("; "));
    verdict(6, "ou oracle", z_max <= 3.0, &detail, t.elapsed(), Some(60));
}

struct Convergence {
    outcome: RunOutcome,
    csv: Vec<u8>,
    elapsed: Duration,
}

static ROTATOR: OnceLock<Convergence> = OnceLock::new();

fn rotator_run() -> &'static Convergence {
    ROTATOR.get_or_init(|| {
        let t = Instant::now();
        let (outcome, csv) = run_in_tempdir(scenario("rotator_convergence.toml"), 1);
        Convergence { outcome, csv, elapsed: t.elapsed() }
    })
}

fn values(out: &RunOutcome) -> String {
    out.report.rows.iter().map(|r| format!("{:.4}", r.value)).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_07_averaging_convergence() {
    let _g = serial();
    let run = rotator_run();
    let r = &run.outcome.report;
    let decreasing = r.details["strictly_decreasing"].as_bool().unwrap_or(false);
    let eps: Vec<f64> = r.rows.iter().map(|x| x.eps).collect();
    let last = r.rows.last().map_or(f64::INFINITY, |x| x.value);
    let ok = decreasing && last <= 0.05 && eps == [0.1, 0.03, 0.01, 0.003, 0.001] && r.rows[0].n_paths == 10_000;
    let detail = format!(
        "BL(eps) = [{}], strictly decreasing beyond 95% CI: {decreasing}, eps=1e-3 value {last:.4} <= 0.05",
        values(&run.outcome)
    );
    verdict(7, "averaging convergence", ok, &detail, run.elapsed, Some(600));
}

#[test]
fn criterion_08_uniform_in_time() {
    let _g = serial();
    let t = Instant::now();
    let (out, _) = run_in_tempdir(scenario("uniform_in_time.toml"), 1);
    let decreasing = out.report.details["strictly_decreasing"].as_bool().unwrap_or(false);
    let detail = format!(
        "sup_tau BL over tau <= {} = [{}], decreasing beyond CI: {decreasing}",
        out.report.scenario.horizon,
        values(&out)
    );
    verdict(8, "uniform in time", decreasing, &detail, t.elapsed(), Some(900));
}

#[test]
fn criterion_09_exit_time() {
    let _g = serial();
    let t = Instant::now();
    let (out, _) = run_in_tempdir(scenario("exit_time.toml"), 1);
    let d = &out.report.details;
    let at = out.report.rows.iter().find(|r| r.eps == 1e-3).map_or(f64::INFINITY, |r| r.value);
    let early = d["max_early_exit_probability"].as_f64().unwrap_or(1.0);
    let sbar = d["sbar"].as_f64().unwrap_or(f64::NAN);
    let ok = at <= 0.08 && early < 0.05 && sbar > 0.0;
    let detail = format!(
        "stopped BL at eps=1e-3 {at:.4} <= 0.08, max P(tau_R < {sbar}) = {early:.4} < 0.05 (BL = [{}])",
        values(&out)
    );
    verdict(9, "exit time", ok, &detail, t.elapsed(), Some(600));
}

/// Joint LP in `(f, L, B)`: maximise `<f, mu - nu>` under `f_i - f_j <= L d_ij`,
/// `|f_i| <= B`, `L + B <= 1`.
fn lp_oracle(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut c: Vec<f64> = Vec::new();
    for (m, sign) in [(mu, 1.0), (nu, -1.0)] {
        for i in 0..m.len() {
            let p = m.point(i).to_vec();
            let w = sign * m.weights()[i];
            match pts.iter().position(|q| *q == p) {
                Some(j) => c[j] += w,
                None => {
                    pts.push(p);
                    c.push(w);
                }
            }
        }
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let f: Vec<_> = c.iter().map(|&ci| lp.add_var(ci, (-1.0, 1.0))).collect();
    let l = lp.add_var(0.0, (0.0, 1.0));
    let b = lp.add_var(0.0, (0.0, 1.0));
    lp.add_constraint([(l, 1.0), (b, 1.0)], ComparisonOp::Le, 1.0);
    for i in 0..pts.len() {
        lp.add_constraint([(f[i], 1.0), (b, -1.0)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(f[i], -1.0), (b, -1.0)], ComparisonOp::Le, 0.0);
        for j in 0..pts.len() {
            if i != j {
                let d = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                lp.add_constraint([(f[i], 1.0), (f[j], -1.0), (l, -d)], ComparisonOp::Le, 0.0);
            }
        }
    }
    lp.solve().unwrap().into_solution().unwrap().objective()
}

fn random_measure(rng: &mut ChaCha8Rng, m: usize, dim: usize, shift: f64) -> EmpiricalMeasure {
    let pts: Vec<f64> = (0..m * dim).map(|_| shift + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    EmpiricalMeasure::weighted(dim, pts, w).unwrap()
}

#[test]
fn criterion_10_metric_kernel() {
    let _g = serial();
    let t = Instant::now();
    let mut closed: f64 = 0.0;
    for x in [0.01, 0.3, 1.0, 2.0, 7.5, 100.0] {
        for dim in [1, 3] {
            let mu = EmpiricalMeasure::dirac(vec![0.0; dim]).unwrap();
            let mut p = vec![0.0; dim];
            p[dim - 1] = x;
            let nu = EmpiricalMeasure::dirac(p).unwrap();
            let d = bl_distance_exact(&mu, &nu).unwrap().value;
            closed = closed.max((d - 2.0 * x / (x + 2.0)).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut lp: f64 = 0.0;
    for trial in 0..50 {
        let dim = 1 + trial % 3;
        let m = rng.random_range(1..=32);
        let k = rng.random_range(1..=32);
        let mu = random_measure(&mut rng, m, dim, 0.0);
        let shift = rng.random_range(0.0..1.5);
        let nu = random_measure(&mut rng, k, dim, shift);
        lp = lp.max((bl_distance_exact(&mu, &nu).unwrap().value - lp_oracle(&mu, &nu)).abs());
    }
    let gauss = |rng: &mut ChaCha8Rng| {
        let pts: Vec<f64> = (0..2 * 10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        EmpiricalMeasure::uniform(2, pts).unwrap()
    };
    let (a, b) = (gauss(&mut rng), gauss(&mut rng));
    let noise = bl_distance(&a, &b, &BlOptions { seed: 4, ..BlOptions::default() }).unwrap();
    let ok = closed <= 1e-9 && lp <= 1e-8 && noise.value <= 0.03;
    let detail = format!(
        "point masses {closed:.1e}, LP oracle (50 instances) {lp:.1e}, sliced noise on 2x10^4 samples {:.4} ({:?})",
        noise.value, noise.method
    );
    verdict(10, "metric kernel", ok, &detail, t.elapsed(), Some(120));
}

#[test]
fn criterion_11_lifting() {
    let _g = serial();
    let t = Instant::now();
    let (out, _) = run_in_tempdir(scenario("lifting.toml"), 1);
    let d = &out.report.details;
    let mismatch = d["max_norm_mismatch"].as_f64().unwrap_or(f64::INFINITY);
    let variation = d["drift_bound_variation"].as_f64().unwrap_or(f64::INFINITY);
    let bounds: Vec<String> = d["per_eps"]
        .as_array()
        .map(|a| a.iter().map(|r| format!("{:.3}", r["drift_bound"].as_f64().unwrap_or(f64::NAN))).collect())
        .unwrap_or_default();
    let ok = mismatch <= 1e-6 && variation <= 0.10 && out.report.scenario.step == 1e-4;
    let detail = format!(
        "norm mismatch {mismatch:.1e}, drift bound [{}] varies {:.1}% across eps",
        bounds.join(", "),
        100.0 * variation
    );
    verdict(11, "lifting", ok, &detail, t.elapsed(), Some(300));
}

#[test]
fn criterion_12_normal_form() {
    let _g = serial();
    let t = Instant::now();
    let h = Hamiltonian1D::harmonic(5.0);
    let harmonic = [1e-3, 0.25, 1.0, 2.5, 4.9]
        .iter()
        .map(|&a| (action_of_level(&h, a).unwrap() - a).abs())
        .fold(0.0, f64::max);

    let q = Hamiltonian1D::quartic_radial(6.0);
    let p = build_action_profile(&q, &uniform_levels(&q, 32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let quartic = (0..500)
        .map(|_| {
            let i = rng.random_range(0.0..p.max_action());
            (p.omega(i) - (1.0 + 2.0 * i)).abs()
        })
        .fold(0.0, f64::max);

    // Monte Carlo area of {H <= 1} in the bounding box of the level set
    let d = Hamiltonian1D::duffing(3.0);
    let exact = action_of_level(&d, 1.0).unwrap();
    let (xm, ym) = ((5f64.sqrt() - 1.0).sqrt(), 2f64.sqrt());
    let n = 4_000_000;
    let inside = (0..n)
        .filter(|_| d.value(rng.random_range(-xm..xm), rng.random_range(-ym..ym)) <= 1.0)
        .count();
    let mc = inside as f64 / n as f64 * 4.0 * xm * ym / TAU;
    let duffing = (exact / mc - 1.0).abs();

    let mut round_trip: f64 = 0.0;
    let mut jac: f64 = 0.0;
    for ham in [Hamiltonian1D::harmonic(3.0), Hamiltonian1D::quartic_radial(3.0), Hamiltonian1D::duffing(3.0)] {
        let prof = build_action_profile(&ham, &uniform_levels(&ham, 48)).unwrap();
        let mut tested = 0;
        while tested < 100 {
            let xy = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let a = ham.value(xy[0], xy[1]);
            if !(1e-3..=3.0).contains(&a) {
                continue;
            }
            tested += 1;
            let ip = aa_transform_1dof(&ham, &prof, xy).unwrap();
            let back = aa_inverse_1dof(&ham, &prof, ip).unwrap();
            round_trip = round_trip.max((back[0] - xy[0]).hypot(back[1] - xy[1]));
            if tested % 5 == 0 {
                let det = aa_jacobian_determinant(&ham, &prof, xy, 1e-5).unwrap();
                jac = jac.max((det - 1.0).abs());
            }
        }
    }
    let (i, phi) = aa_transform_1dof(&h, &build_action_profile(&h, &uniform_levels(&h, 16)).unwrap(), [1.0, 1.0])
        .unwrap();
    let polar = (i - 1.0).abs().max((phi - PI / 4.0).abs());

    let ok = harmonic <= 1e-8 && quartic <= 1e-4 && duffing <= 1e-3 && round_trip <= 1e-6 && jac <= 1e-5 && polar <= 1e-10;
    let detail = format!(
        "harmonic I(a)-a {harmonic:.1e}, quartic omega {quartic:.1e}, duffing vs MC {duffing:.1e}, \
         round trip {round_trip:.1e}, |det-1| {jac:.1e}"
    );
    verdict(12, "normal form", ok, &detail, t.elapsed(), Some(120));
}

#[test]
fn criterion_13_determinism() {
    let _g = serial();
    let first = rotator_run();
    let t = Instant::now();
    // a second run, on 8 worker threads, against the single-threaded first run
    let (par, csv8) = run_in_tempdir(scenario("rotator_convergence.toml"), 8);
    let identical = csv8 == first.csv;
    let hashes = par.report.config_hash == first.outcome.report.config_hash;
    let ok = !first.csv.is_empty() && identical && hashes;
    let detail = format!(
        "distances.csv ({} bytes) identical on rerun with 1 vs 8 threads: {identical}",
        first.csv.len()
    );
    verdict(13, "determinism", ok, &detail, t.elapsed(), None);
}
