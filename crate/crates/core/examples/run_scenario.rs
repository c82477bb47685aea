//! A scenario from TOML, run into a temporary directory.
use slowfast::scenario::{list_builtins, run_scenario, RunOptions, ScenarioConfig};

const CONFIG: &str = r#"
experiment = "averaging-convergence"
eps_grid = [0.1, 0.01]
n_paths = 500
step = 0.01
seed = 1

[system]
builtin = "rotator"
params = { theta = 0.1, i0 = 100.0, sigma = 0.25, phi0 = 0.785 }

[metric]
replicates = 50
"#;

fn main() -> slowfast::Result<()> {
    for b in list_builtins() {
        println!("{:<18} {:?}", b.name, b.form);
    }
    let dir = tempfile::tempdir()?;
    let mut cfg = ScenarioConfig::from_toml_str(CONFIG)?;
    cfg.output_dir = dir.path().to_path_buf();
    let out = run_scenario(&cfg, &RunOptions::default())?;
    println!("config hash {}", out.report.config_hash);
    for r in &out.report.rows {
        println!("eps = {:<5} BL = {:.4} [{:.4}, {:.4}]", r.eps, r.value, r.ci_lo, r.ci_hi);
    }
    println!("files: {:?}", out.report.files);
    Ok(())
}
