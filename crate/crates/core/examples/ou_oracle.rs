//! Effective-equation ensemble for `P = -v`, `B = Id` against the
//! analytic Ornstein-Uhlenbeck law.
use std::sync::Arc;

use slowfast::effective::EffectiveModel;
use slowfast::model::{BirkhoffSystem, CartesianState};
use slowfast::sde::{integrate_effective, run_ensemble, IntegratorConfig, StoppingRule};
use slowfast::torus::TorusQuadrature;

fn main() -> slowfast::Result<()> {
    let sys = Arc::new(
        BirkhoffSystem::builder(1, 1)
            .frequencies(|_, w| w[0] = 1.0)
            .drift(|v, p| {
                p[0] = -v[0];
                p[1] = -v[1];
            })
            .dispersion(|_, m| m.fill_with_identity())
            .build()?,
    );
    let model = EffectiveModel::new(sys, TorusQuadrature::tensor(1, 8)?)?;
    let init = CartesianState::new(vec![1.0, 0.0])?;
    let n = 4000;
    let ens = run_ensemble(n, 1, |id| {
        let cfg = IntegratorConfig { record_every: 100, ..IntegratorConfig::new(0.01, 1.0) }.with_seed(3, id);
        integrate_effective(&model, &init, &cfg, &StoppingRule::None)
    })?;
    let xs: Vec<f64> = ens.paths().iter().map(|p| p.last()[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // v_1(1) ~ N(e^-1, (1 - e^-2) / 2)
    println!("mean {mean:.4} (exact {:.4})", (-1.0f64).exp());
    println!("var  {var:.4} (exact {:.4})", 0.5 * (1.0 - (-2.0f64).exp()));
    Ok(())
}
