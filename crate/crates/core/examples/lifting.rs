//! Rotation-lifted companion of a two-block OU path: same block norm, no
//! fast rotation, bounded drift away from the locus.
use slowfast::model::{BirkhoffSystem, CartesianState, Epsilon};
use slowfast::sde::{integrate_birkhoff_system, lifted_companion, IntegratorConfig, StoppingRule};

fn main() -> slowfast::Result<()> {
    let sys = BirkhoffSystem::builder(2, 2)
        .frequencies(|i, w| {
            w[0] = 1.0 + i[0];
            w[1] = 2f64.sqrt();
        })
        .drift(|v, p| p.iter_mut().zip(v).for_each(|(a, b)| *a = -b))
        .dispersion(|_, m| m.fill_with_identity())
        .build()?;
    let init = CartesianState::new(vec![1.0, 0.0, 0.0, 1.0])?;
    for eps in [1e-1, 1e-2, 1e-3] {
        let eps = Epsilon::new(eps)?;
        let cfg = IntegratorConfig { record_noise: true, ..IntegratorConfig::new(1e-4, 1.0) }.with_seed(5, 0);
        let path = integrate_birkhoff_system(&sys, eps, &init, &cfg, &StoppingRule::None)?;
        let c = lifted_companion(&sys, eps, &path, 0, 0.05)?;
        println!(
            "eps = {:e}: norm mismatch {:.1e}, drift bound {:.3}, {} locus entries",
            eps.get(),
            c.norm_mismatch,
            c.drift_bound,
            c.tau_minus.len()
        );
    }
    Ok(())
}
