//! Paths stopped on leaving the action ball `|I| < R`, for several eps and
//! for the effective equation.
use std::sync::Arc;

use slowfast::measures::bl_distance_exact;
use slowfast::model::{BirkhoffSystem, CartesianState};
use slowfast::sde::{exit_time_experiment, IntegratorConfig};
use slowfast::torus::TorusQuadrature;

fn main() -> slowfast::Result<()> {
    let sys = Arc::new(
        BirkhoffSystem::builder(1, 1)
            .frequencies(|_, w| w[0] = 1.0)
            .drift(|v, p| p.iter_mut().zip(v).for_each(|(a, b)| *a = -b))
            .dispersion(|_, m| m.fill_with_identity())
            .build()?,
    );
    let init = CartesianState::new(vec![1.0, 0.0])?;
    let cfg = IntegratorConfig { record_every: 200, seed: 9, ..IntegratorConfig::new(0.01, 2.0) };
    let rep = exit_time_experiment(sys, &[0.1, 0.01], &init, 1.5, &cfg, 2000, 1, TorusQuadrature::tensor(1, 16)?)?;
    let last = rep.reference.ensemble.times().len() - 1;
    let reference = rep.reference.action_marginal(last)?;
    println!("reference: P(tau_R < 0.2) = {:.4}", rep.reference.early_exit_probability(0.2));
    for law in &rep.laws {
        let d = bl_distance_exact(&law.action_marginal(last)?, &reference)?;
        println!(
            "eps = {:e}: BL to reference {:.4}, P(tau_R < 0.2) = {:.4}",
            law.eps.unwrap_or(0.0),
            d.value,
            law.early_exit_probability(0.2)
        );
    }
    Ok(())
}
