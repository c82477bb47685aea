//! With `P = 0` and `B = 0` the splitting scheme is an exact rotation, so
//! every action is conserved however small eps is.
use slowfast::model::{actions_of, BirkhoffSystem, CartesianState, Epsilon};
use slowfast::sde::{integrate_birkhoff_system, IntegratorConfig, StoppingRule};

fn main() -> slowfast::Result<()> {
    let sys = BirkhoffSystem::builder(2, 2)
        .frequencies(|i, w| {
            w[0] = 1.0 + i[0];
            w[1] = 2f64.sqrt() + i[0] * i[1];
        })
        .build()?;
    let init = CartesianState::new(vec![0.3, -1.1, 2.0, 0.4])?;
    let i0 = init.actions();
    for eps in [1e-1, 1e-3] {
        let cfg = IntegratorConfig { record_every: 10_000, ..IntegratorConfig::new(1e-3, 100.0) };
        let p = integrate_birkhoff_system(&sys, Epsilon::new(eps)?, &init, &cfg, &StoppingRule::None)?;
        let drift = p
            .states()
            .flat_map(|s| actions_of(s).into_iter().zip(i0.clone()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        println!("eps = {eps:e}: {} steps, max action drift {drift:.1e}", cfg.steps());
    }
    Ok(())
}
