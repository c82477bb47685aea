//! Actions of the Cartesian path against a direct discretisation of the
//! action SDE on the same Brownian path. The gap shrinks like h^(1/2).
use slowfast::model::{BirkhoffSystem, CartesianState, Epsilon};
use slowfast::sde::ito_consistency;

fn main() -> slowfast::Result<()> {
    let sys = BirkhoffSystem::builder(1, 1)
        .frequencies(|i, w| w[0] = 1.0 + i[0])
        .drift(|v, p| {
            p[0] = -v[0];
            p[1] = -v[1];
        })
        .dispersion(|_, m| m.fill_with_identity())
        .build()?;
    let init = CartesianState::new(vec![1.0, 0.0])?;
    let mut logs = vec![0.0; 5];
    let paths = 50;
    for id in 0..paths {
        let e = ito_consistency(&sys, Epsilon::new(0.1)?, &init, 2.5e-4, 1.0, 5, 7, id)?;
        for (l, (_, err)) in logs.iter_mut().zip(&e) {
            *l += err.ln() / paths as f64;
        }
    }
    for (l, lg) in logs.iter().enumerate() {
        println!("h = {:.1e}: geometric mean sup error {:.3e}", 2.5e-4 * (1 << (4 - l)) as f64, lg.exp());
    }
    let slope = (logs[0] - logs[4]) / (16f64).ln();
    println!("observed order {slope:.2}");
    Ok(())
}
