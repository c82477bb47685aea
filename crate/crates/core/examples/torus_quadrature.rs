//! Averages over the angle torus: tensor grids, Korobov lattices, and the
//! averaged drift of a torus system.
use std::f64::consts::PI;

use slowfast::model::TorusSystem;
use slowfast::torus::{average_over_torus, averaged_drift, TorusQuadrature};

fn main() -> slowfast::Result<()> {
    // cos^2(phi_1) cos^2(phi_2) averages to 1/4
    let f = |phi: &[f64], out: &mut [f64]| out[0] = (phi[0].cos() * phi[1].cos()).powi(2);
    for q in [TorusQuadrature::tensor(2, 8)?, TorusQuadrature::korobov(2, 89)?] {
        let avg = average_over_torus(f, 1, &q)[0];
        println!("{:?} with {} nodes: {avg:.15}", q.kind(), q.len());
        assert!((avg - 0.25).abs() < 1e-12);
    }

    // dI = -(2 + cos^2 phi) I dtau averages to -(5/2) I
    let sys = TorusSystem::builder(1, 1, 1)
        .frequency(|_, w| w[0] = 1.0)
        .drift_actions(|i, phi, out| out[0] = -(2.0 + phi[0].cos().powi(2)) * i[0])
        .build()?;
    let q = TorusQuadrature::tensor(1, 16)?;
    let drift = averaged_drift(&sys, &[PI], &q)[0];
    println!("<P^I>(pi) = {drift:.12}");
    assert!((drift + 2.5 * PI).abs() < 1e-12);
    Ok(())
}
