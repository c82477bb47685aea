//! Measure of actions whose finite-window flow average is still far from
//! the torus average. It shrinks as the window grows.
use slowfast::model::TorusSystem;
use slowfast::torus::{resonant_set_measure, ResonanceOptions, TorusQuadrature};

fn main() -> slowfast::Result<()> {
    // two angles rotating at 1 and 1 + I_1 - I_2
    let sys = TorusSystem::builder(2, 2, 2)
        .frequency(|i, w| {
            w[0] = 1.0;
            w[1] = 1.0 + i[0] - i[1];
        })
        .drift_actions(|_, phi, out| {
            out[0] = (phi[0] - phi[1]).cos();
            out[1] = 0.0;
        })
        .build()?;
    let averaging = TorusQuadrature::tensor(2, 16)?;
    let grid = TorusQuadrature::tensor(2, 8)?;
    for window in [10.0, 100.0, 1000.0] {
        let opts = ResonanceOptions { window, delta: 0.05, radius: 1.0, samples: 1000, seed: 1 };
        let r = resonant_set_measure(&sys, &averaging, &grid, &opts)?;
        println!("window {window:>6}: measure {:.4} +- {:.4}", r.estimate, r.half_width);
    }
    Ok(())
}
