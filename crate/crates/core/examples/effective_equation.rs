//! Effective equation of a two-block system: torus equivariance of its
//! coefficients and the Ito consistency of its action process with the
//! averaged action equation.
use std::sync::Arc;

use slowfast::effective::{check_action_consistency, check_equivariance, AveragedActionModel, EffectiveModel};
use slowfast::model::BirkhoffSystem;
use slowfast::torus::TorusQuadrature;

fn main() -> slowfast::Result<()> {
    let sys = Arc::new(
        BirkhoffSystem::builder(2, 2)
            .frequencies(|i, w| {
                w[0] = 1.0 + i[0];
                w[1] = 2f64.sqrt();
            })
            // cubic damping plus a coupling that the averaging removes
            .drift(|v, p| {
                let r2 = v[0] * v[0] + v[1] * v[1];
                p[0] = -v[0] - r2 * v[0] + 0.3 * v[2];
                p[1] = -v[1] - r2 * v[1];
                p[2] = -v[2] + 0.3 * v[0];
                p[3] = -v[3];
            })
            .dispersion(|_, m| m.fill_with_identity())
            .build()?,
    );
    let q = TorusQuadrature::tensor(2, 16)?;

    let eq = check_equivariance(&sys, &q, 50, (0.2, 2.0), 1)?;
    let ac = check_action_consistency(&sys, &q, 50, (0.2, 2.0), 2)?;
    println!("equivariance defect {:.1e} / {:.1e}", eq.drift_defect, eq.dispersion_defect);
    println!("action consistency  {:.1e} / {:.1e}", ac.drift_mismatch, ac.gram_mismatch);

    let eff = EffectiveModel::new(sys.clone(), q.clone())?;
    let avg = AveragedActionModel::new(sys, q)?;
    let v = [1.0, 0.5, -0.3, 0.8];
    println!("R(v)   = {:?}", eff.drift(&v)?);
    println!("F(I(v)) = {:?}", avg.drift(&[0.625, 0.365])?);
    Ok(())
}
