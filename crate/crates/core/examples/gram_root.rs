//! Principal square roots and the effective dispersion `<<B>> = X^(1/2)`.
use nalgebra::DMatrix;
use slowfast::effective::{effective_dispersion, effective_gram};
use slowfast::model::BirkhoffSystem;
use slowfast::torus::{principal_sqrt, TorusQuadrature};

fn main() -> slowfast::Result<()> {
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 4.0, 9.0]);
    let k = principal_sqrt(&a)?;
    println!("sqrt(A) = {k:.6}");
    assert!((&k * &k - &a).norm() < 1e-12 * a.norm());

    // anisotropic noise B = diag(1, 1/2): rotating it mixes the two
    // directions, and the Gram matrix averages to (5/8) Id
    let sys = BirkhoffSystem::builder(1, 1)
        .frequencies(|_, w| w[0] = 1.0)
        .dispersion(|_, m| {
            m.fill(0.0);
            m[(0, 0)] = 1.0;
            m[(1, 1)] = 0.5;
        })
        .build()?;
    let q = TorusQuadrature::tensor(1, 64)?;
    let v = [0.7, -0.2];
    let x = effective_gram(&sys, &v, &q)?;
    let b = effective_dispersion(&sys, &v, &q)?;
    println!("X(v) = {x:.12}<<B>>(v) = {b:.12}");
    assert!((x[(0, 0)] - 0.625).abs() < 1e-12 && x[(0, 1)].abs() < 1e-12);
    assert!((&b * b.transpose() - x).norm() < 1e-12);
    Ok(())
}
