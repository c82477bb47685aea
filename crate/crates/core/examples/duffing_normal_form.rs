//! Action-angle coordinates of the Duffing oscillator and a two-oscillator
//! chain built on its action profile.
use std::sync::Arc;

use slowfast::model::BirkhoffSystem;
use slowfast::normal_form::{
    aa_inverse_1dof, aa_transform_1dof, build_action_profile, build_oscillator_chain, uniform_levels, Hamiltonian1D,
};

fn main() -> slowfast::Result<()> {
    let h = Hamiltonian1D::duffing(4.0);
    let profile = build_action_profile(&h, &uniform_levels(&h, 64))?;
    println!("cross check against fresh level integrals: {:.1e}", profile.cross_check(&h)?);
    for i in [0.1, 0.5, 1.0, 2.0] {
        println!("I = {i}: h(I) = {:.6}, omega(I) = {:.6}", profile.h(i), profile.omega(i));
    }

    let (i, phi) = aa_transform_1dof(&h, &profile, [0.8, -0.3])?;
    let back = aa_inverse_1dof(&h, &profile, (i, phi))?;
    println!("(0.8, -0.3) -> (I, phi) = ({i:.6}, {phi:.6}) -> {back:?}");

    // weak diffusive coupling between neighbours, unit noise
    let chain: BirkhoffSystem = build_oscillator_chain(
        Arc::new(profile),
        2,
        |_, left, z, right| {
            let mut p = [-0.5 * z[0], -0.5 * z[1]];
            for n in [left, right].into_iter().flatten() {
                p[0] += 0.2 * (n[0] - z[0]);
                p[1] += 0.2 * (n[1] - z[1]);
            }
            p
        },
        |_, m| m.fill_with_identity(),
    )?;
    let mut w = [0.0; 2];
    chain.frequencies(&[0.5, 1.0], &mut w);
    println!("chain frequencies at I = (0.5, 1): {w:?}");
    Ok(())
}
