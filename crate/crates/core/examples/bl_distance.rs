//! Bounded-Lipschitz and Kantorovich distances between empirical measures.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use slowfast::measures::{bl_distance, bl_distance_exact, kantorovich_1d, BlOptions, EmpiricalMeasure};

fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> slowfast::Result<EmpiricalMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n * dim).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
    EmpiricalMeasure::uniform(dim, pts)
}

fn main() -> slowfast::Result<()> {
    // point masses at distance x: 2x / (x + 2)
    let a = EmpiricalMeasure::dirac(vec![0.0])?;
    let b = EmpiricalMeasure::dirac(vec![3.0])?;
    println!("BL(d0, d3) = {:.6}, W1 = {}", bl_distance_exact(&a, &b)?.value, kantorovich_1d(&a, &b)?);

    // exact on the line for any size
    let (mu, nu) = (gaussian(5000, 1, 0.0, 1)?, gaussian(5000, 1, 0.5, 2)?);
    println!("1-d: {}", bl_distance(&mu, &nu, &BlOptions::default())?.to_json()?);

    // in the plane: exact transport below the cap, sliced lower estimate above it
    let (mu, nu) = (gaussian(200, 2, 0.0, 3)?, gaussian(200, 2, 0.5, 4)?);
    let exact = bl_distance_exact(&mu, &nu)?;
    let sliced = bl_distance(&mu, &nu, &BlOptions { prefer_sliced: true, ..BlOptions::default() })?;
    println!("2-d: exact {:.4}, sliced {:.4} ({:?})", exact.value, sliced.value, sliced.bound_kind);
    Ok(())
}
