//! Mutation and population seeding from a basic architecture.

use eatnas::perturbation::{perturb_once, seed_population};
use eatnas::search_space::{random_arch, SearchSpaceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> eatnas::Result<()> {
    let space = SearchSpaceConfig::small_task();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let basic = random_arch(&space, &mut rng)?;
    println!("basic: {basic}");

    let (child, chosen) = perturb_once(&basic, &mut rng);
    println!("one perturbation touched {chosen:?}");
    println!("  {} primitives changed", basic.hamming(&child));

    let population = seed_population(&basic, 64, &space, false, &mut rng)?;
    let mean = population.iter().map(|a| basic.hamming(a) as f64).sum::<f64>() / population.len() as f64;
    println!("seeded 64 archs, mean distance from basic {mean:.2}");
    Ok(())
}
