//! Parameter inheritance between a parent and a mutated child.

use eatnas::perturbation::mutate;
use eatnas::search_space::{random_arch, SearchSpaceConfig};
use eatnas::weight_store::{derive_weights, WeightInitSpec, WeightStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let space = SearchSpaceConfig::small_task();
    let init = WeightInitSpec::default().with_seed(5);
    let store = WeightStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let parent = random_arch(&space, &mut rng)?;
    let first = derive_weights(&parent, &space, &store, &init)?;
    println!("parent: {} tensors, all {} elements fresh", first.weights.len(), first.fresh_elements);
    store.commit_all(first.weights);

    for generation in 1..=3 {
        let child = mutate(&parent, &space, &mut rng)?;
        let derived = derive_weights(&child, &space, &store, &init)?;
        let total = derived.inherited_elements + derived.fresh_elements;
        println!(
            "child {generation}: {} of {total} elements inherited ({:.1}%)",
            derived.inherited_elements,
            100.0 * derived.inherited_elements as f64 / total as f64
        );
    }

    let mut bytes = Vec::new();
    store.dump(&mut bytes)?;
    let restored = WeightStore::load(bytes.as_slice())?;
    println!("store dump: {} bytes, {} tensors restored", bytes.len(), restored.len());
    Ok(())
}
