//! Per-layer parameter and multiply-add breakdown of one architecture.

use eatnas::metrics::{layer_costs, model_size, CostModel, LayerKind};
use eatnas::search_space::{random_arch, SearchSpaceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> eatnas::Result<()> {
    let space = SearchSpaceConfig::large_task();
    let arch = random_arch(&space, &mut ChaCha8Rng::seed_from_u64(3))?;
    println!("{arch}\n");
    println!("{:<16} {:>12} {:>16}", "layer", "params", "mult-adds");
    for cost in layer_costs(&arch, &space, CostModel::WEIGHTS_ONLY) {
        let name = match cost.kind {
            LayerKind::Stem => "stem".to_string(),
            LayerKind::Block { block, layer } => format!("block {} / {}", block + 1, layer + 1),
            LayerKind::Classifier => "classifier".to_string(),
        };
        println!("{name:<16} {:>12} {:>16}", cost.params, cost.multadds);
    }
    let plain = model_size(&arch, &space, CostModel::WEIGHTS_ONLY);
    let bn = model_size(&arch, &space, CostModel::WITH_BATCH_NORM);
    println!("\ntotal: {} params ({} with batch norm), {} mult-adds", plain.params, bn.params, plain.multadds);
    Ok(())
}
