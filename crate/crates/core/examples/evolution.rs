//! Tournament-selection search on the synthetic landscape.

use eatnas::evolution::{Engine, EvolutionConfig, InitSource};
use eatnas::{LandscapeConfig, SearchSpaceConfig, SyntheticEvaluator, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> eatnas::Result<()> {
    let space = SearchSpaceConfig::small_task();
    let evaluator = SyntheticEvaluator::new(LandscapeConfig::default(), space.clone(), Task::Small);
    let cfg = EvolutionConfig {
        max_steps: 2000,
        ..EvolutionConfig::default()
    };
    let mut engine = Engine::init(cfg, space, &evaluator, InitSource::Random, ChaCha8Rng::seed_from_u64(0))?;
    let reason = engine.run_until_converged()?;
    let pop = engine.population();
    println!("stopped after {} steps ({reason:?})", pop.step);
    for h in pop.history.iter().step_by(25) {
        println!(
            "step {:>4}: mean score {:.4} best {:.4} quality {:.4}",
            h.step, h.mean_score, h.best_score, h.quality
        );
    }
    let stats = engine.cache_stats();
    println!("cache: {} hits, {} misses", stats.hits, stats.misses);

    let rerank = engine.rerank()?;
    println!("selected after rerank: {}", rerank.arch);
    println!("  accuracy {:.4} at {} epochs", rerank.accuracy, rerank.epochs);
    Ok(())
}
