//! Seeded large-task search compared with a random start.

use eatnas::transfer::{run_eat, run_from_scratch, TransferConfig};
use eatnas::{LandscapeConfig, SyntheticEvaluator, Task};

fn main() -> eatnas::Result<()> {
    let cfg = TransferConfig::default();
    let landscape = LandscapeConfig {
        shift: 0.8,
        ..LandscapeConfig::default()
    };
    let small = SyntheticEvaluator::new(landscape.clone(), cfg.space_small.clone(), Task::Small);
    let large = SyntheticEvaluator::new(landscape, cfg.space_large.clone(), Task::Large);

    let eat = run_eat(&cfg, &small, &large, 1)?;
    let (_, scratch) = run_from_scratch(&cfg.space_large, &cfg.evo_large, &large, 1)?;
    println!("basic:  {}", eat.basic);
    println!("target: {}", eat.target);

    let seeded = &eat.report.stages[1];
    let random = &scratch.stages[0];
    println!("\n{:>5} {:>14} {:>14}", "step", "seeded acc", "scratch acc");
    let n = seeded.history.len().max(random.history.len());
    for step in (0..n).step_by(20) {
        let cell = |h: &[eatnas::evolution::HistoryEntry]| {
            h.get(step).map_or("-".to_string(), |e| format!("{:.4}", e.mean_accuracy))
        };
        println!("{step:>5} {:>14} {:>14}", cell(&seeded.history), cell(&random.history));
    }
    println!("\nsteps: seeded {} scratch {}", seeded.steps, random.steps);
    Ok(())
}
