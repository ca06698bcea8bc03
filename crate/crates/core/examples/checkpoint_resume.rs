//! Interrupt a transfer run, then resume it from its checkpoint.

use eatnas::transfer::{Pipeline, PipelineRun, PipelineState, RunOptions, TransferConfig};
use eatnas::{EvolutionConfig, Evaluator, LandscapeConfig, SyntheticEvaluator, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let evo = |score| EvolutionConfig {
        max_steps: 120,
        score,
        ..EvolutionConfig::default()
    };
    let base = TransferConfig::default();
    let cfg = TransferConfig {
        evo_small: evo(base.evo_small.score),
        evo_large: evo(base.evo_large.score),
        ..base
    };
    let small = SyntheticEvaluator::new(LandscapeConfig::default(), cfg.space_small.clone(), Task::Small);
    let large = SyntheticEvaluator::new(LandscapeConfig::default(), cfg.space_large.clone(), Task::Large);
    let evaluators: [&dyn Evaluator; 2] = [&small, &large];
    let pipeline = Pipeline::transfer(&cfg, 3);

    let dir = std::env::temp_dir().join(format!("eatnas-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let state_path = dir.join("state.json");
    let options = RunOptions {
        checkpoint_path: Some(state_path.clone()),
        stop_at_step: Some(100),
        ..RunOptions::default()
    };
    if let PipelineRun::Interrupted(state) = pipeline.run_with(&evaluators, &options, None)? {
        println!("interrupted with {} stage(s) complete", state.completed.len());
    }

    let state = PipelineState::load(&state_path)?;
    let options = RunOptions {
        stop_at_step: None,
        ..options
    };
    let PipelineRun::Finished(resumed) = pipeline.run_with(&evaluators, &options, Some(state))? else {
        unreachable!("no stop requested");
    };
    let whole = pipeline.run(&evaluators)?;
    println!("resumed target: {}", resumed.target);
    println!("matches an uninterrupted run: {}", resumed == whole);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
