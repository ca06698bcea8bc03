//! Exit criteria. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

mod common;

use std::time::{Duration, Instant};

use eatnas::evolution::{Engine, EvolutionConfig, InitSource};
use eatnas::metrics::{arch_multadds, arch_params, CostModel};
use eatnas::scoring::{model_score, population_quality, QualityParams, ScoreParams};
use eatnas::search_space::{random_arch, ArchCode, SearchSpaceConfig};
use eatnas::transfer::{
    run_eat, run_from_scratch, stage_final_checkpoint, Pipeline, PipelineRun, PipelineState,
    RunOptions, TransferConfig,
};
use eatnas::weight_store::{share_depth, share_width, BlockWeights, ParamMatrix, WeightInitSpec};
use eatnas::{EvalBudget, Evaluator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

/// 0.9 * 2^-0.07, evaluated at 50 digits.
const SCORE_AT_TWICE_TARGET: f64 = 0.857_374_198_239_543_6;
/// 0.8 * (sqrt(2/3) * 0.1 / 0.1)^-0.07, evaluated at 50 digits.
const QUALITY_SPOT: f64 = 0.811_433_962_408_992_6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn score_identities() -> Outcome {
    let p = ScoreParams::default();
    let mut worst: f64 = 0.0;
    for acc in [0.0, 0.123, 0.5, 0.9, 1.0] {
        let s = model_score(acc, p.target_size, &p).unwrap();
        worst = worst.max((s - acc).abs());
    }
    let q = QualityParams {
        target_std: 0.1,
        ..QualityParams::default()
    };
    // {m - 0.1, m + 0.1} has population std exactly 0.1
    for m in [0.25, 0.5, 0.75] {
        let scores = [m - 0.1, m + 0.1];
        let got = population_quality(&scores, &q).unwrap();
        worst = worst.max((got.value - m).abs());
    }
    Outcome::new(worst <= 1e-12, format!("max deviation {worst:.2e} (tol 1e-12)"))
}

fn score_spot_values() -> Outcome {
    let p = ScoreParams {
        omega: -0.07,
        ..ScoreParams::default()
    };
    let s = model_score(0.9, 2.0 * p.target_size, &p).unwrap();
    let q = population_quality(
        &[0.7, 0.8, 0.9],
        &QualityParams {
            target_std: 0.1,
            alpha: -0.07,
            beta: -0.07,
        },
    )
    .unwrap()
    .value;
    let ds = (s - SCORE_AT_TWICE_TARGET).abs();
    let dq = (q - QUALITY_SPOT).abs();
    Outcome::new(
        ds <= 1e-5 && dq <= 1e-5,
        format!("score {s:.8} (|d| {ds:.1e}), quality {q:.8} (|d| {dq:.1e}), tol 1e-5"),
    )
}

fn sharing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let init = WeightInitSpec::default();
    let kernel = |rng: &mut ChaCha8Rng| [1usize, 3, 5, 7][rng.random_range(0..4)];
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=48usize);
    let mut mismatches = 0usize;
    let mut fresh_errors = 0usize;
    for pair in 0..1000u64 {
        let k = kernel(&mut rng);
        let old_shape = [k, k, dim(&mut rng), dim(&mut rng)];
        let new_shape = [k, k, dim(&mut rng), dim(&mut rng)];
        let old = ParamMatrix::random(old_shape, &init.with_seed(pair));
        let shared = share_width(new_shape, &old, &init.with_seed(!pair)).unwrap();
        let m = &shared.value;
        let (ci, co) = (old_shape[2].min(new_shape[2]), old_shape[3].min(new_shape[3]));
        for x in 0..k {
            for y in 0..k {
                for i in 0..ci {
                    for o in 0..co {
                        if m.get(x, y, i, o).to_bits() != old.get(x, y, i, o).to_bits() {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
        if shared.fresh_elements != k * k * (new_shape[2] * new_shape[3] - ci * co) {
            fresh_errors += 1;
        }

        // depth: a block no deeper and no wider than the stored one
        let stored_depth = rng.random_range(1..=4usize);
        let stored: Vec<[usize; 4]> = (0..stored_depth)
            .map(|_| {
                let k = kernel(&mut rng);
                [k, k, dim(&mut rng), dim(&mut rng)]
            })
            .collect();
        let old_block = BlockWeights {
            layers: stored
                .iter()
                .enumerate()
                .map(|(i, &s)| ParamMatrix::random(s, &init.with_seed(pair * 8 + i as u64)))
                .collect(),
        };
        let new_depth = rng.random_range(1..=stored_depth);
        let new_block: Vec<[usize; 4]> = stored[..new_depth]
            .iter()
            .map(|s| [s[0], s[1], rng.random_range(1..=s[2]), rng.random_range(1..=s[3])])
            .collect();
        let shared = share_depth(&new_block, &old_block, &init).unwrap();
        if shared.fresh_elements != 0 {
            fresh_errors += 1;
        }
        for (layer, src) in shared.value.layers.iter().zip(&old_block.layers) {
            let [w, h, ci, co] = layer.shape();
            for x in 0..w {
                for y in 0..h {
                    for i in 0..ci {
                        for o in 0..co {
                            if layer.get(x, y, i, o).to_bits() != src.get(x, y, i, o).to_bits() {
                                mismatches += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        mismatches == 0 && fresh_errors == 0,
        format!("1000 pairs: {mismatches} overlap mismatches, {fresh_errors} fresh-count errors"),
    )
}

fn metrics_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0;
    let mut checked = 0;
    for space in [SearchSpaceConfig::small_task(), SearchSpaceConfig::large_task()] {
        for _ in 0..100 {
            let arch = random_arch(&space, &mut rng).unwrap();
            for bn in [false, true] {
                let cost = CostModel {
                    include_batch_norm: bn,
                };
                let (p, m) = metrics_oracle(&arch, &space, bn);
                if arch_params(&arch, &space, cost) != p || arch_multadds(&arch, &space) != m {
                    failures += 1;
                }
                checked += 1;
            }
        }
    }
    Outcome::new(failures == 0, format!("{failures}/{checked} mismatches"))
}

fn monotonicity() -> Outcome {
    let space = SearchSpaceConfig::small_task();
    let ev = small_evaluator(3, 0.8, &space);
    let cfg = EvolutionConfig {
        max_steps: 500,
        ..EvolutionConfig::default()
    };
    let mut good = 0;
    for seed in 0..20 {
        let mut engine =
            Engine::init(cfg.clone(), space.clone(), &ev, InitSource::Random, ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        let mut prev = engine.population().best().score;
        let mut ok = true;
        for _ in 0..500 {
            engine.step().unwrap();
            let best = engine.population().best().score;
            ok &= best >= prev;
            prev = best;
        }
        good += ok as usize;
    }
    Outcome::new(good == 20, format!("{good}/20 seeds non-decreasing over 500 steps"))
}

fn optimality() -> Outcome {
    let space = space4();
    let score = score4();
    let ev = small_evaluator(0, 0.8, &space);
    let (optimum, arch) = enumerate_optimum(&ev, &space, &score);
    let r = ev.evaluate(&arch, EvalBudget::search(1));
    let check = model_score(r.accuracy.unwrap(), r.params as f64, &score).unwrap();
    if (check - optimum).abs() > 1e-12 {
        return Outcome::new(false, format!("enumeration disagrees with evaluator: {optimum} vs {check}"));
    }
    let cfg = EvolutionConfig {
        max_steps: 2000,
        score,
        ..EvolutionConfig::default()
    };
    let mut within = 0;
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let mut engine =
            Engine::init(cfg.clone(), space.clone(), &ev, InitSource::Random, ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        engine.run_until_converged().unwrap();
        let best = engine.population().best().score;
        if best >= 0.98 * optimum && engine.step_count() <= 2000 {
            within += 1;
        }
        ratios.push(format!("{:.3}@{}", best / optimum, engine.step_count()));
    }
    Outcome::new(
        within >= 18,
        format!("{within}/20 seeds within 2% of optimum {optimum:.5} (need 18); best/optimum@steps: {}", ratios.join(" ")),
    )
}

fn transfer_config() -> TransferConfig {
    TransferConfig {
        space_small: small5(),
        space_large: large5(),
        evo_small: EvolutionConfig {
            score: score_small5(),
            ..EvolutionConfig::default()
        },
        evo_large: EvolutionConfig {
            score: score_large5(),
            ..EvolutionConfig::default()
        },
        ..TransferConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn transfer_acceleration() -> Outcome {
    let cfg = transfer_config();
    let mut ratios = Vec::new();
    let mut higher_start = 0;
    for seed in 0..20u64 {
        let small = small_evaluator(seed, 0.8, &cfg.space_small);
        let large = large_evaluator(seed, 0.8, &cfg.space_large);
        let eat = run_eat(&cfg, &small, &large, seed).unwrap();
        let (_, scratch) = run_from_scratch(&cfg.space_large, &cfg.evo_large, &large, seed).unwrap();
        let scratch = &scratch.stages[0];
        let seeded = &eat.report.stages[1];
        let threshold = scratch.history.last().unwrap().quality;
        let ratio = seeded
            .history
            .iter()
            .find(|h| h.quality >= threshold)
            .map_or(f64::INFINITY, |h| h.step as f64 / scratch.steps as f64);
        ratios.push(ratio);
        if seeded.history[0].mean_accuracy > scratch.history[0].mean_accuracy {
            higher_start += 1;
        }
    }
    let med = median(ratios);
    Outcome::new(
        med <= 0.5 && higher_start >= 18,
        format!("median step ratio {med:.3} (need <= 0.5); higher initial accuracy {higher_start}/20 (need 18)"),
    )
}

fn weak_seed() -> Outcome {
    let small_space = small5();
    let large_space = large5();
    let cfg = EvolutionConfig {
        score: score_large5(),
        ..EvolutionConfig::default()
    };
    let mut lower = 0;
    for seed in 0..20u64 {
        let small = small_evaluator(seed, 0.8, &small_space);
        let large = large_evaluator(seed, 0.8, &large_space);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<(f64, ArchCode)> = (0..1000)
            .map(|_| {
                let a = random_arch(&small_space, &mut rng).unwrap();
                (small.evaluate(&a, EvalBudget::search(1)).accuracy.unwrap(), a)
            })
            .collect();
        pool.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // middle of the bottom and top deciles
        let start = |basic: ArchCode| {
            let src = InitSource::Seeded {
                basic,
                include_seed_verbatim: false,
            };
            Engine::init(cfg.clone(), large_space.clone(), &large, src, ChaCha8Rng::seed_from_u64(1000 + seed))
                .unwrap()
                .population()
                .mean_accuracy()
        };
        let weak = start(pool[50].1.clone());
        let strong = start(pool[949].1.clone());
        if weak < strong {
            lower += 1;
        }
    }
    Outcome::new(lower >= 18, format!("weak seed lower in {lower}/20 pairs (need 18)"))
}

fn determinism_and_resume() -> Outcome {
    let cfg = transfer_config();
    let small = small_evaluator(11, 0.8, &cfg.space_small);
    let large = large_evaluator(11, 0.8, &cfg.space_large);
    let a = run_eat(&cfg, &small, &large, 11).unwrap().report.to_json().unwrap();
    let b = run_eat(&cfg, &small, &large, 11).unwrap().report.to_json().unwrap();
    let identical = a == b;

    let space = SearchSpaceConfig::small_task();
    let ev = small_evaluator(5, 0.8, &space);
    let evo = EvolutionConfig {
        max_steps: 300,
        window: 150,
        ..EvolutionConfig::default()
    };
    let pipeline = Pipeline::search(space, evo, 5);
    let dir = tempfile::tempdir().unwrap();
    let whole_path = dir.path().join("whole.json");
    let split_path = dir.path().join("split.json");
    let evals: [&dyn Evaluator; 1] = [&ev];
    let opts = |path: &std::path::Path, stop: Option<u64>| RunOptions {
        checkpoint_path: Some(path.to_path_buf()),
        stop_at_step: stop,
        ..RunOptions::default()
    };
    let PipelineRun::Finished(whole) = pipeline.run_with(&evals, &opts(&whole_path, None), None).unwrap() else {
        return Outcome::new(false, "uninterrupted run stopped early");
    };
    let PipelineRun::Interrupted(_) = pipeline.run_with(&evals, &opts(&split_path, Some(100)), None).unwrap() else {
        return Outcome::new(false, "run was not interrupted at step 100");
    };
    let state = PipelineState::load(&split_path).unwrap();
    let PipelineRun::Finished(resumed) = pipeline.run_with(&evals, &opts(&split_path, None), Some(state)).unwrap()
    else {
        return Outcome::new(false, "resumed run did not finish");
    };
    let stage = &whole.stages[0].name;
    let final_whole = std::fs::read(stage_final_checkpoint(&whole_path, stage)).unwrap();
    let final_split = std::fs::read(stage_final_checkpoint(&split_path, stage)).unwrap();
    let resumed_ok = resumed.to_json().unwrap() == whole.to_json().unwrap() && final_whole == final_split;
    Outcome::new(
        identical && resumed_ok,
        format!(
            "repeat run byte-identical: {identical}; resume at step 100 of {} equals uninterrupted: {resumed_ok}",
            whole.stages[0].steps
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("score identities", score_identities, Duration::from_secs(1)),
        ("score spot values", score_spot_values, Duration::from_secs(1)),
        ("sharing oracle", sharing_oracle, Duration::from_secs(10)),
        ("metrics oracle", metrics_oracle_check, Duration::from_secs(10)),
        ("engine monotonicity", monotonicity, Duration::from_secs(60)),
        ("optimality at reduced scale", optimality, Duration::from_secs(600)),
        ("transfer acceleration", transfer_acceleration, Duration::from_secs(1800)),
        ("weak-seed degradation", weak_seed, Duration::from_secs(900)),
        ("determinism and resume", determinism_and_resume, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= budget;
        failed += !pass as usize;
        println!(
            "{} {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
