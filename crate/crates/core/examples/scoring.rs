//! Size-aware model scores and population quality.

use eatnas::scoring::{model_score, population_quality, QualityParams, ScoreParams};

fn main() -> eatnas::Result<()> {
    let p = ScoreParams::small_task();
    for factor in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let s = model_score(0.9, factor * p.target_size, &p)?;
        println!("accuracy 0.9 at {factor:>4} x target size -> score {s:.5}");
    }

    let q = QualityParams::default();
    let spread = [0.60, 0.70, 0.80, 0.90];
    let tight = [0.74, 0.75, 0.76, 0.75];
    for (name, scores) in [("spread", &spread[..]), ("tight", &tight[..])] {
        let quality = population_quality(scores, &q)?;
        println!(
            "{name:>6}: mean {:.4} std {:.4} quality {:.4}",
            quality.mean, quality.std, quality.value
        );
    }
    let flat = population_quality(&[0.8; 8], &q)?;
    println!("  flat: quality {:.4} (degenerate: {})", flat.value, flat.degenerate);
    Ok(())
}
