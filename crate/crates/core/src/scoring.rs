//! Accuracy/size trade-off score of a model and the quality of a population.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the population standard deviation before it is raised
/// to a negative power.
pub const STD_FLOOR: f64 = 1e-8;

/// Which size measure feeds the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeMetric {
    Params,
    Multadds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreParams {
    pub metric: SizeMetric,
    /// Target size in units of `metric`.
    pub target_size: f64,
    pub omega: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self::small_task()
    }
}

impl ScoreParams {
    /// Parameter count with a 3.0M target.
    pub fn small_task() -> Self {
        ScoreParams {
            metric: SizeMetric::Params,
            target_size: 3.0e6,
            omega: -0.07,
        }
    }

    /// Multiply-adds with a 500M target.
    pub fn large_task() -> Self {
        ScoreParams {
            metric: SizeMetric::Multadds,
            target_size: 500.0e6,
            omega: -0.07,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.target_size > 0.0) {
            return Err(Error::Config(format!(
                "target size must be positive, got {}",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// `acc * (size / T)^omega`.
pub fn model_score(accuracy: f64, size: f64, params: &ScoreParams) -> Result<f64> {
    if !(size > 0.0) {
        return Err(Error::Domain(format!("model size must be positive, got {size}")));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::Domain(format!("accuracy {accuracy} outside [0, 1]")));
    }
    Ok(accuracy * (size / params.target_size).powf(params.omega))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityParams {
    pub target_std: f64,
    /// Exponent when `std < target_std`.
    pub alpha: f64,
    /// Exponent otherwise.
    pub beta: f64,
}

impl Default for QualityParams {
    fn default() -> Self {
        QualityParams {
            target_std: 0.05,
            alpha: -0.07,
            beta: -0.07,
        }
    }
}

impl QualityParams {
    pub fn check(&self) -> Result<()> {
        if !(self.target_std > 0.0) {
            return Err(Error::Config(format!(
                "target_std must be positive, got {}",
                self.target_std
            )));
        }
        Ok(())
    }
}

/// Summary statistics of a population's scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub mean: f64,
    /// Population (divide-by-N) standard deviation, before flooring.
    pub std: f64,
    pub value: f64,
    /// The standard deviation was below [`STD_FLOOR`].
    pub degenerate: bool,
}

/// `mean * (std / target_std)^w` with `w = alpha` if `std < target_std`,
/// else `beta`.
pub fn population_quality(scores: &[f64], params: &QualityParams) -> Result<Quality> {
    if scores.len() < 2 {
        return Err(Error::Domain(format!(
            "population quality needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = std < STD_FLOOR;
    let omega = if std < params.target_std {
        params.alpha
    } else {
        params.beta
    };
    let ratio = std.max(STD_FLOOR) / params.target_std;
    let value = if ratio == 1.0 { mean } else { mean * ratio.powf(omega) };
    Ok(Quality {
        mean,
        std,
        value,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Expected values below were evaluated with mpmath at 40 significant digits.

    #[test]
    fn score_at_target_is_accuracy() {
        let p = ScoreParams::small_task();
        assert_eq!(model_score(0.95, p.target_size, &p).unwrap(), 0.95);
    }

    #[test]
    fn score_spot_values() {
        let p = ScoreParams {
            target_size: 1.0,
            ..ScoreParams::small_task()
        };
        let s = model_score(0.9, 2.0, &p).unwrap();
        assert!((s - 0.857_374_198_239_543_6).abs() < 1e-12, "{s}");

        let p = ScoreParams::large_task();
        let s = model_score(0.733, 317e6, &p).unwrap();
        assert!((s - 0.756_759_229_911_257_6).abs() < 1e-12, "{s}");
    }

    #[test]
    fn score_rejects_non_positive_size() {
        let p = ScoreParams::small_task();
        assert!(matches!(model_score(0.5, 0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(model_score(0.5, -3.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn quality_spot_value() {
        let q = QualityParams {
            target_std: 0.1,
            ..QualityParams::default()
        };
        let r = population_quality(&[0.7, 0.8, 0.9], &q).unwrap();
        assert!((r.std - 0.081_649_658_092_772_6).abs() < 1e-12);
        assert!((r.value - 0.811_433_962_408_992_6).abs() < 1e-12, "{}", r.value);
        assert!(!r.degenerate);
    }

    #[test]
    fn zero_variance_population_is_floored() {
        let q = QualityParams {
            target_std: 0.1,
            ..QualityParams::default()
        };
        let r = population_quality(&[0.8; 5], &q).unwrap();
        assert!(r.degenerate);
        assert!((r.value - 2.472_236_346_010_872).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn quality_at_target_std_is_mean() {
        let q = QualityParams {
            target_std: 0.5,
            alpha: -0.3,
            beta: 0.4,
        };
        let r = population_quality(&[0.0, 1.0], &q).unwrap();
        assert_eq!(r.std, 0.5);
        assert_eq!(r.value, r.mean);
    }

    #[test]
    fn quality_needs_two_scores() {
        assert!(population_quality(&[0.5], &QualityParams::default()).is_err());
        assert!(population_quality(&[], &QualityParams::default()).is_err());
    }

    #[test]
    fn exponent_switches_strictly_below_target() {
        let q = QualityParams {
            target_std: 0.5,
            alpha: -1.0,
            beta: 1.0,
        };
        // std 0.25 < 0.5 uses alpha: 0.5 * (0.5)^-1 = 1.0
        let r = population_quality(&[0.25, 0.75], &q).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        // std 1.0 >= 0.5 uses beta: 1.0 * 2^1 = 2.0
        let r = population_quality(&[0.0, 2.0], &q).unwrap();
        assert!((r.value - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn score_monotone_in_accuracy_and_size(
            a in 0.0f64..0.99, da in 1e-6f64..0.01,
            size in 1.0f64..1e9, factor in 1.001f64..10.0,
        ) {
            let p = ScoreParams { target_size: 1e6, ..ScoreParams::small_task() };
            let s = model_score(a, size, &p).unwrap();
            prop_assert!(model_score(a + da, size, &p).unwrap() > s);
            if a > 0.0 {
                prop_assert!(model_score(a, size * factor, &p).unwrap() < s);
            }
        }

        #[test]
        fn score_identity_at_target(a in 0.0f64..=1.0, omega in -2.0f64..2.0, t in 1.0f64..1e9) {
            let p = ScoreParams { target_size: t, omega, metric: SizeMetric::Params };
            prop_assert_eq!(model_score(a, t, &p).unwrap(), a);
        }

        #[test]
        fn argmax_invariant_to_accuracy_scaling(
            cands in prop::collection::vec((0.01f64..0.5, 1e5f64..1e7), 2..20),
            c in 0.1f64..2.0,
        ) {
            let p = ScoreParams::small_task();
            let argmax = |scale: f64| {
                cands.iter().enumerate()
                    .map(|(i, &(a, s))| (i, model_score(a * scale, s, &p).unwrap()))
                    .fold((0, f64::MIN), |best, x| if x.1 > best.1 { x } else { best }).0
            };
            prop_assert_eq!(argmax(1.0), argmax(c));
        }

        #[test]
        fn equal_exponents_make_quality_continuous(mean in 0.1f64..1.0, t in 0.01f64..0.5) {
            let q = QualityParams { target_std: t, ..QualityParams::default() };
            let below = population_quality(&[mean - t * (1.0 - 1e-9), mean + t * (1.0 - 1e-9)], &q).unwrap();
            let at = population_quality(&[mean - t, mean + t], &q).unwrap();
            prop_assert!((below.value - at.value).abs() < 1e-6);
        }
    }
}
