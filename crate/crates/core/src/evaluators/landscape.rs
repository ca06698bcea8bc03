//! Deterministic synthetic fitness landscape with a tunable task shift.
//!
//! Every `(block position, primitive, value)` triple carries a utility, and
//! every pair of adjacent blocks carries an interaction utility keyed by the
//! two conv choices. Utilities are standard-normal variates derived from a
//! keyed hash:
//!
//! * the key is the byte string `seed:u64le | tag:u8 | position:u32le | a:u8 | b:u8 | stream:u8`
//!   with tag `b'u'` (a = primitive index, b = value index) or `b'p'`
//!   (position = left block, a, b = conv indices of the left and right block);
//! * the key is hashed with 64-bit FNV-1a, then mixed with the SplitMix64
//!   finalizer;
//! * the top 53 bits give `u = (bits + 0.5) / 2^53` in (0, 1), and the
//!   normal variate is Acklam's rational approximation of the inverse
//!   normal CDF at `u`.
//!
//! Stream 1 gives `h1`, stream 2 gives `h2`. The small task uses `h1`; the
//! large task uses `rho * h1 + sqrt(1 - rho^2) * h2`, so the two tasks'
//! utilities have correlation `rho`.
//!
//! Pseudo-accuracy is `0.05 + 0.9 * logistic(base + sum / sqrt(n_terms))`,
//! where the sum adds unary utilities and `INTERACTION_WEIGHT` times the pair
//! utilities, plus `0.02 * (1 - 1/epochs)` for the training budget.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{EvalBudget, EvalResult, Evaluator};
use crate::metrics::{model_size, CostModel};
use crate::search_space::{encode, validate, ArchCode, ConvOp, Primitive, SearchSpaceConfig};

pub const INTERACTION_WEIGHT: f64 = 0.3;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

const MAX_CARD: usize = 4;
const N_CONV: usize = ConvOp::ALL.len();

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inverse of the standard normal CDF (Acklam, relative error < 1.2e-9).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard-normal variate for the key described in the module docs.
pub fn hash_to_normal(seed: u64, tag: u8, position: u32, a: u8, b: u8, stream: u8) -> f64 {
    let mut key = [0u8; 16];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = tag;
    key[9..13].copy_from_slice(&position.to_le_bytes());
    key[13] = a;
    key[14] = b;
    key[15] = stream;
    let bits = splitmix_finalize(fnv1a64(&key)) >> 11;
    let u = (bits as f64 + 0.5) / (1u64 << 53) as f64;
    inverse_normal_cdf(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub seed: u64,
    /// Correlation between the two tasks' utilities, in [0, 1].
    pub shift: f64,
    /// Standard deviation of additive accuracy noise; 0 is deterministic.
    pub noise_std: f64,
    /// Add `coupling_strength * ln(params / coupling_reference)` to the logit.
    pub size_coupling: bool,
    pub coupling_strength: f64,
    pub coupling_reference: f64,
    /// Constant logit offset.
    pub base: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            seed: 0,
            shift: 0.8,
            noise_std: 0.0,
            size_coupling: false,
            coupling_strength: 0.3,
            coupling_reference: 1.0e6,
            base: 0.0,
        }
    }
}

impl LandscapeConfig {
    pub fn check(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(crate::Error::Config(format!("shift {} outside [0, 1]", self.shift)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(crate::Error::Config("noise_std must be non-negative".into()));
        }
        if self.size_coupling && !(self.coupling_reference > 0.0) {
            return Err(crate::Error::Config("coupling_reference must be positive".into()));
        }
        Ok(())
    }
}

/// Precomputed utility tables for a fixed block count.
#[derive(Debug, Clone)]
pub struct Landscape {
    cfg: LandscapeConfig,
    n_blocks: usize,
    // [task][position][primitive][value]
    unary: [Vec<[[f64; MAX_CARD]; 5]>; 2],
    // [task][left position][left conv][right conv]
    pair: [Vec<[[f64; N_CONV]; N_CONV]>; 2],
}

impl Landscape {
    pub fn new(cfg: LandscapeConfig, n_blocks: usize) -> Self {
        let rho = cfg.shift;
        let ortho = (1.0 - rho * rho).max(0.0).sqrt();
        let blend = |h1: f64, h2: f64| [h1, rho * h1 + ortho * h2];

        let mut unary = [
            vec![[[0.0; MAX_CARD]; 5]; n_blocks],
            vec![[[0.0; MAX_CARD]; 5]; n_blocks],
        ];
        for pos in 0..n_blocks {
            for prim in Primitive::ALL {
                for v in 0..prim.cardinality() {
                    let h1 = hash_to_normal(cfg.seed, b'u', pos as u32, prim.index() as u8, v as u8, 1);
                    let h2 = hash_to_normal(cfg.seed, b'u', pos as u32, prim.index() as u8, v as u8, 2);
                    let [s, l] = blend(h1, h2);
                    unary[0][pos][prim.index()][v] = s;
                    unary[1][pos][prim.index()][v] = l;
                }
            }
        }
        let n_pairs = n_blocks.saturating_sub(1);
        let mut pair = [vec![[[0.0; N_CONV]; N_CONV]; n_pairs], vec![[[0.0; N_CONV]; N_CONV]; n_pairs]];
        for pos in 0..n_pairs {
            for a in 0..N_CONV {
                for b in 0..N_CONV {
                    let h1 = hash_to_normal(cfg.seed, b'p', pos as u32, a as u8, b as u8, 1);
                    let h2 = hash_to_normal(cfg.seed, b'p', pos as u32, a as u8, b as u8, 2);
                    let [s, l] = blend(h1, h2);
                    pair[0][pos][a][b] = s;
                    pair[1][pos][a][b] = l;
                }
            }
        }
        Landscape {
            cfg,
            n_blocks,
            unary,
            pair,
        }
    }

    pub fn config(&self) -> &LandscapeConfig {
        &self.cfg
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    fn task_index(task: Task) -> usize {
        match task {
            Task::Small => 0,
            Task::Large => 1,
        }
    }

    pub fn unary_utility(&self, task: Task, position: usize, prim: Primitive, value: usize) -> f64 {
        self.unary[Self::task_index(task)][position][prim.index()][value]
    }

    pub fn pair_utility(&self, task: Task, left: usize, left_conv: ConvOp, right_conv: ConvOp) -> f64 {
        self.pair[Self::task_index(task)][left][left_conv as usize][right_conv as usize]
    }

    /// Scale that gives the utility sum unit variance over random genomes.
    pub fn normalizer(&self) -> f64 {
        let n = self.n_blocks as f64;
        let pairs = (n - 1.0).max(0.0);
        (5.0 * n + INTERACTION_WEIGHT * INTERACTION_WEIGHT * pairs).sqrt()
    }

    /// Unnormalized utility sum of `arch`.
    pub fn utility(&self, arch: &ArchCode, task: Task) -> f64 {
        assert_eq!(arch.len(), self.n_blocks, "landscape built for {} blocks", self.n_blocks);
        let mut sum = 0.0;
        for (pos, block) in arch.blocks.iter().enumerate() {
            for prim in Primitive::ALL {
                sum += self.unary_utility(task, pos, prim, block.value_index(prim));
            }
        }
        for (pos, w) in arch.blocks.windows(2).enumerate() {
            sum += INTERACTION_WEIGHT * self.pair_utility(task, pos, w[0].conv, w[1].conv);
        }
        sum
    }

    /// Logit-to-accuracy map shared by every evaluation.
    pub fn accuracy_from_logit(logit: f64, epochs: u32) -> f64 {
        let bonus = 0.02 * (1.0 - 1.0 / epochs.max(1) as f64);
        0.05 + 0.9 / (1.0 + (-logit).exp()) + bonus
    }

    /// Noise-free pseudo-accuracy. `params` is only used with size coupling.
    pub fn accuracy(&self, arch: &ArchCode, task: Task, epochs: u32, params: u64) -> f64 {
        let mut logit = self.cfg.base + self.utility(arch, task) / self.normalizer();
        if self.cfg.size_coupling {
            logit += self.cfg.coupling_strength * (params as f64 / self.cfg.coupling_reference).ln();
        }
        Self::accuracy_from_logit(logit, epochs)
    }
}

/// Noise-free pseudo-accuracy of `arch` on `task` under `space`.
pub fn synthetic_accuracy(
    arch: &ArchCode,
    space: &SearchSpaceConfig,
    cfg: &LandscapeConfig,
    task: Task,
    epochs: u32,
) -> f64 {
    let landscape = Landscape::new(cfg.clone(), arch.len());
    let params = model_size(arch, space, CostModel::default()).params;
    landscape.accuracy(arch, task, epochs, params)
}

/// Evaluator backed by a [`Landscape`].
#[derive(Debug)]
pub struct SyntheticEvaluator {
    landscape: Landscape,
    space: SearchSpaceConfig,
    task: Task,
    cost: CostModel,
    calls: AtomicU64,
}

impl SyntheticEvaluator {
    pub fn new(cfg: LandscapeConfig, space: SearchSpaceConfig, task: Task) -> Self {
        SyntheticEvaluator {
            landscape: Landscape::new(cfg, space.n_blocks),
            space,
            task,
            cost: CostModel::default(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_cost_model(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn landscape(&self) -> &Landscape {
        &self.landscape
    }

    pub fn space(&self) -> &SearchSpaceConfig {
        &self.space
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Number of evaluations served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Evaluator for SyntheticEvaluator {
    fn id(&self) -> String {
        format!(
            "synthetic(seed={},shift={},task={:?})",
            self.landscape.cfg.seed, self.landscape.cfg.shift, self.task
        )
    }

    fn evaluate(&self, arch: &ArchCode, budget: EvalBudget) -> EvalResult {
        let call = self.calls.fetch_add(1, Ordering::Relaxed);
        if budget.epochs == 0 {
            return EvalResult::failed("epochs must be >= 1");
        }
        if let Err(violations) = validate(arch, &self.space) {
            let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return EvalResult::failed(detail.join("; "));
        }
        let size = model_size(arch, &self.space, self.cost);
        let mut acc = self.landscape.accuracy(arch, self.task, budget.epochs, size.params);
        let noise_std = self.landscape.cfg.noise_std;
        if noise_std > 0.0 {
            // keyed by (seed, arch, epochs, call index): repeatable per run, varies per call
            let key = self.landscape.cfg.seed
                ^ fnv1a64(encode(arch).as_bytes())
                ^ (budget.epochs as u64).rotate_left(48);
            let z = hash_to_normal(key, b'n', call as u32, (call >> 32) as u8, 0, 3);
            acc = (acc + noise_std * z).clamp(0.0, 1.0);
        }
        EvalResult::ok(acc, size.params, size.multadds)
    }

    fn is_deterministic(&self) -> bool {
        self.landscape.cfg.noise_std == 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{random_arch, BlockCode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space5() -> SearchSpaceConfig {
        SearchSpaceConfig {
            n_blocks: 5,
            downsample_blocks: vec![2, 4],
            expansion_ratio_range: [1.0, 8.0],
            ..SearchSpaceConfig::small_task()
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn inverse_cdf_reference_quantiles() {
        assert!(inverse_normal_cdf(0.5).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.975) - 1.959_963_984_540_054).abs() < 1e-8);
        assert!((inverse_normal_cdf(0.001) + 3.090_232_306_167_813).abs() < 1e-8);
        assert!((inverse_normal_cdf(0.999_9) - 3.719_016_485_455_709).abs() < 1e-8);
    }

    #[test]
    fn hashed_variates_are_standard_normal() {
        let xs: Vec<f64> = (0..20_000u32).map(|i| hash_to_normal(7, b'u', i, 1, 2, 1)).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 / n.sqrt(), "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn identical_tasks_when_fully_correlated() {
        let cfg = LandscapeConfig {
            shift: 1.0,
            ..LandscapeConfig::default()
        };
        let space = space5();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = random_arch(&space, &mut rng).unwrap();
            let s = synthetic_accuracy(&a, &space, &cfg, Task::Small, 1);
            let l = synthetic_accuracy(&a, &space, &cfg, Task::Large, 1);
            assert_eq!(s, l);
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn independent_tasks_are_uncorrelated() {
        let cfg = LandscapeConfig {
            shift: 0.0,
            seed: 4,
            ..LandscapeConfig::default()
        };
        let space = space5();
        let land = Landscape::new(cfg, space.n_blocks);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let archs: Vec<_> = (0..1000).map(|_| random_arch(&space, &mut rng).unwrap()).collect();
        let s: Vec<f64> = archs.iter().map(|a| land.accuracy(a, Task::Small, 1, 0)).collect();
        let l: Vec<f64> = archs.iter().map(|a| land.accuracy(a, Task::Large, 1, 0)).collect();
        let r = pearson(&s, &l);
        assert!(r.abs() < 0.1, "{r}");
    }

    #[test]
    fn accuracy_is_bounded_and_budget_helps() {
        let space = space5();
        let cfg = LandscapeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_arch(&space, &mut rng).unwrap();
            let one = synthetic_accuracy(&a, &space, &cfg, Task::Large, 1);
            let five = synthetic_accuracy(&a, &space, &cfg, Task::Large, 5);
            assert!((0.05..=0.95).contains(&one));
            assert!((five - one - 0.016).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluator_is_deterministic_and_reports_sizes() {
        let space = space5();
        let ev = SyntheticEvaluator::new(LandscapeConfig::default(), space.clone(), Task::Small);
        let a = random_arch(&space, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r1 = ev.evaluate(&a, EvalBudget::search(1));
        let r2 = ev.evaluate(&a, EvalBudget::search(1));
        assert_eq!(r1, r2);
        assert!(r1.is_ok());
        let size = model_size(&a, &space, CostModel::default());
        assert_eq!((r1.params, r1.multadds), (size.params, size.multadds));
        assert!(ev.is_deterministic());
    }

    #[test]
    fn evaluator_rejects_wrong_block_count() {
        let ev = SyntheticEvaluator::new(LandscapeConfig::default(), space5(), Task::Small);
        let a = ArchCode::new(vec![BlockCode::default(); 3]);
        let r = ev.evaluate(&a, EvalBudget::search(1));
        assert!(!r.is_ok());
        assert!(r.detail.contains("block count"), "{}", r.detail);
        assert_eq!(r.accuracy, None);
    }

    #[test]
    fn noisy_evaluator_varies_between_calls() {
        let cfg = LandscapeConfig {
            noise_std: 0.01,
            ..LandscapeConfig::default()
        };
        let space = space5();
        let ev = SyntheticEvaluator::new(cfg, space.clone(), Task::Small);
        let a = random_arch(&space, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r1 = ev.evaluate(&a, EvalBudget::search(1));
        let r2 = ev.evaluate(&a, EvalBudget::search(1));
        assert_ne!(r1.accuracy, r2.accuracy);
        assert!(!ev.is_deterministic());
    }
}
