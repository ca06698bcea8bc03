//! Tournament-selection evolution over a fixed-size population.
//!
//! Each step samples `S` members without replacement, mutates the best of
//! the sample, and replaces the worst of the sample with the mutant. Ties go
//! to the newer member when picking the best and to the older member when
//! picking the worst, so the best score in the population never drops.
//!
//! The search stops when the population quality has plateaued: the maximum
//! quality over the last `W` steps improves on the maximum over the `W`
//! steps before by less than `epsilon`. A hard `max_steps` cap applies too.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluators::{EvalBudget, EvalResult, Evaluator};
use crate::perturbation::{mutate, seed_population};
use crate::scoring::{model_score, population_quality, QualityParams, ScoreParams, SizeMetric};
use crate::search_space::{random_arch, ArchCode, SearchSpaceConfig};
use crate::weight_store::{derive_weights, LayerSignature, WeightInitSpec, WeightStore};

pub const CHECKPOINT_SCHEMA: &str = "eatnas-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// `P`.
    pub population_size: usize,
    /// `S`, the tournament size.
    pub sample_size: usize,
    /// Number of top-scoring members re-evaluated by [`Engine::rerank_topk`].
    pub k: usize,
    pub max_steps: u64,
    /// Convergence window `W`.
    pub window: usize,
    pub epsilon: f64,
    pub score: ScoreParams,
    pub quality: QualityParams,
    /// Epochs per search-time evaluation.
    pub search_epochs: u32,
    /// Rerank epochs are `search_epochs * rerank_multiple`.
    pub rerank_multiple: u32,
    /// Extra attempts for a failed evaluation before giving up on the model.
    pub eval_retries: usize,
    /// Fresh samples drawn in one step after mutants keep failing.
    pub max_resamples: usize,
    /// Reuse results for repeated `(arch, epochs)`.
    pub use_cache: bool,
    /// Steps between automatic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Derive inherited weights for every new model and tell the evaluator
    /// which stored kernels it may reuse.
    pub weight_sharing: bool,
    pub weight_init: WeightInitSpec,
    /// Threads for the independent evaluations of init and rerank.
    pub eval_threads: usize,
    /// Store per-evaluation wall time in model records. Makes checkpoints
    /// and reports differ between otherwise identical runs.
    pub record_wall_time: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population_size: 64,
            sample_size: 16,
            k: 8,
            max_steps: 1000,
            window: 20,
            epsilon: 1e-4,
            score: ScoreParams::default(),
            quality: QualityParams::default(),
            search_epochs: 1,
            rerank_multiple: 5,
            eval_retries: 2,
            max_resamples: 100,
            use_cache: true,
            checkpoint_every: 10,
            weight_sharing: false,
            weight_init: WeightInitSpec::default(),
            eval_threads: 1,
            record_wall_time: false,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<()> {
        let p = self.population_size;
        if p < 2 {
            return Err(Error::Config(format!("population size {p} < 2")));
        }
        if !(2..=p).contains(&self.sample_size) {
            return Err(Error::Config(format!(
                "sample size {} outside [2, {p}]",
                self.sample_size
            )));
        }
        if !(1..=p).contains(&self.k) {
            return Err(Error::Config(format!("k = {} outside [1, {p}]", self.k)));
        }
        if self.window == 0 {
            return Err(Error::Config("convergence window must be at least 1".into()));
        }
        if self.search_epochs == 0 || self.rerank_multiple == 0 {
            return Err(Error::Config("evaluation budgets must be at least 1 epoch".into()));
        }
        if !(self.weight_init.std > 0.0) {
            return Err(Error::Config("weight init std must be positive".into()));
        }
        self.score.check()?;
        self.quality.check()
    }

    pub fn search_budget(&self) -> EvalBudget {
        EvalBudget::search(self.search_epochs)
    }

    pub fn rerank_budget(&self) -> EvalBudget {
        EvalBudget::rerank(self.search_epochs * self.rerank_multiple)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub evaluator: String,
    pub epochs: u32,
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// An evaluated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub arch: ArchCode,
    pub accuracy: f64,
    pub params: u64,
    pub multadds: u64,
    /// Size under the active score metric.
    pub size: f64,
    pub score: f64,
    /// Insertion order; unique within a population.
    pub birth_step: u64,
    pub meta: EvalMeta,
}

/// Population statistics after initialization (step 0) or after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub quality: f64,
    pub mean_score: f64,
    pub std: f64,
    pub best_score: f64,
    pub mean_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<StepEvent>,
}

/// What one evolution step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub sample_best_score: f64,
    pub mutant_score: f64,
    pub removed_score: f64,
    pub parent_birth: u64,
    pub removed_birth: u64,
    /// Samples abandoned because the mutant could not be evaluated.
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<ModelRecord>,
    pub step: u64,
    pub history: Vec<HistoryEntry>,
    next_birth: u64,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Highest score, newest first on ties.
    pub fn best(&self) -> &ModelRecord {
        self.members
            .iter()
            .max_by(|a, b| rank_key(a).partial_cmp(&rank_key(b)).unwrap())
            .expect("population is never empty")
    }

    pub fn quality_history(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.quality).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.members.iter().map(|m| m.accuracy).sum::<f64>() / self.members.len() as f64
    }

    /// Members ordered by score, best first, ties broken by newer birth.
    pub fn ranked(&self) -> Vec<&ModelRecord> {
        let mut v: Vec<&ModelRecord> = self.members.iter().collect();
        v.sort_by(|a, b| rank_key(b).partial_cmp(&rank_key(a)).unwrap());
        v
    }
}

fn rank_key(m: &ModelRecord) -> (f64, u64) {
    (m.score, m.birth_step)
}

/// Whether a quality history has plateaued under window `w`.
pub fn has_converged(quality: &[f64], window: usize, epsilon: f64) -> bool {
    let n = quality.len();
    // n - 1 steps taken; need 2W steps
    if window == 0 || n < 2 * window + 1 {
        return false;
    }
    let max = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let recent = max(&quality[n - window..]);
    let previous = max(&quality[n - 2 * window..n - window]);
    recent - previous < epsilon
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Evaluator invocations, retries included.
    pub evaluator_calls: u64,
    pub failures: u64,
}

/// Where the initial population comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSource {
    Random,
    /// Perturbations of a basic architecture, optionally including it.
    Seeded { basic: ArchCode, include_seed_verbatim: bool },
    /// An explicit list of `P` architectures.
    Explicit(Vec<ArchCode>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSteps,
    /// Stopped at a requested step before either criterion fired.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankEntry {
    pub arch: ArchCode,
    pub search_score: f64,
    pub search_accuracy: f64,
    pub rerank_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub arch: ArchCode,
    pub accuracy: f64,
    pub epochs: u32,
    /// The top-k candidates in score order.
    pub candidates: Vec<RerankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    arch: String,
    epochs: u32,
    result: EvalResult,
}

/// Complete engine state; resuming from it continues the exact trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineCheckpoint {
    pub schema: String,
    pub config: EvolutionConfig,
    pub space: SearchSpaceConfig,
    pub evaluator: String,
    pub population: Population,
    pub rng: ChaCha8Rng,
    cache: Vec<CacheEntry>,
    pub cache_stats: CacheStats,
}

impl EngineCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(CHECKPOINT_SCHEMA) => {}
            Some(other) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint schema {other:?}, expected {CHECKPOINT_SCHEMA:?}"
                )))
            }
            None => return Err(Error::Checkpoint("checkpoint has no schema tag".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes `contents` to `path` through a temporary sibling and a rename, so
/// an interrupted write never leaves a truncated file behind.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The evolutionary search loop.
pub struct Engine<E: Evaluator> {
    cfg: EvolutionConfig,
    space: SearchSpaceConfig,
    evaluator: E,
    population: Population,
    rng: ChaCha8Rng,
    cache: HashMap<(String, u32), EvalResult>,
    stats: CacheStats,
    store: WeightStore,
    checkpoint_path: Option<PathBuf>,
}

impl<E: Evaluator> std::fmt::Debug for Engine<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("evaluator", &self.evaluator.id())
            .field("step", &self.population.step)
            .field("population", &self.population.len())
            .finish_non_exhaustive()
    }
}

impl<E: Evaluator> Engine<E> {
    /// Builds, evaluates and scores the initial population.
    ///
    /// A model whose evaluation still fails after the configured retries
    /// aborts initialization; rerunning with the same rng state repeats the
    /// same initialization deterministically.
    pub fn init(
        cfg: EvolutionConfig,
        space: SearchSpaceConfig,
        evaluator: E,
        source: InitSource,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.check()?;
        space.check()?;
        let p = cfg.population_size;
        let archs = match source {
            InitSource::Random => (0..p)
                .map(|_| random_arch(&space, &mut rng))
                .collect::<Result<Vec<_>>>()?,
            InitSource::Seeded { basic, include_seed_verbatim } => {
                seed_population(&basic, p, &space, include_seed_verbatim, &mut rng)?
            }
            InitSource::Explicit(archs) => {
                if archs.len() != p {
                    return Err(Error::Config(format!(
                        "{} initial architectures for a population of {p}",
                        archs.len()
                    )));
                }
                archs
            }
        };
        let mut engine = Engine {
            cfg,
            space,
            evaluator,
            population: Population {
                members: Vec::with_capacity(p),
                step: 0,
                history: Vec::new(),
                next_birth: 0,
            },
            rng,
            cache: HashMap::new(),
            stats: CacheStats::default(),
            store: WeightStore::new(),
            checkpoint_path: None,
        };
        let results = engine.evaluate_many(&archs, engine.cfg.search_budget());
        for (arch, outcome) in archs.into_iter().zip(results) {
            let (result, cached, wall) = outcome.ok_or_else(|| {
                Error::Evaluation(format!("initial model {arch} failed after all retries"))
            })?;
            let birth = engine.next_birth();
            let record = engine.make_record(arch, &result, cached, wall, birth)?;
            engine.population.members.push(record);
        }
        let entry = engine.history_entry(None)?;
        engine.population.history.push(entry);
        log::info!(
            "init: {} models, Q={:.6}, best={:.6}",
            p,
            engine.population.history[0].quality,
            engine.population.history[0].best_score
        );
        Ok(engine)
    }

    /// Rebuilds an engine from a checkpoint.
    pub fn from_checkpoint(ckpt: EngineCheckpoint, evaluator: E) -> Result<Self> {
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported schema {:?}", ckpt.schema)));
        }
        ckpt.config.check()?;
        if ckpt.population.len() != ckpt.config.population_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} members for a population of {}",
                ckpt.population.len(),
                ckpt.config.population_size
            )));
        }
        if evaluator.id() != ckpt.evaluator {
            log::warn!(
                "resuming with evaluator {} but the checkpoint was written with {}",
                evaluator.id(),
                ckpt.evaluator
            );
        }
        let cache = ckpt
            .cache
            .into_iter()
            .map(|e| ((e.arch, e.epochs), e.result))
            .collect();
        Ok(Engine {
            cfg: ckpt.config,
            space: ckpt.space,
            evaluator,
            population: ckpt.population,
            rng: ckpt.rng,
            cache,
            stats: ckpt.cache_stats,
            store: WeightStore::new(),
            checkpoint_path: None,
        })
    }

    /// Loads a checkpoint file and, if present, its weight-store sidecar.
    pub fn resume(path: &Path, evaluator: E) -> Result<Self> {
        let mut engine = Self::from_checkpoint(EngineCheckpoint::load(path)?, evaluator)?;
        let sidecar = weights_sidecar(path);
        if engine.cfg.weight_sharing && sidecar.exists() {
            let file = fs::File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            engine.store = WeightStore::load(std::io::BufReader::new(file))?;
        }
        engine.checkpoint_path = Some(path.to_path_buf());
        Ok(engine)
    }

    pub fn checkpoint(&self) -> EngineCheckpoint {
        let mut cache: Vec<CacheEntry> = self
            .cache
            .iter()
            .map(|((arch, epochs), result)| CacheEntry {
                arch: arch.clone(),
                epochs: *epochs,
                result: result.clone(),
            })
            .collect();
        cache.sort_by(|a, b| (a.epochs, &a.arch).cmp(&(b.epochs, &b.arch)));
        EngineCheckpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            config: self.cfg.clone(),
            space: self.space.clone(),
            evaluator: self.evaluator.id(),
            population: self.population.clone(),
            rng: self.rng.clone(),
            cache,
            cache_stats: self.stats,
        }
    }

    /// Writes the checkpoint (and the weight store, when sharing is on).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.checkpoint().to_json()?.as_bytes())?;
        if self.cfg.weight_sharing {
            let mut bytes = Vec::new();
            self.store.dump(&mut bytes).map_err(|e| Error::io(path, e))?;
            write_atomic(&weights_sidecar(path), &bytes)?;
        }
        Ok(())
    }

    /// Enables the periodic checkpoints of [`Engine::run_until_converged`].
    pub fn set_checkpoint_path(&mut self, path: Option<PathBuf>) {
        self.checkpoint_path = path;
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.cfg
    }

    pub fn space(&self) -> &SearchSpaceConfig {
        &self.space
    }

    pub fn evaluator(&self) -> &E {
        &self.evaluator
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn into_population(self) -> Population {
        self.population
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.stats
    }

    pub fn weight_store(&self) -> &WeightStore {
        &self.store
    }

    /// Replaces the weight store, e.g. with one reloaded from a dump.
    pub fn set_weight_store(&mut self, store: WeightStore) {
        self.store = store;
    }

    pub fn step_count(&self) -> u64 {
        self.population.step
    }

    pub fn has_converged(&self) -> bool {
        has_converged(
            &self.population.quality_history(),
            self.cfg.window,
            self.cfg.epsilon,
        )
    }

    /// One tournament: sample, mutate the sample-best, evaluate, replace the
    /// sample-worst.
    pub fn step(&mut self) -> Result<&HistoryEntry> {
        let p = self.population.len();
        let s = self.cfg.sample_size;
        let budget = self.cfg.search_budget();
        for resample in 0..=self.cfg.max_resamples {
            let picked = sample(&mut self.rng, p, s);
            let members = &self.population.members;
            let best_i = picked
                .iter()
                .max_by(|&a, &b| rank_key(&members[a]).partial_cmp(&rank_key(&members[b])).unwrap())
                .unwrap();
            let worst_i = picked
                .iter()
                .min_by(|&a, &b| rank_key(&members[a]).partial_cmp(&rank_key(&members[b])).unwrap())
                .unwrap();
            let parent = members[best_i].arch.clone();
            let (parent_score, parent_birth) = rank_key(&members[best_i]);
            let child = mutate(&parent, &self.space, &mut self.rng)?;
            let Some((result, cached, wall)) = self.evaluate_one(&child, budget) else {
                log::warn!("step {}: mutant {child} failed, resampling", self.population.step + 1);
                continue;
            };
            let birth = self.next_birth();
            let record = self.make_record(child, &result, cached, wall, birth)?;
            let mutant_score = record.score;
            let removed = std::mem::replace(&mut self.population.members[worst_i], record);
            self.population.step += 1;
            let event = StepEvent {
                sample_best_score: parent_score,
                mutant_score,
                removed_score: removed.score,
                parent_birth,
                removed_birth: removed.birth_step,
                resamples: resample,
            };
            let entry = self.history_entry(Some(event))?;
            log::info!(
                "step {} mutant={:.6} sample_best={:.6} removed={:.6} mean={:.6} std={:.6} Q={:.6}",
                entry.step,
                mutant_score,
                parent_score,
                removed.score,
                entry.mean_score,
                entry.std,
                entry.quality
            );
            self.population.history.push(entry);
            return Ok(self.population.history.last().unwrap());
        }
        Err(Error::Evaluation(format!(
            "step {}: no mutant could be evaluated in {} samples",
            self.population.step + 1,
            self.cfg.max_resamples + 1
        )))
    }

    /// Steps until convergence or `max_steps`.
    pub fn run_until_converged(&mut self) -> Result<StopReason> {
        self.run_until(None)
    }

    /// As [`Engine::run_until_converged`], but also stops once `stop_at`
    /// steps have been taken.
    pub fn run_until(&mut self, stop_at: Option<u64>) -> Result<StopReason> {
        loop {
            if self.has_converged() {
                return Ok(StopReason::Converged);
            }
            if self.population.step >= self.cfg.max_steps {
                return Ok(StopReason::MaxSteps);
            }
            if stop_at.is_some_and(|s| self.population.step >= s) {
                return Ok(StopReason::Interrupted);
            }
            self.step()?;
            let every = self.cfg.checkpoint_every;
            if let Some(path) = &self.checkpoint_path {
                if every > 0 && self.population.step % every == 0 {
                    self.save_checkpoint(path)?;
                }
            }
        }
    }

    /// Re-evaluates the `k` best-scoring members with the rerank budget and
    /// returns the one with the highest re-evaluated accuracy.
    pub fn rerank_topk<S: Evaluator>(&self, strong: &S, k: usize) -> Result<RerankOutcome> {
        if k == 0 || k > self.population.len() {
            return Err(Error::Config(format!(
                "k = {k} outside [1, {}]",
                self.population.len()
            )));
        }
        let top: Vec<&ModelRecord> = self.population.ranked().into_iter().take(k).collect();
        let archs: Vec<ArchCode> = top.iter().map(|m| m.arch.clone()).collect();
        let budget = self.cfg.rerank_budget();
        let retries = self.cfg.eval_retries;
        let results = parallel_map(&archs, self.cfg.eval_threads, |a| {
            evaluate_with_retries(strong, a, budget, retries, None).0
        });
        let mut candidates = Vec::with_capacity(k);
        let mut best: Option<(usize, f64)> = None;
        for (i, (m, r)) in top.iter().zip(results).enumerate() {
            let acc = r.as_ref().filter(|r| r.is_ok()).and_then(|r| r.accuracy);
            match acc {
                Some(a) if best.is_none_or(|(_, b)| a > b) => best = Some((i, a)),
                Some(_) => {}
                None => log::warn!("rerank: {} failed and is excluded", m.arch),
            }
            candidates.push(RerankEntry {
                arch: m.arch.clone(),
                search_score: m.score,
                search_accuracy: m.accuracy,
                rerank_accuracy: acc,
                detail: r.map(|r| r.detail).unwrap_or_default(),
            });
        }
        let (i, accuracy) = best.ok_or_else(|| Error::Evaluation(format!("all {k} rerank candidates failed")))?;
        Ok(RerankOutcome {
            arch: candidates[i].arch.clone(),
            accuracy,
            epochs: budget.epochs,
            candidates,
        })
    }

    /// [`Engine::rerank_topk`] with the engine's own evaluator and `k`.
    pub fn rerank(&self) -> Result<RerankOutcome> {
        self.rerank_topk(&self.evaluator, self.cfg.k)
    }

    fn next_birth(&mut self) -> u64 {
        let b = self.population.next_birth;
        self.population.next_birth += 1;
        b
    }

    fn make_record(
        &self,
        arch: ArchCode,
        result: &EvalResult,
        cached: bool,
        wall: Option<f64>,
        birth_step: u64,
    ) -> Result<ModelRecord> {
        let accuracy = result
            .accuracy
            .ok_or_else(|| Error::Evaluation("ok result without accuracy".into()))?;
        let size = match self.cfg.score.metric {
            SizeMetric::Params => result.params as f64,
            SizeMetric::Multadds => result.multadds as f64,
        };
        let score = model_score(accuracy, size, &self.cfg.score)
            .map_err(|e| Error::Evaluation(format!("scoring {arch}: {e}")))?;
        Ok(ModelRecord {
            arch,
            accuracy,
            params: result.params,
            multadds: result.multadds,
            size,
            score,
            birth_step,
            meta: EvalMeta {
                evaluator: self.evaluator.id(),
                epochs: self.cfg.search_epochs,
                cached,
                wall_time_s: wall.filter(|_| self.cfg.record_wall_time),
            },
        })
    }

    fn history_entry(&self, event: Option<StepEvent>) -> Result<HistoryEntry> {
        let scores: Vec<f64> = self.population.members.iter().map(|m| m.score).collect();
        let q = population_quality(&scores, &self.cfg.quality)?;
        Ok(HistoryEntry {
            step: self.population.step,
            quality: q.value,
            mean_score: q.mean,
            std: q.std,
            best_score: self.population.best().score,
            mean_accuracy: self.population.mean_accuracy(),
            event,
        })
    }

    /// Weight derivation for a new model: inherit what the store holds,
    /// commit the result, and return the inherited signatures.
    fn share_for(&mut self, arch: &ArchCode) -> Option<Vec<LayerSignature>> {
        if !self.cfg.weight_sharing {
            return None;
        }
        let before = self.store.snapshot();
        let init = self
            .cfg
            .weight_init
            .with_seed(self.cfg.weight_init.seed ^ self.population.next_birth.rotate_left(17));
        match derive_weights(arch, &self.space, &self.store, &init) {
            Ok(derived) => {
                let inherited = derived.weights.keys().filter(|s| before.contains_key(s)).copied().collect();
                self.store.commit_all(derived.weights);
                Some(inherited)
            }
            Err(e) => {
                log::warn!("weight sharing for {arch} failed: {e}");
                Some(Vec::new())
            }
        }
    }

    fn evaluate_one(&mut self, arch: &ArchCode, budget: EvalBudget) -> Option<(EvalResult, bool, Option<f64>)> {
        let key = (arch.encode(), budget.epochs);
        if self.cfg.use_cache {
            if let Some(r) = self.cache.get(&key) {
                self.stats.hits += 1;
                return Some((r.clone(), true, None));
            }
        }
        self.stats.misses += 1;
        let share = self.share_for(arch);
        let (result, calls, wall) =
            evaluate_with_retries(&self.evaluator, arch, budget, self.cfg.eval_retries, share.as_deref());
        self.stats.evaluator_calls += calls;
        match result {
            Some(r) if r.is_ok() => {
                if self.cfg.use_cache {
                    self.cache.insert(key, r.clone());
                }
                Some((r, false, Some(wall)))
            }
            _ => {
                self.stats.failures += 1;
                None
            }
        }
    }

    /// Evaluates a batch, sharing cache hits and fanning the misses out over
    /// `eval_threads`. Repeated architectures within the batch are evaluated
    /// once when the cache is on.
    fn evaluate_many(&mut self, archs: &[ArchCode], budget: EvalBudget) -> Vec<Option<(EvalResult, bool, Option<f64>)>> {
        let keys: Vec<(String, u32)> = archs.iter().map(|a| (a.encode(), budget.epochs)).collect();
        let mut pending: Vec<usize> = Vec::new();
        let mut first_of: BTreeMap<&(String, u32), usize> = BTreeMap::new();
        for (i, key) in keys.iter().enumerate() {
            let seen = self.cfg.use_cache && (self.cache.contains_key(key) || first_of.contains_key(key));
            if !seen {
                first_of.insert(key, i);
                pending.push(i);
            }
        }
        let shares: Vec<Option<Vec<LayerSignature>>> = pending.iter().map(|&i| self.share_for(&archs[i])).collect();
        let jobs: Vec<(usize, Option<Vec<LayerSignature>>)> = pending.iter().copied().zip(shares).collect();
        let retries = self.cfg.eval_retries;
        let evaluator = &self.evaluator;
        let fresh = parallel_map(&jobs, self.cfg.eval_threads, |(i, share)| {
            evaluate_with_retries(evaluator, &archs[*i], budget, retries, share.as_deref())
        });
        let mut fresh_by_index: HashMap<usize, (Option<EvalResult>, u64, f64)> =
            pending.iter().copied().zip(fresh).collect();

        let mut out = Vec::with_capacity(archs.len());
        for (i, key) in keys.iter().enumerate() {
            if let Some((result, calls, wall)) = fresh_by_index.remove(&i) {
                self.stats.misses += 1;
                self.stats.evaluator_calls += calls;
                match result.filter(|r| r.is_ok()) {
                    Some(r) => {
                        if self.cfg.use_cache {
                            self.cache.insert(key.clone(), r.clone());
                        }
                        out.push(Some((r, false, Some(wall))));
                    }
                    None => {
                        self.stats.failures += 1;
                        out.push(None);
                    }
                }
            } else {
                match self.cache.get(key) {
                    Some(r) => {
                        self.stats.hits += 1;
                        out.push(Some((r.clone(), true, None)));
                    }
                    // the first copy failed; so does this one
                    None => out.push(None),
                }
            }
        }
        out
    }
}

fn weights_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("eatw")
}

/// Evaluates with up to `retries` extra attempts. Returns the last result,
/// the number of evaluator calls, and the wall time of the successful call.
fn evaluate_with_retries<E: Evaluator + ?Sized>(
    evaluator: &E,
    arch: &ArchCode,
    budget: EvalBudget,
    retries: usize,
    share: Option<&[LayerSignature]>,
) -> (Option<EvalResult>, u64, f64) {
    let mut last = None;
    let mut calls = 0;
    for attempt in 0..=retries {
        let started = Instant::now();
        let r = match share {
            Some(s) => evaluator.evaluate_shared(arch, budget, s),
            None => evaluator.evaluate(arch, budget),
        };
        calls += 1;
        if r.is_ok() {
            return (Some(r), calls, started.elapsed().as_secs_f64());
        }
        log::warn!("evaluation of {arch} failed (attempt {}): {}", attempt + 1, r.detail);
        last = Some(r);
    }
    (last, calls, 0.0)
}

/// Order-preserving map over `threads` scoped workers.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}
