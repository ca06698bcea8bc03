//! Elastic architecture transfer: search a small task, pick a basic
//! architecture, then seed the search on a large task with perturbations of
//! it.
//!
//! Runs are described as a [`Pipeline`] of stages. Every stage draws its
//! randomness from a stream derived from the master seed and the stage name,
//! so a from-scratch run of stage `large` consumes exactly the stream the
//! seeded transfer run uses for its second stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluators::{fnv1a64, Evaluator};
use crate::evolution::{
    write_atomic, CacheStats, Engine, EngineCheckpoint, EvolutionConfig, HistoryEntry, InitSource, RerankOutcome,
    StopReason,
};
use crate::scoring::ScoreParams;
use crate::search_space::{ArchCode, SearchSpaceConfig};
use crate::weight_store::WeightStore;

pub const REPORT_SCHEMA: &str = "eatnas-report/1";
pub const PIPELINE_SCHEMA: &str = "eatnas-pipeline/1";

pub const STAGE_SMALL: &str = "small";
pub const STAGE_LARGE: &str = "large";

/// Rng stream for `(master_seed, stage, purpose)`.
///
/// The label `"{stage}/{purpose}"` is hashed with 64-bit FNV-1a, xored into
/// the master seed, and the result seeds a ChaCha8 generator through
/// `SeedableRng::seed_from_u64`.
pub fn derive_stream(master_seed: u64, stage: &str, purpose: &str) -> ChaCha8Rng {
    let label = format!("{stage}/{purpose}");
    ChaCha8Rng::seed_from_u64(master_seed ^ fnv1a64(label.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub space_small: SearchSpaceConfig,
    pub space_large: SearchSpaceConfig,
    pub evo_small: EvolutionConfig,
    pub evo_large: EvolutionConfig,
    /// Seed stage 2 from the basic architecture. When off, stage 2 starts
    /// from a random population and the run is a from-scratch baseline.
    pub seeding: bool,
    /// Put the basic architecture itself into the seeded population.
    pub include_seed_verbatim: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            space_small: SearchSpaceConfig::small_task(),
            space_large: SearchSpaceConfig::large_task(),
            evo_small: EvolutionConfig {
                score: ScoreParams::small_task(),
                ..EvolutionConfig::default()
            },
            evo_large: EvolutionConfig {
                score: ScoreParams::large_task(),
                ..EvolutionConfig::default()
            },
            seeding: true,
            include_seed_verbatim: false,
        }
    }
}

impl TransferConfig {
    pub fn check(&self) -> Result<()> {
        self.space_small.check()?;
        self.space_large.check()?;
        self.evo_small.check()?;
        self.evo_large.check()?;
        if self.space_small.n_blocks != self.space_large.n_blocks {
            return Err(Error::Config(format!(
                "stage spaces must have the same block count ({} vs {})",
                self.space_small.n_blocks, self.space_large.n_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageInit {
    Random,
    /// Perturbations of the previous stage's selected architecture.
    Seeded { include_seed_verbatim: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub space: SearchSpaceConfig,
    pub evolution: EvolutionConfig,
    pub init: StageInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Search,
    Transfer,
    ScratchBaseline,
}

/// A sequence of search stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub kind: PipelineKind,
    pub master_seed: u64,
    pub stages: Vec<StageSpec>,
}

impl Pipeline {
    /// Single random-init search on the small task.
    pub fn search(space: SearchSpaceConfig, evolution: EvolutionConfig, master_seed: u64) -> Self {
        Pipeline {
            kind: PipelineKind::Search,
            master_seed,
            stages: vec![StageSpec {
                name: STAGE_SMALL.into(),
                space,
                evolution,
                init: StageInit::Random,
            }],
        }
    }

    pub fn transfer(cfg: &TransferConfig, master_seed: u64) -> Self {
        let init = if cfg.seeding {
            StageInit::Seeded {
                include_seed_verbatim: cfg.include_seed_verbatim,
            }
        } else {
            StageInit::Random
        };
        Pipeline {
            kind: PipelineKind::Transfer,
            master_seed,
            stages: vec![
                StageSpec {
                    name: STAGE_SMALL.into(),
                    space: cfg.space_small.clone(),
                    evolution: cfg.evo_small.clone(),
                    init: StageInit::Random,
                },
                StageSpec {
                    name: STAGE_LARGE.into(),
                    space: cfg.space_large.clone(),
                    evolution: cfg.evo_large.clone(),
                    init,
                },
            ],
        }
    }

    /// Random-init search on the large task, under the same stage name (and
    /// so the same rng stream) as the second stage of a transfer run.
    pub fn scratch(space: SearchSpaceConfig, evolution: EvolutionConfig, master_seed: u64) -> Self {
        Pipeline {
            kind: PipelineKind::ScratchBaseline,
            master_seed,
            stages: vec![StageSpec {
                name: STAGE_LARGE.into(),
                space,
                evolution,
                init: StageInit::Random,
            }],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a pipeline needs at least one stage".into()));
        }
        if matches!(self.stages[0].init, StageInit::Seeded { .. }) {
            return Err(Error::Config("the first stage has nothing to seed from".into()));
        }
        for s in &self.stages {
            s.space.check()?;
            s.evolution.check()?;
        }
        Ok(())
    }

    /// Runs every stage to completion, one evaluator per stage.
    pub fn run(&self, evaluators: &[&dyn Evaluator]) -> Result<Report> {
        match self.run_with(evaluators, &RunOptions::default(), None)? {
            PipelineRun::Finished(r) => Ok(r),
            PipelineRun::Interrupted(_) => unreachable!("no stop requested"),
        }
    }

    /// Runs (or resumes) the pipeline with checkpointing and an optional
    /// stop point.
    pub fn run_with(
        &self,
        evaluators: &[&dyn Evaluator],
        options: &RunOptions,
        resume: Option<PipelineState>,
    ) -> Result<PipelineRun> {
        self.check()?;
        if evaluators.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} evaluators for {} stages",
                evaluators.len(),
                self.stages.len()
            )));
        }
        let mut state = match resume {
            Some(s) => {
                s.check_against(self, options.config_hash.as_deref())?;
                s
            }
            None => PipelineState {
                schema: PIPELINE_SCHEMA.into(),
                pipeline: self.clone(),
                config_hash: options.config_hash.clone(),
                completed: Vec::new(),
                current: None,
            },
        };

        while state.completed.len() < self.stages.len() {
            let idx = state.completed.len();
            let spec = &self.stages[idx];
            let evaluator = evaluators[idx];
            let started = Instant::now();
            let basic = state.completed.last().map(|r| r.selected.clone());
            let mut engine = match state.current.take() {
                Some(ckpt) => {
                    let mut e = Engine::from_checkpoint(ckpt, evaluator)?;
                    if let Some(path) = &options.checkpoint_path {
                        let sidecar = weights_sidecar(path);
                        if e.config().weight_sharing && sidecar.exists() {
                            let f = std::fs::File::open(&sidecar).map_err(|err| Error::io(&sidecar, err))?;
                            e.set_weight_store(WeightStore::load(std::io::BufReader::new(f))?);
                        }
                    }
                    e
                }
                None => {
                    let source = match (spec.init, &basic) {
                        (StageInit::Random, _) => InitSource::Random,
                        (StageInit::Seeded { include_seed_verbatim }, Some(b)) => InitSource::Seeded {
                            basic: b.clone(),
                            include_seed_verbatim,
                        },
                        (StageInit::Seeded { .. }, None) => unreachable!("checked above"),
                    };
                    log::info!("stage {}: initializing {:?} population", spec.name, spec.init);
                    let rng = derive_stream(self.master_seed, &spec.name, "search");
                    Engine::init(spec.evolution.clone(), spec.space.clone(), evaluator, source, rng)?
                }
            };

            let steps_before: u64 = state.completed.iter().map(|r| r.steps).sum();
            let stop_at = options.stop_at_step.map(|s| s.saturating_sub(steps_before));
            let every = spec.evolution.checkpoint_every;
            let reason = loop {
                let mut target = stop_at;
                if options.checkpoint_path.is_some() && every > 0 {
                    let next = (engine.step_count() / every + 1) * every;
                    target = Some(target.map_or(next, |t| t.min(next)));
                }
                let reason = engine.run_until(target)?;
                let requested = stop_at.is_some_and(|s| engine.step_count() >= s);
                if reason != StopReason::Interrupted {
                    break reason;
                }
                if requested {
                    state.current = Some(engine.checkpoint());
                    if let Some(path) = &options.checkpoint_path {
                        state.save(path, Some(engine.weight_store()))?;
                    }
                    log::info!("stage {}: stopped at step {}", spec.name, engine.step_count());
                    return Ok(PipelineRun::Interrupted(state));
                }
                if let Some(path) = &options.checkpoint_path {
                    let snapshot = PipelineState {
                        current: Some(engine.checkpoint()),
                        ..state.clone()
                    };
                    snapshot.save(path, Some(engine.weight_store()))?;
                }
            };

            if let Some(path) = &options.checkpoint_path {
                let final_path = stage_final_checkpoint(path, &spec.name);
                write_atomic(&final_path, engine.checkpoint().to_json()?.as_bytes())?;
            }
            let rerank = engine.rerank()?;
            log::info!(
                "stage {}: {:?} after {} steps, selected {} (accuracy {:.6})",
                spec.name,
                reason,
                engine.step_count(),
                rerank.arch,
                rerank.accuracy
            );
            let population = engine.population();
            state.completed.push(StageReport {
                name: spec.name.clone(),
                init: spec.init,
                evaluator: evaluator.id(),
                space: spec.space.clone(),
                evolution: spec.evolution.clone(),
                seeded_from: match spec.init {
                    StageInit::Seeded { .. } => basic,
                    StageInit::Random => None,
                },
                steps: population.step,
                stop_reason: reason,
                history: population.history.clone(),
                cache: engine.cache_stats(),
                final_best_score: population.best().score,
                final_mean_accuracy: population.mean_accuracy(),
                selected: rerank.arch.clone(),
                rerank,
                wall_time_s: options.record_wall_time.then(|| started.elapsed().as_secs_f64()),
            });
            if let Some(path) = &options.checkpoint_path {
                state.save(path, None)?;
            }
        }

        Ok(PipelineRun::Finished(Report::from_stages(self, state.completed)))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Pipeline checkpoint file, rewritten every `checkpoint_every` steps
    /// and at stage boundaries.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop once this many steps have been taken across all stages.
    pub stop_at_step: Option<u64>,
    /// Put per-stage wall time into the report.
    pub record_wall_time: bool,
    /// Fingerprint of the surrounding run configuration. Stored in the
    /// checkpoint; a resume with a different fingerprint is refused.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineRun {
    Finished(Report),
    Interrupted(PipelineState),
}

/// Resumable state of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub schema: String,
    pub pipeline: Pipeline,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub completed: Vec<StageReport>,
    pub current: Option<EngineCheckpoint>,
}

impl PipelineState {
    pub fn is_finished(&self) -> bool {
        self.completed.len() == self.pipeline.stages.len()
    }

    /// The report of a finished run.
    pub fn report(&self) -> Option<Report> {
        self.is_finished()
            .then(|| Report::from_stages(&self.pipeline, self.completed.clone()))
    }

    fn check_against(&self, pipeline: &Pipeline, config_hash: Option<&str>) -> Result<()> {
        if self.schema != PIPELINE_SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported schema {:?}", self.schema)));
        }
        if let (Some(stored), Some(given)) = (self.config_hash.as_deref(), config_hash) {
            if stored != given {
                return Err(Error::Checkpoint(format!(
                    "configuration hash {given} does not match the checkpoint's {stored}"
                )));
            }
        }
        if &self.pipeline != pipeline {
            return Err(Error::Checkpoint(
                "checkpoint was written by a different pipeline configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, weights: Option<&WeightStore>) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())?;
        if let Some(store) = weights.filter(|s| !s.is_empty()) {
            let mut bytes = Vec::new();
            store.dump(&mut bytes).map_err(|e| Error::io(path, e))?;
            write_atomic(&weights_sidecar(path), &bytes)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(PIPELINE_SCHEMA) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported schema {other:?}, expected {PIPELINE_SCHEMA:?}",
                    path.display()
                )))
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn weights_sidecar(path: &Path) -> PathBuf {
    path.with_extension("eatw")
}

/// Where a pipeline checkpointed at `path` keeps the final engine state of
/// stage `stage`.
pub fn stage_final_checkpoint(path: &Path, stage: &str) -> PathBuf {
    path.with_file_name(format!("{stage}.final.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub init: StageInit,
    pub evaluator: String,
    pub space: SearchSpaceConfig,
    pub evolution: EvolutionConfig,
    pub seeded_from: Option<ArchCode>,
    pub steps: u64,
    pub stop_reason: StopReason,
    /// One entry per step plus the initial population.
    pub history: Vec<HistoryEntry>,
    pub cache: CacheStats,
    pub final_best_score: f64,
    pub final_mean_accuracy: f64,
    pub rerank: RerankOutcome,
    pub selected: ArchCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub kind: PipelineKind,
    pub master_seed: u64,
    pub stages: Vec<StageReport>,
    /// Stage 1's selection in a transfer run.
    pub basic: Option<ArchCode>,
    /// The last stage's selection.
    pub target: ArchCode,
}

impl Report {
    fn from_stages(pipeline: &Pipeline, stages: Vec<StageReport>) -> Self {
        let target = stages.last().expect("at least one stage").selected.clone();
        let basic = (stages.len() > 1).then(|| stages[0].selected.clone());
        Report {
            schema: REPORT_SCHEMA.into(),
            kind: pipeline.kind,
            master_seed: pipeline.master_seed,
            stages,
            basic,
            target,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text).map_err(|e| Error::Decode(format!("report: {e}")))?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Decode(format!("unsupported report schema {:?}", report.schema)));
        }
        Ok(report)
    }

    /// Per-step curves: one row per history entry of every stage.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("stage,step,mean_score,std,quality,best_score,mean_accuracy\n");
        for stage in &self.stages {
            for h in &stage.history {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    stage.name, h.step, h.mean_score, h.std, h.quality, h.best_score, h.mean_accuracy
                );
            }
        }
        out
    }
}

/// Result of [`run_eat`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub basic: ArchCode,
    pub target: ArchCode,
    pub report: Report,
}

/// Two-stage search: small task from random, large task seeded from the
/// small task's selection.
pub fn run_eat<A: Evaluator, B: Evaluator>(
    cfg: &TransferConfig,
    small: &A,
    large: &B,
    master_seed: u64,
) -> Result<TransferOutcome> {
    cfg.check()?;
    let evaluators: [&dyn Evaluator; 2] = [small, large];
    let report = Pipeline::transfer(cfg, master_seed).run(&evaluators)?;
    Ok(TransferOutcome {
        basic: report.basic.clone().expect("two stages"),
        target: report.target.clone(),
        report,
    })
}

/// Single-stage random-init search with the settings of a transfer run's
/// second stage.
pub fn run_from_scratch<E: Evaluator>(
    space: &SearchSpaceConfig,
    evolution: &EvolutionConfig,
    evaluator: &E,
    master_seed: u64,
) -> Result<(ArchCode, Report)> {
    let evaluators: [&dyn Evaluator; 1] = [evaluator];
    let report = Pipeline::scratch(space.clone(), evolution.clone(), master_seed).run(&evaluators)?;
    Ok((report.target.clone(), report))
}
