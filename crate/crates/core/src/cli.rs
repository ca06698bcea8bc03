//! Command-line driver.
//!
//! Settings come from defaults, then the JSON config file, then flags.
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::evaluators::protocol::{echo_handler, serve, serve_tcp, EchoConfig};
use crate::evaluators::{Endpoint, Evaluator, ExternalEvaluator, LandscapeConfig, SyntheticEvaluator, Task};
use crate::evolution::{Engine, EngineCheckpoint};
use crate::transfer::{
    stage_final_checkpoint, Pipeline, PipelineRun, PipelineState, Report, RunOptions, StageSpec, TransferConfig,
    STAGE_SMALL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const STATE_FILE: &str = "state.json";
const REPORT_FILE: &str = "report.json";
const RERANK_FILE: &str = "rerank.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Random-init search on the small task.
    Search,
    /// Small-task search, then a seeded large-task search.
    Transfer,
    /// Random-init search on the large task.
    ScratchBaseline,
    /// Re-evaluate the top-k of a checkpointed population.
    Rerank,
    /// Per-step curves of a report as CSV.
    ExportCurves,
    /// Loopback worker speaking the evaluator protocol, for testing.
    #[value(hide = true)]
    EchoWorker,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSpec {
    pub kind: EvaluatorKind,
    pub endpoint: Option<Endpoint>,
    pub landscape: LandscapeConfig,
    pub search_timeout_s: f64,
    pub rerank_timeout_s: f64,
    /// Let the engine cache results of the external worker.
    pub deterministic: bool,
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec {
            kind: EvaluatorKind::Synthetic,
            endpoint: None,
            landscape: LandscapeConfig::default(),
            search_timeout_s: 900.0,
            rerank_timeout_s: 3600.0,
            deterministic: false,
        }
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub master_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Output directory; for `export-curves`, the CSV file (stdout if unset).
    pub out: Option<PathBuf>,
    pub evaluator: EvaluatorSpec,
    pub transfer: TransferConfig,
    /// Input report for `export-curves`.
    pub report: Option<PathBuf>,
    /// Stage whose population `rerank` re-evaluates; defaults to the last.
    pub stage: Option<String>,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: None,
            master_seed: 0,
            checkpoint_dir: None,
            out: None,
            evaluator: EvaluatorSpec::default(),
            transfer: TransferConfig::default(),
            report: None,
            stage: None,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eatnas", version, about = "Evolutionary architecture search with elastic architecture transfer")]
pub struct Args {
    /// Mode; same as --mode.
    #[arg(value_enum)]
    pub mode_arg: Option<Mode>,
    /// Run mode.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the run state and stage checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Output directory, or the CSV file for export-curves.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fitness evaluator.
    #[arg(long, value_enum)]
    pub evaluator: Option<EvaluatorKind>,
    /// HOST:PORT or stdio:CMD.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Step cap for every stage.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Report to read (export-curves).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Stage to rerank.
    #[arg(long)]
    pub stage: Option<String>,
    /// Continue from the checkpoint in --checkpoint-dir.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps in total, leaving a checkpoint.
    #[arg(long, hide = true)]
    pub stop_at_step: Option<u64>,
    /// echo-worker: listen on HOST:PORT instead of stdio.
    #[arg(long, hide = true)]
    pub listen: Option<String>,
    /// echo-worker: accuracy to report.
    #[arg(long, hide = true, default_value_t = 0.5)]
    pub echo_accuracy: f64,
    /// echo-worker: stop answering after N requests.
    #[arg(long, hide = true)]
    pub hang_after: Option<u64>,
    /// echo-worker: answer with wrong ids.
    #[arg(long, hide = true)]
    pub corrupt_ids: bool,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Decode(_) | Error::Checkpoint(_) | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(args) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("eatnas: configuration error: {m}"),
                Failure::Runtime(m) => eprintln!("eatnas: {m}"),
            }
            f.code()
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("EATNAS_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Merges defaults, the config file and flags.
pub fn resolve_config(args: &Args) -> std::result::Result<RunConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = args.mode.or(args.mode_arg) {
        cfg.mode = Some(m);
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(d) = &args.checkpoint_dir {
        cfg.checkpoint_dir = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(k) = args.evaluator {
        cfg.evaluator.kind = k;
    }
    if let Some(e) = &args.endpoint {
        cfg.evaluator.endpoint = Some(e.parse().map_err(|e: Error| e.to_string())?);
    }
    if let Some(n) = args.max_steps {
        cfg.transfer.evo_small.max_steps = n;
        cfg.transfer.evo_large.max_steps = n;
    }
    if let Some(r) = &args.report {
        cfg.report = Some(r.clone());
    }
    if let Some(s) = &args.stage {
        cfg.stage = Some(s.clone());
    }
    if cfg.mode.is_none() {
        return Err("no mode given (use --mode or the config file)".into());
    }
    if cfg.evaluator.kind == EvaluatorKind::External && cfg.evaluator.endpoint.is_none() {
        return Err("the external evaluator needs --endpoint".into());
    }
    Ok(cfg)
}

/// Fingerprint of everything that shapes a run's trajectory.
pub fn config_hash(cfg: &RunConfig) -> String {
    let fingerprint = serde_json::json!({
        "mode": cfg.mode,
        "master_seed": cfg.master_seed,
        "evaluator": cfg.evaluator,
        "transfer": cfg.transfer,
    });
    format!("{:016x}", crate::evaluators::fnv1a64(fingerprint.to_string().as_bytes()))
}

fn execute(args: Args) -> std::result::Result<(), Failure> {
    if args.mode.or(args.mode_arg) == Some(Mode::EchoWorker) {
        return echo_worker(&args).map_err(|e| Failure::Runtime(format!("echo-worker: {e}")));
    }
    let cfg = resolve_config(&args).map_err(Failure::Config)?;
    match cfg.mode.expect("resolved") {
        Mode::Search | Mode::Transfer | Mode::ScratchBaseline => run_pipeline(&cfg, &args),
        Mode::Rerank => rerank(&cfg),
        Mode::ExportCurves => export_curves(&cfg),
        Mode::EchoWorker => unreachable!(),
    }
}

fn pipeline_for(cfg: &RunConfig) -> Pipeline {
    let t = &cfg.transfer;
    match cfg.mode.expect("resolved") {
        Mode::Search => Pipeline::search(t.space_small.clone(), t.evo_small.clone(), cfg.master_seed),
        Mode::Transfer => Pipeline::transfer(t, cfg.master_seed),
        Mode::ScratchBaseline => Pipeline::scratch(t.space_large.clone(), t.evo_large.clone(), cfg.master_seed),
        _ => unreachable!("not a search mode"),
    }
}

fn evaluator_for(cfg: &RunConfig, stage: &StageSpec) -> std::result::Result<Box<dyn Evaluator>, Failure> {
    let spec = &cfg.evaluator;
    Ok(match spec.kind {
        EvaluatorKind::Synthetic => {
            spec.landscape.check()?;
            let task = if stage.name == STAGE_SMALL { Task::Small } else { Task::Large };
            Box::new(SyntheticEvaluator::new(spec.landscape.clone(), stage.space.clone(), task))
        }
        EvaluatorKind::External => {
            let endpoint = spec.endpoint.clone().expect("checked in resolve_config");
            let secs = |s: f64| {
                Duration::try_from_secs_f64(s).map_err(|_| Failure::Config(format!("invalid timeout {s}")))
            };
            let ext = ExternalEvaluator::new(endpoint, stage.space.clone())
                .with_timeouts(secs(spec.search_timeout_s)?, secs(spec.rerank_timeout_s)?)
                .assume_deterministic(spec.deterministic);
            ext.connect().map_err(|e| Failure::Runtime(e.to_string()))?;
            Box::new(ext)
        }
    })
}

fn run_pipeline(cfg: &RunConfig, args: &Args) -> std::result::Result<(), Failure> {
    let pipeline = pipeline_for(cfg);
    pipeline.check()?;
    if cfg.mode == Some(Mode::Transfer) {
        cfg.transfer.check()?;
    }
    let state_path = cfg.checkpoint_dir.as_ref().map(|d| d.join(STATE_FILE));
    if args.stop_at_step.is_some() && state_path.is_none() {
        return Err(Failure::Config("--stop-at-step needs --checkpoint-dir".into()));
    }
    let hash = config_hash(cfg);
    let resume = if args.resume {
        let path = state_path
            .as_ref()
            .ok_or_else(|| Failure::Config("--resume needs --checkpoint-dir".into()))?;
        let state = PipelineState::load(path)?;
        if state.config_hash.as_deref() != Some(hash.as_str()) {
            return Err(Failure::Config(format!(
                "{}: configuration hash {hash} does not match the checkpoint's {}; refusing to resume",
                path.display(),
                state.config_hash.as_deref().unwrap_or("(none)")
            )));
        }
        if let Some(report) = state.report() {
            eprintln!("eatnas: run already complete; nothing to resume");
            write_report(cfg, &report)?;
            return Ok(());
        }
        Some(state)
    } else {
        None
    };

    let evaluators = pipeline
        .stages
        .iter()
        .map(|s| evaluator_for(cfg, s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<&dyn Evaluator> = evaluators.iter().map(|e| e.as_ref()).collect();
    let options = RunOptions {
        checkpoint_path: state_path,
        stop_at_step: args.stop_at_step,
        record_wall_time: cfg.record_wall_time,
        config_hash: Some(hash),
    };
    match pipeline.run_with(&refs, &options, resume)? {
        PipelineRun::Finished(report) => {
            write_report(cfg, &report)?;
            println!("{}", report.target);
            Ok(())
        }
        PipelineRun::Interrupted(state) => {
            let steps: u64 = state.completed.iter().map(|r| r.steps).sum::<u64>()
                + state.current.as_ref().map_or(0, |c| c.population.step);
            eprintln!("eatnas: stopped after {steps} steps; continue with --resume");
            Ok(())
        }
    }
}

fn write_report(cfg: &RunConfig, report: &Report) -> std::result::Result<(), Failure> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("eatnas-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(REPORT_FILE);
    let mut text = report.to_json()?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    log::info!("report written to {}", path.display());
    Ok(())
}

fn rerank(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let dir = cfg
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| Failure::Config("rerank needs --checkpoint-dir".into()))?;
    let state_path = dir.join(STATE_FILE);
    let state = PipelineState::load(&state_path)?;
    let stage = match &cfg.stage {
        Some(name) => state
            .pipeline
            .stages
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Failure::Config(format!("no stage named {name:?}")))?,
        None => {
            let idx = state.completed.len().min(state.pipeline.stages.len() - 1);
            &state.pipeline.stages[idx]
        }
    };
    let ckpt = match &state.current {
        Some(c) if state.pipeline.stages[state.completed.len()].name == stage.name => c.clone(),
        _ => EngineCheckpoint::load(&stage_final_checkpoint(&state_path, &stage.name))?,
    };
    let evaluator = evaluator_for(cfg, stage)?;
    let engine = Engine::from_checkpoint(ckpt, evaluator.as_ref())?;
    let outcome = engine.rerank()?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("eatnas-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(RERANK_FILE);
    let text = serde_json::to_string_pretty(&outcome).map_err(Error::from)? + "\n";
    fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("{}", outcome.arch);
    Ok(())
}

fn export_curves(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let path = cfg
        .report
        .as_ref()
        .ok_or_else(|| Failure::Config("export-curves needs --report".into()))?;
    let report = read_report(path)?;
    let csv = report.curves_csv();
    match &cfg.out {
        Some(out) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
            }
            fs::write(out, csv).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn read_report(path: &Path) -> std::result::Result<Report, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Report::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn echo_worker(args: &Args) -> io::Result<()> {
    let handler = echo_handler(EchoConfig {
        accuracy: args.echo_accuracy,
        hang_after: args.hang_after,
        corrupt_ids: args.corrupt_ids,
    });
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("echo-worker listening on {}", listener.local_addr()?);
            serve_tcp(listener, handler)
        }
        None => serve(BufReader::new(io::stdin().lock()), io::stdout().lock(), handler),
    }
}
