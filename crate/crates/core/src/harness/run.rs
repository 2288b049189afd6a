use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, Stat};
use super::{ExperimentConfig, Method, StreamSource};
use crate::error::{Error, Result};
use crate::metrics::{record_row, EvalReport, ScoreMatrix};
use crate::model::{init_model, Input, ModelConfig};
use crate::strategies::{train_task, StrategyConfig, StrategyState};
use crate::tasks::{generate_stream, load_stream, order_stream, TaskSpec, TaskStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub task_order: Vec<String>,
    pub matrix: ScoreMatrix,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub config: ExperimentConfig,
    /// Standard deviations below are population (divide-by-n) statistics.
    pub std_kind: String,
    pub seeds: Vec<SeedResult>,
    /// Average score over seen tasks per stage, across seeds.
    pub curve: Vec<CurvePoint>,
    pub final_average: Stat,
    pub cft: Option<Stat>,
    pub cbt: Option<Stat>,
    /// Kept out of `result.json` so identical configs give identical bytes.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Loads or generates the stream in its source order.
pub fn load_base_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    match &cfg.stream {
        StreamSource::Synthetic(s) => generate_stream(s),
        StreamSource::Jsonl { data, labels, hash_dim } => load_stream(data, labels, *hash_dim),
    }
}

fn input_dim(stream: &TaskStream) -> Result<usize> {
    let first = stream
        .tasks
        .first()
        .and_then(|t| t.train.first())
        .ok_or_else(|| Error::Input("stream has no training examples".into()))?;
    Ok(match &first.input {
        Input::Sequence { features, .. } => features.len(),
        Input::Tokens { features, .. } => features.first().map_or(0, Vec::len),
    })
}

struct SeedContext {
    seed: u64,
    stream: TaskStream,
    model: ModelConfig,
}

fn seed_context(cfg: &ExperimentConfig, base: &TaskStream, seed: u64) -> Result<SeedContext> {
    let stream = order_stream(base.clone(), &cfg.ordering, seed)?;
    let head = stream
        .head_kind()
        .ok_or_else(|| Error::Input("empty task stream".into()))?;
    let model = cfg.model_config(input_dim(&stream)?, stream.labels.len(), head, seed);
    model.validate()?;
    Ok(SeedContext { seed, stream, model })
}

fn train_block(
    ctx: &SeedContext,
    theta: crate::model::ParameterVector,
    task: &TaskSpec,
    cfg: &ExperimentConfig,
    train: &crate::strategies::TrainConfig,
    strategy: &StrategyConfig,
    state: &mut StrategyState,
) -> Result<crate::model::ParameterVector> {
    state.start_task(strategy);
    train_task(theta, &ctx.model, task, &ctx.stream.labels, train, strategy, state)
        .map_err(|e| e.context(format!("seed {} task {:?} ({})", ctx.seed, task.task_id, cfg.method_name())))
}

fn finish(cfg: &ExperimentConfig, ctx: SeedContext, matrix: ScoreMatrix) -> Result<SeedResult> {
    let report = EvalReport::from_matrix(&cfg.method_name(), ctx.seed, &matrix, cfg.cbt_row)?;
    Ok(SeedResult {
        seed: ctx.seed,
        task_order: ctx.stream.task_ids(),
        matrix,
        report,
    })
}

/// Sequential training over the whole stream, with an optional multi-task
/// warm start on the first `warm_start` tasks (0 or 1 means none).
fn sequential_seed(cfg: &ExperimentConfig, ctx: SeedContext, warm_start: usize) -> Result<SeedResult> {
    let t = ctx.stream.len();
    let mut matrix = ScoreMatrix::new(ctx.stream.task_ids());
    let mut state = StrategyState::new(&cfg.strategy, &cfg.training, ctx.seed);
    let mut theta = init_model(&ctx.model)?;
    let first = warm_start.max(1);
    let block = TaskSpec::pooled(&ctx.stream.tasks[..first])?;
    theta = train_block(&ctx, theta, &block, cfg, &cfg.training, &cfg.strategy, &mut state)?;
    record_row(&mut matrix, first - 1, &theta, &ctx.model, &ctx.stream)?;
    for i in first..t {
        theta = train_block(&ctx, theta, &ctx.stream.tasks[i], cfg, &cfg.training, &cfg.strategy, &mut state)?;
        record_row(&mut matrix, i, &theta, &ctx.model, &ctx.stream)?;
    }
    finish(cfg, ctx, matrix)
}

fn multi_seed(cfg: &ExperimentConfig, ctx: SeedContext) -> Result<SeedResult> {
    let train = cfg.multi_training.as_ref().unwrap_or(&cfg.training);
    let strategy = StrategyConfig::vanilla();
    let mut state = StrategyState::new(&strategy, train, ctx.seed);
    let pooled = TaskSpec::pooled(&ctx.stream.tasks)?;
    let theta = train_block(&ctx, init_model(&ctx.model)?, &pooled, cfg, train, &strategy, &mut state)?;
    let mut matrix = ScoreMatrix::new(ctx.stream.task_ids());
    record_row(&mut matrix, ctx.stream.len() - 1, &theta, &ctx.model, &ctx.stream)?;
    finish(cfg, ctx, matrix)
}

fn mono_seed(cfg: &ExperimentConfig, ctx: SeedContext) -> Result<SeedResult> {
    let strategy = StrategyConfig::vanilla();
    let mut scores = Vec::with_capacity(ctx.stream.len());
    for task in &ctx.stream.tasks {
        let mut state = StrategyState::new(&strategy, &cfg.training, ctx.seed);
        let theta = train_block(&ctx, init_model(&ctx.model)?, task, cfg, &cfg.training, &strategy, &mut state)?;
        scores.push(crate::metrics::score_task(&theta, &ctx.model, task, &ctx.stream.labels)?);
    }
    let mut matrix = ScoreMatrix::new(ctx.stream.task_ids());
    matrix.set_row(ctx.stream.len() - 1, scores)?;
    finish(cfg, ctx, matrix)
}

fn per_seed<F>(cfg: &ExperimentConfig, base: &TaskStream, f: F) -> Result<RunResult>
where
    F: Fn(SeedContext) -> Result<SeedResult> + Sync,
{
    cfg.validate()?;
    let started = Instant::now();
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| seed_context(cfg, base, seed).and_then(&f))
        .collect::<Result<Vec<_>>>()?;
    let mut result = summarize(cfg, seeds)?;
    result.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(result)
}

fn check_sequential(cfg: &ExperimentConfig, base: &TaskStream) -> Result<()> {
    if base.len() < 2 {
        return Err(Error::Config("sequential runs need at least two tasks".into()));
    }
    if cfg.warm_start_k >= base.len() {
        return Err(Error::Config(format!(
            "warm_start_k {} must be below the number of tasks {}",
            cfg.warm_start_k,
            base.len()
        )));
    }
    Ok(())
}

/// Task-by-task training for every seed.
pub fn run_sequential(cfg: &ExperimentConfig, base: &TaskStream) -> Result<RunResult> {
    check_sequential(cfg, base)?;
    per_seed(cfg, base, |ctx| sequential_seed(cfg, ctx, 0))
}

/// Joint training on the first `warm_start_k` tasks, then sequential.
pub fn run_warm_start(cfg: &ExperimentConfig, base: &TaskStream) -> Result<RunResult> {
    if cfg.warm_start_k == 0 {
        return Err(Error::Config("warm start needs warm_start_k >= 1".into()));
    }
    check_sequential(cfg, base)?;
    per_seed(cfg, base, |ctx| sequential_seed(cfg, ctx, cfg.warm_start_k))
}

/// One model on the union of all tasks' data.
pub fn run_multi(cfg: &ExperimentConfig, base: &TaskStream) -> Result<RunResult> {
    per_seed(cfg, base, |ctx| multi_seed(cfg, ctx))
}

/// One fresh model per task, scored on its own task only.
pub fn run_mono(cfg: &ExperimentConfig, base: &TaskStream) -> Result<RunResult> {
    per_seed(cfg, base, |ctx| mono_seed(cfg, ctx))
}

/// Dispatches on `method` and `warm_start_k`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let base = load_base_stream(cfg)?;
    match cfg.method {
        Method::Multi => run_multi(cfg, &base),
        Method::Mono => run_mono(cfg, &base),
        Method::Sequential if cfg.warm_start_k > 0 => run_warm_start(cfg, &base),
        Method::Sequential => run_sequential(cfg, &base),
    }
}

/// Aggregates per-seed results. Reductions run in ascending seed order so
/// the aggregates do not depend on how the seed list is arranged.
fn summarize(cfg: &ExperimentConfig, seeds: Vec<SeedResult>) -> Result<RunResult> {
    let mut sorted: Vec<&SeedResult> = seeds.iter().collect();
    sorted.sort_by_key(|s| s.seed);
    let stages: Vec<usize> = sorted[0].report.stage_averages.iter().map(|(s, _)| *s).collect();
    let curve = stages
        .iter()
        .enumerate()
        .map(|(k, &stage)| {
            let vals: Vec<f64> = sorted
                .iter()
                .map(|s| {
                    s.report
                        .stage_averages
                        .get(k)
                        .filter(|(st, _)| *st == stage)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::State("seeds recorded different stages".into()))
                })
                .collect::<Result<_>>()?;
            let st = aggregate(&vals).unwrap();
            Ok(CurvePoint {
                stage,
                mean: st.mean,
                std: st.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = |f: fn(&EvalReport) -> Option<f64>| -> Option<Stat> {
        let vals: Option<Vec<f64>> = sorted.iter().map(|s| f(&s.report)).collect();
        vals.and_then(|v| aggregate(&v))
    };
    let finals: Vec<f64> = sorted.iter().map(|s| s.report.final_average).collect();
    Ok(RunResult {
        method: cfg.method_name(),
        config: cfg.clone(),
        std_kind: "population".into(),
        curve,
        final_average: aggregate(&finals).unwrap(),
        cft: all(|r| r.cft),
        cbt: all(|r| r.cbt),
        seeds,
        wall_clock_secs: 0.0,
    })
}

/// Writes `result.json`, `R_seed<k>.csv`, `curve.csv` and `timing.json`.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    fs::write(dir.join("result.json"), json)?;
    for s in &result.seeds {
        let file = fs::File::create(dir.join(format!("R_seed{}.csv", s.seed)))?;
        s.matrix.write_csv(file)?;
    }
    let mut curve = csv::Writer::from_path(dir.join("curve.csv"))?;
    curve.write_record(["stage", "mean", "std"])?;
    for p in &result.curve {
        curve.write_record([p.stage.to_string(), p.mean.to_string(), p.std.to_string()])?;
    }
    curve.flush()?;
    let mut timing = fs::File::create(dir.join("timing.json"))?;
    writeln!(
        timing,
        "{}",
        serde_json::json!({ "wall_clock_secs": result.wall_clock_secs })
    )?;
    Ok(())
}
