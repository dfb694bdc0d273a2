use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{content_hash, read_manifest, OutputDir, Precision, Seeds, Workspace};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::{json_diff, ExperimentConfig, MethodName};
use crate::data::{assign_labels, Corpus, Domain};
use crate::error::{Error, Result};
use crate::eval::{
    calibrate, collect_logits, compute_penalty, eval_losses, fit_scaling, grad_norm_study, group_gradients, leakage, loss_histogram,
    mean_loss, median, per_token_losses, CalibrationResult, EvalLosses, GradNormSummary,
    LeakageReport, ScalingFit,
};
use crate::model::ParamSet;
use crate::partition::{ablate, build_designation, Tag};
use crate::tensor::Float;
use crate::train::{finetune_attack, run_rmu, train, RunRecord, RunStatus};

macro_rules! with_precision {
    ($p:expr, $f:ident($($a:expr),* $(,)?)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    UndiscoveredRate,
    TprFprGrid,
    ModelSize,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::UndiscoveredRate => "undiscovered_rate",
            SweepAxis::TprFprGrid => "tpr_fpr_grid",
            SweepAxis::ModelSize => "model_size",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Finetune,
    Rmu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Tradeoff,
    Leakage,
    Gradnorms,
    Pertoken,
    Scaling,
}

impl Report {
    fn name(self) -> &'static str {
        match self {
            Report::Tradeoff => "tradeoff",
            Report::Leakage => "leakage",
            Report::Gradnorms => "gradnorms",
            Report::Pertoken => "pertoken",
            Report::Scaling => "scaling",
        }
    }
}

/// Forget loss a fine-tuning attack has to reach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Loss(f64),
    /// A model whose forget test loss defines the target.
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
    /// True when the directory already held a finished run.
    pub reused: bool,
}

fn seeds(c: &ExperimentConfig) -> Seeds {
    Seeds { seed: c.seed, corpus_seed: c.corpus_seed, label_seed: c.labels.seed }
}

pub fn run_dir(ws: &Workspace, config: &ExperimentConfig) -> PathBuf {
    let prec = match ws.precision {
        Precision::F32 => String::new(),
        Precision::F64 => "-f64".into(),
    };
    ws.out.join("runs").join(format!("{}{prec}-s{}", &config.hash()[..12], config.seed))
}

fn read_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join("record.json");
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { path, reason: e.to_string() })
}

fn meta_for(config: &ExperimentConfig, step: usize, ablated: bool) -> CheckpointMeta {
    CheckpointMeta {
        model: config.model.clone(),
        partition: match config.train.method {
            MethodName::Sgtm => config.partition.clone(),
            _ => None,
        },
        step,
        seed: config.seed,
        ablated,
        experiment: Some(serde_json::to_value(config).expect("config serializes")),
    }
}

/// Trains one run into its content-addressed directory, or returns the
/// finished run already there.
pub fn cmd_train(ws: &Workspace, config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = run_dir(ws, config);
    let Some(mut out) = OutputDir::create(dir.clone())? else {
        let record = read_record(&dir)?;
        return Ok(TrainOutcome { dir, record, reused: true });
    };
    let record = with_precision!(ws.precision, train_into(&mut out, config))?;
    out.finish("train", config.hash(), ws.precision, seeds(config))?;
    match &record.status {
        RunStatus::Completed => Ok(TrainOutcome { dir, record, reused: false }),
        RunStatus::Diverged { step, reason } => Err(Error::Diverged { step: *step, reason: reason.clone() }),
    }
}

fn train_into<T: Float>(out: &mut OutputDir, config: &ExperimentConfig) -> Result<RunRecord> {
    fs::write(out.file("config.toml")?, config.to_toml_string())?;
    let corpus = Corpus::generate(&config.data, config.corpus_seed)?;
    let dataset = assign_labels(&corpus.train, &config.labels)?;
    dataset.write_labels_csv(&out.file("labels.csv")?)?;
    let plan = config.train_plan()?;
    let init = ParamSet::<T>::init(&config.model, config.seed);
    let output = train(&config.model, &plan, &dataset, &corpus.test, init, None)?;
    let record = output.record;
    out.write_csv("metrics.csv", &record.metrics)?;
    out.write_json("record.json", &record)?;
    for (step, p) in &output.checkpoints {
        checkpoint::save(&out.file(format!("checkpoints/step-{step:06}.ckpt"))?, &meta_for(config, *step, false), p)?;
    }
    let last = record.last().step;
    checkpoint::save(&out.file("final.ckpt")?, &meta_for(config, last, false), &output.params)?;
    if let (MethodName::Sgtm, Some(spec)) = (config.train.method, &config.partition) {
        let d = build_designation(&config.model, spec)?;
        checkpoint::save(&out.file("final-ablated.ckpt")?, &meta_for(config, last, true), &ablate(&output.params, &d)?)?;
    }
    Ok(record)
}

#[derive(Serialize)]
struct SweepRow {
    point: usize,
    axis: &'static str,
    value: String,
    run_dir: String,
    n_params: usize,
    undiscovered_forget_tokens: u64,
    loss_forget_test: f64,
    loss_retain_test: f64,
    loss_related_test: f64,
}

fn sweep_points(config: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(String, ExperimentConfig)>> {
    let s = &config.sweep;
    let points: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::UndiscoveredRate => s
            .undiscovered_rates
            .iter()
            .map(|&r| {
                let mut c = config.clone();
                c.labels.tpr = 1.0 - r;
                (format!("{r}"), c)
            })
            .collect(),
        SweepAxis::TprFprGrid => s
            .tpr
            .iter()
            .flat_map(|&tpr| s.fpr.iter().map(move |&fpr| (tpr, fpr)))
            .map(|(tpr, fpr)| {
                let mut c = config.clone();
                c.labels.tpr = tpr;
                c.labels.fpr = fpr;
                (format!("tpr={tpr} fpr={fpr}"), c)
            })
            .collect(),
        SweepAxis::ModelSize => s
            .model_sizes
            .iter()
            .map(|m| {
                let mut c = config.clone();
                c.model.n_layers = m.n_layers;
                c.model.d_model = m.d_model;
                c.model.d_mlp = m.d_mlp;
                c.model.n_heads = m.n_heads;
                (format!("d_model={} n_layers={}", m.d_model, m.n_layers), c)
            })
            .collect(),
    };
    if points.is_empty() {
        return Err(Error::config(format!("sweep axis {} has no points", axis.name())));
    }
    for (_, c) in &points {
        c.validate()?;
    }
    Ok(points)
}

/// Trains every point of a sweep (up to `ws.threads` at once) and writes an
/// index `sweep.csv` into the sweep's own directory.
pub fn cmd_sweep(ws: &Workspace, config: &ExperimentConfig, axis: SweepAxis) -> Result<(PathBuf, Vec<TrainOutcome>)> {
    let points = sweep_points(config, axis)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainOutcome>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..ws.threads.clamp(1, points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = cmd_train(ws, &points[i].1);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let outcomes = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<Result<Vec<_>>>()?;
    let dir = ws.out.join("sweeps").join(format!(
        "{}-{}-s{}",
        axis.name(),
        content_hash(&(config.hash(), axis, ws.precision)),
        config.seed
    ));
    if let Some(mut out) = OutputDir::create(dir.clone())? {
        fs::write(out.file("config.toml")?, config.to_toml_string())?;
        let rows = points.iter().zip(&outcomes).enumerate().map(|(i, ((value, _), o))| {
            let last = o.record.last();
            SweepRow {
                point: i,
                axis: axis.name(),
                value: value.clone(),
                run_dir: o.dir.display().to_string(),
                n_params: o.record.n_params,
                undiscovered_forget_tokens: o.record.undiscovered_forget_tokens,
                loss_forget_test: last.loss_forget_test,
                loss_retain_test: last.loss_retain_test,
                loss_related_test: last.loss_related_test,
            }
        });
        out.write_csv("sweep.csv", rows)?;
        for o in &outcomes {
            out.input(&o.dir);
        }
        out.finish(&format!("sweep {}", axis.name()), config.hash(), ws.precision, seeds(config))?;
    }
    Ok((dir, outcomes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// The checkpoint's own experiment config, or `given` after checking that it
/// describes the same model and partition.
fn resolve_experiment(meta: &CheckpointMeta, given: Option<&ExperimentConfig>, path: &Path) -> Result<ExperimentConfig> {
    match given {
        Some(c) => {
            let mine = serde_json::to_value((&meta.model, meta.partition.as_ref()))?;
            let theirs = serde_json::to_value((&c.model, meta.partition.as_ref().and(c.partition.as_ref())))?;
            let diff = json_diff(&mine, &theirs);
            if !diff.is_empty() {
                return Err(Error::Schema(format!(
                    "config does not describe checkpoint {} (checkpoint != config):\n{}",
                    path.display(),
                    diff.join("\n")
                )));
            }
            Ok(c.clone())
        }
        None => {
            let value = meta.experiment.clone().ok_or_else(|| {
                Error::contract(format!("checkpoint {} carries no experiment config; pass --config", path.display()))
            })?;
            let c: ExperimentConfig = serde_json::from_value(value)
                .map_err(|e| Error::Schema(format!("embedded experiment config: {e}")))?;
            c.validate()?;
            Ok(c)
        }
    }
}

/// Parameters to evaluate: ablated when the checkpoint has a partition and
/// is not ablated yet.
fn evaluated<T: Float>(ck: &Checkpoint<T>) -> Result<ParamSet<T>> {
    match (&ck.designation, ck.meta.ablated) {
        (Some(d), false) => ablate(&ck.params, d),
        _ => Ok(ck.params.clone()),
    }
}

fn derived_dir(ckpt: &Path, command: &str, params: &impl Serialize) -> Result<PathBuf> {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    let h = content_hash(&(command, params, file_digest(ckpt)?));
    Ok(parent.join("derived").join(format!("{stem}.{command}-{h}")))
}

/// Writes the ablated checkpoint next to `ckpt` (or to `output`); never
/// replaces a different existing file.
pub fn cmd_ablate(ws: &Workspace, ckpt: &Path, output: Option<&Path>) -> Result<PathBuf> {
    with_precision!(ws.precision, ablate_impl(ckpt, output))
}

fn ablate_impl<T: Float>(ckpt: &Path, output: Option<&Path>) -> Result<PathBuf> {
    let ck = checkpoint::load::<T>(ckpt)?;
    let desig = ck.designation.as_ref().ok_or_else(|| {
        Error::contract(format!("checkpoint {} was not trained with a partition; nothing to ablate", ckpt.display()))
    })?;
    let ablated = ablate(&ck.params, desig)?;
    let target = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            ckpt.with_file_name(format!("{stem}-ablated.ckpt"))
        }
    };
    if target.exists() {
        let existing = checkpoint::load::<T>(&target)?;
        if existing.params == ablated {
            return Ok(target);
        }
        return Err(Error::contract(format!("refusing to overwrite {}", target.display())));
    }
    checkpoint::save(&target, &CheckpointMeta { ablated: true, ..ck.meta.clone() }, &ablated)?;
    Ok(target)
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    checkpoint: PathBuf,
    ablated_before_calibration: bool,
    result: CalibrationResult,
    related_before: f64,
    related_after: f64,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    objective: f64,
}

pub fn cmd_calibrate(ws: &Workspace, ckpt: &Path, given: Option<&ExperimentConfig>) -> Result<PathBuf> {
    with_precision!(ws.precision, calibrate_impl(ws, ckpt, given))
}

fn calibrate_impl<T: Float>(ws: &Workspace, ckpt: &Path, given: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let ck = checkpoint::load::<T>(ckpt)?;
    let exp = resolve_experiment(&ck.meta, given, ckpt)?;
    let dir = derived_dir(ckpt, "calibrate", &(&exp, ws.precision))?;
    let Some(mut out) = OutputDir::create(dir.clone())? else { return Ok(dir) };
    out.input(ckpt);
    let params = evaluated(&ck)?;
    let corpus = Corpus::generate(&exp.data, exp.corpus_seed)?;
    let m = &exp.model;
    let f = collect_logits(m, &params, &corpus.test.forget)?;
    let r = collect_logits(m, &params, &corpus.test.retain)?;
    let rel = collect_logits(m, &params, &corpus.test.related)?;
    let result = calibrate(&f, &r, &exp.analysis.calibration)?;
    let file = CalibrationFile {
        checkpoint: ckpt.to_path_buf(),
        ablated_before_calibration: ck.designation.is_some() || ck.meta.ablated,
        related_before: rel.mean_loss(None),
        related_after: rel.mean_loss(Some(&result.logit_bias)),
        result,
    };
    let trace = file.result.objective.iter().enumerate().map(|(iteration, &objective)| TraceRow { iteration, objective });
    out.write_csv("calibration_trace.csv", trace)?;
    out.write_json("calibration.json", &file)?;
    out.finish("calibrate", exp.hash(), ws.precision, seeds(&exp))?;
    Ok(dir)
}

fn domain_pool(corpus: &Corpus, d: Domain) -> Vec<Vec<u32>> {
    corpus.train.iter().filter(|e| e.domain == d).map(|e| e.tokens.clone()).collect()
}

pub fn cmd_attack(
    ws: &Workspace,
    ckpt: &Path,
    mode: AttackMode,
    baseline: Option<&Baseline>,
    given: Option<&ExperimentConfig>,
) -> Result<PathBuf> {
    with_precision!(ws.precision, attack_impl(ws, ckpt, mode, baseline, given))
}

fn attack_impl<T: Float>(
    ws: &Workspace,
    ckpt: &Path,
    mode: AttackMode,
    baseline: Option<&Baseline>,
    given: Option<&ExperimentConfig>,
) -> Result<PathBuf> {
    let ck = checkpoint::load::<T>(ckpt)?;
    let exp = resolve_experiment(&ck.meta, given, ckpt)?;
    let corpus = Corpus::generate(&exp.data, exp.corpus_seed)?;
    let (forget, retain) = (domain_pool(&corpus, Domain::Forget), domain_pool(&corpus, Domain::Retain));
    let params = evaluated(&ck)?;
    match mode {
        AttackMode::Finetune => {
            let baseline = baseline.ok_or_else(|| Error::config("the fine-tuning attack needs a baseline"))?;
            let target = match baseline {
                Baseline::Loss(l) => *l,
                Baseline::Checkpoint(p) => {
                    let b = checkpoint::load::<T>(p)?;
                    mean_loss(&b.meta.model, &evaluated(&b)?, &corpus.test.forget)?
                }
            };
            let dir = derived_dir(ckpt, "attack-finetune", &(&exp.attack.finetune, target, ws.precision))?;
            let Some(mut out) = OutputDir::create(dir.clone())? else { return Ok(dir) };
            out.input(ckpt);
            if let Baseline::Checkpoint(p) = baseline {
                out.input(p);
            }
            let (_, report) =
                finetune_attack(&exp.model, &params, &exp.attack.finetune, &forget, &retain, &corpus.test.forget, target)?;
            out.write_csv("attack.csv", &report.curve)?;
            out.write_json("report.json", &report)?;
            out.finish("attack finetune", exp.hash(), ws.precision, seeds(&exp))?;
            Ok(dir)
        }
        AttackMode::Rmu => {
            let dir = derived_dir(ckpt, "attack-rmu", &(&exp.attack.rmu, ws.precision))?;
            let Some(mut out) = OutputDir::create(dir.clone())? else { return Ok(dir) };
            out.input(ckpt);
            let (model, record, trace) = run_rmu(&exp.model, &params, &exp.attack.rmu, &forget, &retain, &corpus.test)?;
            out.write_csv("metrics.csv", &record.metrics)?;
            out.write_csv("rmu_trace.csv", &trace)?;
            out.write_json("record.json", &record)?;
            let meta = CheckpointMeta { step: exp.attack.rmu.steps, ablated: ck.meta.ablated || ck.designation.is_some(), ..ck.meta.clone() };
            checkpoint::save(&out.file("rmu.ckpt")?, &meta, &model)?;
            out.finish("attack rmu", exp.hash(), ws.precision, seeds(&exp))?;
            Ok(dir)
        }
    }
}

/// A finished training run on disk.
struct RunOnDisk {
    dir: PathBuf,
    config: ExperimentConfig,
    record: RunRecord,
}

fn open_run(dir: &Path) -> Result<RunOnDisk> {
    if read_manifest(dir)?.is_none() {
        return Err(Error::contract(format!("{} is not a finished run directory", dir.display())));
    }
    Ok(RunOnDisk { dir: dir.to_path_buf(), config: ExperimentConfig::load(&dir.join("config.toml"))?, record: read_record(dir)? })
}

/// Run directories named directly or through a sweep's `sweep.csv`.
fn expand_runs(paths: &[PathBuf]) -> Result<Vec<RunOnDisk>> {
    let mut runs = Vec::new();
    for p in paths {
        let index = p.join("sweep.csv");
        if index.exists() {
            let mut r = csv::Reader::from_path(&index)?;
            let headers = r.headers()?.clone();
            let col = headers.iter().position(|h| h == "run_dir").ok_or_else(|| Error::Format {
                path: index.clone(),
                reason: "no run_dir column".into(),
            })?;
            for rec in r.records() {
                runs.push(open_run(Path::new(&rec?[col]))?);
            }
        } else {
            runs.push(open_run(p)?);
        }
    }
    Ok(runs)
}

fn final_losses(r: &RunRecord) -> EvalLosses {
    let l = r.last();
    EvalLosses { forget: l.loss_forget_test, retain: l.loss_retain_test, related: l.loss_related_test }
}

#[derive(Serialize)]
struct TradeoffRow {
    step: usize,
    tokens_retain: u64,
    tokens_forget: u64,
    loss_forget: f64,
    loss_retain: f64,
    loss_related: f64,
    loss_forget_calibrated: Option<f64>,
    loss_retain_calibrated: Option<f64>,
    loss_related_calibrated: Option<f64>,
}

#[derive(Serialize)]
struct CurvePoint {
    run_dir: String,
    forget_tokens: f64,
    forget_loss: f64,
}

#[derive(Serialize)]
struct LeakageFile<'a> {
    run_dir: &'a Path,
    report: &'a LeakageReport,
    curve: &'a [CurvePoint],
}

#[derive(Serialize)]
struct PerTokenRow {
    position: usize,
    loss: f64,
    loss_calibrated: Option<f64>,
}

#[derive(Serialize)]
struct HistogramRow {
    bin: usize,
    lo: f64,
    hi: f64,
    count: u64,
    count_calibrated: Option<u64>,
}

#[derive(Serialize)]
struct PerTokenSummary {
    tokens: usize,
    mean: f64,
    median: f64,
    mean_calibrated: Option<f64>,
    median_calibrated: Option<f64>,
}

#[derive(Serialize)]
struct ScalingFile {
    fit: ScalingFit,
    points: Vec<(f64, EvalLosses)>,
    run_compute: f64,
    run_losses: EvalLosses,
    /// Extra baseline compute saved (positive) or needed (negative) to
    /// match the run's loss, as a fraction of the run's compute.
    compute_penalty: EvalLosses,
}

/// Writes one report for a finished run; see `docs/FORMATS.md`.
pub fn cmd_analyze(ws: &Workspace, run: &Path, report: Report, baselines: &[PathBuf]) -> Result<PathBuf> {
    with_precision!(ws.precision, analyze_impl(ws, run, report, baselines))
}

fn analyze_impl<T: Float>(ws: &Workspace, run: &Path, report: Report, baselines: &[PathBuf]) -> Result<PathBuf> {
    let r = open_run(run)?;
    let toggles = &r.config.analysis;
    let dir = r.dir.join("analysis").join(format!(
        "{}-{}",
        report.name(),
        content_hash(&(report, baselines, toggles, ws.precision))
    ));
    // leakage may train baseline runs; do that before taking the lock
    let curve_runs = match report {
        Report::Leakage => Some(leakage_baselines(ws, &r, baselines)?),
        Report::Scaling => Some(expand_runs(baselines)?),
        _ => None,
    };
    let Some(mut out) = OutputDir::create(dir.clone())? else { return Ok(dir) };
    out.input(&r.dir);
    for b in curve_runs.iter().flatten() {
        out.input(&b.dir);
    }
    let corpus = Corpus::generate(&r.config.data, r.config.corpus_seed)?;
    let model = &r.config.model;
    let calibrated = |params: &ParamSet<T>| -> Result<Option<(CalibrationResult, f64)>> {
        if !toggles.calibrate {
            return Ok(None);
        }
        let f = collect_logits(model, params, &corpus.test.forget)?;
        let rt = collect_logits(model, params, &corpus.test.retain)?;
        let rel = collect_logits(model, params, &corpus.test.related)?;
        let c = calibrate(&f, &rt, &toggles.calibration)?;
        let related = rel.mean_loss(Some(&c.logit_bias));
        Ok(Some((c, related)))
    };
    match report {
        Report::Tradeoff => {
            let mut ckpts: Vec<PathBuf> = match fs::read_dir(r.dir.join("checkpoints")) {
                Ok(entries) => entries.filter_map(|e| e.ok().map(|e| e.path())).collect(),
                Err(_) => Vec::new(),
            };
            ckpts.sort();
            if ckpts.is_empty() {
                ckpts.push(r.dir.join("final.ckpt"));
            }
            let mut rows = Vec::new();
            for p in &ckpts {
                let ck = checkpoint::load::<T>(p)?;
                let params = evaluated(&ck)?;
                let raw = eval_losses(model, &params, &corpus.test)?;
                let cal = calibrated(&params)?;
                let m = r.record.metrics.iter().find(|m| m.step == ck.meta.step);
                rows.push(TradeoffRow {
                    step: ck.meta.step,
                    tokens_retain: m.map_or(0, |m| m.tokens_retain),
                    tokens_forget: m.map_or(0, |m| m.tokens_forget),
                    loss_forget: raw.forget,
                    loss_retain: raw.retain,
                    loss_related: raw.related,
                    loss_forget_calibrated: cal.as_ref().map(|c| c.0.forget_after),
                    loss_retain_calibrated: cal.as_ref().map(|c| c.0.retain_after),
                    loss_related_calibrated: cal.as_ref().map(|c| c.1),
                });
            }
            out.write_csv("tradeoff.csv", rows)?;
        }
        Report::Leakage => {
            let runs = curve_runs.expect("leakage baselines");
            let mut curve: Vec<CurvePoint> = runs
                .iter()
                .map(|b| CurvePoint {
                    run_dir: b.dir.display().to_string(),
                    forget_tokens: b.record.last().tokens_forget as f64,
                    forget_loss: b.record.last().loss_forget_test,
                })
                .collect();
            curve.sort_by(|a, b| a.forget_tokens.total_cmp(&b.forget_tokens));
            let points: Vec<(f64, f64)> = curve.iter().map(|p| (p.forget_tokens, p.forget_loss)).collect();
            let rep = leakage(r.record.last().loss_forget_test, r.record.undiscovered_forget_tokens as f64, &points)?;
            out.write_csv("leakage_curve.csv", &curve)?;
            out.write_json("leakage.json", &LeakageFile { run_dir: &r.dir, report: &rep, curve: &curve })?;
        }
        Report::Gradnorms => {
            let ck = checkpoint::load::<T>(&r.dir.join("final.ckpt"))?;
            let desig = ck
                .designation
                .as_ref()
                .ok_or_else(|| Error::contract("gradient norms need a run trained with a partition"))?;
            let n = toggles.gradnorm_examples;
            let examples: Vec<(Domain, Vec<u32>)> = corpus.test.forget.iter().take(n).map(|s| (Domain::Forget, s.clone()))
                .chain(corpus.test.retain.iter().take(n).map(|s| (Domain::Retain, s.clone())))
                .collect();
            let rows = grad_norm_study(model, &ck.params, desig, &examples)?;
            out.write_csv("gradnorms.csv", &rows)?;
            if toggles.raw_gradients {
                let mut bytes = Vec::new();
                for (_, seq) in &examples {
                    let (f, r) = group_gradients(model, &ck.params, desig, seq)?;
                    bytes.extend(f.iter().chain(&r).flat_map(|x| (*x as f32).to_le_bytes()));
                }
                fs::write(out.file("gradients.f32")?, bytes)?;
                let shape = serde_json::json!({
                    "rows": examples.len(),
                    "forget_len": desig.count(Tag::Forget),
                    "retain_len": desig.count(Tag::Retain),
                });
                out.write_json("gradients.json", &shape)?;
            }
            out.write_json("summary.json", &GradNormSummary::from_rows(&rows))?;
        }
        Report::Pertoken => {
            let ck = checkpoint::load::<T>(&r.dir.join("final.ckpt"))?;
            let params = evaluated(&ck)?;
            let cache = collect_logits(model, &params, &corpus.test.forget)?;
            let raw = per_token_losses(&cache, None);
            let cal = calibrated(&params)?.map(|(c, _)| per_token_losses(&cache, Some(&c.logit_bias)));
            let rows = raw.iter().enumerate().map(|(i, &loss)| PerTokenRow {
                position: i,
                loss,
                loss_calibrated: cal.as_ref().map(|c| c[i]),
            });
            out.write_csv("pertoken.csv", rows)?;
            let bins = toggles.histogram_bins.max(1);
            let h = loss_histogram(&raw, model.vocab_size, bins);
            let hc = cal.as_ref().map(|c| loss_histogram(c, model.vocab_size, bins));
            let width = (h.hi - h.lo) / bins as f64;
            let rows = (0..bins).map(|b| HistogramRow {
                bin: b,
                lo: h.lo + b as f64 * width,
                hi: h.lo + (b + 1) as f64 * width,
                count: h.counts[b],
                count_calibrated: hc.as_ref().map(|h| h.counts[b]),
            });
            out.write_csv("histogram.csv", rows)?;
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            out.write_json(
                "summary.json",
                &PerTokenSummary {
                    tokens: raw.len(),
                    mean: mean(&raw),
                    median: median(&raw),
                    mean_calibrated: cal.as_deref().map(mean),
                    median_calibrated: cal.as_deref().map(median),
                },
            )?;
        }
        Report::Scaling => {
            let runs = curve_runs.expect("scaling baselines");
            let points: Vec<(f64, EvalLosses)> = runs.iter().map(|b| (b.record.last().flops, final_losses(&b.record))).collect();
            let fit = fit_scaling(&points)?;
            let c = r.record.last().flops;
            let run_losses = final_losses(&r.record);
            let compute_penalty = EvalLosses {
                forget: compute_penalty(run_losses.forget, &fit.forget, c),
                retain: compute_penalty(run_losses.retain, &fit.retain, c),
                related: compute_penalty(run_losses.related, &fit.related, c),
            };
            out.write_json("scaling.json", &ScalingFile { fit, points, run_compute: c, run_losses, compute_penalty })?;
        }
    }
    out.finish(&format!("analyze {}", report.name()), r.config.hash(), ws.precision, seeds(&r.config))?;
    Ok(dir)
}

/// Standard runs forming the leakage curve: the given ones, or the
/// configured grid of forget-token fractions trained on the run's data.
/// A standard run being analyzed joins its own curve.
fn leakage_baselines(ws: &Workspace, r: &RunOnDisk, given: &[PathBuf]) -> Result<Vec<RunOnDisk>> {
    let mut runs = if given.is_empty() {
        let mut v = Vec::new();
        for &f in &r.config.analysis.leakage_grid {
            let mut c = r.config.clone();
            c.train.method = MethodName::FilterWeak;
            c.train.keep_checkpoints = false;
            c.partition = None;
            c.labels.tpr = 1.0 - f;
            c.labels.fpr = 0.0;
            let o = cmd_train(ws, &c)?;
            v.push(RunOnDisk { dir: o.dir, config: c, record: o.record });
        }
        v
    } else {
        expand_runs(given)?
    };
    if r.config.train.method != MethodName::Sgtm && !runs.iter().any(|b| b.dir == r.dir) {
        runs.push(open_run(&r.dir)?);
    }
    Ok(runs)
}
