use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use mvfn_core::bench::bench_attention;
use mvfn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mvfn_core::data::{
    bin_demand, chronological_split, ingest_trip_records, make_windows, parse_timestamp, DatasetSplit, DemandTensor,
    NodeAssignment, PreparedWindows, TimeFormat, DEFAULT_INTERVAL_SECS,
};
use mvfn_core::graph::{build_correlation_adjacency, load_adjacency, normalize_adjacency, AdjacencyMatrix};
use mvfn_core::metrics::{
    evaluate, format_table, predict_all, Forecaster, HistoricalAverage, MetricReport, ModelForecaster,
};
use mvfn_core::model::{Mvfn, MvfnConfig};
use mvfn_core::synth::{generate, SynthConfig};
use mvfn_core::train::{initial_checkpoint, random_gradient_check, train as run_training, TrainConfig, TrainingData};
use serde::{Deserialize, Serialize};

use crate::{
    BenchArgs, Context, EvalArgs, Failure, GradcheckArgs, GraphArgs, ModelFlags, PredictArgs, PrepareArgs,
    ReportFormat, SplitName, TrainArgs,
};

const MANIFEST: &str = "split.json";
const CHECKPOINT: &str = "checkpoint.mvfn";
const TRAIN_LOG: &str = "train_log.jsonl";
const DEFAULT_K: usize = 8;
const DEFAULT_STEPS: usize = 12;

/// Written by `prepare`, read by every later command.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    source: String,
    nodes: usize,
    steps: usize,
    start_time: i64,
    interval_secs: i64,
    val_weeks: usize,
    test_weeks: usize,
    train_range: Range<usize>,
    validation_range: Range<usize>,
    test_range: Range<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ingest: Option<IngestStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestStats {
    records: usize,
    rejected_rows: usize,
    unassigned_endpoints: usize,
    out_of_span_endpoints: usize,
}

struct Prepared {
    manifest: Manifest,
    split: DatasetSplit,
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn required(value: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| Failure::validation(format!("{what} is required")))
}

fn data_dir(ctx: &Context, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    required(flag.or_else(|| ctx.file.data.dir.clone()), "--data (or [data] dir)")
}

fn steps(ctx: &Context) -> (usize, usize) {
    let m = &ctx.file.model;
    (
        m.input_steps.unwrap_or(DEFAULT_STEPS),
        m.output_steps.unwrap_or(DEFAULT_STEPS),
    )
}

fn stride(ctx: &Context, flag: Option<usize>) -> Result<usize, Failure> {
    match flag.or(ctx.file.data.stride).unwrap_or(1) {
        0 => Err(Failure::validation("stride must be at least 1")),
        s => Ok(s),
    }
}

fn load_prepared(dir: &Path) -> Result<Prepared, Failure> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Failure::validation(format!(
            "cannot read {}: {e} (run `mvfn prepare` first)",
            path.display()
        ))
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let split = DatasetSplit {
        train: DemandTensor::load(dir.join("train.bin"))?,
        validation: DemandTensor::load(dir.join("validation.bin"))?,
        test: DemandTensor::load(dir.join("test.bin"))?,
        train_range: manifest.train_range.clone(),
        validation_range: manifest.validation_range.clone(),
        test_range: manifest.test_range.clone(),
    };
    Ok(Prepared { manifest, split })
}

fn parse_bound(raw: &Option<String>, what: &str) -> Result<Option<i64>, Failure> {
    raw.as_deref()
        .map(|s| {
            parse_timestamp(s, TimeFormat::Iso8601).map_err(|e| Failure::validation(format!("[data] {what}: {e}")))
        })
        .transpose()
}

pub fn prepare(ctx: &Context, a: PrepareArgs) -> Result<(), Failure> {
    let d = &ctx.file.data;
    let out = required(a.out.or_else(|| d.dir.clone()), "--out (or [data] dir)")?;
    let interval = a.interval_secs.or(d.interval_secs).unwrap_or(DEFAULT_INTERVAL_SECS);
    let val_weeks = a.val_weeks.or(d.val_weeks).unwrap_or(2);
    let test_weeks = a.test_weeks.or(d.test_weeks).unwrap_or(2);
    let (p, q) = steps(ctx);
    if interval <= 0 {
        return Err(Failure::validation(format!(
            "interval_secs must be positive, got {interval}"
        )));
    }

    let (tensor, ingest, adjacency, source) = if a.synthetic {
        let ds = generate(&SynthConfig {
            nodes: a.nodes,
            days: a.days,
            interval_secs: interval,
            seed: ctx.seed,
            ..Default::default()
        })?;
        (ds.tensor, None, Some(ds.adjacency), "synthetic".to_string())
    } else {
        let mut missing = Vec::new();
        let trips = a.trips.or_else(|| d.trips.clone());
        let nodes = a.node_map.or_else(|| d.nodes.clone());
        if trips.is_none() {
            missing.push("--trips (or [data] trips) is required".to_string());
        }
        if nodes.is_none() {
            missing.push("--node-map (or [data] nodes) is required".to_string());
        }
        if d.schema.is_none() {
            missing.push("[data.schema] is required to read trips".to_string());
        }
        if !missing.is_empty() {
            return Err(Failure::validation(missing.join("; ")));
        }
        let (trips, nodes, schema) = (trips.unwrap(), nodes.unwrap(), d.schema.clone().unwrap());
        let assignment = NodeAssignment::load(&nodes)?;
        let report = ingest_trip_records(&trips, &schema)?;
        let recs = &report.records;
        let first = recs.iter().map(|r| r.pickup_time.min(r.dropoff_time)).min();
        let last = recs.iter().map(|r| r.pickup_time.max(r.dropoff_time)).max();
        let start = match (parse_bound(&d.start, "start")?, first) {
            (Some(s), _) => s,
            (None, Some(t)) => t.div_euclid(interval) * interval,
            (None, None) => return Err(Failure::validation("no trip records and no [data] start")),
        };
        let end = match (parse_bound(&d.end, "end")?, last) {
            (Some(e), _) => e,
            (None, Some(t)) => (t.div_euclid(interval) + 1) * interval,
            (None, None) => return Err(Failure::validation("no trip records and no [data] end")),
        };
        let binned = bin_demand(recs, interval, &assignment, (start, end))?;
        log::info!(
            "{} records, {} rejected rows, {} unassigned and {} out-of-span endpoints",
            recs.len(),
            report.rejects.len(),
            binned.unassigned,
            binned.out_of_span
        );
        let stats = IngestStats {
            records: recs.len(),
            rejected_rows: report.rejects.len(),
            unassigned_endpoints: binned.unassigned,
            out_of_span_endpoints: binned.out_of_span,
        };
        (binned.tensor, Some(stats), None, trips.display().to_string())
    };

    let split = chronological_split(&tensor, val_weeks, test_weeks, p, q)?;
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    split.train.save(out.join("train.bin"))?;
    split.validation.save(out.join("validation.bin"))?;
    split.test.save(out.join("test.bin"))?;
    if let Some(adj) = adjacency {
        write_text(&out.join("adjacency.csv"), &adj.to_edge_list())?;
    }
    let manifest = Manifest {
        source,
        nodes: tensor.node_count(),
        steps: tensor.time_steps(),
        start_time: tensor.start_time,
        interval_secs: tensor.interval_secs,
        val_weeks,
        test_weeks,
        train_range: split.train_range.clone(),
        validation_range: split.validation_range.clone(),
        test_range: split.test_range.clone(),
        ingest,
    };
    let json = to_json_pretty(&manifest);
    write_text(&out.join(MANIFEST), &format!("{json}\n"))?;
    emit(&format!("{json}\n"))?;
    Ok(())
}

fn default_k(nodes: usize) -> usize {
    DEFAULT_K.min(nodes.saturating_sub(1)).max(1)
}

pub fn graph(ctx: &Context, a: GraphArgs) -> Result<(), Failure> {
    let dir = data_dir(ctx, a.data)?;
    let prep = load_prepared(&dir)?;
    let k =
        a.k.or(ctx.file.graph.k)
            .unwrap_or_else(|| default_k(prep.manifest.nodes));
    let adj = build_correlation_adjacency(&prep.split.train, k)?;
    let out = a.out.unwrap_or_else(|| dir.join("adjacency_knn.csv"));
    write_text(&out, &adj.to_edge_list())?;
    emit(&format!(
        "{}\n",
        to_json(&serde_json::json!({ "path": out, "nodes": adj.node_count(), "edges": adj.edges().len(), "k": k }))
    ))?;
    Ok(())
}

/// Flag, then config file, then the data directory's own graph, then correlation kNN.
fn resolve_adjacency(
    ctx: &Context,
    flag: Option<PathBuf>,
    dir: &Path,
    prep: &Prepared,
) -> Result<AdjacencyMatrix, Failure> {
    let n = prep.manifest.nodes;
    let local = dir.join("adjacency.csv");
    let path = flag
        .or_else(|| ctx.file.graph.adjacency.clone())
        .or_else(|| local.exists().then_some(local));
    match path {
        Some(p) => {
            log::info!("adjacency from {}", p.display());
            Ok(load_adjacency(&p, n)?)
        }
        None => {
            let k = ctx.file.graph.k.unwrap_or_else(|| default_k(n));
            log::info!("no adjacency file; building correlation kNN with k={k}");
            Ok(build_correlation_adjacency(&prep.split.train, k)?)
        }
    }
}

fn model_config(ctx: &Context, flags: &ModelFlags, nodes: usize) -> MvfnConfig {
    let m = &ctx.file.model;
    let mut cfg = MvfnConfig::new(nodes);
    let (p, q) = steps(ctx);
    cfg.input_steps = p;
    cfg.output_steps = q;
    cfg.st_layers = flags
        .st_layers
        .map(|v| v as usize)
        .or(m.st_layers)
        .unwrap_or(cfg.st_layers);
    cfg.flags = flags.resolve(m);
    cfg.seed = ctx.seed;
    cfg
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), Failure> {
    let dir = data_dir(ctx, a.data.clone())?;
    let out = required(
        a.out.clone().or_else(|| ctx.file.output.dir.clone()),
        "--out (or [output] dir)",
    )?;
    let prep = load_prepared(&dir)?;
    let t = &ctx.file.train;
    let stride = stride(ctx, a.stride)?;

    let state = match &a.resume {
        Some(path) => {
            let mut ck = load_checkpoint(path)?;
            if a.model.any() {
                log::warn!("model flags are ignored when resuming; the checkpoint fixes the architecture");
            }
            if let Some(e) = a.epochs.or(t.epochs) {
                ck.train_config.epochs = e;
            }
            if let Some(p) = a.patience.or(t.patience) {
                ck.train_config.patience = Some(p);
            }
            if ck.config.nodes != prep.manifest.nodes {
                return Err(Failure::validation(format!(
                    "checkpoint expects {} nodes, data has {}",
                    ck.config.nodes, prep.manifest.nodes
                )));
            }
            ck
        }
        None => {
            let cfg = model_config(ctx, &a.model, prep.manifest.nodes);
            let d = TrainConfig::default();
            let tc = TrainConfig {
                epochs: a.epochs.or(t.epochs).unwrap_or(d.epochs),
                batch_size: a.batch_size.or(t.batch_size).unwrap_or(d.batch_size),
                lr: a.lr.or(t.lr).unwrap_or(d.lr),
                seed: ctx.seed,
                patience: a.patience.or(t.patience),
                clip_norm: a.clip_norm.or(t.clip_norm),
            };
            // report every config problem at once
            let mut errs = Vec::new();
            for r in [cfg.validate(), tc.validate()] {
                match r {
                    Err(mvfn_core::Error::Config(v)) => errs.extend(v),
                    Err(e) => errs.push(e.to_string()),
                    Ok(()) => {}
                }
            }
            if !errs.is_empty() {
                return Err(Failure::validation(errs.join("; ")));
            }
            let adj = resolve_adjacency(ctx, a.adjacency.clone(), &dir, &prep)?;
            let scaler = mvfn_core::data::ScalerStats::fit(&prep.split.train)?;
            initial_checkpoint(cfg, tc, adj, scaler)?
        }
    };
    let (p, q) = (state.config.input_steps, state.config.output_steps);
    let windows = PreparedWindows::from_split(&prep.split, p, q, stride)?;
    let scaler = state.scaler.clone().unwrap_or_else(|| windows.scaler.clone());
    if scaler != windows.scaler {
        log::warn!("checkpoint scaler differs from the one fitted on this training split");
    }
    let data = TrainingData {
        train: &windows.train,
        validation: &windows.validation,
        scaler: &scaler,
    };

    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    let mut log_err = None;
    let outcome = run_training(state, &data, |r| {
        let line = to_json(r);
        // a closed stdout must not stop training; the log file is the record
        let _ = emit(&format!("{line}\n"));
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_failure(&log_path, e));
    }
    let ckpt_path = out.join(CHECKPOINT);
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let ck = &outcome.checkpoint;
    log::info!(
        "wrote {} (epoch {}, best epoch {} with val rmse {:?})",
        ckpt_path.display(),
        ck.epoch,
        ck.best.epoch,
        ck.best.val_rmse
    );
    match outcome.aborted {
        Some(e) => Err(Failure::runtime(format!(
            "training aborted: {e}; last good state saved to {}",
            ckpt_path.display()
        ))),
        None => Ok(()),
    }
}

/// The model a checkpoint describes, with its best parameters.
struct LoadedModel {
    model: Mvfn,
    ckpt: Checkpoint,
}

impl LoadedModel {
    fn load(path: &Path) -> Result<Self, Failure> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.scaler.is_none() {
            return Err(Failure::validation(format!("{} carries no scaler", path.display())));
        }
        let model = Mvfn::new(ckpt.config.clone(), normalize_adjacency(&ckpt.adjacency))?;
        Ok(Self { model, ckpt })
    }

    fn forecaster(&self) -> ModelForecaster<'_> {
        ModelForecaster {
            model: &self.model,
            params: &self.ckpt.best.params,
            scaler: self.ckpt.scaler.as_ref().expect("checked on load"),
        }
    }
}

fn split_tensor(prep: &Prepared, which: SplitName) -> (&DemandTensor, &'static str) {
    match which {
        SplitName::Validation => (&prep.split.validation, "validation"),
        SplitName::Test => (&prep.split.test, "test"),
    }
}

#[derive(Serialize)]
struct MethodReport {
    method: String,
    #[serde(flatten)]
    metrics: MetricReport,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), Failure> {
    let dir = data_dir(ctx, a.data)?;
    let prep = load_prepared(&dir)?;
    let loaded = a.checkpoint.as_deref().map(LoadedModel::load).transpose()?;
    let (p, q) = match &loaded {
        Some(l) => (l.ckpt.config.input_steps, l.ckpt.config.output_steps),
        None => steps(ctx),
    };
    if let Some(l) = &loaded {
        if l.ckpt.config.nodes != prep.manifest.nodes {
            return Err(Failure::validation(format!(
                "checkpoint expects {} nodes, data has {}",
                l.ckpt.config.nodes, prep.manifest.nodes
            )));
        }
    }
    let (tensor, name) = split_tensor(&prep, a.split);
    let windows = make_windows(tensor, p, q, stride(ctx, a.stride)?);
    let mut results = vec![MethodReport {
        method: "HA".into(),
        metrics: evaluate(&HistoricalAverage { horizon: q }, &windows)?,
    }];
    if let Some(l) = &loaded {
        let fc = l.forecaster();
        results.push(MethodReport {
            method: fc.name(),
            metrics: evaluate(&fc, &windows)?,
        });
    }
    let report = serde_json::json!({ "split": name, "windows": windows.len(), "results": results });
    if let Some(path) = &a.out {
        write_text(path, &format!("{}\n", to_json_pretty(&report)))?;
    }
    match a.format {
        ReportFormat::Json => emit(&format!("{}\n", to_json_pretty(&report)))?,
        ReportFormat::Table => {
            let rows: Vec<(String, MetricReport)> = results.into_iter().map(|r| (r.method, r.metrics)).collect();
            emit(&format_table(&rows))?;
        }
    }
    Ok(())
}

pub fn predict(ctx: &Context, a: PredictArgs) -> Result<(), Failure> {
    let dir = data_dir(ctx, a.data)?;
    let prep = load_prepared(&dir)?;
    let loaded = LoadedModel::load(&a.checkpoint)?;
    let cfg = &loaded.ckpt.config;
    if cfg.nodes != prep.manifest.nodes {
        return Err(Failure::validation(format!(
            "checkpoint expects {} nodes, data has {}",
            cfg.nodes, prep.manifest.nodes
        )));
    }
    let (tensor, _) = split_tensor(&prep, a.split);
    let windows = make_windows(tensor, cfg.input_steps, cfg.output_steps, stride(ctx, a.stride)?);
    let preds = predict_all(&loaded.forecaster(), &windows)?;
    let mut csv = String::from("t0,time,step,node,feature,prediction,target\n");
    for (w, pred) in windows.iter().zip(&preds) {
        for ((step, node, feat), v) in pred.indexed_iter() {
            let time = tensor.start_time + (w.t0 + cfg.input_steps + step) as i64 * tensor.interval_secs;
            let feature = if feat == 0 { "pickup" } else { "dropoff" };
            csv.push_str(&format!(
                "{},{time},{step},{node},{feature},{v},{}\n",
                w.t0,
                w.target[[step, node, feat]]
            ));
        }
    }
    write_text(&a.out, &csv)?;
    emit(&format!(
        "{}\n",
        to_json(&serde_json::json!({ "path": a.out, "windows": windows.len() }))
    ))?;
    Ok(())
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<(), Failure> {
    if a.batch == 0 || a.nodes == 0 {
        return Err(Failure::validation("--nodes and --batch must be at least 1"));
    }
    let cfg = model_config(ctx, &a.model, a.nodes);
    let report = random_gradient_check(&cfg, a.batch, a.step, a.tolerance)?;
    let summary = serde_json::json!({
        "model": cfg.flags.label(),
        "coordinates": report.total,
        "passed": report.passed,
        "pass_fraction": report.pass_fraction(),
        "failures": report.failures.len(),
        "unexplained_failures": report.unexplained(),
        "tolerance": report.tolerance,
        "step": report.step,
        "ok": report.ok(),
        "worst": &report.failures[..report.failures.len().min(a.worst)],
    });
    emit(&format!("{}\n", to_json_pretty(&summary)))?;
    if report.ok() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "gradient check failed: {:.4}% within tolerance, {} failures not near a kink",
            100.0 * report.pass_fraction(),
            report.unexplained()
        )))
    }
}

pub fn bench_attn(ctx: &Context, a: BenchArgs) -> Result<(), Failure> {
    if a.lengths.len() < 2 || a.lengths.contains(&0) || a.width == 0 {
        return Err(Failure::validation(
            "need at least two positive --lengths and a positive --width",
        ));
    }
    let report = bench_attention(&a.lengths, a.width, a.rounds, ctx.seed)?;
    let slopes = format!(
        "# naive_slope={:.4}\n# linear_slope={:.4}\n",
        report.naive_slope, report.linear_slope
    );
    match &a.out {
        Some(path) => {
            write_text(path, &format!("{}{slopes}", report.to_csv()))?;
            emit(&format!(
                "{}\n",
                to_json(&serde_json::json!({
                    "path": path,
                    "naive_slope": report.naive_slope,
                    "linear_slope": report.linear_slope,
                }))
            ))?;
        }
        None => emit(&format!("{}{slopes}", report.to_csv()))?,
    }
    Ok(())
}
