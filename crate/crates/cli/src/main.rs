use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eagr::asynch::{compare_heads, AsyncEngine, InsertionReport, DEFAULT_TOLERANCE};
use eagr::detect::{decode_all, nms, Detection, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use eagr::events::{generate_synthetic, read_stream, write_stream, EventStream, Scene, SensorGeometry};
use eagr::graph::{build_graph, EventGraph};
use eagr::metrics::{aggregate_stats, dense_cost, round_sig9};
use eagr::network::{
    build_model, dense_forward, load_weights, save_weights, Architecture, Model, ModelConfig, ModelSize, ModelWeights,
    OpKind, WeightSource,
};
use serde_json::{json, Value};

/// Asynchronous event-graph inference: synthetic data, dense and incremental
/// passes, equivalence checks and cost statistics.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
#[derive(Parser, Debug)]
#[command(name = "eagr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a contrast-threshold sensor and write an event file.
    GenSynthetic(GenArgs),
    /// Build the event graph of a stream and print its size.
    BuildGraph(GraphArgs),
    /// Write randomly initialized weights for a model size.
    InitWeights(InitArgs),
    /// Run a from-scratch pass and write detections.
    InferDense(DenseArgs),
    /// Initialize on a prefix, then insert the remaining events one by one.
    InferAsync(AsyncArgs),
    /// Insert events one by one and audit the cache against dense passes.
    VerifyEquivalence(VerifyArgs),
    /// Compare the cost of a dense pass with the mean cost per insertion.
    Bench(BenchArgs),
    /// Aggregate insertion reports into per-layer statistics.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene name: bar, blob or dots.
    #[arg(long)]
    pattern: String,
    #[arg(long, default_value_t = 304)]
    width: u32,
    #[arg(long, default_value_t = 240)]
    height: u32,
    /// Log-intensity contrast threshold.
    #[arg(long, default_value_t = 0.15)]
    contrast: f64,
    #[arg(long, default_value_t = 100_000)]
    duration_us: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first N events.
    #[arg(long)]
    max_events: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Neighborhood radius in normalized coordinates.
    #[arg(long, default_value_t = 0.01)]
    radius: f64,
    #[arg(long, default_value_t = 16)]
    max_neighbors: usize,
    /// Include the in-degree histogram.
    #[arg(long)]
    stats: bool,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Model size: nano, small, medium or large.
    #[arg(long, default_value = "small")]
    config: ModelSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where the network weights come from.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Model size: nano, small, medium or large.
    #[arg(long, default_value = "small")]
    config: ModelSize,
    /// Weight container written by init-weights.
    #[arg(long, conflicts_with = "seed")]
    model: Option<PathBuf>,
    /// Use random weights from this seed instead of a weight file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DenseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    /// Detections JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    score_thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
}

#[derive(Args, Debug)]
struct AsyncArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    /// Events used for the initial dense pass.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Per-insertion reports JSON.
    #[arg(long)]
    report: PathBuf,
    /// Final detections JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    score_thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Audit the full cache every K insertions; head outputs are compared
    /// after every insertion.
    #[arg(long, default_value_t = 1)]
    every: usize,
    /// Relative tolerance.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt one cached value after warm-up; exercises the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    /// Events used for the initial dense pass; defaults to 80% of the stream.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Reports JSON written by infer-async.
    #[arg(long)]
    report: PathBuf,
    /// Output path; `.csv` selects CSV, anything else JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Data(String),
    Verification(String),
}

impl From<eagr::Error> for Failure {
    fn from(e: eagr::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::BuildGraph(a) => build_graph_cmd(a),
        Command::InitWeights(a) => init_weights(a),
        Command::InferDense(a) => infer_dense(a),
        Command::InferAsync(a) => infer_async(a),
        Command::VerifyEquivalence(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(3)
        }
    }
}

/// Rounds every float to nine significant digits; object keys are already
/// sorted by `serde_json`'s map.
fn canonical(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig9(n.as_f64().unwrap_or(0.0));
            serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, canonical(v))).collect()),
        other => other,
    }
}

fn to_value<T: serde::Serialize>(x: &T) -> Result<Value, Failure> {
    serde_json::to_value(x).map_err(|e| Failure::Data(e.to_string()))
}

/// Writes `v` to `path`, or prints it when there is no path.
fn emit(v: Value, path: Option<&Path>) -> Outcome {
    write_json(v, path, true)
}

fn write_json(v: Value, path: Option<&Path>, pretty: bool) -> Outcome {
    let v = canonical(v);
    let text = if pretty { serde_json::to_string_pretty(&v) } else { serde_json::to_string(&v) };
    let text = text.map_err(|e| Failure::Data(e.to_string()))? + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_input(p: &Path) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file", p.display())))
    }
}

fn check_output(p: &Path) -> Outcome {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure::Data(format!("{}: directory does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn check_outputs<'a>(paths: impl IntoIterator<Item = Option<&'a PathBuf>>) -> Outcome {
    paths.into_iter().flatten().try_for_each(|p| check_output(p))
}

fn load_model(args: &ModelArgs, geometry: SensorGeometry) -> Result<Model, Failure> {
    let config = ModelConfig::new(args.config, geometry);
    let source = match (&args.model, args.seed) {
        (Some(path), _) => {
            check_input(path)?;
            WeightSource::Weights(load_weights(path)?)
        }
        (None, seed) => WeightSource::Seed(seed.unwrap_or(0)),
    };
    Ok(build_model(&config, source)?)
}

fn read_input(path: &Path) -> Result<EventStream, Failure> {
    check_input(path)?;
    Ok(read_stream(path)?)
}

fn empty_graph(model: &Model) -> Result<EventGraph, Failure> {
    Ok(EventGraph::new(model.config.geometry, model.config.radius, model.config.max_neighbors)?)
}

/// Builds the graph of the first `warmup` events and starts an engine on it.
fn warm_engine<'m>(model: &'m Model, stream: &EventStream, warmup: usize) -> Result<AsyncEngine<'m>, Failure> {
    let mut graph = empty_graph(model)?;
    for e in &stream.events[..warmup.min(stream.len())] {
        graph.insert_event(e)?;
    }
    Ok(AsyncEngine::new(model, graph)?)
}

fn detections_json(d: &[Detection]) -> Value {
    Value::Array(
        d.iter()
            .map(|d| json!({"class": d.class, "score": d.score, "cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h, "head": d.head}))
            .collect(),
    )
}

fn check_thresholds(score: f64, iou: f64) -> Outcome {
    if !(0.0..=1.0).contains(&score) || !(iou > 0.0 && iou <= 1.0) {
        return Err(Failure::Data(format!(
            "score threshold must lie in [0, 1] and IoU threshold in (0, 1]; got {score} and {iou}"
        )));
    }
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Outcome {
    check_output(&a.out)?;
    let geometry = SensorGeometry::new(a.width, a.height)?;
    let scene = Scene::from_name(&a.pattern, geometry, a.duration_us, a.seed)?;
    let mut stream = generate_synthetic(geometry, &scene, a.contrast, a.duration_us)?;
    if let Some(n) = a.max_events {
        stream.events.truncate(n);
    }
    write_stream(&stream, &a.out)?;
    emit(
        json!({"events": stream.len(), "width": a.width, "height": a.height, "out": a.out.display().to_string()}),
        None,
    )
}

fn build_graph_cmd(a: GraphArgs) -> Outcome {
    let stream = read_input(&a.input)?;
    let graph = build_graph(&stream, a.radius, a.max_neighbors)?;
    let mut v = json!({"nodes": graph.len(), "edges": graph.edges().len()});
    if a.stats {
        v["in_degree_histogram"] = json!(graph.in_degree_histogram());
    }
    emit(v, None)
}

fn init_weights(a: InitArgs) -> Outcome {
    check_output(&a.out)?;
    // Weight shapes do not depend on the sensor size.
    let arch = Architecture::new(&ModelConfig::new(a.config, SensorGeometry::new(304, 240)?))?;
    let weights = ModelWeights::random(&arch, a.seed);
    save_weights(&weights, &a.out)?;
    emit(
        json!({"config": a.config.name(), "parameters": weights.parameter_count(), "seed": a.seed, "tensors": weights.len()}),
        None,
    )
}

fn infer_dense(a: DenseArgs) -> Outcome {
    check_thresholds(a.score_thresh, a.nms_iou)?;
    check_outputs([a.out.as_ref()])?;
    let stream = read_input(&a.input)?;
    let model = load_model(&a.model, stream.geometry)?;
    let graph = build_graph(&stream, model.config.radius, model.config.max_neighbors)?;
    let out = dense_forward(&model, &graph)?;
    let detections = nms(&decode_all(&out.heads, stream.geometry, a.score_thresh), a.nms_iou);
    emit(detections_json(&detections), a.out.as_deref())
}

fn infer_async(a: AsyncArgs) -> Outcome {
    check_thresholds(a.score_thresh, a.nms_iou)?;
    check_outputs([Some(&a.report), a.out.as_ref()])?;
    let stream = read_input(&a.input)?;
    let model = load_model(&a.model, stream.geometry)?;
    let mut engine = warm_engine(&model, &stream, a.warmup)?;
    let mut reports: Vec<InsertionReport> = Vec::new();
    for e in stream.events.iter().skip(a.warmup) {
        reports.push(engine.insert(e)?);
    }
    // Reports can run to many megabytes; keep them compact.
    write_json(to_value(&reports)?, Some(&a.report), false)?;
    if let Some(out) = &a.out {
        let detections = nms(&decode_all(&engine.head_outputs(), stream.geometry, a.score_thresh), a.nms_iou);
        emit(detections_json(&detections), Some(out))?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Outcome {
    check_outputs([a.out.as_ref()])?;
    if a.every == 0 {
        return Err(Failure::Data("--every must be at least 1".into()));
    }
    let stream = read_input(&a.input)?;
    let model = load_model(&a.model, stream.geometry)?;
    let mut engine = warm_engine(&model, &stream, a.warmup)?;
    if a.inject_fault {
        let conv = model.arch.ops.iter().position(|op| matches!(op.kind, OpKind::Conv { .. }));
        let hit = conv.is_some_and(|o| engine.cache_mut().corrupt_pre(o, 0, 0, 1e6));
        if !hit {
            return Err(Failure::Data("nothing to corrupt; use a non-zero --warmup".into()));
        }
    }
    let mut problems: Vec<Value> = Vec::new();
    let (mut inserted, mut audits) = (0usize, 0usize);
    for e in stream.events.iter().skip(a.warmup) {
        engine.insert(e)?;
        inserted += 1;
        let dense = dense_forward(&model, engine.graph())?;
        for d in compare_heads(&engine.head_outputs(), &dense.heads, a.tol) {
            problems.push(json!({"insertion": inserted, "what": d}));
        }
        if inserted % a.every == 0 {
            audits += 1;
            for d in engine.audit(a.tol)? {
                problems.push(json!({"insertion": inserted, "op": d.op, "node": d.node, "what": d.what}));
            }
        }
        if !problems.is_empty() {
            break;
        }
    }
    let ok = problems.is_empty();
    let n = problems.len();
    emit(
        json!({"insertions": inserted, "audits": audits, "tolerance": a.tol, "discrepancies": problems, "equivalent": ok}),
        a.out.as_deref(),
    )?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{n} discrepancies after {inserted} insertions")))
    }
}

fn bench(a: BenchArgs) -> Outcome {
    check_outputs([a.out.as_ref()])?;
    let stream = read_input(&a.input)?;
    let model = load_model(&a.model, stream.geometry)?;
    let warmup = a.warmup.unwrap_or(stream.len() * 4 / 5);
    let mut engine = warm_engine(&model, &stream, warmup)?;
    let reports: Vec<InsertionReport> = stream
        .events
        .iter()
        .skip(warmup)
        .map(|e| engine.insert(e))
        .collect::<Result<_, _>>()?;
    let dense = dense_forward(&model, engine.graph())?;
    let dense_flops = dense_cost(&model, &dense.state);
    let stats = aggregate_stats(&reports);
    let mean = stats.mean_flops();
    let ratio = if mean > 0.0 { dense_flops as f64 / mean } else { 0.0 };
    emit(
        json!({
            "config": model.config.size.name(),
            "graph_nodes": engine.graph().len(),
            "insertions": stats.insertions,
            "dense_flops": dense_flops,
            "mean_async_flops_per_event": mean,
            "dense_to_async_ratio": ratio,
            "phi": stats.phi(),
            "full_tree_prune_rate": stats.full_tree_prune_rate(),
            "voxel_prune_rate": stats.voxel_prune_rate(),
            "max_argmax_holders": stats.max_argmax_holders,
        }),
        a.out.as_deref(),
    )
}

fn stats(a: StatsArgs) -> Outcome {
    check_input(&a.report)?;
    check_outputs([a.out.as_ref()])?;
    let text = fs::read_to_string(&a.report).map_err(|e| Failure::Data(format!("{}: {e}", a.report.display())))?;
    let reports: Vec<InsertionReport> =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", a.report.display())))?;
    let stats = aggregate_stats(&reports);
    let csv = a.out.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")));
    if csv {
        let p = a.out.as_ref().unwrap();
        return fs::write(p, stats.to_csv()).map_err(|e| Failure::Data(format!("{}: {e}", p.display())));
    }
    let layers: Vec<Value> = stats
        .layers
        .iter()
        .map(|l| {
            json!({
                "layer": l.name,
                "op": l.op,
                "mean_flops": l.mean_flops(),
                "p_pos_change": l.p_position_change(),
                "p_feat_change": l.p_feature_change(),
                "p_any_change": l.p_any_change(),
                "prune_rate": l.prune_rate(),
            })
        })
        .collect();
    emit(
        json!({
            "insertions": stats.insertions,
            "mean_flops": stats.mean_flops(),
            "phi": stats.phi(),
            "full_tree_prune_rate": stats.full_tree_prune_rate(),
            "voxel_prune_rate": stats.voxel_prune_rate(),
            "max_argmax_holders": stats.max_argmax_holders,
            "layers": layers,
        }),
        a.out.as_deref(),
    )
}
