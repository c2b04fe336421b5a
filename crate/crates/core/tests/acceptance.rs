//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use eagr::asynch::{compare_heads, AsyncEngine, InsertionReport};
use eagr::events::{generate_synthetic, Event, EventStream, Scene, SensorGeometry};
use eagr::graph::{DirectedEdge, EventGraph};
use eagr::layers::{feature_prunable, voxel_max, Features, PoolSpec};
use eagr::metrics::{aggregate_stats, flops_per_message, ConvMode, RunStats};
use eagr::network::{
    build_model, dense_forward, dense_forward_spline, LayerKind, LayerWeights, Model, ModelConfig, ModelSize, OpKind,
    WeightSource,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EQUIVALENCE_TOL: f64 = 1e-4;
const LUT_ENTRY_TOL: f64 = 1e-6;
const LUT_HEAD_TOL: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sensor() -> SensorGeometry {
    SensorGeometry::new(304, 240).unwrap()
}

fn empty_graph(model: &Model) -> EventGraph {
    EventGraph::new(model.config.geometry, model.config.radius, model.config.max_neighbors).unwrap()
}

/// First `n` events of a synthetic scene; the duration grows until enough
/// events exist.
fn synthetic_prefix(scene_name: &str, seed: u64, n: usize) -> EventStream {
    let g = sensor();
    let mut duration = 20_000;
    loop {
        let scene = Scene::from_name(scene_name, g, duration, seed).unwrap();
        let s = generate_synthetic(g, &scene, 0.2, duration).unwrap();
        if s.len() >= n || duration > 2_000_000 {
            return EventStream::new(g, s.events.into_iter().take(n).collect()).unwrap();
        }
        duration *= 2;
    }
}

fn run_engine(model: &Model, events: &[Event]) -> Vec<InsertionReport> {
    let mut engine = AsyncEngine::new(model, empty_graph(model)).unwrap();
    events.iter().map(|e| engine.insert(e).unwrap()).collect()
}

// Asynchronous outputs equal a dense pass after every insertion.
fn equivalence() -> Outcome {
    let model = build_model(&ModelConfig::new(ModelSize::Small, sensor()), WeightSource::Seed(0)).unwrap();
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let n = ChaCha8Rng::seed_from_u64(seed).gen_range(1000..=2000);
        let name = Scene::NAMES[seed as usize % Scene::NAMES.len()];
        let stream = synthetic_prefix(name, seed, n);
        if stream.len() < 1000 {
            failures.push(format!("seed {seed}: only {} events", stream.len()));
            continue;
        }
        let warm = stream.len() * 4 / 5;
        let mut graph = empty_graph(&model);
        for e in &stream.events[..warm] {
            graph.insert_event(e).unwrap();
        }
        let mut engine = AsyncEngine::new(&model, graph).unwrap();
        for (i, e) in stream.events[warm..].iter().enumerate() {
            engine.insert(e).unwrap();
            let dense = dense_forward(&model, engine.graph()).unwrap();
            let diffs = compare_heads(&engine.head_outputs(), &dense.heads, EQUIVALENCE_TOL);
            checked += 1;
            if let Some(d) = diffs.first() {
                failures.push(format!("seed {seed} insertion {i}: {d}"));
                break;
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} insertions over 20 streams compared at rel tol {EQUIVALENCE_TOL}; failures: {failures:?}"),
    )
}

/// Weight matrix of a conv layer at an integer offset, evaluated from the raw
/// spline weights with hat-function bases over every knot.
fn spline_oracle(model: &Model, path: &str, level: usize, dx: i64, dy: i64) -> Vec<f64> {
    let g = model.config.geometry;
    let (w, h) = (f64::from(g.width), f64::from(g.height));
    let (rx, ry) = if level == 0 {
        ((model.config.radius * w).ceil(), (model.config.radius * h).ceil())
    } else {
        let (gx, gy) = (56u32 >> (level - 1), 40u32 >> (level - 1));
        (2.0 * w / f64::from(gx), 2.0 * h / f64::from(gy))
    };
    let ex = (dx as f64 / (2.0 * rx) + 0.5).clamp(0.0, 1.0);
    let ey = (dy as f64 / (2.0 * ry) + 0.5).clamp(0.0, 1.0);
    let Some(LayerWeights::Conv { kernel, bn }) = model.weights.get(path) else {
        panic!("{path} is not a conv layer");
    };
    let k = kernel.k;
    let hat = |u: f64, i: usize| (1.0 - (u * (k - 1) as f64 - i as f64).abs()).max(0.0);
    let mut out = vec![0.0; kernel.c_out * kernel.c_in];
    for ix in 0..k {
        for iy in 0..k {
            let b = hat(ex, ix) * hat(ey, iy);
            if b == 0.0 {
                continue;
            }
            let m = &kernel.control[ix * k + iy];
            for r in 0..kernel.c_out {
                for c in 0..kernel.c_in {
                    out[r * kernel.c_in + c] += b * m.get(r, c);
                }
            }
        }
    }
    for r in 0..kernel.c_out {
        let s = bn.gamma[r] / (bn.var[r] + bn.eps).sqrt();
        for c in 0..kernel.c_in {
            out[r * kernel.c_in + c] *= s;
        }
    }
    out
}

// Table entries equal the fused spline weights; LUT and spline passes agree.
fn lut_exactness() -> Outcome {
    let model = build_model(&ModelConfig::new(ModelSize::Nano, sensor()), WeightSource::Seed(3)).unwrap();
    let mut entries = 0usize;
    let mut worst = 0.0f64;
    for (l, spec) in model.arch.layers.iter().enumerate() {
        if spec.kind != LayerKind::Conv {
            continue;
        }
        let conv = model.conv(l);
        for &(dx, dy) in conv.offsets() {
            let m = conv.compute_entry(dx, dy).unwrap();
            let oracle = spline_oracle(&model, &spec.path, spec.level, dx, dy);
            for (a, b) in m.data().iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
            entries += 1;
        }
    }
    let stream = synthetic_prefix("dots", 5, 1500);
    let graph = eagr::graph::build_graph(&stream, model.config.radius, model.config.max_neighbors).unwrap();
    let lut = dense_forward(&model, &graph).unwrap();
    let spline = dense_forward_spline(&model, &graph).unwrap();
    let diffs = compare_heads(&lut.heads, &spline.heads, LUT_HEAD_TOL);
    let head_nodes: usize = lut.heads.iter().map(|h| h.nodes.len()).sum();
    outcome(
        worst <= LUT_ENTRY_TOL && diffs.is_empty() && head_nodes > 0,
        format!(
            "{entries} entries, max abs error {worst:.3e} (tol {LUT_ENTRY_TOL}); {head_nodes} head nodes, {} mismatches at rel tol {LUT_HEAD_TOL}",
            diffs.len()
        ),
    )
}

// Spline-to-LUT message cost ratio is (9c-1)/(2c-1).
fn cost_ratio() -> Outcome {
    let mut ok = true;
    let mut ratios = Vec::new();
    for c_in in [8u64, 16, 32, 64] {
        for c_out in [1u64, 16, 64] {
            let s = flops_per_message(ConvMode::Spline, 1, 2, c_in, c_out);
            let l = flops_per_message(ConvMode::Lut, 1, 2, c_in, c_out);
            ok &= s * (2 * c_in - 1) == l * (9 * c_in - 1);
            ok &= 10 * s >= 44 * l;
        }
        let s = flops_per_message(ConvMode::Spline, 1, 2, c_in, 1);
        let l = flops_per_message(ConvMode::Lut, 1, 2, c_in, 1);
        ratios.push(format!("c_in={c_in}: {s}/{l}={:.4}", s as f64 / l as f64));
    }
    outcome(ok, ratios.join(", "))
}

// Pre-pool layers add exactly one message per incoming edge of the new node.
fn constant_message_count() -> Outcome {
    let stream = synthetic_prefix("blob", 4, 1000);
    let mut ok = true;
    let mut lines = Vec::new();
    for depth in 1..=3 {
        let cfg = ModelConfig::new(ModelSize::Nano, sensor()).with_input_depth(depth);
        let model = build_model(&cfg, WeightSource::Seed(depth as u64)).unwrap();
        let reports = run_engine(&model, &stream.events);
        let mut bad = 0;
        let mut layers = 0;
        for r in &reports {
            let pre_pool: Vec<_> = r.conv_reports().filter(|l| l.level == 0).collect();
            layers = pre_pool.len();
            bad += pre_pool.iter().filter(|l| l.new_messages != r.in_degree).count();
        }
        let messages: u64 = reports.iter().map(|r| r.in_degree).sum();
        ok &= bad == 0 && layers == depth && reports.len() == 1000;
        lines.push(format!("depth {depth}: {layers} pre-pool convs, {messages} messages per layer, {bad} mismatches"));
    }
    outcome(ok, lines.join("; "))
}

/// Engineered stream: one fixed pixel per first-pool voxel, events in round
/// robin, each pixel cycling through a fixed polarity pattern.
fn repeated_pixels(per_pixel: usize) -> Vec<Event> {
    let pattern = [1i8, 1, -1];
    let pixels: Vec<(u16, u16)> = (0..5).flat_map(|i| (0..4).map(move |j| (20 + 60 * i, 20 + 60 * j))).collect();
    let mut out = Vec::new();
    let mut t = 0;
    for k in 0..per_pixel {
        for &(x, y) in &pixels {
            out.push(Event::new(x, y, t, pattern[k % pattern.len()]));
            t += 1;
        }
    }
    out
}

// Pruning never changes a voxel's output and stops most repeated events.
fn pruning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels = [-1.0, -0.5, 0.0, 0.25, 0.5, 1.0];
    let (mut violations, mut prunes, mut missed) = (0, 0, 0);
    for _ in 0..10_000 {
        let c = rng.gen_range(1..=16);
        let members = rng.gen_range(1..=12u32);
        let mut x = Features::new(c);
        for _ in 0..members {
            let row: Vec<f64> = (0..c).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
            x.push_row(&row);
        }
        let ids: Vec<u32> = (0..members).collect();
        let (mut max, mut arg) = (vec![0.0f64; c], vec![0u32; c]);
        voxel_max(&x, &ids, &mut max, &mut arg);
        let changed: Vec<u32> = ids.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
        for &m in &changed {
            for v in x.row_mut(m as usize) {
                if rng.gen_bool(0.5) {
                    *v = levels[rng.gen_range(0..levels.len())];
                }
            }
        }
        let prunable = feature_prunable(&max, &arg, changed.iter().map(|&m| (m, x.row(m as usize))));
        let (mut new_max, mut new_arg) = (vec![0.0f64; c], vec![0u32; c]);
        voxel_max(&x, &ids, &mut new_max, &mut new_arg);
        let same = new_arg == arg && new_max.iter().zip(&max).all(|(a, b)| a.to_bits() == b.to_bits());
        if prunable {
            prunes += 1;
            violations += usize::from(!same);
        } else if same {
            missed += 1;
        }
    }

    let model = build_model(&ModelConfig::new(ModelSize::Nano, sensor()), WeightSource::Seed(0)).unwrap();
    let events = repeated_pixels(100);
    let spec = PoolSpec::schedule(0, 16).unwrap();
    let mut per_voxel = std::collections::BTreeMap::new();
    for e in &events {
        let key = spec.voxel_key(eagr::graph::GridPosition::of_event(e), sensor());
        *per_voxel.entry(key).or_insert(0usize) += 1;
    }
    let min_per_voxel = per_voxel.values().copied().min().unwrap_or(0);
    let stats = aggregate_stats(&run_engine(&model, &events));
    let rate = stats.full_tree_prune_rate();
    outcome(
        violations == 0 && prunes > 0 && min_per_voxel >= 8 && rate > 0.5,
        format!(
            "fuzz: 10000 perturbations, {prunes} pruned, {violations} violations, {missed} conservative misses; \
             stream: {} events, >= {min_per_voxel} per voxel, full-tree prune rate {rate:.3} (need > 0.5)",
            events.len()
        ),
    )
}

/// Fixed pixels with random polarity and inter-event gaps.
fn fixed_pixels_random(seed: u64, n: usize) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<(u16, u16)> = (0..30).map(|_| (rng.gen_range(0..304), rng.gen_range(0..240))).collect();
    let mut t = 0;
    (0..n)
        .map(|_| {
            let (x, y) = pixels[rng.gen_range(0..pixels.len())];
            t += rng.gen_range(0..50);
            Event::new(x, y, t, if rng.gen_bool(0.5) { 1 } else { -1 })
        })
        .collect()
}

// Argmax holders are bounded by the channel count; pass-through grows with it.
fn pigeonhole() -> Outcome {
    let events = fixed_pixels_random(21, 1500);
    let mut ok = true;
    let mut phis = Vec::new();
    for c in [8usize, 16, 24, 32] {
        let cfg = ModelConfig::new(ModelSize::Nano, sensor()).with_c_early(c);
        let mut stats = RunStats::new();
        for seed in 0..4 {
            let model = build_model(&cfg, WeightSource::Seed(seed)).unwrap();
            stats.merge(&aggregate_stats(&run_engine(&model, &events)));
        }
        ok &= stats.max_argmax_holders as usize <= c;
        phis.push((c, stats.phi(), stats.max_argmax_holders));
    }
    let monotone = phis.windows(2).all(|w| w[1].1 >= w[0].1);
    let detail = phis
        .iter()
        .map(|(c, phi, h)| format!("c_out={c}: phi={phi:.4}, max holders={h}"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(ok && monotone, detail)
}

/// Edges of a stream by exhaustive search: every earlier event within the
/// radius, keeping the most recent `cap` by `(t, index)`.
fn batch_edges(events: &[Event], g: SensorGeometry, radius: f64, cap: usize) -> Vec<DirectedEdge> {
    let mut edges = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let mut src: Vec<(u64, usize)> = (0..i)
            .filter(|&j| {
                let o = &events[j];
                (f64::from(o.x) - f64::from(e.x)).abs() / f64::from(g.width) < radius
                    && (f64::from(o.y) - f64::from(e.y)).abs() / f64::from(g.height) < radius
                    && (e.t - o.t) as f64 * 1e-6 < radius
            })
            .map(|j| (events[j].t, j))
            .collect();
        src.sort_unstable_by(|a, b| b.cmp(a));
        src.truncate(cap);
        let mut src: Vec<usize> = src.into_iter().map(|(_, j)| j).collect();
        src.sort_unstable();
        edges.extend(src.into_iter().map(|j| DirectedEdge { src: j as u32, dst: i as u32 }));
    }
    edges
}

// Incremental graphs equal exhaustive construction; input offsets are 7x5.
fn graph_construction() -> Outcome {
    let g = sensor();
    let (radius, cap) = (0.01, 16);
    let (mut mismatches, mut bound_violations, mut max_degree) = (0, 0, 0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cx, cy) = (rng.gen_range(0..304i32), rng.gen_range(0..240i32));
        let mut t = 0;
        let events: Vec<Event> = (0..300)
            .map(|_| {
                let x = (cx + rng.gen_range(-8..=8)).clamp(0, 303) as u16;
                let y = (cy + rng.gen_range(-8..=8)).clamp(0, 239) as u16;
                t += rng.gen_range(0..200);
                Event::new(x, y, t, 1)
            })
            .collect();
        let mut graph = EventGraph::new(g, radius, cap).unwrap();
        for e in &events {
            graph.insert_event(e).unwrap();
        }
        if graph.edges() != batch_edges(&events, g, radius, cap).as_slice() {
            mismatches += 1;
        }
        for e in graph.edges() {
            let (a, b) = (&events[e.src as usize], &events[e.dst as usize]);
            let dx = (f64::from(a.x) - f64::from(b.x)).abs() / 304.0;
            let dy = (f64::from(a.y) - f64::from(b.y)).abs() / 240.0;
            let dt = (b.t - a.t) as f64 * 1e-6;
            if !(e.src < e.dst && a.t <= b.t && dx < radius && dy < radius && dt < radius) {
                bound_violations += 1;
            }
        }
        for i in 0..graph.len() {
            max_degree = max_degree.max(graph.neighbors_in(i).unwrap().len());
        }
    }
    let model = build_model(&ModelConfig::new(ModelSize::Nano, sensor()), WeightSource::Seed(0)).unwrap();
    let first = model.arch.layer_index("block1.conv1").unwrap();
    let offsets: BTreeSet<(i64, i64)> = model.conv(first).offsets().iter().copied().collect();
    let expected: BTreeSet<(i64, i64)> = (-3..=3).flat_map(|dx| (-2..=2).map(move |dy| (dx, dy))).collect();
    outcome(
        mismatches == 0 && bound_violations == 0 && max_degree <= cap && offsets == expected,
        format!(
            "100 streams: {mismatches} mismatches, {bound_violations} bound violations, max in-degree {max_degree}; \
             input offsets {} (expected 35 over dx -3..3, dy -2..2)",
            offsets.len()
        ),
    )
}

// Thirteen convolutions deep, four pooling grids, head capacities 140 and 35.
fn architecture() -> Outcome {
    let model = build_model(&ModelConfig::new(ModelSize::Small, sensor()), WeightSource::Seed(0)).unwrap();
    let arch = &model.arch;
    let grids: Vec<(u32, u32)> = arch
        .ops
        .iter()
        .filter_map(|op| match op.kind {
            OpKind::Pool { pool, .. } => Some((arch.pools[pool].gx, arch.pools[pool].gy)),
            _ => None,
        })
        .collect();
    let depth = arch.conv_depth();
    let caps = arch.head_capacities();
    outcome(
        depth == 13 && grids == [(56, 40), (28, 20), (14, 10), (7, 5)] && caps == [140, 35],
        format!(
            "conv depth {depth}, {} conv layers in total, pooling grids {grids:?}, head capacities {caps:?}",
            arch.conv_layer_count()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 8] = [
        ("1 async/dense equivalence", equivalence),
        ("2 lut exactness", lut_exactness),
        ("3 message cost ratio", cost_ratio),
        ("4 constant pre-pool message count", constant_message_count),
        ("5 pruning soundness and effectiveness", pruning),
        ("6 pigeonhole bound", pigeonhole),
        ("7 graph construction", graph_construction),
        ("8 architecture audit", architecture),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
