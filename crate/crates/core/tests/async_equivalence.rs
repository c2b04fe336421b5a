use eagr::asynch::{compare_heads, AsyncEngine, DEFAULT_TOLERANCE};
use eagr::events::{Event, SensorGeometry};
use eagr::graph::EventGraph;
use eagr::metrics::insertion_cost;
use eagr::network::{build_model, dense_forward, Model, ModelConfig, ModelSize, WeightSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::new(ModelSize::Nano, SensorGeometry::new(64, 48).unwrap())
        .with_c_early(4)
        .with_radius(0.05);
    cfg.c_wide = 6;
    build_model(&cfg, WeightSource::Seed(seed)).unwrap()
}

/// Events clustered around a few pixels so that nodes share voxels and
/// neighborhoods.
fn clustered(seed: u64, n: usize, g: SensorGeometry) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(i32, i32)> = (0..4)
        .map(|_| (rng.gen_range(0..g.width as i32), rng.gen_range(0..g.height as i32)))
        .collect();
    let mut t = 0;
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.gen_range(0..centers.len())];
            let x = (cx + rng.gen_range(-3..=3)).clamp(0, g.width as i32 - 1);
            let y = (cy + rng.gen_range(-3..=3)).clamp(0, g.height as i32 - 1);
            t += rng.gen_range(0..3);
            Event::new(x as u16, y as u16, t, if rng.gen_bool(0.5) { 1 } else { -1 })
        })
        .collect()
}

#[test]
fn every_insertion_matches_a_dense_pass() {
    for seed in 0..3 {
        let model = small_model(seed);
        let g = model.config.geometry;
        let graph = EventGraph::new(g, model.config.radius, model.config.max_neighbors).unwrap();
        let mut engine = AsyncEngine::new(&model, graph).unwrap();
        let (mut moved, mut pruned, mut changed) = (0, 0, 0);
        for (i, e) in clustered(seed + 10, 120, g).iter().enumerate() {
            let report = engine.insert(e).unwrap();
            moved += report.layers.iter().map(|l| l.position_changed).sum::<u64>();
            changed += report.layers.iter().map(|l| l.feature_changed).sum::<u64>();
            pruned += report.pool_reports().filter_map(|l| l.pool.as_ref()).map(|p| p.pruned).sum::<u64>();
            let dense = dense_forward(&model, engine.graph()).unwrap();
            let diffs = compare_heads(&engine.head_outputs(), &dense.heads, DEFAULT_TOLERANCE);
            assert!(diffs.is_empty(), "seed {seed} event {i}: {diffs:?}");
            if i % 20 == 19 {
                let audit = engine.audit(DEFAULT_TOLERANCE).unwrap();
                assert!(audit.is_empty(), "seed {seed} event {i}: {audit:?}");
            }
            let recomputed = insertion_cost(&report.layers);
            let reported: Vec<u64> = report.layers.iter().map(|l| l.flops).collect();
            assert_eq!(recomputed, reported);
        }
        assert!(moved > 0 && pruned > 0 && changed > 0, "{moved} {pruned} {changed}");
        assert!(engine.head_outputs().iter().all(|h| !h.nodes.is_empty()));
    }
}

#[test]
fn starting_from_a_prefix_cache_gives_the_same_result() {
    let model = small_model(7);
    let g = model.config.geometry;
    let events = clustered(3, 80, g);
    let mut graph = EventGraph::new(g, model.config.radius, model.config.max_neighbors).unwrap();
    for e in &events[..40] {
        graph.insert_event(e).unwrap();
    }
    let mut engine = AsyncEngine::new(&model, graph).unwrap();
    for e in &events[40..] {
        engine.insert(e).unwrap();
    }
    assert!(engine.audit(DEFAULT_TOLERANCE).unwrap().is_empty());
}

#[test]
fn corrupted_cache_is_reported() {
    let model = small_model(1);
    let g = model.config.geometry;
    let graph = EventGraph::new(g, model.config.radius, model.config.max_neighbors).unwrap();
    let mut engine = AsyncEngine::new(&model, graph).unwrap();
    for e in &clustered(5, 30, g) {
        engine.insert(e).unwrap();
    }
    assert!(engine.audit(DEFAULT_TOLERANCE).unwrap().is_empty());
    let conv = model
        .arch
        .ops
        .iter()
        .position(|op| op.name == "block1.conv1")
        .unwrap();
    assert!(engine.cache_mut().corrupt_pre(conv, 3, 0, 1e6));
    let found = engine.audit(DEFAULT_TOLERANCE).unwrap();
    assert!(found.iter().any(|d| d.op == "block1.conv1" && d.node == Some(3)), "{found:?}");
}

#[test]
fn identical_streams_give_identical_reports() {
    let model = small_model(2);
    let g = model.config.geometry;
    let run = || {
        let graph = EventGraph::new(g, model.config.radius, model.config.max_neighbors).unwrap();
        let mut engine = AsyncEngine::new(&model, graph).unwrap();
        clustered(9, 50, g).iter().map(|e| engine.insert(e).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
