use eagr::asynch::rows_close;
use eagr::events::{generate_synthetic, EventStream, Scene, SensorGeometry};
use eagr::graph::build_graph;
use eagr::network::{build_model, dense_forward, HeadOutput, ModelConfig, ModelSize, WeightSource};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream(g: SensorGeometry, n: usize) -> EventStream {
    let scene = Scene::from_name("dots", g, 60_000, 1).unwrap();
    let s = generate_synthetic(g, &scene, 0.2, 60_000).unwrap();
    EventStream::new(g, s.events.into_iter().take(n).collect()).unwrap()
}

fn sorted_by_voxel(heads: &[HeadOutput]) -> Vec<Vec<(u32, u32, Vec<f64>)>> {
    heads
        .iter()
        .map(|h| {
            let mut v: Vec<_> = h
                .nodes
                .iter()
                .map(|n| {
                    let mut vals = n.reg.to_vec();
                    vals.extend(&n.cls);
                    vals.push(n.obj);
                    (n.voxel.0, n.voxel.1, vals)
                })
                .collect();
            v.sort_by_key(|a| (a.0, a.1));
            v
        })
        .collect()
}

#[test]
fn node_order_does_not_change_head_outputs() {
    let g = SensorGeometry::new(304, 240).unwrap();
    let cfg = ModelConfig::new(ModelSize::Nano, g).with_c_early(8);
    let model = build_model(&cfg, WeightSource::Seed(5)).unwrap();
    let graph = build_graph(&stream(g, 600), cfg.radius, cfg.max_neighbors).unwrap();
    let mut order: Vec<usize> = (0..graph.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let shuffled = graph.relabeled(&order).unwrap();

    let a = sorted_by_voxel(&dense_forward(&model, &graph).unwrap().heads);
    let b = sorted_by_voxel(&dense_forward(&model, &shuffled).unwrap().heads);
    assert_eq!(a.len(), b.len());
    for (ha, hb) in a.iter().zip(&b) {
        assert!(!ha.is_empty());
        assert_eq!(ha.len(), hb.len());
        for (x, y) in ha.iter().zip(hb) {
            assert_eq!((x.0, x.1), (y.0, y.1));
            assert!(rows_close(&x.2, &y.2, 1e-9), "{x:?} vs {y:?}");
        }
    }
}

#[test]
fn parameter_count_grows_with_size() {
    let g = SensorGeometry::new(304, 240).unwrap();
    let counts: Vec<usize> = ModelSize::ALL
        .iter()
        .map(|&s| build_model(&ModelConfig::new(s, g), WeightSource::Seed(0)).unwrap().parameter_count())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}
