use std::collections::BTreeSet;

use eagr::events::{read_stream, write_stream, Event, EventStream, SensorGeometry};
use eagr::graph::{build_graph, EventGraph};
use proptest::prelude::*;

const R: f64 = 0.01;
const CAP: usize = 16;

fn geom() -> SensorGeometry {
    SensorGeometry::new(304, 240).unwrap()
}

/// Sorted events near one spot, so that neighborhoods fill up.
fn events_strategy(max_len: usize) -> impl Strategy<Value = Vec<Event>> {
    (0u16..290, 0u16..226).prop_flat_map(move |(cx, cy)| {
        prop::collection::vec((0u16..14, 0u16..14, 0u64..1500, any::<bool>()), 0..max_len).prop_map(move |raw| {
            let mut t = 0;
            raw.into_iter()
                .map(|(dx, dy, gap, p)| {
                    t += gap;
                    Event::new(cx + dx, cy + dy, t, if p { 1 } else { -1 })
                })
                .collect()
        })
    })
}

/// Every earlier event within `R` on all three axes, most recent `CAP` kept.
fn brute_force_sources(events: &[Event], i: usize) -> Vec<u32> {
    let e = events[i];
    let close = |o: &Event| {
        (f64::from(o.x) - f64::from(e.x)).abs() / 304.0 < R
            && (f64::from(o.y) - f64::from(e.y)).abs() / 240.0 < R
            && (e.t - o.t) as f64 * 1e-6 < R
    };
    let mut src: Vec<(u64, usize)> = (0..i).filter(|&j| close(&events[j])).map(|j| (events[j].t, j)).collect();
    src.sort_unstable_by(|a, b| b.cmp(a));
    src.truncate(CAP);
    let mut out: Vec<u32> = src.into_iter().map(|(_, j)| j as u32).collect();
    out.sort_unstable();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn incremental_construction_matches_brute_force(events in events_strategy(400)) {
        let stream = EventStream::new(geom(), events.clone()).unwrap();
        let batch = build_graph(&stream, R, CAP).unwrap();
        let mut inc = EventGraph::new(geom(), R, CAP).unwrap();
        for (i, e) in events.iter().enumerate() {
            let (idx, new_edges) = inc.insert_event(e).unwrap();
            prop_assert_eq!(idx, i);
            let srcs: Vec<u32> = new_edges.iter().map(|e| e.src).collect();
            prop_assert_eq!(&srcs, &brute_force_sources(&events, i));
            prop_assert!(srcs.len() <= CAP);
        }
        prop_assert_eq!(inc.edges(), batch.edges());
        for e in batch.edges() {
            let (a, b) = (events[e.src as usize], events[e.dst as usize]);
            prop_assert!(e.src < e.dst && a.t <= b.t);
        }
    }

    #[test]
    fn adjacency_lists_match_the_edge_sequence(events in events_strategy(50)) {
        let stream = EventStream::new(geom(), events.clone()).unwrap();
        let g = build_graph(&stream, R, CAP).unwrap();
        for i in 0..g.len() {
            let ins: BTreeSet<u32> = g.edges().iter().filter(|e| e.dst as usize == i).map(|e| e.src).collect();
            let outs: BTreeSet<u32> = g.edges().iter().filter(|e| e.src as usize == i).map(|e| e.dst).collect();
            prop_assert_eq!(g.neighbors_in(i).unwrap().iter().copied().collect::<BTreeSet<_>>(), ins);
            prop_assert_eq!(g.neighbors_out(i).unwrap().iter().copied().collect::<BTreeSet<_>>(), outs);
        }
    }

    #[test]
    fn file_round_trip_is_identity(events in events_strategy(200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.evb");
        let stream = EventStream::new(geom(), events).unwrap();
        write_stream(&stream, &path).unwrap();
        prop_assert_eq!(read_stream(&path).unwrap(), stream);
    }
}

#[test]
fn outgoing_edges_never_revisit_a_node() {
    // Strictly increasing timestamps: edges point forward in index, so any
    // walk along outgoing edges is strictly increasing.
    let events: Vec<Event> = (0..500u64).map(|t| Event::new((100 + t % 5) as u16, (100 + t % 3) as u16, t, 1)).collect();
    let g = build_graph(&EventStream::new(geom(), events).unwrap(), R, CAP).unwrap();
    let mut state = vec![0u8; g.len()];
    fn visit(g: &EventGraph, i: usize, state: &mut [u8]) -> bool {
        if state[i] == 1 {
            return false;
        }
        if state[i] == 2 {
            return true;
        }
        state[i] = 1;
        for &j in g.neighbors_out(i).unwrap() {
            if !visit(g, j as usize, state) {
                return false;
            }
        }
        state[i] = 2;
        true
    }
    for i in 0..g.len() {
        assert!(visit(&g, i, &mut state));
    }
    assert!(g.edges().len() > 1000);
}

#[test]
fn synthetic_stream_round_trips_through_a_file() {
    use eagr::events::{generate_synthetic, Scene};
    let scene = Scene::from_name("dots", geom(), 100_000, 4).unwrap();
    let s = generate_synthetic(geom(), &scene, 0.2, 100_000).unwrap();
    let s = EventStream::new(geom(), s.events.into_iter().take(1000).collect()).unwrap();
    assert_eq!(s.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.evb");
    write_stream(&s, &path).unwrap();
    assert_eq!(read_stream(&path).unwrap(), s);
}
