use std::collections::HashSet;

use crate::events::SensorGeometry;
use crate::graph::{DirectedEdge, EventGraph, GridPosition};

/// The graph one group of layers runs on: the input event graph, or the
/// output of a pooling layer. Edges are kept in creation order and are
/// unique; bidirectional pairs are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGraph {
    geometry: SensorGeometry,
    positions: Vec<GridPosition>,
    incoming: Vec<Vec<u32>>,
    outgoing: Vec<Vec<u32>>,
    edges: Vec<DirectedEdge>,
    edge_set: HashSet<(u32, u32)>,
}

impl LevelGraph {
    pub fn new(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            positions: Vec::new(),
            incoming: Vec::new(),
            outgoing: Vec::new(),
            edges: Vec::new(),
            edge_set: HashSet::new(),
        }
    }

    pub fn from_event_graph(graph: &EventGraph) -> Self {
        let mut level = Self::new(graph.geometry());
        for node in graph.nodes() {
            level.push_node(node.position);
        }
        for e in graph.edges() {
            level.add_edge(e.src, e.dst);
        }
        level
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[GridPosition] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> GridPosition {
        self.positions[i]
    }

    pub fn set_position(&mut self, i: usize, p: GridPosition) {
        self.positions[i] = p;
    }

    pub fn incoming(&self, i: usize) -> &[u32] {
        &self.incoming[i]
    }

    pub fn outgoing(&self, i: usize) -> &[u32] {
        &self.outgoing[i]
    }

    pub fn edges(&self) -> &[DirectedEdge] {
        &self.edges
    }

    pub fn has_edge(&self, src: u32, dst: u32) -> bool {
        self.edge_set.contains(&(src, dst))
    }

    pub fn push_node(&mut self, p: GridPosition) -> u32 {
        self.positions.push(p);
        self.incoming.push(Vec::new());
        self.outgoing.push(Vec::new());
        (self.positions.len() - 1) as u32
    }

    /// Adds `src -> dst` unless it already exists; returns whether it was new.
    pub fn add_edge(&mut self, src: u32, dst: u32) -> bool {
        if !self.edge_set.insert((src, dst)) {
            return false;
        }
        self.edges.push(DirectedEdge { src, dst });
        self.incoming[dst as usize].push(src);
        self.outgoing[src as usize].push(dst);
        true
    }

    /// Normalized `(x / W, y / H)` of node `i`.
    pub fn normalized_xy(&self, i: usize) -> (f64, f64) {
        let p = self.positions[i];
        (
            p.x as f64 / f64::from(self.geometry.width),
            p.y as f64 / f64::from(self.geometry.height),
        )
    }

    pub fn edge_set(&self) -> &HashSet<(u32, u32)> {
        &self.edge_set
    }
}
