//! Directed spatiotemporal event graph.
//!
//! Node `j` feeds node `i` when their normalized positions differ by less
//! than `R` in every component (Chebyshev norm) and `j` precedes `i` in
//! time. Equal timestamps are ordered by stream position, so the earlier
//! event is always the source and the graph stays acyclic.

mod index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, SensorGeometry, BETA};
use index::SpatialIndex;

/// Default connection radius in normalized units.
pub const DEFAULT_RADIUS: f64 = 0.01;
/// Default cap on incoming edges per node.
pub const DEFAULT_MAX_NEIGHBORS: usize = 16;

/// Node position on the sensor grid: pixels, pixels, microseconds.
///
/// All layers keep positions in these integer units; the normalized
/// position used by the network is derived on demand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPosition {
    pub x: i64,
    pub y: i64,
    pub t: i64,
}

impl GridPosition {
    pub fn new(x: i64, y: i64, t: i64) -> Self {
        Self { x, y, t }
    }

    pub fn of_event(e: &Event) -> Self {
        Self::new(e.x.into(), e.y.into(), e.t as i64)
    }

    pub fn normalized(&self, geometry: SensorGeometry) -> NodePosition {
        NodePosition {
            x: self.x as f64 / f64::from(geometry.width),
            y: self.y as f64 / f64::from(geometry.height),
            t: self.t as f64 * BETA,
        }
    }

    pub fn same_xy(&self, other: &GridPosition) -> bool {
        self.x == other.x && self.y == other.y
    }
}

/// Normalized node position: `x / W`, `y / H`, `BETA * t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodePosition {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphNode {
    pub position: GridPosition,
    /// Input feature: the event polarity as a real number.
    pub feature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub src: u32,
    pub dst: u32,
}

/// True when two grid positions are closer than `radius` in the Chebyshev
/// norm of normalized coordinates.
pub fn within_radius(a: &GridPosition, b: &GridPosition, geometry: SensorGeometry, radius: f64) -> bool {
    let dx = (a.x - b.x).unsigned_abs() as f64 / f64::from(geometry.width);
    let dy = (a.y - b.y).unsigned_abs() as f64 / f64::from(geometry.height);
    let dt = (a.t - b.t).unsigned_abs() as f64 * BETA;
    dx < radius && dy < radius && dt < radius
}

#[derive(Clone, Debug)]
pub struct EventGraph {
    geometry: SensorGeometry,
    radius: f64,
    max_neighbors: usize,
    nodes: Vec<GraphNode>,
    edges: Vec<DirectedEdge>,
    incoming: Vec<Vec<u32>>,
    outgoing: Vec<Vec<u32>>,
    index: SpatialIndex,
    latest_t: Option<u64>,
}

impl EventGraph {
    pub fn new(geometry: SensorGeometry, radius: f64, max_neighbors: usize) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::InvalidConfig(format!("radius must be positive, got {radius}")));
        }
        if max_neighbors == 0 {
            return Err(Error::InvalidConfig("max_neighbors must be at least 1".into()));
        }
        Ok(Self {
            geometry,
            radius,
            max_neighbors,
            nodes: Vec::new(),
            edges: Vec::new(),
            incoming: Vec::new(),
            outgoing: Vec::new(),
            index: SpatialIndex::new(geometry, radius),
            latest_t: None,
        })
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn max_neighbors(&self) -> usize {
        self.max_neighbors
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// All edges in creation order: grouped by destination, sources ascending.
    pub fn edges(&self) -> &[DirectedEdge] {
        &self.edges
    }

    pub fn latest_timestamp(&self) -> Option<u64> {
        self.latest_t
    }

    /// Appends one event, connecting it to every earlier node within the
    /// radius. At most `max_neighbors` sources are kept, preferring the most
    /// recent ones (largest timestamp, then largest index).
    pub fn insert_event(&mut self, event: &Event) -> Result<(usize, Vec<DirectedEdge>)> {
        if let Some(latest) = self.latest_t {
            if event.t < latest {
                return Err(Error::OutOfOrder { t: event.t, latest });
            }
        }
        if !self.geometry.contains(event.x, event.y) {
            return Err(Error::InvalidStream(format!(
                "event at ({}, {}) outside {}x{}",
                event.x, event.y, self.geometry.width, self.geometry.height
            )));
        }
        let position = GridPosition::of_event(event);
        let idx = self.nodes.len();

        let mut candidates: Vec<(i64, u32)> = self
            .index
            .candidates(&position)
            .into_iter()
            .filter(|&j| within_radius(&self.nodes[j as usize].position, &position, self.geometry, self.radius))
            .map(|j| (self.nodes[j as usize].position.t, j))
            .collect();
        if candidates.len() > self.max_neighbors {
            candidates.sort_unstable_by(|a, b| b.cmp(a));
            candidates.truncate(self.max_neighbors);
        }
        let mut sources: Vec<u32> = candidates.into_iter().map(|(_, j)| j).collect();
        sources.sort_unstable();

        self.nodes.push(GraphNode {
            position,
            feature: f64::from(event.p),
        });
        self.outgoing.push(Vec::new());
        let dst = idx as u32;
        let mut new_edges = Vec::with_capacity(sources.len());
        for &src in &sources {
            let edge = DirectedEdge { src, dst };
            self.edges.push(edge);
            self.outgoing[src as usize].push(dst);
            new_edges.push(edge);
        }
        self.incoming.push(sources);
        self.index.insert(&position, dst);
        self.latest_t = Some(event.t);
        Ok((idx, new_edges))
    }

    /// Source neighbors `j` with `(j, i)` an edge.
    pub fn neighbors_in(&self, i: usize) -> Result<&[u32]> {
        self.incoming
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::NodeIndex { index: i, len: self.len() })
    }

    /// Destination neighbors `k` with `(i, k)` an edge.
    pub fn neighbors_out(&self, i: usize) -> Result<&[u32]> {
        self.outgoing
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::NodeIndex { index: i, len: self.len() })
    }

    /// Histogram of in-degrees: entry `d` counts nodes with `d` sources.
    pub fn in_degree_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.max_neighbors + 1];
        for inc in &self.incoming {
            hist[inc.len()] += 1;
        }
        hist
    }

    /// Copy of the graph with nodes renumbered so that new node `i` is old
    /// node `order[i]`. Edges keep their endpoints; adjacency lists are
    /// rebuilt in the new numbering. The copy is meant for order-invariance
    /// checks of the dense pass and should not be extended by insertion.
    pub fn relabeled(&self, order: &[usize]) -> Result<EventGraph> {
        let n = self.len();
        let mut new_of_old = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || new_of_old[old] != usize::MAX {
                return Err(Error::InvalidConfig("relabeling is not a permutation".into()));
            }
            new_of_old[old] = new;
        }
        if order.len() != n {
            return Err(Error::InvalidConfig("relabeling is not a permutation".into()));
        }
        let mut g = EventGraph::new(self.geometry, self.radius, self.max_neighbors)?;
        g.nodes = order.iter().map(|&old| self.nodes[old]).collect();
        g.incoming = vec![Vec::new(); n];
        g.outgoing = vec![Vec::new(); n];
        for (new_dst, &old_dst) in order.iter().enumerate() {
            let mut srcs: Vec<u32> = self.incoming[old_dst]
                .iter()
                .map(|&s| new_of_old[s as usize] as u32)
                .collect();
            srcs.sort_unstable();
            for &s in &srcs {
                g.edges.push(DirectedEdge { src: s, dst: new_dst as u32 });
                g.outgoing[s as usize].push(new_dst as u32);
            }
            g.incoming[new_dst] = srcs;
        }
        for (i, node) in g.nodes.iter().enumerate() {
            g.index.insert(&node.position, i as u32);
        }
        g.latest_t = self.latest_t;
        Ok(g)
    }
}

/// Builds the graph of a whole stream by inserting its events in order.
pub fn build_graph(stream: &EventStream, radius: f64, max_neighbors: usize) -> Result<EventGraph> {
    let mut graph = EventGraph::new(stream.geometry, radius, max_neighbors)?;
    for e in &stream.events {
        graph.insert_event(e)?;
    }
    Ok(graph)
}
