use std::collections::{HashMap, VecDeque};

use super::GridPosition;
use crate::events::{SensorGeometry, BETA};

type CellKey = (i64, i64, i64);

/// Uniform voxel hash with cell edge `R` in every normalized dimension.
///
/// Each cell holds a time-ordered queue of `(t, node)`; entries older than
/// `R / BETA` microseconds relative to the newest query are evicted, since
/// no later event can reach them.
#[derive(Clone, Debug)]
pub(super) struct SpatialIndex {
    geometry: SensorGeometry,
    radius: f64,
    cells: HashMap<CellKey, VecDeque<(i64, u32)>>,
    horizon_cell: i64,
}

impl SpatialIndex {
    pub fn new(geometry: SensorGeometry, radius: f64) -> Self {
        Self {
            geometry,
            radius,
            cells: HashMap::new(),
            horizon_cell: i64::MIN,
        }
    }

    fn cell_of(&self, p: &GridPosition) -> CellKey {
        let nx = p.x as f64 / f64::from(self.geometry.width);
        let ny = p.y as f64 / f64::from(self.geometry.height);
        let nt = p.t as f64 * BETA;
        (
            (nx / self.radius).floor() as i64,
            (ny / self.radius).floor() as i64,
            (nt / self.radius).floor() as i64,
        )
    }

    /// Nodes stored in the 3x3x3 cell neighborhood of `p`, after evicting
    /// entries that are out of temporal reach. `p.t` must not precede any
    /// earlier query.
    pub fn candidates(&mut self, p: &GridPosition) -> Vec<u32> {
        let (cx, cy, ct) = self.cell_of(p);
        if ct > self.horizon_cell {
            // Cells two or more time slices back cannot hold reachable nodes.
            self.cells.retain(|k, _| k.2 >= ct - 1);
            self.horizon_cell = ct;
        }
        let radius = self.radius;
        let mut found = Vec::new();
        for dt in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let key = (cx + dx, cy + dy, ct + dt);
                    let Some(queue) = self.cells.get_mut(&key) else { continue };
                    while let Some(&(t, _)) = queue.front() {
                        if (p.t - t) as f64 * BETA >= radius {
                            queue.pop_front();
                        } else {
                            break;
                        }
                    }
                    found.extend(queue.iter().map(|&(_, j)| j));
                }
            }
        }
        found
    }

    pub fn insert(&mut self, p: &GridPosition, node: u32) {
        let key = self.cell_of(p);
        self.cells.entry(key).or_default().push_back((p.t, node));
    }
}
