//! Event records, the `.evb` stream container and a synthetic event source.

mod io;
mod synthetic;

pub use io::{read_stream, write_stream, EVB_MAGIC, HEADER_LEN, RECORD_LEN};
pub use synthetic::{generate_synthetic, Scene, MICRO_STEP_US};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time scaling from microseconds to the normalized time axis.
pub const BETA: f64 = 1e-6;

/// Sensor resolution in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidStream(format!(
                "sensor geometry must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        u32::from(x) < self.width && u32::from(y) < self.height
    }
}

/// One camera event. Polarity is stored as `-1` or `+1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: i8) -> Self {
        Self { x, y, t, p }
    }
}

/// An ordered event sequence together with the sensor it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub geometry: SensorGeometry,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream after checking bounds, polarity and time order.
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self> {
        let stream = Self { geometry, events };
        stream.validate()?;
        Ok(stream)
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if !self.geometry.contains(e.x, e.y) {
                return Err(Error::InvalidStream(format!(
                    "event {i} at ({}, {}) outside {}x{}",
                    e.x, e.y, self.geometry.width, self.geometry.height
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::InvalidStream(format!(
                    "event {i} has polarity {}",
                    e.p
                )));
            }
            if e.t < prev {
                return Err(Error::InvalidStream(format!(
                    "event {i} has t={} after t={prev}",
                    e.t
                )));
            }
            prev = e.t;
        }
        Ok(())
    }

    /// Splits off the first `n` events as a separate stream.
    pub fn split_at(&self, n: usize) -> (EventStream, EventStream) {
        let n = n.min(self.events.len());
        (
            EventStream {
                geometry: self.geometry,
                events: self.events[..n].to_vec(),
            },
            EventStream {
                geometry: self.geometry,
                events: self.events[n..].to_vec(),
            },
        )
    }
}
