//! `.evb` container: a 16-byte little-endian header (`EVB1`, width, height,
//! count) followed by 13-byte records (t: u64, x: u16, y: u16, p: i8).

use std::fs;
use std::path::Path;

use super::{Event, EventStream, SensorGeometry};
use crate::error::{Error, Result};

pub const EVB_MAGIC: &[u8; 4] = b"EVB1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 13;

pub fn read_stream(path: impl AsRef<Path>) -> Result<EventStream> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Writes `stream` to `path`. The stream is validated before the file is
/// touched, so an invalid stream leaves no partial output behind.
pub fn write_stream(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    stream.validate()?;
    fs::write(path, encode(stream)?)?;
    Ok(())
}

pub(crate) fn encode(stream: &EventStream) -> Result<Vec<u8>> {
    let count = u32::try_from(stream.events.len())
        .map_err(|_| Error::InvalidStream("more than u32::MAX events".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.events.len());
    out.extend_from_slice(EVB_MAGIC);
    out.extend_from_slice(&stream.geometry.width.to_le_bytes());
    out.extend_from_slice(&stream.geometry.height.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    Ok(out)
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedEvents {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != EVB_MAGIC {
        return Err(malformed(0, "bad magic, expected EVB1"));
    }
    let width = le_u32(bytes, 4);
    let height = le_u32(bytes, 8);
    if width == 0 || height == 0 {
        return Err(malformed(4, format!("zero sensor dimension {width}x{height}")));
    }
    let count = le_u32(bytes, 12) as usize;
    let body = bytes.len() - HEADER_LEN;
    if body != count * RECORD_LEN {
        return Err(malformed(
            12,
            format!(
                "header declares {count} events ({} bytes) but {body} bytes follow",
                count * RECORD_LEN
            ),
        ));
    }

    let geometry = SensorGeometry { width, height };
    let mut events = Vec::with_capacity(count);
    let mut prev = 0u64;
    for i in 0..count {
        let at = HEADER_LEN + i * RECORD_LEN;
        let rec = &bytes[at..at + RECORD_LEN];
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = rec[12] as i8;
        if !geometry.contains(x, y) {
            return Err(Error::OutOfRange {
                offset: at as u64,
                x: x.into(),
                y: y.into(),
                width,
                height,
            });
        }
        if p != 1 && p != -1 {
            return Err(malformed(at + 12, format!("polarity byte {p} is not -1 or +1")));
        }
        if t < prev {
            return Err(Error::DecreasingTimestamp {
                offset: at as u64,
                t,
                prev,
            });
        }
        prev = t;
        events.push(Event { x, y, t, p });
    }
    Ok(EventStream { geometry, events })
}
