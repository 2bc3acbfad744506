//! Per-tick trace rows and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const HEADER: [&str; 15] = [
    "tick", "round", "agent", "mode", "x0", "x1", "x2", "x3", "u", "x_des", "slot", "theta", "phi", "seq", "demand",
];

/// One agent at one tick. Round-level columns are filled on the first tick
/// of a round only; columns a scenario does not use stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub round: u64,
    pub agent: usize,
    pub mode: u32,
    pub x0: Option<f64>,
    pub x1: Option<f64>,
    pub x2: Option<f64>,
    pub x3: Option<f64>,
    pub u: f64,
    pub x_des: Option<f64>,
    pub slot: Option<String>,
    pub theta: Option<u8>,
    pub phi: Option<u8>,
    pub seq: Option<u64>,
    pub demand: Option<u32>,
}

impl TraceRecord {
    pub fn new(tick: u64, round: u64, agent: usize, mode: u32, x: &[f64], u: f64) -> Self {
        let c = |i: usize| x.get(i).copied();
        Self {
            tick,
            round,
            agent,
            mode,
            x0: c(0),
            x1: c(1),
            x2: c(2),
            x3: c(3),
            u,
            x_des: None,
            slot: None,
            theta: None,
            phi: None,
            seq: None,
            demand: None,
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
    Ok(rows)
}
