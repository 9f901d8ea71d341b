//! Per-iteration solver records, shared by the MAP and ESGVI solvers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Objective after the iteration: total energy for MAP, `V(q)` for ESGVI.
    pub loss: f64,
    /// `‖δ‖∞` of the applied (or last rejected) step.
    pub step_norm: f64,
    /// Rejected trial steps before acceptance.
    pub backtracks: usize,
    /// Hessian eigenvalues lifted to the floor during the iteration.
    pub clamps: usize,
    pub accepted: bool,
}

pub fn write_trace_csv<W: Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
