//! Error metrics between predicted and reference sequences.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::field::FieldSequence;

/// Guards the relative error against null reference fields.
pub const EPS_DIV: f64 = 1e-12;
/// Allowed timestamp mismatch between paired snapshots.
pub const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepError {
    pub step: usize,
    pub t: f64,
    pub rel_l2_u: f64,
    pub rel_l2_v: f64,
    pub rel_l2_all: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub steps: Vec<StepError>,
    /// Mean of `rel_l2_all` over steps.
    pub aggregate: f64,
}

pub const EVAL_CSV_HEADER: &str = "step,t,rel_l2_u,rel_l2_v,rel_l2_all";

fn rel(pred: impl Iterator<Item = f64>, truth: impl Iterator<Item = f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.zip(truth) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    num.sqrt() / den.sqrt().max(EPS_DIV)
}

/// Per-step `||pred - truth||_2 / max(||truth||_2, EPS_DIV)`, per channel
/// and over both channels.
pub fn relative_l2_error(pred: &FieldSequence, truth: &FieldSequence) -> Result<ErrorReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "sequences have {} and {} snapshots",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("cannot compare empty sequences"));
    }
    let (p0, t0) = (&pred.fields()[0], &truth.fields()[0]);
    if p0.grid().n() != t0.grid().n() || p0.channels() != t0.channels() {
        return Err(Error::shape(format!(
            "snapshot shapes differ: {0}x{0}x{1} vs {2}x{2}x{3}",
            p0.grid().n(),
            p0.channels(),
            t0.grid().n(),
            t0.channels()
        )));
    }
    let c = p0.channels();
    let mut steps = Vec::with_capacity(pred.len());
    for (k, (p, t)) in pred.fields().iter().zip(truth.fields()).enumerate() {
        if (p.t - t.t).abs() > TIME_TOL {
            return Err(Error::shape(format!(
                "timestamps differ at step {k}: {} vs {}",
                p.t, t.t
            )));
        }
        let chan = |ch: usize| {
            rel(
                p.data().iter().skip(ch).step_by(c).copied(),
                t.data().iter().skip(ch).step_by(c).copied(),
            )
        };
        steps.push(StepError {
            step: k,
            t: t.t,
            rel_l2_u: chan(0),
            rel_l2_v: if c > 1 { chan(1) } else { 0.0 },
            rel_l2_all: rel(p.data().iter().copied(), t.data().iter().copied()),
        });
    }
    let aggregate = steps.iter().map(|s| s.rel_l2_all).sum::<f64>() / steps.len() as f64;
    Ok(ErrorReport { steps, aggregate })
}

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for e in &self.steps {
            writeln!(s, "{},{:e},{:e},{:e},{:e}", e.step, e.t, e.rel_l2_u, e.rel_l2_v, e.rel_l2_all).unwrap();
        }
        s
    }

    pub fn max(&self) -> f64 {
        self.steps.iter().map(|s| s.rel_l2_all).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(|s| s.rel_l2_all.is_finite())
    }
}
