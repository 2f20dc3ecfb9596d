//! Per-SNR comparison of two BER curves.
//!
//! Comparison is defined on the figure-of-merit column `ber_avg`. Two curves
//! are comparable only on identical SNR grids; each row's delta is judged
//! against a slack of `slack_multiplier` combined Monte-Carlo standard
//! errors, so analytical curves (zero recorded trials) are compared exactly
//! while simulated curves get their statistical wiggle room.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::results::BerCurve;

/// One grid point of a comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaRow {
    pub snr_db: f64,
    pub ber_a: f64,
    pub ber_b: f64,
    /// `ber_a − ber_b`.
    pub delta: f64,
    /// Allowed statistical excess of `a` over `b` at this point.
    pub slack: f64,
}

/// The full delta report between two curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveComparison {
    pub scheme_a: String,
    pub scheme_b: String,
    pub rows: Vec<DeltaRow>,
    /// Points where a < b, a == b, a > b (signs of the raw deltas).
    pub n_below: usize,
    pub n_equal: usize,
    pub n_above: usize,
    /// Whether `a ≤ b` holds at every grid point within slack.
    pub a_le_b: bool,
}

/// Compare curve `a` against curve `b` row by row. The SNR grids must match
/// exactly; a mismatch is a structural error, not a verdict.
pub fn compare_curves(
    a: &BerCurve,
    b: &BerCurve,
    slack_multiplier: f64,
) -> Result<CurveComparison> {
    if !(slack_multiplier >= 0.0 && slack_multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "slack multiplier must be a finite nonnegative number, got {slack_multiplier}"
        )));
    }
    if a.rows.len() != b.rows.len() {
        return Err(Error::Comparison(format!(
            "SNR grids differ: {} vs {} points",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.rows.len());
    let (mut n_below, mut n_equal, mut n_above) = (0, 0, 0);
    let mut a_le_b = true;
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.snr_db != rb.snr_db {
            return Err(Error::Comparison(format!(
                "SNR grids differ: {} dB vs {} dB",
                ra.snr_db, rb.snr_db
            )));
        }
        let (pa, pb) = (ra.ber_avg(), rb.ber_avg());
        let delta = pa - pb;
        let slack = slack_multiplier * (ra.standard_error() + rb.standard_error());
        match delta.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Less) => n_below += 1,
            Some(std::cmp::Ordering::Equal) => n_equal += 1,
            _ => n_above += 1,
        }
        if delta > slack {
            a_le_b = false;
        }
        rows.push(DeltaRow { snr_db: ra.snr_db, ber_a: pa, ber_b: pb, delta, slack });
    }
    Ok(CurveComparison {
        scheme_a: a.scheme.clone(),
        scheme_b: b.scheme.clone(),
        rows,
        n_below,
        n_equal,
        n_above,
        a_le_b,
    })
}

/// Human-readable rendering of a comparison: one line per grid point and a
/// sign/verdict summary.
pub fn render_report(cmp: &CurveComparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "a = {}, b = {}", cmp.scheme_a, cmp.scheme_b);
    let _ = writeln!(out, "{:>8}  {:>13}  {:>13}  {:>14}  {:>13}", "snr_db", "ber_a", "ber_b", "delta", "slack");
    for r in &cmp.rows {
        let _ = writeln!(
            out,
            "{:>8.2}  {:>13.6e}  {:>13.6e}  {:>+14.6e}  {:>13.6e}",
            r.snr_db, r.ber_a, r.ber_b, r.delta, r.slack
        );
    }
    let _ = writeln!(
        out,
        "signs: {} below, {} equal, {} above of {} points",
        cmp.n_below,
        cmp.n_equal,
        cmp.n_above,
        cmp.rows.len()
    );
    let verdict = if cmp.n_equal == cmp.rows.len() {
        "equal"
    } else if cmp.a_le_b {
        "a <= b within slack"
    } else {
        "a exceeds b beyond slack"
    };
    let _ = writeln!(out, "verdict: {verdict}");
    out
}

// ---------------------------------------------------------------------------
