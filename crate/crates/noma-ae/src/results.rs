//! Result artifacts: BER curves, loss traces, constellation dumps, quantizer
//! tables, and the run manifest.
//!
//! Everything is plain CSV (plotting is external). Floats are written with
//! 17 significant digits so a write → read → write cycle is byte-identical,
//! and every emitted `ber_avg` satisfies the exact mean identity
//! `(ber_ue1 + ber_ue2) / 2` — readers re-verify it.

use std::fmt::Write as _;
use std::path::Path;

use crate::ae::{ConstellationPoint, LossPoint};
use crate::error::{Error, Result};

/// Format a float for CSV emission: scientific, 17 significant digits,
/// enough for an exact `f64` round-trip.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

// --- BER curves -------------------------------------------------------------

/// One SNR point of a BER curve. `trials` is the total number of transmitted
/// symbols behind the estimate (0 for analytical curves) and `n_seeds` the
/// number of independently trained systems averaged (0 for analytical and
/// single-run Monte-Carlo reference curves).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerRow {
    pub snr_db: f64,
    pub ber_ue1: f64,
    pub ber_ue2: f64,
    pub trials: u64,
    pub n_seeds: u32,
}

impl BerRow {
    /// The figure-of-merit y-axis value: the exact mean of the two users.
    pub fn ber_avg(&self) -> f64 {
        0.5 * (self.ber_ue1 + self.ber_ue2)
    }

    /// Monte-Carlo standard error of `ber_avg`, zero for analytical rows.
    pub fn standard_error(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        let p = self.ber_avg().clamp(0.0, 1.0);
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// A labeled BER-vs-SNR curve tied to the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BerCurve {
    /// Which scheme the curve measures, e.g. `ae_perfect` or `lemma1`.
    pub scheme: String,
    /// Fingerprint of the producing experiment configuration.
    pub fingerprint: String,
    pub rows: Vec<BerRow>,
}

const BER_HEADER: &str = "snr_db,ber_ue1,ber_ue2,ber_avg,trials,n_seeds,scheme,fingerprint";

impl BerCurve {
    pub fn new(scheme: impl Into<String>, fingerprint: impl Into<String>, rows: Vec<BerRow>) -> Self {
        BerCurve { scheme: scheme.into(), fingerprint: fingerprint.into(), rows }
    }

    /// The SNR grid of the curve in row order.
    pub fn snr_grid(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.snr_db).collect()
    }

    /// Render the curve as CSV text (header + one line per row).
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(BER_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fmt_float(r.snr_db),
                fmt_float(r.ber_ue1),
                fmt_float(r.ber_ue2),
                fmt_float(r.ber_avg()),
                r.trials,
                r.n_seeds,
                self.scheme,
                self.fingerprint
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a curve written by [`Self::write_csv`], re-checking the header,
    /// the mean identity on every row, and label consistency.
    pub fn read_csv(path: &Path) -> Result<BerCurve> {
        let text = std::fs::read_to_string(path)?;
        let ctx = |msg: String| Error::Comparison(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == BER_HEADER => {}
            other => {
                return Err(ctx(format!(
                    "expected BER curve header {BER_HEADER:?}, found {other:?}"
                )))
            }
        }
        let mut scheme: Option<String> = None;
        let mut fingerprint: Option<String> = None;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(ctx(format!("line {lineno}: expected 8 fields, found {}", fields.len())));
            }
            let f = |j: usize, name: &str| -> Result<f64> {
                fields[j]
                    .parse::<f64>()
                    .map_err(|e| ctx(format!("line {lineno}: bad {name}: {e}")))
            };
            let row = BerRow {
                snr_db: f(0, "snr_db")?,
                ber_ue1: f(1, "ber_ue1")?,
                ber_ue2: f(2, "ber_ue2")?,
                trials: fields[4]
                    .parse()
                    .map_err(|e| ctx(format!("line {lineno}: bad trials: {e}")))?,
                n_seeds: fields[5]
                    .parse()
                    .map_err(|e| ctx(format!("line {lineno}: bad n_seeds: {e}")))?,
            };
            let avg = f(3, "ber_avg")?;
            if avg != row.ber_avg() {
                return Err(ctx(format!(
                    "line {lineno}: ber_avg {avg} violates the mean identity (expected {})",
                    row.ber_avg()
                )));
            }
            for (slot, j, name) in [(&mut scheme, 6, "scheme"), (&mut fingerprint, 7, "fingerprint")]
            {
                match slot.as_deref() {
                    None => *slot = Some(fields[j].to_string()),
                    Some(v) if v == fields[j] => {}
                    Some(v) => {
                        return Err(ctx(format!(
                            "line {lineno}: {name} {:?} differs from {v:?}",
                            fields[j]
                        )))
                    }
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(ctx("curve has no data rows".into()));
        }
        Ok(BerCurve {
            scheme: scheme.unwrap_or_default(),
            fingerprint: fingerprint.unwrap_or_default(),
            rows,
        })
    }
}

// --- loss traces ------------------------------------------------------------

/// Write a per-epoch training trace as `epoch,loss,lr`.
pub fn write_loss_trace(path: &Path, trace: &[LossPoint]) -> Result<()> {
    let mut out = String::from("epoch,loss,lr\n");
    for p in trace {
        let _ = writeln!(out, "{},{},{}", p.epoch, fmt_float(p.loss), fmt_float(p.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// --- constellation dumps ------------------------------------------------------

/// Write labeled constellations, one block of rows per channel state.
/// `states` pairs each state's gains with its exported points; bits are
/// rendered MSB-first as compact strings like `01`.
pub fn write_constellation_csv(
    path: &Path,
    states: &[([f64; 4], Vec<ConstellationPoint>)],
) -> Result<()> {
    let mut out = String::from("state,h1_re,h1_im,h2_re,h2_im,bits1,bits2,symbol_re,symbol_im\n");
    let render_bits =
        |bits: &[u8]| bits.iter().map(|b| char::from(b'0' + b)).collect::<String>();
    for (s, (h, points)) in states.iter().enumerate() {
        for p in points {
            let _ = writeln!(
                out,
                "{s},{},{},{},{},{},{},{},{}",
                fmt_float(h[0]),
                fmt_float(h[1]),
                fmt_float(h[2]),
                fmt_float(h[3]),
                render_bits(&p.bits1),
                render_bits(&p.bits2),
                fmt_float(p.symbol.re),
                fmt_float(p.symbol.im)
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// --- quantizer tables -----------------------------------------------------------

/// One row of the quantizer-quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct MsqeRow {
    pub kind: &'static str,
    pub levels: usize,
    pub sigma: f64,
    pub msqe: f64,
}

/// Write the quantizer-quality table as `kind,levels,sigma,msqe`.
pub fn write_msqe_table(path: &Path, rows: &[MsqeRow]) -> Result<()> {
    let mut out = String::from("kind,levels,sigma,msqe\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.kind, r.levels, fmt_float(r.sigma), fmt_float(r.msqe));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// --- manifest ---------------------------------------------------------------------

/// Write the run manifest. It is emitted after every other artifact, so its
/// presence marks a completed run; it carries the config fingerprint, the
/// seeds, the wall time, and the artifact list.
pub fn write_manifest(
    path: &Path,
    fingerprint: &str,
    experiment: &str,
    seeds: &[u64],
    wall_seconds: f64,
    artifacts: &[String],
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "fingerprint = {fingerprint}");
    let _ = writeln!(out, "experiment = {experiment}");
    let seeds_str: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "seeds = {}", seeds_str.join(","));
    let _ = writeln!(out, "wall_seconds = {wall_seconds:.3}");
    let _ = writeln!(out, "artifacts = {}", artifacts.join(","));
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
