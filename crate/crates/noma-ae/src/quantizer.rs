//! Scalar quantizers for CSI feedback: a uniform mid-cell design and a
//! sample-based Lloyd–Max (one-dimensional k-means) design, both targeting
//! zero-mean Gaussian inputs.
//!
//! Cells are left-open/right-closed: cell `i` covers `(b[i-1], b[i]]`, so a
//! value sitting exactly on a boundary belongs to the lower cell. Codebooks
//! can be exported to and re-read from a small text format.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{ChannelRealization, Complex64};
use crate::error::{Error, Result};

/// Number of Gaussian draws used by the Lloyd–Max design.
const LLOYD_SAMPLE_COUNT: usize = 1_000_000;

/// Default one-sided support of the uniform design, in units of σ.
pub const DEFAULT_SUPPORT_MULTIPLE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Uniform,
    LloydMax,
}

impl QuantizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::Uniform => "uniform",
            QuantizerKind::LloydMax => "lloyd_max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(QuantizerKind::Uniform),
            "lloyd_max" => Ok(QuantizerKind::LloydMax),
            other => Err(Error::InvalidArgument(format!("unknown quantizer kind '{other}'"))),
        }
    }
}

/// A scalar codebook: `levels.len()` reproduction points separated by
/// `levels.len() - 1` strictly increasing boundaries. `sigma` records the
/// input spread the codebook was designed for.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerCodebook {
    pub kind: QuantizerKind,
    pub sigma: f64,
    pub boundaries: Vec<f64>,
    pub levels: Vec<f64>,
}

impl QuantizerCodebook {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.levels.len();
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs at least 2 levels, got {m}"
            )));
        }
        if self.boundaries.len() != m - 1 {
            return Err(Error::InvalidArgument(format!(
                "codebook with {m} levels needs {} boundaries, got {}",
                m - 1,
                self.boundaries.len()
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.levels) || !increasing(&self.boundaries) {
            return Err(Error::InvalidArgument(
                "levels and boundaries must be strictly increasing".into(),
            ));
        }
        if self.levels.iter().chain(&self.boundaries).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("codebook entries must be finite".into()));
        }
        Ok(())
    }
}

/// Map `x` to its cell's reproduction level. Boundary values go to the lower
/// cell.
pub fn quantize(cb: &QuantizerCodebook, x: f64) -> f64 {
    let i = cb.boundaries.partition_point(|&b| b < x);
    cb.levels[i]
}

/// Uniform mid-cell codebook on `±support_multiple·sigma`: `m` equal cells,
/// levels at cell midpoints.
pub fn design_uniform(m: usize, sigma: f64, support_multiple: f64) -> Result<QuantizerCodebook> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 levels, got {m}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(support_multiple > 0.0 && support_multiple.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma and support must be positive, got ({sigma}, {support_multiple})"
        )));
    }
    let s = support_multiple * sigma;
    let delta = 2.0 * s / m as f64;
    let boundaries: Vec<f64> = (1..m).map(|i| -s + i as f64 * delta).collect();
    let levels: Vec<f64> = (0..m).map(|i| -s + (i as f64 + 0.5) * delta).collect();
    let cb = QuantizerCodebook { kind: QuantizerKind::Uniform, sigma, boundaries, levels };
    cb.validate()?;
    Ok(cb)
}

/// Lloyd–Max design for `N(0, sigma²)` inputs, run on a fixed pool of 10⁶
/// seeded draws: alternate centroid (cell conditional mean) and boundary
/// (level midpoint) updates, starting from the uniform design, until the
/// relative MSQE change drops below `tol`.
///
/// Sample MSQE is non-increasing across iterations by construction; this is
/// asserted in debug builds. Failing to converge within `max_iters` returns
/// a diagnostic error carrying the last iterate.
pub fn design_lloyd_max<R: Rng + ?Sized>(
    m: usize,
    sigma: f64,
    tol: f64,
    max_iters: usize,
    rng: &mut R,
) -> Result<QuantizerCodebook> {
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidArgument(format!(
            "tol must be positive and max_iters nonzero, got ({tol}, {max_iters})"
        )));
    }
    let init = design_uniform(m, sigma, DEFAULT_SUPPORT_MULTIPLE)?;

    let mut samples: Vec<f64> = (0..LLOYD_SAMPLE_COUNT)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    samples.sort_unstable_by(f64::total_cmp);
    let n = samples.len();
    let mut prefix = vec![0.0f64; n + 1];
    let mut prefix_sq = vec![0.0f64; n + 1];
    for (i, &x) in samples.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
        prefix_sq[i + 1] = prefix_sq[i] + x * x;
    }

    let mut boundaries = init.boundaries;
    let mut levels = init.levels;
    let mut prev_msqe = f64::INFINITY;
    for _iter in 0..max_iters {
        // Cell edges as indices into the sorted pool; samples equal to a
        // boundary go to the lower cell, matching `quantize`.
        let mut edges = Vec::with_capacity(m + 1);
        edges.push(0usize);
        for &b in &boundaries {
            edges.push(samples.partition_point(|&s| s <= b));
        }
        edges.push(n);

        // Centroid step, then distortion of (current partition, new levels).
        let mut msqe = 0.0;
        for j in 0..m {
            let (lo, hi) = (edges[j], edges[j + 1]);
            let count = hi - lo;
            if count > 0 {
                levels[j] = (prefix[hi] - prefix[lo]) / count as f64;
            }
            msqe += (prefix_sq[hi] - prefix_sq[lo])
                - 2.0 * levels[j] * (prefix[hi] - prefix[lo])
                + levels[j] * levels[j] * count as f64;
        }
        msqe /= n as f64;
        debug_assert!(
            msqe <= prev_msqe * (1.0 + 1e-12) || !prev_msqe.is_finite(),
            "Lloyd–Max distortion increased: {prev_msqe} -> {msqe}"
        );

        // Boundary step: nearest-level cells are bounded by level midpoints.
        for j in 0..m - 1 {
            boundaries[j] = 0.5 * (levels[j] + levels[j + 1]);
        }

        let converged = prev_msqe.is_finite() && (prev_msqe - msqe).abs() <= tol * prev_msqe;
        prev_msqe = msqe;
        if converged {
            let cb = QuantizerCodebook { kind: QuantizerKind::LloydMax, sigma, boundaries, levels };
            cb.validate()?;
            return Ok(cb);
        }
    }

    let last = QuantizerCodebook { kind: QuantizerKind::LloydMax, sigma, boundaries, levels };
    Err(Error::QuantizerNonConvergence { iters: max_iters, last_msqe: prev_msqe, last: Box::new(last) })
}

/// Monte-Carlo mean squared quantization error of `cb` on `N(0, sigma²)`
/// inputs.
pub fn msqe<R: Rng + ?Sized>(cb: &QuantizerCodebook, sigma: f64, n_samples: usize, rng: &mut R) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let x = sigma * rng.sample::<f64, _>(StandardNormal);
        let e = x - quantize(cb, x);
        acc += e * e;
    }
    acc / n_samples as f64
}

/// Quantized CSI as seen by the encoder: each real component of each user's
/// gain mapped through that user's codebook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedCsi {
    pub h1_hat: Complex64,
    pub h2_hat: Complex64,
}

/// Quantize a channel realization component-wise; `cb1` is designed for the
/// first user's spread, `cb2` for the second's.
pub fn quantize_csi(
    re: &ChannelRealization,
    cb1: &QuantizerCodebook,
    cb2: &QuantizerCodebook,
) -> QuantizedCsi {
    QuantizedCsi {
        h1_hat: Complex64::new(quantize(cb1, re.h1.re), quantize(cb1, re.h1.im)),
        h2_hat: Complex64::new(quantize(cb2, re.h2.re), quantize(cb2, re.h2.im)),
    }
}

// --- text export -----------------------------------------------------------

/// Serialize a codebook: one header line `kind M sigma`, one line of
/// boundaries, one line of levels. Floats are written with 17 significant
/// digits so a round-trip is bit-exact.
pub fn codebook_to_string(cb: &QuantizerCodebook) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
    format!(
        "{} {} {:.16e}\n{}\n{}\n",
        cb.kind.as_str(),
        cb.num_levels(),
        cb.sigma,
        join(&cb.boundaries),
        join(&cb.levels),
    )
}

/// Parse the format written by [`codebook_to_string`].
pub fn codebook_from_str(s: &str) -> Result<QuantizerCodebook> {
    let bad = |msg: &str| Error::InvalidArgument(format!("codebook parse: {msg}"));
    let mut lines = s.lines();
    let header = lines.next().ok_or_else(|| bad("missing header"))?;
    let mut parts = header.split_whitespace();
    let kind = QuantizerKind::parse(parts.next().ok_or_else(|| bad("missing kind"))?)?;
    let m: usize = parts
        .next()
        .ok_or_else(|| bad("missing level count"))?
        .parse()
        .map_err(|_| bad("level count not an integer"))?;
    let sigma: f64 = parts
        .next()
        .ok_or_else(|| bad("missing sigma"))?
        .parse()
        .map_err(|_| bad("sigma not a float"))?;
    if parts.next().is_some() {
        return Err(bad("trailing tokens in header"));
    }
    let parse_line = |line: Option<&str>, what: &str, expect: usize| -> Result<Vec<f64>> {
        let line = line.ok_or_else(|| bad(&format!("missing {what} line")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad float in {what}"))))
            .collect::<Result<_>>()?;
        if vals.len() != expect {
            return Err(bad(&format!("{what}: expected {expect} values, got {}", vals.len())));
        }
        Ok(vals)
    };
    let boundaries = parse_line(lines.next(), "boundaries", m.saturating_sub(1))?;
    let levels = parse_line(lines.next(), "levels", m)?;
    let cb = QuantizerCodebook { kind, sigma, boundaries, levels };
    cb.validate()?;
    Ok(cb)
}

// ---------------------------------------------------------------------------
