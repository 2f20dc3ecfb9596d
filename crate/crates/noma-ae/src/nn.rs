//! Dense feed-forward networks with reverse-mode gradients.
//!
//! Supports exactly what the autoencoder needs: fully connected layers,
//! tanh/sigmoid/linear activations, identity residual connections, Adam with
//! an exponential learning-rate schedule, and bit-exact parameter
//! serialization. Everything runs batched in double precision on flat
//! row-major buffers; the matrix kernels keep each layer's weight block
//! cache-resident and are written so the compiler can vectorize them.

use rand::Rng;

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// --- activations -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const INV_LN2: f64 = std::f64::consts::LOG2_E;
/// 1.5·2^52: adding and subtracting this rounds |v| < 2^51 to the nearest
/// integer using only FP adds, which keeps the surrounding loop vectorizable.
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;

/// Horner coefficients (highest order first) of the degree-10 Taylor kernel
/// for e^r on |r| ≤ ln2/2.
const EXP_TAYLOR: [f64; 11] = [
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// e^y for y in [-40, 0]: power-of-two range reduction plus the Taylor kernel
/// on |r| ≤ ln2/2. ~3e-13 relative accuracy; branch-free, with the rounding
/// and the 2^k assembly written so the loop auto-vectorizes.
#[inline(always)]
fn exp_unit_neg(y: f64) -> f64 {
    let shifted = y * INV_LN2 + ROUND_SHIFT;
    let kf = shifted - ROUND_SHIFT;
    let r = (y - kf * LN2_HI) - kf * LN2_LO;
    let mut p = EXP_TAYLOR[0];
    for &c in &EXP_TAYLOR[1..] {
        p = p * r + c;
    }
    // 2^k assembled from the magic-shifted float's low mantissa bits (which
    // hold k): shifting them into the exponent field and rebiasing needs no
    // float→int conversion, so the whole function stays vectorizable. k ∈
    // [-58, 0] keeps the result well inside the normal range.
    p * f64::from_bits(shifted.to_bits().wrapping_shl(52).wrapping_add(1023u64 << 52))
}

/// `exp_unit_neg` over N lanes, staged so every intermediate is a fixed-size
/// array op. At N = 32 each stage is four independent 8-wide chains, which
/// hides the polynomial's sequential FMA latency (a single 8-wide chain
/// leaves the FMA port mostly idle); the quotient in the callers then issues
/// as four pipelined divisions.
#[inline]
fn exp_lanes<const N: usize>(y: &[f64; N]) -> [f64; N] {
    let mut shifted = [0.0f64; N];
    for i in 0..N {
        shifted[i] = y[i] * INV_LN2 + ROUND_SHIFT;
    }
    let mut r = [0.0f64; N];
    for i in 0..N {
        let kf = shifted[i] - ROUND_SHIFT;
        r[i] = (y[i] - kf * LN2_HI) - kf * LN2_LO;
    }
    let mut p = [EXP_TAYLOR[0]; N];
    for &c in &EXP_TAYLOR[1..] {
        for i in 0..N {
            p[i] = p[i] * r[i] + c;
        }
    }
    for i in 0..N {
        p[i] *= f64::from_bits(shifted[i].to_bits().wrapping_shl(52).wrapping_add(1023u64 << 52));
    }
    p
}

/// tanh via e^{-2|x|}, accurate to ~1e-12 absolute. Roughly 5-10x faster
/// than the libm call, which matters: activation evaluations are a large
/// fraction of a training step on these small layers.
#[inline(always)]
pub fn fast_tanh(x: f64) -> f64 {
    let a = x.abs().min(19.0);
    let t = exp_unit_neg(-2.0 * a);
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

/// Logistic sigmoid with the same fast-exp core, ~1e-12 absolute accuracy.
#[inline(always)]
pub fn fast_sigmoid(x: f64) -> f64 {
    let t = exp_unit_neg(-x.abs().min(37.0));
    let num = if x >= 0.0 { 1.0 } else { t };
    num / (1.0 + t)
}

/// Odd-power series coefficients (highest order first) for
/// ln(m) = 2s·(1 + s²/3 + s⁴/5 + …), s = (m−1)/(m+1), on m ∈ [√2/2, √2].
const LN_ATANH: [f64; 9] = [
    1.0 / 17.0,
    1.0 / 15.0,
    1.0 / 13.0,
    1.0 / 11.0,
    1.0 / 9.0,
    1.0 / 7.0,
    1.0 / 5.0,
    1.0 / 3.0,
    1.0,
];

/// Natural log over N lanes for strictly positive normal inputs (callers
/// clamp; zero, subnormal, inf and NaN are out of contract). Exponent and
/// mantissa split straight from the bit pattern, mantissa folded into
/// [√2/2, √2], then the atanh series — truncation error ~3e-15 relative.
/// Same staging as `exp_lanes`: every stage is a fixed-size array op.
#[inline]
pub(crate) fn ln_lanes<const N: usize>(x: &[f64; N]) -> [f64; N] {
    const MANT_MASK: u64 = (1u64 << 52) - 1;
    const ONE_BITS: u64 = 1023u64 << 52;
    let mut e = [0.0f64; N];
    let mut m = [0.0f64; N];
    for i in 0..N {
        let bits = x[i].to_bits();
        e[i] = ((bits >> 52) as i64 - 1023) as f64;
        m[i] = f64::from_bits((bits & MANT_MASK) | ONE_BITS);
    }
    for i in 0..N {
        if m[i] > std::f64::consts::SQRT_2 {
            m[i] *= 0.5;
            e[i] += 1.0;
        }
    }
    let mut s = [0.0f64; N];
    let mut s2 = [0.0f64; N];
    for i in 0..N {
        s[i] = (m[i] - 1.0) / (m[i] + 1.0);
        s2[i] = s[i] * s[i];
    }
    let mut p = [LN_ATANH[0]; N];
    for &c in &LN_ATANH[1..] {
        for i in 0..N {
            p[i] = p[i] * s2[i] + c;
        }
    }
    let mut out = [0.0f64; N];
    for i in 0..N {
        out[i] = e[i] * LN2_HI + (2.0 * s[i] * p[i] + e[i] * LN2_LO);
    }
    out
}

/// Scalar wrapper over [`ln_lanes`]; same contract.
#[inline]
pub(crate) fn fast_ln(x: f64) -> f64 {
    ln_lanes(&[x])[0]
}

/// N tanh evaluations in lockstep over `exp_lanes`.
#[inline]
fn tanh_lanes<const N: usize>(c: &mut [f64; N]) {
    let mut y = [0.0f64; N];
    for i in 0..N {
        y[i] = -2.0 * c[i].abs().min(19.0);
    }
    let t = exp_lanes(&y);
    for i in 0..N {
        c[i] = ((1.0 - t[i]) / (1.0 + t[i])).copysign(c[i]);
    }
}

/// N sigmoid evaluations in lockstep over `exp_lanes`.
#[inline]
fn sigmoid_lanes<const N: usize>(c: &mut [f64; N]) {
    let mut y = [0.0f64; N];
    for i in 0..N {
        y[i] = -c[i].abs().min(37.0);
    }
    let t = exp_lanes(&y);
    for i in 0..N {
        let num = if c[i] >= 0.0 { 1.0 } else { t[i] };
        c[i] = num / (1.0 + t[i]);
    }
}

#[inline]
fn apply_activation(act: Activation, xs: &mut [f64]) {
    match act {
        Activation::Linear => {}
        Activation::Tanh => {
            let (blocks, rest) = xs.as_chunks_mut::<32>();
            for b in blocks {
                tanh_lanes(b);
            }
            let (chunks, rest) = rest.as_chunks_mut::<8>();
            for c in chunks {
                tanh_lanes(c);
            }
            for x in rest {
                *x = fast_tanh(*x);
            }
        }
        Activation::Sigmoid => {
            let (blocks, rest) = xs.as_chunks_mut::<32>();
            for b in blocks {
                sigmoid_lanes(b);
            }
            let (chunks, rest) = rest.as_chunks_mut::<8>();
            for c in chunks {
                sigmoid_lanes(c);
            }
            for x in rest {
                *x = fast_sigmoid(*x);
            }
        }
    }
}

/// Chain rule through the activation: `d[i] *= act'(z[i])`, with the
/// derivative expressed through the stored post-activation value `a[i]`.
#[inline(always)]
fn apply_activation_grad(act: Activation, d: &mut [f64], a: &[f64]) {
    match act {
        Activation::Linear => {}
        Activation::Tanh => {
            for (di, &ai) in d.iter_mut().zip(a) {
                *di *= 1.0 - ai * ai;
            }
        }
        Activation::Sigmoid => {
            for (di, &ai) in d.iter_mut().zip(a) {
                *di *= ai * (1.0 - ai);
            }
        }
    }
}

/// dst (=/+=) src ⊙ act'(a) — the activation chain rule fused into the write,
/// used for the backward seed and for residual-path contributions.
#[inline]
fn scaled_delta(act: Activation, src: &[f64], a: &[f64], dst: &mut [f64], overwrite: bool) {
    debug_assert!(src.len() == dst.len() && a.len() == dst.len());
    let term = |s: f64, ai: f64| match act {
        Activation::Linear => s,
        Activation::Tanh => s * (1.0 - ai * ai),
        Activation::Sigmoid => s * (ai * (1.0 - ai)),
    };
    if overwrite {
        for ((d, &s), &ai) in dst.iter_mut().zip(src).zip(a) {
            *d = term(s, ai);
        }
    } else {
        for ((d, &s), &ai) in dst.iter_mut().zip(src).zip(a) {
            *d += term(s, ai);
        }
    }
}

// --- flat row-major matrices and the three matmul kernels -------------------

/// Minimal row-major matrix over a flat buffer. Rows can shrink in place so
/// batch buffers are reused across steps without reallocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data[..self.rows * self.cols]
    }

    /// Reuse the buffer for a (possibly smaller) number of rows.
    pub fn set_rows(&mut self, rows: usize) {
        self.data.resize(rows * self.cols, 0.0);
        self.rows = rows;
    }

    /// Reuse the buffer as a rows × cols matrix; contents are unspecified
    /// until written.
    fn set_shape(&mut self, rows: usize, cols: usize) {
        self.cols = cols;
        self.data.resize(rows * cols, 0.0);
        self.rows = rows;
    }

    pub fn fill(&mut self, v: f64) {
        self.data[..self.rows * self.cols].fill(v);
    }
}

/// The networks here are 32 units wide almost everywhere, so each kernel has
/// a width-32 fast path whose accumulator is a local `[f64; 32]`: the
/// compiler promotes it to vector registers, turning the inner loops into
/// broadcast-FMA chains with no store/reload of partial sums.
const LANE: usize = 32;

/// out[r,:] = bias + a[r,:] · w, with `w` stored (in_dim × out_dim)
/// row-major.
fn matmul_bias_act(a: &Mat, w: &[f64], bias: &[f64], act: Activation, out: &mut Mat) {
    let (in_dim, out_dim) = (a.cols, bias.len());
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(out.cols, out_dim);
    debug_assert_eq!(out.rows, a.rows);
    if out_dim == LANE {
        let (w_rows, rem) = w.as_chunks::<LANE>();
        debug_assert!(rem.is_empty());
        let bias: &[f64; LANE] = bias.try_into().expect("width checked");
        // One sample per pass: a single [f64; LANE] accumulator stays in
        // registers as long as the loop body is pure broadcast-FMA, while
        // multi-row blocking (or running the activation on the accumulator
        // itself) spills it to the stack. The activation instead runs on the
        // just-stored row while it is still cache-hot; matching on the
        // activation outside the row loop keeps each arm free of per-row
        // dispatch.
        macro_rules! rows_with {
            ($apply:expr) => {
                for r in 0..a.rows {
                    let mut acc = *bias;
                    for (&av, w_row) in a.row(r).iter().zip(w_rows) {
                        for j in 0..LANE {
                            acc[j] += av * w_row[j];
                        }
                    }
                    let row: &mut [f64; LANE] =
                        out.row_mut(r).try_into().expect("width checked");
                    *row = acc;
                    $apply(row);
                }
            };
        }
        match act {
            Activation::Linear => rows_with!(|_row: &mut [f64; LANE]| {}),
            Activation::Tanh => rows_with!(tanh_lanes::<LANE>),
            Activation::Sigmoid => rows_with!(sigmoid_lanes::<LANE>),
        }
        return;
    }
    for r in 0..a.rows {
        let a_row = a.row(r);
        let o_row = out.row_mut(r);
        o_row.copy_from_slice(bias);
        for (k, &av) in a_row.iter().enumerate() {
            let w_row = &w[k * out_dim..(k + 1) * out_dim];
            for (o, &wv) in o_row.iter_mut().zip(w_row) {
                *o += av * wv;
            }
        }
        apply_activation(act, o_row);
    }
}

/// da[r,:] (=/+=) (dz[r,:] · wt) ⊙ act'(a[r,:]), where `wt` is the
/// (out_dim × in_dim) transpose of the layer's weights — same broadcast-FMA
/// shape as the forward product. The chain rule through the upstream
/// activation is applied while the product row is still in registers, and
/// `ACC = false` overwrites the destination, which lets backward skip zeroing
/// buffers that have exactly one writer. `a` holds the post-activation values
/// the derivative is expressed through (same shape as `da`).
fn matmul_wt<const ACC: bool>(dz: &Mat, wt: &[f64], act: Activation, a: &Mat, da: &mut Mat) {
    let (out_dim, in_dim) = (dz.cols, da.cols);
    debug_assert_eq!(wt.len(), in_dim * out_dim);
    debug_assert_eq!(dz.rows, da.rows);
    debug_assert!(a.rows == da.rows && a.cols == da.cols);
    if in_dim == LANE {
        let (wt_rows, rem) = wt.as_chunks::<LANE>();
        debug_assert!(rem.is_empty());
        // The activation match sits outside the row loop so each arm's body
        // is pure vector code: broadcast-FMA product in registers, then the
        // chain-rule factor and the optional += folded into the store.
        macro_rules! rows_with {
            ($grad:expr) => {
                for r in 0..dz.rows {
                    let mut acc = [0.0; LANE];
                    for (&d, wt_row) in dz.row(r).iter().zip(wt_rows) {
                        for j in 0..LANE {
                            acc[j] += d * wt_row[j];
                        }
                    }
                    let a_row: &[f64; LANE] = a.row(r).try_into().expect("width checked");
                    let da_row: &mut [f64; LANE] = da.row_mut(r).try_into().expect("width checked");
                    for j in 0..LANE {
                        let g = acc[j] * $grad(a_row[j]);
                        da_row[j] = if ACC { da_row[j] + g } else { g };
                    }
                }
            };
        }
        match act {
            Activation::Linear => rows_with!(|_ai: f64| 1.0),
            Activation::Tanh => rows_with!(|ai: f64| 1.0 - ai * ai),
            Activation::Sigmoid => rows_with!(|ai: f64| ai * (1.0 - ai)),
        }
        return;
    }
    let mut tmp = vec![0.0; in_dim];
    for r in 0..dz.rows {
        tmp.fill(0.0);
        for (j, &d) in dz.row(r).iter().enumerate() {
            let wt_row = &wt[j * in_dim..(j + 1) * in_dim];
            for (t, &wv) in tmp.iter_mut().zip(wt_row) {
                *t += d * wv;
            }
        }
        apply_activation_grad(act, &mut tmp, a.row(r));
        let da_row = da.row_mut(r);
        if ACC {
            for (dai, &t) in da_row.iter_mut().zip(&tmp) {
                *dai += t;
            }
        } else {
            da_row.copy_from_slice(&tmp);
        }
    }
}

/// Transpose (in_dim × out_dim) `w` into (out_dim × in_dim) `wt`. Tiny next
/// to the batch-sized products it enables.
fn transpose_into(w: &[f64], in_dim: usize, out_dim: usize, wt: &mut [f64]) {
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert!(wt.len() >= in_dim * out_dim);
    for i in 0..in_dim {
        for j in 0..out_dim {
            wt[j * in_dim + i] = w[i * out_dim + j];
        }
    }
}

/// gw += aᵀ · dz and gb += column sums of dz — the parameter-gradient
/// accumulation, with the gradient block resident in cache across the batch.
/// The fast path processes four samples per pass so each gw row is touched
/// once per four rank-1 updates. (A register tile of gw rows accumulated
/// over the whole batch measures 3x slower here: the tile spills.)
fn grad_acc(a: &Mat, dz: &Mat, gw: &mut [f64], gb: &mut [f64]) {
    let (in_dim, out_dim) = (a.cols, dz.cols);
    debug_assert_eq!(gw.len(), in_dim * out_dim);
    debug_assert_eq!(gb.len(), out_dim);
    debug_assert_eq!(a.rows, dz.rows);
    if out_dim == LANE {
        let (gw_rows, rem) = gw.as_chunks_mut::<LANE>();
        debug_assert!(rem.is_empty());
        let gb: &mut [f64; LANE] = gb.try_into().expect("width checked");
        let mut r = 0;
        while r + 4 <= a.rows {
            let (d0, d1, d2, d3): (&[f64; LANE], &[f64; LANE], &[f64; LANE], &[f64; LANE]) = (
                dz.row(r).try_into().expect("width checked"),
                dz.row(r + 1).try_into().expect("width checked"),
                dz.row(r + 2).try_into().expect("width checked"),
                dz.row(r + 3).try_into().expect("width checked"),
            );
            let (a0, a1, a2, a3) = (a.row(r), a.row(r + 1), a.row(r + 2), a.row(r + 3));
            for (i, g_row) in gw_rows.iter_mut().enumerate() {
                let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
                for j in 0..LANE {
                    g_row[j] += x0 * d0[j] + x1 * d1[j] + x2 * d2[j] + x3 * d3[j];
                }
            }
            for j in 0..LANE {
                gb[j] += d0[j] + d1[j] + d2[j] + d3[j];
            }
            r += 4;
        }
        while r < a.rows {
            let d: &[f64; LANE] = dz.row(r).try_into().expect("width checked");
            let a_row = a.row(r);
            for (i, g_row) in gw_rows.iter_mut().enumerate() {
                let av = a_row[i];
                for j in 0..LANE {
                    g_row[j] += av * d[j];
                }
            }
            for j in 0..LANE {
                gb[j] += d[j];
            }
            r += 1;
        }
        return;
    }
    for r in 0..a.rows {
        let a_row = a.row(r);
        let dz_row = dz.row(r);
        for (i, &av) in a_row.iter().enumerate() {
            let g_row = &mut gw[i * out_dim..(i + 1) * out_dim];
            for (g, &d) in g_row.iter_mut().zip(dz_row) {
                *g += av * d;
            }
        }
        for (g, &d) in gb.iter_mut().zip(dz_row) {
            *g += d;
        }
    }
}

// --- layer specification ----------------------------------------------------

/// Shape and wiring of one fully connected layer. `residual_from`, when set,
/// names an earlier layer whose output is added to this layer's
/// pre-activation (an identity skip; dimensions must match).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub residual_from: Option<usize>,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation, residual_from: None }
    }

    pub fn with_residual(mut self, from: usize) -> Self {
        self.residual_from = Some(from);
        self
    }
}

/// lr(epoch) = lr0 · decay_factor^⌊epoch / decay_every⌋.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl TrainSchedule {
    pub fn new(lr0: f64, decay_factor: f64, decay_every: usize) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr0 must be positive, got {lr0}")));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor must be in (0, 1], got {decay_factor}"
            )));
        }
        if decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be nonzero".into()));
        }
        Ok(TrainSchedule { lr0, decay_factor, decay_every })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

// --- network ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: Vec<f64>, // in_dim × out_dim, row-major
    b: Vec<f64>, // out_dim
}

#[derive(Debug, Clone, PartialEq)]
struct AdamLayer {
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
}

/// A fully connected network plus its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    adam: Vec<AdamLayer>,
    adam_t: u64,
}

/// Per-layer parameter gradients, shaped like the network they came from.
/// Accumulated across backward calls; zero once per optimizer step.
#[derive(Debug, Clone)]
pub struct Grads {
    gw: Vec<Vec<f64>>,
    gb: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zero(&mut self) {
        for g in &mut self.gw {
            g.fill(0.0);
        }
        for g in &mut self.gb {
            g.fill(0.0);
        }
    }

    /// Weight gradient of layer `l`, row-major (in_dim × out_dim).
    pub fn weight_grad(&self, l: usize) -> &[f64] {
        &self.gw[l]
    }

    pub fn bias_grad(&self, l: usize) -> &[f64] {
        &self.gb[l]
    }
}

/// Reusable forward/backward buffers for one network at one max batch size.
/// `acts[0]` is the input; `acts[l+1]` the post-activation output of layer
/// `l`. Logical delta buffer `i` holds dL/d acts[i] during backward, stored
/// in `deltas[i % deltas.len()]`: at most four logical deltas are live at
/// once (the one being consumed, the one being written, and residual targets
/// at most three layers back), so four rotating slots suffice and keep the
/// backward working set cache-resident instead of one buffer per layer.
/// Networks with longer residual reach fall back to one slot per layer.
#[derive(Debug, Clone)]
pub struct Workspace {
    acts: Vec<Mat>,
    deltas: Vec<Mat>,
    delta_written: Vec<bool>,
    wt_scratch: Vec<f64>,
}

impl Workspace {
    /// Final-layer output of the last forward pass.
    pub fn output(&self) -> &Mat {
        self.acts.last().expect("workspace has at least the input buffer")
    }

    /// dL/d(input) after backward — the piece that continues into whatever
    /// produced this network's input. (Logical index 0 always lands in
    /// physical slot 0.)
    pub fn input_grad(&self) -> &Mat {
        &self.deltas[0]
    }

    /// Physical slot of logical delta buffer `i` — the identity when one
    /// slot per layer is allocated.
    #[inline]
    fn delta_slot(&self, i: usize) -> usize {
        i % self.deltas.len()
    }

    fn set_rows(&mut self, rows: usize) {
        for m in self.acts.iter_mut() {
            m.set_rows(rows);
        }
    }
}

impl Mlp {
    /// Validate the layer chain and initialize weights uniformly in
    /// ±√(6/(in+out)) with zero biases, drawing in fixed layer order.
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, s) in specs.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::InvalidArgument(format!("layer {l} has a zero dimension")));
            }
            if l > 0 && s.in_dim != specs[l - 1].out_dim {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} expects {} inputs but layer {} outputs {}",
                    s.in_dim,
                    l - 1,
                    specs[l - 1].out_dim
                )));
            }
            if let Some(rf) = s.residual_from {
                if rf >= l {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l} residual source {rf} is not an earlier layer"
                    )));
                }
                if specs[rf].out_dim != s.out_dim {
                    return Err(Error::InvalidArgument(format!(
                        "residual {rf}→{l} joins width {} to width {}",
                        specs[rf].out_dim, s.out_dim
                    )));
                }
            }
        }
        let layers = specs
            .iter()
            .map(|s| {
                let scale = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let w = (0..s.in_dim * s.out_dim)
                    .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                Layer { w, b: vec![0.0; s.out_dim] }
            })
            .collect::<Vec<_>>();
        let adam = specs
            .iter()
            .map(|s| AdamLayer {
                mw: vec![0.0; s.in_dim * s.out_dim],
                vw: vec![0.0; s.in_dim * s.out_dim],
                mb: vec![0.0; s.out_dim],
                vb: vec![0.0; s.out_dim],
            })
            .collect();
        Ok(Mlp { specs, layers, adam, adam_t: 0 })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().expect("nonempty").out_dim
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum()
    }

    /// Buffers sized for this network at `max_batch` rows.
    pub fn workspace(&self, max_batch: usize) -> Workspace {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.specs.iter().map(|s| s.out_dim));
        let max_wt = self.specs.iter().map(|s| s.in_dim * s.out_dim).max().unwrap_or(0);
        // Four rotating delta slots cover every network whose residuals reach
        // back at most three layers (live logical indices then span at most
        // {l−2, …, l+1}, which are distinct mod 4); anything longer-reaching
        // gets one slot per layer.
        let reach = self
            .specs
            .iter()
            .enumerate()
            .filter_map(|(l, s)| s.residual_from.map(|rf| l - rf))
            .max()
            .unwrap_or(0);
        let slots = if reach <= 3 { dims.len().min(4) } else { dims.len() };
        let width = *dims.iter().max().expect("nonempty");
        Workspace {
            acts: dims.iter().map(|&d| Mat::zeros(max_batch, d)).collect(),
            deltas: (0..slots).map(|_| Mat::zeros(max_batch, width)).collect(),
            delta_written: vec![false; dims.len()],
            wt_scratch: vec![0.0; max_wt],
        }
    }

    pub fn grads(&self) -> Grads {
        Grads {
            gw: self.specs.iter().map(|s| vec![0.0; s.in_dim * s.out_dim]).collect(),
            gb: self.specs.iter().map(|s| vec![0.0; s.out_dim]).collect(),
        }
    }

    /// Batched forward pass; activations are cached in `ws` for backward.
    /// Panics on input-shape mismatch.
    pub fn forward_batch(&self, input: &Mat, ws: &mut Workspace) {
        assert_eq!(
            input.cols,
            self.input_dim(),
            "input has {} columns, network expects {}",
            input.cols,
            self.input_dim()
        );
        ws.set_rows(input.rows);
        ws.acts[0].data[..input.rows * input.cols].copy_from_slice(input.as_slice());
        for (l, spec) in self.specs.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let out = &mut rest[0];
            if let Some(rf) = spec.residual_from {
                // The skip connection lands before the activation, so the
                // activation cannot be fused into the product here.
                matmul_bias_act(&prev[l], &self.layers[l].w, &self.layers[l].b, Activation::Linear, out);
                let src = &prev[rf + 1];
                for (o, &s) in out.data[..out.rows * out.cols]
                    .iter_mut()
                    .zip(&src.data[..src.rows * src.cols])
                {
                    *o += s;
                }
                apply_activation(spec.activation, &mut out.data[..out.rows * out.cols]);
            } else {
                matmul_bias_act(&prev[l], &self.layers[l].w, &self.layers[l].b, spec.activation, out);
            }
        }
    }

    /// Single-sample forward without touching a shared workspace.
    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace(1);
        let mut m = Mat::zeros(1, input.len());
        m.row_mut(0).copy_from_slice(input);
        self.forward_batch(&m, &mut ws);
        ws.output().row(0).to_vec()
    }

    /// Reverse pass from `out_grad` = dL/d(output), accumulating parameter
    /// gradients into `grads` (+=) and leaving dL/d(input) in
    /// `ws.input_grad()`. Residual connections propagate along both paths.
    ///
    /// Logical delta buffer k holds the gradient at layer k−1's
    /// pre-activation (raw dL/d(input) for k = 0): every writer applies the
    /// chain rule through the activation that produced `acts[k]` as it
    /// writes, which is valid because the elementwise scaling distributes
    /// over the contributions. Buffers are shaped on first write and later
    /// writers add, so nothing needs pre-zeroing. (A buffer can see two
    /// writers: the residual contribution from its consumer arrives before
    /// the matmul path, because layers are processed last to first.)
    pub fn backward_batch(&self, ws: &mut Workspace, out_grad: &Mat, grads: &mut Grads) {
        self.backward_impl(ws, out_grad, grads, true);
    }

    /// [`backward_batch`] without the layer-0 data-gradient product:
    /// parameter gradients are still accumulated for every layer, but
    /// `ws.input_grad()` is left unwritten. For networks whose input is data
    /// rather than an upstream module's output, this skips one product.
    pub fn backward_batch_params_only(&self, ws: &mut Workspace, out_grad: &Mat, grads: &mut Grads) {
        self.backward_impl(ws, out_grad, grads, false);
    }

    fn backward_impl(&self, ws: &mut Workspace, out_grad: &Mat, grads: &mut Grads, input_grad: bool) {
        let n_layers = self.specs.len();
        let rows = ws.acts[0].rows;
        assert_eq!(out_grad.rows, rows, "gradient batch mismatch");
        assert_eq!(out_grad.cols, self.output_dim(), "gradient width mismatch");
        ws.delta_written.fill(false);
        let n = rows * out_grad.cols;
        let seed = ws.delta_slot(n_layers);
        ws.deltas[seed].set_shape(rows, out_grad.cols);
        scaled_delta(
            self.specs[n_layers - 1].activation,
            out_grad.as_slice(),
            &ws.acts[n_layers].data[..n],
            &mut ws.deltas[seed].data[..n],
            true,
        );
        ws.delta_written[n_layers] = true;

        for l in (0..n_layers).rev() {
            let spec = &self.specs[l];
            if l == 0 && !input_grad {
                // Layer 0 of a data-fed network: weights still need their
                // gradient, but nothing consumes dL/d(input).
                let dz = &ws.deltas[ws.delta_slot(1)];
                grad_acc(&ws.acts[0], dz, &mut grads.gw[0], &mut grads.gb[0]);
                break;
            }
            transpose_into(&self.layers[l].w, spec.in_dim, spec.out_dim, &mut ws.wt_scratch);
            let wt = &ws.wt_scratch[..spec.in_dim * spec.out_dim];
            let up_act = if l == 0 { Activation::Linear } else { self.specs[l - 1].activation };
            let (slot_dz, slot_da) = (ws.delta_slot(l + 1), ws.delta_slot(l));
            let main_first = !ws.delta_written[l];
            if main_first {
                ws.deltas[slot_da].set_shape(rows, spec.in_dim);
            }
            let [dz, da] = ws
                .deltas
                .get_disjoint_mut([slot_dz, slot_da])
                .expect("live delta buffers occupy distinct slots");
            let dz: &Mat = dz;
            grad_acc(&ws.acts[l], dz, &mut grads.gw[l], &mut grads.gb[l]);
            if main_first {
                matmul_wt::<false>(dz, wt, up_act, &ws.acts[l], da);
                ws.delta_written[l] = true;
            } else {
                matmul_wt::<true>(dz, wt, up_act, &ws.acts[l], da);
            }
            if let Some(rf) = spec.residual_from {
                let slot_dst = ws.delta_slot(rf + 1);
                let res_first = !ws.delta_written[rf + 1];
                if res_first {
                    ws.deltas[slot_dst].set_shape(rows, self.specs[rf].out_dim);
                }
                let [dz, dst] = ws
                    .deltas
                    .get_disjoint_mut([slot_dz, slot_dst])
                    .expect("live delta buffers occupy distinct slots");
                let m = rows * dst.cols;
                scaled_delta(
                    self.specs[rf].activation,
                    &dz.data[..m],
                    &ws.acts[rf + 1].data[..m],
                    &mut dst.data[..m],
                    res_first,
                );
                ws.delta_written[rf + 1] = true;
            }
        }
    }

    /// One Adam update (β₁=0.9, β₂=0.999, ε=1e−8) at the schedule's rate for
    /// `epoch`. A non-finite gradient aborts with a divergence error naming
    /// the offending layer.
    pub fn adam_step(&mut self, grads: &Grads, schedule: &TrainSchedule, epoch: usize) -> Result<()> {
        for (l, (gw, gb)) in grads.gw.iter().zip(&grads.gb).enumerate() {
            if gw.iter().chain(gb).any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite gradient in layer {l}"),
                });
            }
        }
        self.adam_t += 1;
        let lr = schedule.lr(epoch);
        let bc1 = 1.0 - ADAM_BETA1.powi(self.adam_t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.adam_t as i32);
        let inv_sqrt_bc2 = 1.0 / bc2.sqrt();
        let step_scale = lr / bc1;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            // Rewritten so the denominator uses √v·(1/√bc2): one sqrt and one
            // division per element, and the hoisted length check lets the
            // whole loop vectorize.
            let n = p.len();
            assert!(g.len() == n && m.len() == n && v.len() == n);
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= step_scale * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + ADAM_EPS);
            }
        };
        for (layer, (adam, (gw, gb))) in
            self.layers.iter_mut().zip(self.adam.iter_mut().zip(grads.gw.iter().zip(&grads.gb)))
        {
            update(&mut layer.w, gw, &mut adam.mw, &mut adam.vw);
            update(&mut layer.b, gb, &mut adam.mb, &mut adam.vb);
        }
        Ok(())
    }

    /// Flat view of all parameters in serialization order (for gradient
    /// checks and diagnostics).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrite all parameters from the flat order of [`Self::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length mismatch");
        let mut pos = 0;
        for l in &mut self.layers {
            let (nw, nb) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            l.b.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
    }

    /// Gradients from `grads` flattened in the same order as
    /// [`Self::flat_params`].
    pub fn flat_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads.gw.iter().zip(&grads.gb) {
            out.extend_from_slice(gw);
            out.extend_from_slice(gb);
        }
        out
    }

    // --- serialization -------------------------------------------------------

    /// Append this network (specs, parameters, Adam state) to `buf`.
    /// Little-endian throughout; the float bytes round-trip bit-exactly.
    pub fn write_into(&self, buf: &mut Vec<u8>) {
        write_u32(buf, self.specs.len() as u32);
        for s in &self.specs {
            write_u32(buf, s.in_dim as u32);
            write_u32(buf, s.out_dim as u32);
            buf.push(s.activation.code());
            match s.residual_from {
                Some(rf) => {
                    buf.push(1);
                    write_u32(buf, rf as u32);
                }
                None => {
                    buf.push(0);
                    write_u32(buf, 0);
                }
            }
        }
        buf.extend_from_slice(&self.adam_t.to_le_bytes());
        for (layer, adam) in self.layers.iter().zip(&self.adam) {
            for v in [&layer.w, &layer.b, &adam.mw, &adam.vw, &adam.mb, &adam.vb] {
                write_f64_slice(buf, v);
            }
        }
    }

    /// Parse a network previously written by [`Self::write_into`], advancing
    /// `pos` past it.
    pub fn read_from(buf: &[u8], pos: &mut usize) -> Result<Mlp> {
        let n_layers = read_u32(buf, pos)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = read_u32(buf, pos)? as usize;
            let out_dim = read_u32(buf, pos)? as usize;
            let act = Activation::from_code(read_u8(buf, pos)?)?;
            let has_rf = read_u8(buf, pos)? != 0;
            let rf = read_u32(buf, pos)? as usize;
            specs.push(LayerSpec {
                in_dim,
                out_dim,
                activation: act,
                residual_from: has_rf.then_some(rf),
            });
        }
        let adam_t = read_u64(buf, pos)?;
        let mut layers = Vec::with_capacity(n_layers);
        let mut adam = Vec::with_capacity(n_layers);
        for s in &specs {
            let nw = s.in_dim * s.out_dim;
            let w = read_f64_vec(buf, pos, nw)?;
            let b = read_f64_vec(buf, pos, s.out_dim)?;
            let mw = read_f64_vec(buf, pos, nw)?;
            let vw = read_f64_vec(buf, pos, nw)?;
            let mb = read_f64_vec(buf, pos, s.out_dim)?;
            let vb = read_f64_vec(buf, pos, s.out_dim)?;
            layers.push(Layer { w, b });
            adam.push(AdamLayer { mw, vw, mb, vb });
        }
        // Re-validate wiring through the public constructor's rules.
        let shell = Mlp { specs, layers, adam, adam_t };
        for (l, s) in shell.specs.iter().enumerate() {
            if l > 0 && s.in_dim != shell.specs[l - 1].out_dim {
                return Err(Error::Checkpoint(format!("layer {l} dimension chain broken")));
            }
            if let Some(rf) = s.residual_from {
                if rf >= l || shell.specs[rf].out_dim != s.out_dim {
                    return Err(Error::Checkpoint(format!("layer {l} residual wiring invalid")));
                }
            }
        }
        Ok(shell)
    }
}

// --- little-endian helpers ---------------------------------------------------

pub(crate) fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_f64_slice(buf: &mut Vec<u8>, v: &[f64]) {
    buf.reserve(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn read_u8(buf: &[u8], pos: &mut usize) -> Result<u8> {
    let b = *buf.get(*pos).ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
    *pos += 1;
    Ok(b)
}

pub(crate) fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let bytes = buf.get(*pos..end).ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
    *pos = end;
    Ok(u32::from_le_bytes(bytes.try_into().expect("length checked")))
}

pub(crate) fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let end = *pos + 8;
    let bytes = buf.get(*pos..end).ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
    *pos = end;
    Ok(u64::from_le_bytes(bytes.try_into().expect("length checked")))
}

pub(crate) fn read_f64_vec(buf: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>> {
    let end = *pos + 8 * n;
    let bytes = buf.get(*pos..end).ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
    *pos = end;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
        .collect())
}

// ---------------------------------------------------------------------------
