//! End-to-end autoencoder for two-user downlink NOMA.
//!
//! One encoder maps both users' bits plus channel state to a single complex
//! symbol; a batch-average power constraint scales the symbols; each user's
//! symbol passes through its own Rayleigh-faded AWGN channel; one decoder per
//! user maps the received sample and that user's gain back to bit
//! probabilities. Training minimizes a fairness-weighted sum of the two
//! binary cross-entropies — `w·max(L₁,L₂) + min(L₁,L₂)` — either at one
//! fixed training SNR or as an SNR-weighted mixture over a set of SNRs (the
//! error-floor mitigation mode), with gradients propagated through the whole
//! chain including the power normalization and the channel.
//!
//! With quantized CSI the encoder sees the quantized gains while the channel
//! itself and both decoders use the true gains.

use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::{noise_sigma_from_snr, sample_channel, ChannelRealization, FadingConfig};
use crate::error::{Error, Result};
use crate::nn::{
    fast_ln, ln_lanes, read_f64_vec, read_u32, read_u8, write_f64_slice, write_u32, Activation,
    Grads, LayerSpec, Mat, Mlp, TrainSchedule, Workspace,
};
use crate::quantizer::{quantize_csi, QuantizedCsi, QuantizerCodebook, QuantizerKind};

/// Width of the input and hidden layers of every network in the system.
pub const HIDDEN_WIDTH: usize = 32;
/// Number of 32→32 hidden layers between the input layer and the output.
pub const N_HIDDEN: usize = 8;
/// Probabilities are clamped to `[PROB_CLIP, 1−PROB_CLIP]` inside the
/// cross-entropy so saturated sigmoids cannot produce infinite losses.
pub const PROB_CLIP: f64 = 1e-12;

// --- configuration ------------------------------------------------------------

/// Message lengths of the two users in bits per symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitConfig {
    pub l1: usize,
    pub l2: usize,
}

impl BitConfig {
    pub fn new(l1: usize, l2: usize) -> Result<Self> {
        if l1 == 0 || l2 == 0 {
            return Err(Error::InvalidArgument("each user needs at least one bit".into()));
        }
        if l1 + l2 > 16 {
            return Err(Error::InvalidArgument(format!(
                "{} joint bits would make the super-constellation unenumerable",
                l1 + l2
            )));
        }
        Ok(BitConfig { l1, l2 })
    }

    pub fn total(self) -> usize {
        self.l1 + self.l2
    }
}

impl Default for BitConfig {
    fn default() -> Self {
        BitConfig { l1: 2, l2: 2 }
    }
}

/// What the encoder is allowed to see of the channel. The channel itself and
/// the decoders always use the true gains.
#[derive(Debug, Clone, PartialEq)]
pub enum CsiMode {
    /// Encoder sees the true gains: ĥ_k = h_k.
    Perfect,
    /// Encoder sees each gain component mapped through a scalar codebook
    /// (`cb1` designed for user 1's spread, `cb2` for user 2's).
    Quantized { cb1: QuantizerCodebook, cb2: QuantizerCodebook },
}

/// Fairness weight and the SNR set of the multi-SNR training objective.
/// The set's entries are interpreted as dB values when generating noise and
/// used verbatim as the mixture weights γᵢ/Σγⱼ.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w: f64,
    pub snr_set: Vec<f64>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 1.0 && self.w.is_finite()) {
            return Err(Error::InvalidArgument(format!("fairness weight must be ≥ 1, got {}", self.w)));
        }
        if self.snr_set.is_empty() {
            return Err(Error::InvalidArgument("SNR set must be nonempty".into()));
        }
        if self.snr_set.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("SNR set entries must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w: 10.0, snr_set: vec![1.0, 5.0, 10.0, 15.0, 20.0] }
    }
}

/// Whether training evaluates the loss at the single fixed SNR or over the
/// weighted SNR set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FixedSnr,
    MultiSnr,
}

/// Training-loop parameters. One epoch is a full pass over the (fixed,
/// reshuffled) training set in batches of `batch_size`; a trailing partial
/// batch is skipped so every power normalization sees the same batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub schedule: TrainSchedule,
    pub master_seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if self.n_train < self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "training set of {} cannot fill one batch of {}",
                self.n_train, self.batch_size
            )));
        }
        if self.n_epochs == 0 {
            return Err(Error::InvalidArgument("need at least one epoch".into()));
        }
        if !self.train_snr_db.is_finite() {
            return Err(Error::InvalidArgument("training SNR must be finite".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 40_000,
            n_epochs: 10_000,
            batch_size: 512,
            train_snr_db: 10.0,
            schedule: TrainSchedule::new(0.01, 0.95, 100).expect("static schedule is valid"),
            master_seed: 1,
            mode: TrainMode::FixedSnr,
        }
    }
}

// --- the system ----------------------------------------------------------------

/// Encoder, two decoders, and the deployment state that binds them: bit
/// lengths, the average-power budget, the CSI mode, and (once frozen) the
/// inference power scale.
#[derive(Debug, Clone)]
pub struct AeSystem {
    pub encoder: Mlp,
    pub decoder1: Mlp,
    pub decoder2: Mlp,
    pub bit_config: BitConfig,
    pub power: f64,
    pub csi_mode: CsiMode,
    inference_scale: Option<f64>,
}

/// The shared stack shape: an input layer to width 32, eight 32→32 hidden
/// layers (all tanh), and a task-specific output layer. Identity skips feed
/// the output of hidden layers 1, 3, 5 into the pre-activations of hidden
/// layers 3, 5, 7.
fn stack_specs(in_dim: usize, out_dim: usize, out_act: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(N_HIDDEN + 2);
    specs.push(LayerSpec::new(in_dim, HIDDEN_WIDTH, Activation::Tanh));
    for l in 1..=N_HIDDEN {
        let mut s = LayerSpec::new(HIDDEN_WIDTH, HIDDEN_WIDTH, Activation::Tanh);
        if l == 3 || l == 5 || l == 7 {
            s = s.with_residual(l - 2);
        }
        specs.push(s);
    }
    specs.push(LayerSpec::new(HIDDEN_WIDTH, out_dim, out_act));
    specs
}

/// Write one sample's encoder features: bits as ±1, then the re/im parts of
/// both (possibly quantized) gains.
fn write_features(dst: &mut [f64], bits1: &[u8], bits2: &[u8], h1: Complex64, h2: Complex64) {
    let mut i = 0;
    for &b in bits1.iter().chain(bits2) {
        dst[i] = 2.0 * b as f64 - 1.0;
        i += 1;
    }
    dst[i] = h1.re;
    dst[i + 1] = h1.im;
    dst[i + 2] = h2.re;
    dst[i + 3] = h2.im;
}

impl AeSystem {
    /// Build a freshly initialized system. Parameter draws happen in fixed
    /// order (encoder, decoder 1, decoder 2), so one seeded RNG reproduces
    /// the system exactly.
    pub fn new<R: Rng + ?Sized>(
        bit_config: BitConfig,
        power: f64,
        csi_mode: CsiMode,
        rng: &mut R,
    ) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::InvalidArgument(format!("power budget must be positive, got {power}")));
        }
        let encoder = Mlp::new(stack_specs(bit_config.total() + 4, 2, Activation::Linear), rng)?;
        let decoder1 = Mlp::new(stack_specs(4, bit_config.l1, Activation::Sigmoid), rng)?;
        let decoder2 = Mlp::new(stack_specs(4, bit_config.l2, Activation::Sigmoid), rng)?;
        Self::with_networks(encoder, decoder1, decoder2, bit_config, power, csi_mode)
    }

    /// Assemble a system from pre-built networks (used for miniature gradient
    /// -check systems and checkpoint loading). Validates the glue dimensions.
    pub fn with_networks(
        encoder: Mlp,
        decoder1: Mlp,
        decoder2: Mlp,
        bit_config: BitConfig,
        power: f64,
        csi_mode: CsiMode,
    ) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::InvalidArgument(format!("power budget must be positive, got {power}")));
        }
        let checks = [
            (encoder.input_dim() == bit_config.total() + 4, "encoder input ≠ l1+l2+4"),
            (encoder.output_dim() == 2, "encoder output must be the I/Q pair"),
            (decoder1.input_dim() == 4, "decoder 1 input must be (y, h) components"),
            (decoder2.input_dim() == 4, "decoder 2 input must be (y, h) components"),
            (decoder1.output_dim() == bit_config.l1, "decoder 1 output ≠ l1"),
            (decoder2.output_dim() == bit_config.l2, "decoder 2 output ≠ l2"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(AeSystem {
            encoder,
            decoder1,
            decoder2,
            bit_config,
            power,
            csi_mode,
            inference_scale: None,
        })
    }

    /// The gains the encoder sees for a channel realization: the realization
    /// itself under perfect CSI, its component-wise quantization otherwise.
    pub fn csi_hat(&self, re: &ChannelRealization) -> (Complex64, Complex64) {
        match &self.csi_mode {
            CsiMode::Perfect => (re.h1, re.h2),
            CsiMode::Quantized { cb1, cb2 } => {
                let QuantizedCsi { h1_hat, h2_hat } = quantize_csi(re, cb1, cb2);
                (h1_hat, h2_hat)
            }
        }
    }

    /// Encoder forward pass for one symbol, before power normalization.
    pub fn encode(&self, bits1: &[u8], bits2: &[u8], csi: &ChannelRealization) -> Result<Complex64> {
        if bits1.len() != self.bit_config.l1 || bits2.len() != self.bit_config.l2 {
            return Err(Error::InvalidArgument(format!(
                "bit lengths ({}, {}) do not match the configured ({}, {})",
                bits1.len(),
                bits2.len(),
                self.bit_config.l1,
                self.bit_config.l2
            )));
        }
        let (h1_hat, h2_hat) = self.csi_hat(csi);
        let mut feat = vec![0.0; self.encoder.input_dim()];
        write_features(&mut feat, bits1, bits2, h1_hat, h2_hat);
        let out = self.encoder.forward_one(&feat);
        Ok(Complex64::new(out[0], out[1]))
    }

    /// Decoder forward pass for one received sample of user `k` ∈ {1, 2}.
    /// Returns per-bit probabilities; the hard decision thresholds at 0.5.
    pub fn decode(&self, k: usize, y: Complex64, h: Complex64) -> Result<Vec<f64>> {
        let dec = match k {
            1 => &self.decoder1,
            2 => &self.decoder2,
            _ => return Err(Error::InvalidArgument(format!("user index {k} out of range"))),
        };
        Ok(dec.forward_one(&[y.re, y.im, h.re, h.im]))
    }

    /// The frozen deployment power scale, if one has been computed.
    pub fn inference_scale(&self) -> Option<f64> {
        self.inference_scale
    }

    /// Freeze the deployment power scale to `√(P / mean |u|²)` where the mean
    /// runs over the whole symbol population: every bit combination at each
    /// of `n_channel_draws` channel draws. Training's per-batch normalization
    /// depends on batch composition; this populationwide scale does not.
    pub fn freeze_inference_scale<R: Rng + ?Sized>(
        &mut self,
        fading: &FadingConfig,
        n_channel_draws: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_channel_draws == 0 {
            return Err(Error::InvalidArgument("need at least one channel draw".into()));
        }
        let combos = enumerate_bit_combos(self.bit_config);
        let n_combos = combos.len();
        // Pack several channel draws per forward pass.
        let draws_per_chunk = (512 / n_combos).max(1);
        let mut input = Mat::zeros(draws_per_chunk * n_combos, self.encoder.input_dim());
        let mut ws = self.encoder.workspace(draws_per_chunk * n_combos);
        let mut sum_power = 0.0;
        let mut done = 0;
        while done < n_channel_draws {
            let chunk = draws_per_chunk.min(n_channel_draws - done);
            input.set_rows(chunk * n_combos);
            for d in 0..chunk {
                let re = sample_channel(fading, rng);
                let (h1_hat, h2_hat) = self.csi_hat(&re);
                for (c, (bits1, bits2)) in combos.iter().enumerate() {
                    write_features(input.row_mut(d * n_combos + c), bits1, bits2, h1_hat, h2_hat);
                }
            }
            self.encoder.forward_batch(&input, &mut ws);
            let out = ws.output();
            for r in 0..out.rows {
                let row = out.row(r);
                sum_power += row[0] * row[0] + row[1] * row[1];
            }
            done += chunk;
        }
        let mean = sum_power / (n_channel_draws * n_combos) as f64;
        if !(mean > 0.0) {
            return Err(Error::Numerical("degenerate encoder: population power is zero".into()));
        }
        let scale = (self.power / mean).sqrt();
        self.inference_scale = Some(scale);
        Ok(scale)
    }

    /// All `2^(l1+l2)` labeled symbols the encoder emits at one channel
    /// state, at deployment scale. Requires a frozen inference scale.
    pub fn export_constellation(&self, h1: Complex64, h2: Complex64) -> Result<Vec<ConstellationPoint>> {
        let scale = self.inference_scale.ok_or_else(|| {
            Error::InvalidArgument("inference scale not frozen; train or freeze it first".into())
        })?;
        let re = ChannelRealization { h1, h2 };
        let (h1_hat, h2_hat) = self.csi_hat(&re);
        let combos = enumerate_bit_combos(self.bit_config);
        let mut input = Mat::zeros(combos.len(), self.encoder.input_dim());
        for (c, (bits1, bits2)) in combos.iter().enumerate() {
            write_features(input.row_mut(c), bits1, bits2, h1_hat, h2_hat);
        }
        let mut ws = self.encoder.workspace(combos.len());
        self.encoder.forward_batch(&input, &mut ws);
        let out = ws.output();
        Ok(combos
            .into_iter()
            .enumerate()
            .map(|(c, (bits1, bits2))| ConstellationPoint {
                bits1,
                bits2,
                symbol: scale * Complex64::new(out.row(c)[0], out.row(c)[1]),
            })
            .collect())
    }

    /// Gradient buffers shaped for all three networks.
    pub fn grads(&self) -> AeGrads {
        AeGrads {
            encoder: self.encoder.grads(),
            decoder1: self.decoder1.grads(),
            decoder2: self.decoder2.grads(),
        }
    }

    /// Forward/backward buffers for batches up to `max_batch` rows.
    pub fn scratch(&self, max_batch: usize) -> AeScratch {
        AeScratch {
            enc_ws: self.encoder.workspace(max_batch),
            dec_ws: [self.decoder1.workspace(max_batch), self.decoder2.workspace(max_batch)],
            x: Mat::zeros(max_batch, 2),
            dec_in: Mat::zeros(max_batch, 4),
            dx: Mat::zeros(max_batch, 2),
            du: Mat::zeros(max_batch, 2),
            seed: [
                Mat::zeros(max_batch, self.bit_config.l1),
                Mat::zeros(max_batch, self.bit_config.l2),
            ],
        }
    }

    // --- checkpointing ---------------------------------------------------------

    /// Serialize the whole system (format version, bit lengths, power, CSI
    /// mode, frozen scale, all three networks with optimizer state) to
    /// `path`. The float payload round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut buf, CHECKPOINT_VERSION);
        write_u32(&mut buf, self.bit_config.l1 as u32);
        write_u32(&mut buf, self.bit_config.l2 as u32);
        write_f64_slice(&mut buf, &[self.power]);
        match self.inference_scale {
            Some(s) => {
                buf.push(1);
                write_f64_slice(&mut buf, &[s]);
            }
            None => {
                buf.push(0);
                write_f64_slice(&mut buf, &[0.0]);
            }
        }
        match &self.csi_mode {
            CsiMode::Perfect => buf.push(0),
            CsiMode::Quantized { cb1, cb2 } => {
                buf.push(1);
                for cb in [cb1, cb2] {
                    write_codebook(&mut buf, cb);
                }
            }
        }
        for net in [&self.encoder, &self.decoder1, &self.decoder2] {
            net.write_into(&mut buf);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Load a system previously written by [`Self::save`].
    pub fn load(path: &Path) -> Result<AeSystem> {
        let buf = std::fs::read(path)?;
        let mut pos = 0;
        if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a NOMA-AE checkpoint".into()));
        }
        pos += CHECKPOINT_MAGIC.len();
        let version = read_u32(&buf, &mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let l1 = read_u32(&buf, &mut pos)? as usize;
        let l2 = read_u32(&buf, &mut pos)? as usize;
        let bit_config = BitConfig::new(l1, l2).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let power = read_f64_vec(&buf, &mut pos, 1)?[0];
        let has_scale = read_u8(&buf, &mut pos)? != 0;
        let scale = read_f64_vec(&buf, &mut pos, 1)?[0];
        let csi_mode = match read_u8(&buf, &mut pos)? {
            0 => CsiMode::Perfect,
            1 => {
                let cb1 = read_codebook(&buf, &mut pos)?;
                let cb2 = read_codebook(&buf, &mut pos)?;
                CsiMode::Quantized { cb1, cb2 }
            }
            t => return Err(Error::Checkpoint(format!("unknown CSI mode tag {t}"))),
        };
        let encoder = Mlp::read_from(&buf, &mut pos)?;
        let decoder1 = Mlp::read_from(&buf, &mut pos)?;
        let decoder2 = Mlp::read_from(&buf, &mut pos)?;
        if pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - pos)));
        }
        let mut sys = Self::with_networks(encoder, decoder1, decoder2, bit_config, power, csi_mode)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        sys.inference_scale = has_scale.then_some(scale);
        Ok(sys)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"NOMAAE\n";
const CHECKPOINT_VERSION: u32 = 1;

fn write_codebook(buf: &mut Vec<u8>, cb: &QuantizerCodebook) {
    buf.push(match cb.kind {
        QuantizerKind::Uniform => 0,
        QuantizerKind::LloydMax => 1,
    });
    write_f64_slice(buf, &[cb.sigma]);
    write_u32(buf, cb.levels.len() as u32);
    write_f64_slice(buf, &cb.boundaries);
    write_f64_slice(buf, &cb.levels);
}

fn read_codebook(buf: &[u8], pos: &mut usize) -> Result<QuantizerCodebook> {
    let kind = match read_u8(buf, pos)? {
        0 => QuantizerKind::Uniform,
        1 => QuantizerKind::LloydMax,
        t => return Err(Error::Checkpoint(format!("unknown quantizer kind tag {t}"))),
    };
    let sigma = read_f64_vec(buf, pos, 1)?[0];
    let m = read_u32(buf, pos)? as usize;
    if m == 0 || m > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible codebook size {m}")));
    }
    let boundaries = read_f64_vec(buf, pos, m - 1)?;
    let levels = read_f64_vec(buf, pos, m)?;
    Ok(QuantizerCodebook { kind, sigma, boundaries, levels })
}

/// All bit combinations of a [`BitConfig`], each as (bits1, bits2) with the
/// most significant bit first; ordered by `(label1 << l2) | label2`.
pub fn enumerate_bit_combos(bc: BitConfig) -> Vec<(Vec<u8>, Vec<u8>)> {
    let unpack = |label: usize, len: usize| -> Vec<u8> {
        (0..len).map(|i| ((label >> (len - 1 - i)) & 1) as u8).collect()
    };
    let mut combos = Vec::with_capacity(1 << bc.total());
    for label1 in 0..1usize << bc.l1 {
        for label2 in 0..1usize << bc.l2 {
            combos.push((unpack(label1, bc.l1), unpack(label2, bc.l2)));
        }
    }
    combos
}

/// One labeled constellation symbol at a fixed channel state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationPoint {
    pub bits1: Vec<u8>,
    pub bits2: Vec<u8>,
    pub symbol: Complex64,
}

// --- losses --------------------------------------------------------------------

/// Mean binary cross-entropy over all (probability, bit) pairs, with
/// probabilities clamped away from {0, 1}. Since each target is exactly 0
/// or 1, the two-term sum reduces to −ln of the probability assigned to the
/// true bit, evaluated eight lanes at a time.
pub fn bce_loss(probs: &[f64], bits: &[f64]) -> f64 {
    assert_eq!(probs.len(), bits.len(), "probability/target length mismatch");
    let true_bit_prob =
        |p: f64, b: f64| (if b >= 0.5 { p } else { 1.0 - p }).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let mut sum = 0.0;
    let (p_chunks, p_rest) = probs.as_chunks::<8>();
    let (b_chunks, b_rest) = bits.as_chunks::<8>();
    for (p8, b8) in p_chunks.iter().zip(b_chunks) {
        let mut q = [0.0f64; 8];
        for i in 0..8 {
            q[i] = true_bit_prob(p8[i], b8[i]);
        }
        for l in ln_lanes(&q) {
            sum -= l;
        }
    }
    for (&p, &b) in p_rest.iter().zip(b_rest) {
        sum -= fast_ln(true_bit_prob(p, b));
    }
    sum / probs.len() as f64
}

/// The fairness objective `w·max(L₁, L₂) + min(L₁, L₂)`.
pub fn fairness_loss(l1: f64, l2: f64, w: f64) -> f64 {
    w * l1.max(l2) + l1.min(l2)
}

/// Scale the batch so its average symbol power is exactly `p`; returns the
/// applied scale `√(p / mean |x|²)`.
pub fn normalize_power(batch: &mut Mat, p: f64) -> Result<f64> {
    assert_eq!(batch.cols, 2, "symbols are (I, Q) pairs");
    assert!(batch.rows > 0, "power normalization needs a nonempty batch");
    let data = &mut batch.data[..batch.rows * 2];
    let mean: f64 = data.iter().map(|v| v * v).sum::<f64>() / batch.rows as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Numerical(format!(
            "degenerate encoder output: batch mean power {mean}"
        )));
    }
    let c = (p / mean).sqrt();
    for v in data {
        *v *= c;
    }
    Ok(c)
}

// --- batch containers ------------------------------------------------------------

/// One evaluation point of the training objective: a noise level and its
/// mixture weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPoint {
    pub noise_sigma: f64,
    pub weight: f64,
}

/// The noise levels and weights the training mode prescribes: the single
/// training SNR with weight 1, or the SNR set with weights γᵢ/Σγⱼ (set
/// entries read as dB for the noise level and verbatim for the weight).
pub fn gamma_points(cfg: &TrainConfig, weights: &LossWeights, eb: f64) -> Vec<GammaPoint> {
    match cfg.mode {
        TrainMode::FixedSnr => {
            vec![GammaPoint { noise_sigma: noise_sigma_from_snr(cfg.train_snr_db, eb), weight: 1.0 }]
        }
        TrainMode::MultiSnr => {
            let total: f64 = weights.snr_set.iter().sum();
            weights
                .snr_set
                .iter()
                .map(|&s| GammaPoint {
                    noise_sigma: noise_sigma_from_snr(s, eb),
                    weight: s / total,
                })
                .collect()
        }
    }
}

/// One batch of drawn training data: encoder features, target bits, true
/// gains, and unit-variance noise (one `n × 2` block per user per γ point,
/// scaled by each point's σ at evaluation time).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub features: Mat,
    pub targets1: Mat,
    pub targets2: Mat,
    pub h1: Vec<Complex64>,
    pub h2: Vec<Complex64>,
    pub noise1: Vec<Mat>,
    pub noise2: Vec<Mat>,
}

impl TrainBatch {
    /// Draw a fresh batch. Per sample: each user's bits, then the channel.
    /// After all samples: for each γ point, user 1's then user 2's noise
    /// block, row-major. This fixed order is the determinism contract.
    pub fn draw<R: Rng + ?Sized>(
        sys: &AeSystem,
        fading: &FadingConfig,
        n: usize,
        n_gamma: usize,
        rng: &mut R,
    ) -> TrainBatch {
        let bc = sys.bit_config;
        let mut features = Mat::zeros(n, bc.total() + 4);
        let mut targets1 = Mat::zeros(n, bc.l1);
        let mut targets2 = Mat::zeros(n, bc.l2);
        let mut h1 = Vec::with_capacity(n);
        let mut h2 = Vec::with_capacity(n);
        let mut bits1 = vec![0u8; bc.l1];
        let mut bits2 = vec![0u8; bc.l2];
        for i in 0..n {
            for b in bits1.iter_mut().chain(&mut bits2) {
                *b = rng.random::<bool>() as u8;
            }
            let re = sample_channel(fading, rng);
            let (h1_hat, h2_hat) = sys.csi_hat(&re);
            write_features(features.row_mut(i), &bits1, &bits2, h1_hat, h2_hat);
            for (t, &b) in targets1.row_mut(i).iter_mut().zip(&bits1) {
                *t = b as f64;
            }
            for (t, &b) in targets2.row_mut(i).iter_mut().zip(&bits2) {
                *t = b as f64;
            }
            h1.push(re.h1);
            h2.push(re.h2);
        }
        let mut draw_noise = || {
            let mut m = Mat::zeros(n, 2);
            for v in m.data.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            m
        };
        let (mut noise1, mut noise2) = (Vec::with_capacity(n_gamma), Vec::with_capacity(n_gamma));
        for _ in 0..n_gamma {
            noise1.push(draw_noise());
            noise2.push(draw_noise());
        }
        TrainBatch { features, targets1, targets2, h1, h2, noise1, noise2 }
    }
}

/// Gradient buffers for the three networks, accumulated across backward
/// passes; zero once per optimizer step.
#[derive(Debug, Clone)]
pub struct AeGrads {
    pub encoder: Grads,
    pub decoder1: Grads,
    pub decoder2: Grads,
}

impl AeGrads {
    pub fn zero(&mut self) {
        self.encoder.zero();
        self.decoder1.zero();
        self.decoder2.zero();
    }
}

/// Reusable buffers for [`batch_loss_and_grads`].
#[derive(Debug, Clone)]
pub struct AeScratch {
    enc_ws: Workspace,
    dec_ws: [Workspace; 2],
    x: Mat,
    dec_in: Mat,
    dx: Mat,
    du: Mat,
    seed: [Mat; 2],
}

/// Loss value and the measured power-constraint error of one batch pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    /// `|mean power / P − 1|` recomputed after normalization — the power
    /// constraint as actually transmitted, not as intended.
    pub power_rel_err: f64,
}

// --- the end-to-end pass -----------------------------------------------------------

/// Evaluate the training objective on one batch and, when `grads` is given,
/// accumulate parameter gradients for all three networks.
///
/// The encoder runs once; its normalized output is shared by every γ point.
/// For each γ, both decoders run on `y_k = h_k·x + σ_γ·n_k` and contribute
/// `weight · ∂(w·max(L₁,L₂) + min(L₁,L₂))` through their cross-entropies.
/// Gradients flow back through the channel (`∂L/∂x = conj(h)·∂L/∂y` in
/// component form) and through the batch power normalization: with
/// `x = c·u`, `c = √(P/p̄)`, `p̄ = Σ|uⱼ|²/n`, the encoder sees
/// `∂L/∂uᵢ = c·(gᵢ − s·uᵢ/(n·p̄))` where `gᵢ = ∂L/∂xᵢ` and `s = Σⱼ⟨gⱼ, uⱼ⟩`.
pub fn batch_loss_and_grads(
    sys: &AeSystem,
    batch: &TrainBatch,
    gammas: &[GammaPoint],
    w: f64,
    scratch: &mut AeScratch,
    mut grads: Option<&mut AeGrads>,
) -> Result<BatchEval> {
    let n = batch.features.rows;
    assert!(n > 0, "empty batch");
    assert_eq!(batch.noise1.len(), gammas.len(), "need one user-1 noise block per γ");
    assert_eq!(batch.noise2.len(), gammas.len(), "need one user-2 noise block per γ");
    let bits_per_user = [sys.bit_config.l1, sys.bit_config.l2];

    sys.encoder.forward_batch(&batch.features, &mut scratch.enc_ws);
    let u = scratch.enc_ws.output();
    scratch.x.set_rows(n);
    scratch.x.data[..n * 2].copy_from_slice(u.as_slice());
    let c = normalize_power(&mut scratch.x, sys.power)?;
    let p_bar = sys.power / (c * c);
    let power_rel_err = {
        let mean: f64 = scratch.x.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
        (mean / sys.power - 1.0).abs()
    };

    scratch.dx.set_rows(n);
    scratch.dx.fill(0.0);
    scratch.dec_in.set_rows(n);
    let mut total = 0.0;

    for (gi, gamma) in gammas.iter().enumerate() {
        let sigma = gamma.noise_sigma;
        let mut losses = [0.0; 2];
        for user in 0..2 {
            let (dec, h, noise, targets) = match user {
                0 => (&sys.decoder1, &batch.h1, &batch.noise1[gi], &batch.targets1),
                _ => (&sys.decoder2, &batch.h2, &batch.noise2[gi], &batch.targets2),
            };
            for i in 0..n {
                let x = Complex64::new(scratch.x.row(i)[0], scratch.x.row(i)[1]);
                let y = h[i] * x;
                let nz = noise.row(i);
                let row = scratch.dec_in.row_mut(i);
                row[0] = y.re + sigma * nz[0];
                row[1] = y.im + sigma * nz[1];
                row[2] = h[i].re;
                row[3] = h[i].im;
            }
            dec.forward_batch(&scratch.dec_in, &mut scratch.dec_ws[user]);
            losses[user] =
                bce_loss(scratch.dec_ws[user].output().as_slice(), targets.as_slice());
        }
        let [l1, l2] = losses;
        total += gamma.weight * fairness_loss(l1, l2, w);

        if let Some(g) = grads.as_deref_mut() {
            // ∂(w·max + min)/∂L_k: w on the max branch, 1 on the other.
            let branch = if l1 >= l2 { [w, 1.0] } else { [1.0, w] };
            for user in 0..2 {
                let (dec, h, targets, dec_grads) = match user {
                    0 => (&sys.decoder1, &batch.h1, &batch.targets1, &mut g.decoder1),
                    _ => (&sys.decoder2, &batch.h2, &batch.targets2, &mut g.decoder2),
                };
                let outer = gamma.weight * branch[user] / (n * bits_per_user[user]) as f64;
                let seed = &mut scratch.seed[user];
                seed.set_rows(n);
                let probs = scratch.dec_ws[user].output().as_slice();
                for ((s, &p), &b) in
                    seed.data.iter_mut().zip(probs).zip(targets.as_slice())
                {
                    // d(BCE)/dp at the clamped probability; the backward pass
                    // multiplies by sigmoid' so the product stays bounded.
                    let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                    *s = outer * (pc - b) / (pc * (1.0 - pc));
                }
                dec.backward_batch(&mut scratch.dec_ws[user], &scratch.seed[user], dec_grads);
                let dy = scratch.dec_ws[user].input_grad();
                for i in 0..n {
                    let gy = dy.row(i);
                    let hh = h[i];
                    let dst = scratch.dx.row_mut(i);
                    dst[0] += gy[0] * hh.re + gy[1] * hh.im;
                    dst[1] += -gy[0] * hh.im + gy[1] * hh.re;
                }
            }
        }
    }

    if let Some(g) = grads {
        let u = scratch.enc_ws.output();
        let s: f64 =
            scratch.dx.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum();
        scratch.du.set_rows(n);
        let shrink = s / (n as f64 * p_bar);
        for ((d, &gx), &ui) in
            scratch.du.data.iter_mut().zip(scratch.dx.as_slice()).zip(u.as_slice())
        {
            *d = c * (gx - shrink * ui);
        }
        sys.encoder.backward_batch_params_only(&mut scratch.enc_ws, &scratch.du, &mut g.encoder);
    }

    Ok(BatchEval { loss: total, power_rel_err })
}

// --- training ------------------------------------------------------------------------

/// One row of the per-epoch loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// What a training run produced besides the mutated system.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per epoch, with the learning rate in force.
    pub loss_trace: Vec<LossPoint>,
    /// The frozen deployment power scale.
    pub final_scale: f64,
    /// Largest `|mean power/P − 1|` observed over every batch of the run.
    pub max_power_rel_err: f64,
}

/// Train the system in place: a fixed dataset of `n_train` (bits, channel)
/// samples is drawn once from `master_seed`, reshuffled every epoch, and
/// consumed in full batches with fresh noise per batch and γ point. After
/// the last epoch the deployment power scale is frozen from the same RNG
/// stream, so the entire run is a deterministic function of the seed.
pub fn train(
    sys: &mut AeSystem,
    cfg: &TrainConfig,
    fading: &FadingConfig,
    weights: &LossWeights,
) -> Result<TrainReport> {
    cfg.validate()?;
    weights.validate()?;
    let eb = 0.5 * sys.power;
    let gammas = gamma_points(cfg, weights, eb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);

    // The fixed training set: one big draw without noise (noise is fresh per
    // batch). TrainBatch::draw with zero γ points draws bits and channels in
    // exactly the documented order.
    let dataset = TrainBatch::draw(sys, fading, cfg.n_train, 0, &mut rng);

    let n_batches = cfg.n_train / cfg.batch_size;
    let mut order: Vec<u32> = (0..cfg.n_train as u32).collect();
    let mut scratch = sys.scratch(cfg.batch_size);
    let mut grads = sys.grads();
    let mut batch = TrainBatch {
        features: Mat::zeros(cfg.batch_size, dataset.features.cols),
        targets1: Mat::zeros(cfg.batch_size, dataset.targets1.cols),
        targets2: Mat::zeros(cfg.batch_size, dataset.targets2.cols),
        h1: vec![Complex64::default(); cfg.batch_size],
        h2: vec![Complex64::default(); cfg.batch_size],
        noise1: (0..gammas.len()).map(|_| Mat::zeros(cfg.batch_size, 2)).collect(),
        noise2: (0..gammas.len()).map(|_| Mat::zeros(cfg.batch_size, 2)).collect(),
    };

    let mut loss_trace = Vec::with_capacity(cfg.n_epochs);
    let mut max_power_rel_err: f64 = 0.0;
    for epoch in 0..cfg.n_epochs {
        order.shuffle(&mut rng);
        // Batch membership is what the shuffle decides; row order within a
        // batch is irrelevant to the loss, so sort each batch's indices to
        // turn the gather below into a forward walk over the dataset.
        for b in 0..n_batches {
            order[b * cfg.batch_size..(b + 1) * cfg.batch_size].sort_unstable();
        }
        let mut epoch_loss = 0.0;
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            for (row, &src) in idx.iter().enumerate() {
                let src = src as usize;
                batch.features.row_mut(row).copy_from_slice(dataset.features.row(src));
                batch.targets1.row_mut(row).copy_from_slice(dataset.targets1.row(src));
                batch.targets2.row_mut(row).copy_from_slice(dataset.targets2.row(src));
                batch.h1[row] = dataset.h1[src];
                batch.h2[row] = dataset.h2[src];
            }
            for noise in batch.noise1.iter_mut().chain(&mut batch.noise2) {
                for v in noise.data.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            grads.zero();
            let eval =
                batch_loss_and_grads(sys, &batch, &gammas, weights.w, &mut scratch, Some(&mut grads))?;
            if !eval.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {} in batch {b}", eval.loss),
                });
            }
            max_power_rel_err = max_power_rel_err.max(eval.power_rel_err);
            sys.encoder.adam_step(&grads.encoder, &cfg.schedule, epoch)?;
            sys.decoder1.adam_step(&grads.decoder1, &cfg.schedule, epoch)?;
            sys.decoder2.adam_step(&grads.decoder2, &cfg.schedule, epoch)?;
            epoch_loss += eval.loss;
        }
        loss_trace.push(LossPoint {
            epoch,
            loss: epoch_loss / n_batches as f64,
            lr: cfg.schedule.lr(epoch),
        });
    }

    let final_scale = sys.freeze_inference_scale(fading, POPULATION_DRAWS, &mut rng)?;
    Ok(TrainReport { loss_trace, final_scale, max_power_rel_err })
}

/// Channel draws used to freeze the deployment power scale.
pub const POPULATION_DRAWS: usize = 10_000;

// --- evaluation ------------------------------------------------------------------------

/// Bit error rates of both users at one SNR point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerPoint {
    pub snr_db: f64,
    pub ber1: f64,
    pub ber2: f64,
    pub trials: u64,
}

impl BerPoint {
    pub fn ber_avg(&self) -> f64 {
        0.5 * (self.ber1 + self.ber2)
    }
}

const EVAL_BATCH: usize = 512;

/// Measure hard-decision BER at each SNR with fresh bits, channels, and
/// noise, transmitting at the frozen deployment scale. Per sample the draw
/// order is: user 1 bits, user 2 bits, channel, then user 1's noise pair and
/// user 2's noise pair.
pub fn evaluate_ber<R: Rng + ?Sized>(
    sys: &AeSystem,
    snr_grid_db: &[f64],
    n_test: usize,
    fading: &FadingConfig,
    rng: &mut R,
) -> Result<Vec<BerPoint>> {
    if n_test < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "BER estimates need at least 10^4 test samples, got {n_test}"
        )));
    }
    let scale = sys.inference_scale.ok_or_else(|| {
        Error::InvalidArgument("inference scale not frozen; train or freeze it first".into())
    })?;
    let eb = 0.5 * sys.power;
    let bc = sys.bit_config;
    let mut features = Mat::zeros(EVAL_BATCH, sys.encoder.input_dim());
    let mut dec_in = [Mat::zeros(EVAL_BATCH, 4), Mat::zeros(EVAL_BATCH, 4)];
    let mut enc_ws = sys.encoder.workspace(EVAL_BATCH);
    let mut dec_ws = [sys.decoder1.workspace(EVAL_BATCH), sys.decoder2.workspace(EVAL_BATCH)];
    let mut targets1 = Mat::zeros(EVAL_BATCH, bc.l1);
    let mut targets2 = Mat::zeros(EVAL_BATCH, bc.l2);
    let mut h = vec![[Complex64::default(); 2]; EVAL_BATCH];
    let mut noise = vec![[0.0f64; 4]; EVAL_BATCH];
    let mut bits1 = vec![0u8; bc.l1];
    let mut bits2 = vec![0u8; bc.l2];

    let mut points = Vec::with_capacity(snr_grid_db.len());
    for &snr_db in snr_grid_db {
        let sigma = noise_sigma_from_snr(snr_db, eb);
        let mut bit_errs = [0u64; 2];
        let mut done = 0usize;
        while done < n_test {
            let m = EVAL_BATCH.min(n_test - done);
            features.set_rows(m);
            targets1.set_rows(m);
            targets2.set_rows(m);
            for i in 0..m {
                for b in bits1.iter_mut().chain(&mut bits2) {
                    *b = rng.random::<bool>() as u8;
                }
                let re = sample_channel(fading, rng);
                let (h1_hat, h2_hat) = sys.csi_hat(&re);
                write_features(features.row_mut(i), &bits1, &bits2, h1_hat, h2_hat);
                for (t, &b) in targets1.row_mut(i).iter_mut().zip(&bits1) {
                    *t = b as f64;
                }
                for (t, &b) in targets2.row_mut(i).iter_mut().zip(&bits2) {
                    *t = b as f64;
                }
                h[i] = [re.h1, re.h2];
                for v in noise[i].iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            sys.encoder.forward_batch(&features, &mut enc_ws);
            let u = enc_ws.output();
            for user in 0..2 {
                let m_in = &mut dec_in[user];
                m_in.set_rows(m);
                for i in 0..m {
                    let x = scale * Complex64::new(u.row(i)[0], u.row(i)[1]);
                    let y = h[i][user] * x;
                    let row = m_in.row_mut(i);
                    row[0] = y.re + sigma * noise[i][2 * user];
                    row[1] = y.im + sigma * noise[i][2 * user + 1];
                    row[2] = h[i][user].re;
                    row[3] = h[i][user].im;
                }
            }
            sys.decoder1.forward_batch(&dec_in[0], &mut dec_ws[0]);
            sys.decoder2.forward_batch(&dec_in[1], &mut dec_ws[1]);
            for (user, targets) in [(0, &targets1), (1, &targets2)] {
                for (&p, &t) in dec_ws[user].output().as_slice().iter().zip(targets.as_slice()) {
                    if (p >= 0.5) != (t >= 0.5) {
                        bit_errs[user] += 1;
                    }
                }
            }
            done += m;
        }
        points.push(BerPoint {
            snr_db,
            ber1: bit_errs[0] as f64 / (n_test * bc.l1) as f64,
            ber2: bit_errs[1] as f64 / (n_test * bc.l2) as f64,
            trials: n_test as u64,
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::design_uniform;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn default_system(seed: u64) -> AeSystem {
        AeSystem::new(BitConfig::default(), 1.0, CsiMode::Perfect, &mut rng(seed)).unwrap()
    }

    /// A small system for gradient checks: two hidden layers, one residual,
    /// one bit per user.
    fn mini_system(seed: u64) -> AeSystem {
        let bc = BitConfig::new(1, 1).unwrap();
        let mut r = rng(seed);
        let enc = Mlp::new(
            vec![
                LayerSpec::new(6, 8, Activation::Tanh),
                LayerSpec::new(8, 8, Activation::Tanh).with_residual(0),
                LayerSpec::new(8, 2, Activation::Linear),
            ],
            &mut r,
        )
        .unwrap();
        let dec = |r: &mut ChaCha8Rng| {
            Mlp::new(
                vec![
                    LayerSpec::new(4, 8, Activation::Tanh),
                    LayerSpec::new(8, 8, Activation::Tanh).with_residual(0),
                    LayerSpec::new(8, 1, Activation::Sigmoid),
                ],
                r,
            )
            .unwrap()
        };
        let (d1, d2) = (dec(&mut r), dec(&mut r));
        AeSystem::with_networks(enc, d1, d2, bc, 1.0, CsiMode::Perfect).unwrap()
    }

    #[test]
    fn stack_has_documented_shape() {
        let sys = default_system(1);
        assert_eq!(sys.encoder.input_dim(), 8);
        assert_eq!(sys.encoder.output_dim(), 2);
        assert_eq!(sys.decoder1.input_dim(), 4);
        assert_eq!(sys.decoder1.output_dim(), 2);
        assert_eq!(sys.encoder.specs().len(), N_HIDDEN + 2);
        for (l, spec) in sys.encoder.specs().iter().enumerate() {
            let expect = match l {
                3 | 5 | 7 => Some(l - 2),
                _ => None,
            };
            assert_eq!(spec.residual_from, expect, "layer {l}");
        }
        let last = sys.encoder.specs().last().unwrap();
        assert_eq!(last.activation, Activation::Linear);
        assert_eq!(sys.decoder1.specs().last().unwrap().activation, Activation::Sigmoid);
    }

    #[test]
    fn encode_is_deterministic_and_channel_adaptive() {
        let sys = default_system(2);
        let csi_a = ChannelRealization {
            h1: Complex64::new(0.3, -0.4),
            h2: Complex64::new(1.0, 0.7),
        };
        let csi_b = ChannelRealization {
            h1: Complex64::new(-1.1, 0.2),
            h2: Complex64::new(0.5, -0.9),
        };
        let x1 = sys.encode(&[0, 1], &[1, 0], &csi_a).unwrap();
        let x2 = sys.encode(&[0, 1], &[1, 0], &csi_a).unwrap();
        let x3 = sys.encode(&[0, 1], &[1, 0], &csi_b).unwrap();
        assert_eq!(x1, x2);
        assert!((x1 - x3).norm() > 1e-9, "encoder ignores CSI");
        assert!(sys.encode(&[0], &[1, 0], &csi_a).is_err());
    }

    #[test]
    fn perfect_mode_passes_csi_through_quantized_mode_snaps_to_levels() {
        let re = ChannelRealization {
            h1: Complex64::new(0.37, -1.22),
            h2: Complex64::new(2.4, 0.01),
        };
        let sys = default_system(3);
        assert_eq!(sys.csi_hat(&re), (re.h1, re.h2));

        let cb1 = design_uniform(4, 1.0, 4.0).unwrap();
        let cb2 = design_uniform(4, 2.0, 4.0).unwrap();
        let qsys = AeSystem::new(
            BitConfig::default(),
            1.0,
            CsiMode::Quantized { cb1: cb1.clone(), cb2: cb2.clone() },
            &mut rng(3),
        )
        .unwrap();
        let (h1_hat, h2_hat) = qsys.csi_hat(&re);
        let expect = quantize_csi(&re, &cb1, &cb2);
        assert_eq!((h1_hat, h2_hat), (expect.h1_hat, expect.h2_hat));
        for v in [h1_hat.re, h1_hat.im] {
            assert!(cb1.levels.contains(&v));
        }
    }

    #[test]
    fn normalize_power_matches_hand_example_and_is_idempotent() {
        let mut batch = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = normalize_power(&mut batch, 2.0).unwrap();
        let s2 = 2f64.sqrt();
        assert!((c - s2).abs() < 1e-15);
        assert!((batch.row(0)[0] - s2).abs() < 1e-15 && batch.row(0)[1] == 0.0);
        assert!((batch.row(1)[1] - s2).abs() < 1e-15 && batch.row(1)[0] == 0.0);
        // Already at the fixed point: scale ≈ 1.
        let c2 = normalize_power(&mut batch, 2.0).unwrap();
        assert!((c2 - 1.0).abs() < 1e-12);

        let mut random = Mat::zeros(257, 2);
        let mut r = rng(4);
        for v in random.data.iter_mut() {
            *v = r.sample::<f64, _>(StandardNormal) * 3.0;
        }
        normalize_power(&mut random, 0.7).unwrap();
        let mean: f64 = random.as_slice().iter().map(|v| v * v).sum::<f64>() / 257.0;
        assert!((mean / 0.7 - 1.0).abs() < 1e-10);

        let mut zeros = Mat::zeros(4, 2);
        assert!(normalize_power(&mut zeros, 1.0).is_err());
    }

    #[test]
    fn bce_loss_reference_values() {
        assert!(bce_loss(&[0.5, 0.5], &[0.0, 1.0]) - std::f64::consts::LN_2 < 1e-15);
        assert!((bce_loss(&[0.9], &[1.0]) - 0.10536051565782628).abs() < 1e-12);
        // Perfect prediction after clipping.
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
        // Symmetric in (p, b) ↔ (1−p, 1−b).
        let a = bce_loss(&[0.3, 0.8], &[1.0, 0.0]);
        let b = bce_loss(&[0.7, 0.2], &[0.0, 1.0]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn fairness_loss_reference_values() {
        assert!((fairness_loss(0.2, 0.1, 10.0) - 2.1).abs() < 1e-15);
        assert_eq!(fairness_loss(0.2, 0.1, 10.0), fairness_loss(0.1, 0.2, 10.0));
        let l = 0.37;
        assert!((fairness_loss(l, l, 10.0) - 11.0 * l).abs() < 1e-12);
        // w = 1 reduces to the plain sum.
        assert_eq!(fairness_loss(0.5, 0.2, 1.0), 0.7);
    }

    #[test]
    fn gamma_points_weights_sum_to_one() {
        let cfg = TrainConfig { mode: TrainMode::MultiSnr, ..TrainConfig::default() };
        let weights = LossWeights::default();
        let pts = gamma_points(&cfg, &weights, 0.5);
        assert_eq!(pts.len(), 5);
        let total: f64 = pts.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((pts[0].weight - 1.0 / 51.0).abs() < 1e-15);
        assert!((pts[4].weight - 20.0 / 51.0).abs() < 1e-15);
        // Noise levels follow the dB reading of the set.
        assert!((pts[2].noise_sigma - noise_sigma_from_snr(10.0, 0.5)).abs() < 1e-18);

        let fixed = gamma_points(&TrainConfig::default(), &weights, 0.5);
        assert_eq!(fixed.len(), 1);
        assert_eq!(fixed[0].weight, 1.0);
    }

    #[test]
    fn singleton_multi_snr_equals_fixed_snr_loss() {
        let sys = default_system(5);
        let fading = FadingConfig::default();
        let mut r = rng(6);
        let batch = TrainBatch::draw(&sys, &fading, 64, 1, &mut r);
        let mut scratch = sys.scratch(64);
        let fixed = gamma_points(&TrainConfig::default(), &LossWeights::default(), 0.5);
        let multi = gamma_points(
            &TrainConfig { mode: TrainMode::MultiSnr, ..TrainConfig::default() },
            &LossWeights { w: 10.0, snr_set: vec![10.0] },
            0.5,
        );
        let a = batch_loss_and_grads(&sys, &batch, &fixed, 10.0, &mut scratch, None).unwrap();
        let b = batch_loss_and_grads(&sys, &batch, &multi, 10.0, &mut scratch, None).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(a.power_rel_err < 1e-10);
    }

    #[test]
    fn equal_per_gamma_losses_collapse_to_that_loss() {
        // All γ points with σ = 0 and the same batch ⇒ identical L(γ);
        // since the weights sum to 1, L_F must equal the common value.
        let sys = default_system(7);
        let fading = FadingConfig::default();
        let batch = TrainBatch::draw(&sys, &fading, 32, 3, &mut rng(8));
        let mut scratch = sys.scratch(32);
        let gammas = [
            GammaPoint { noise_sigma: 0.0, weight: 1.0 / 6.0 },
            GammaPoint { noise_sigma: 0.0, weight: 2.0 / 6.0 },
            GammaPoint { noise_sigma: 0.0, weight: 3.0 / 6.0 },
        ];
        let all = batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, None).unwrap();
        let single = [GammaPoint { noise_sigma: 0.0, weight: 1.0 }];
        let mut one_noise = batch.clone();
        one_noise.noise1.truncate(1);
        one_noise.noise2.truncate(1);
        let one =
            batch_loss_and_grads(&sys, &one_noise, &single, 10.0, &mut scratch, None).unwrap();
        assert!((all.loss - one.loss).abs() < 1e-12);
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let mut sys = mini_system(9);
        let fading = FadingConfig::default();
        // Two γ points exercise the accumulation path; w = 10 exercises the
        // fairness branch weights.
        let gammas = [
            GammaPoint { noise_sigma: 0.3, weight: 0.4 },
            GammaPoint { noise_sigma: 0.05, weight: 0.6 },
        ];
        let batch = TrainBatch::draw(&sys, &fading, 8, gammas.len(), &mut rng(10));
        let mut scratch = sys.scratch(8);
        let mut grads = sys.grads();
        batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, Some(&mut grads))
            .unwrap();

        let analytic = [
            sys.encoder.flat_grads(&grads.encoder),
            sys.decoder1.flat_grads(&grads.decoder1),
            sys.decoder2.flat_grads(&grads.decoder2),
        ];
        let h = 1e-5;
        let mut worst = 0.0f64;
        for net in 0..3 {
            let theta = match net {
                0 => sys.encoder.flat_params(),
                1 => sys.decoder1.flat_params(),
                _ => sys.decoder2.flat_params(),
            };
            for j in 0..theta.len() {
                let mut probe = |v: f64| {
                    let mut t = theta.clone();
                    t[j] = v;
                    match net {
                        0 => sys.encoder.set_flat_params(&t),
                        1 => sys.decoder1.set_flat_params(&t),
                        _ => sys.decoder2.set_flat_params(&t),
                    }
                    batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, None)
                        .unwrap()
                        .loss
                };
                let fd = (probe(theta[j] + h) - probe(theta[j] - h)) / (2.0 * h);
                let a = analytic[net][j];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
            match net {
                0 => sys.encoder.set_flat_params(&theta),
                1 => sys.decoder1.set_flat_params(&theta),
                _ => sys.decoder2.set_flat_params(&theta),
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let fading = FadingConfig::default();
        let cfg = TrainConfig {
            n_train: 2048,
            n_epochs: 30,
            batch_size: 256,
            master_seed: 11,
            ..TrainConfig::default()
        };
        let weights = LossWeights::default();
        let mut sys_a = default_system(12);
        let mut sys_b = default_system(12);
        let rep_a = train(&mut sys_a, &cfg, &fading, &weights).unwrap();
        let rep_b = train(&mut sys_b, &cfg, &fading, &weights).unwrap();
        for (a, b) in rep_a.loss_trace.iter().zip(&rep_b.loss_trace) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "trace diverged at epoch {}", a.epoch);
        }
        assert_eq!(sys_a.encoder.flat_params(), sys_b.encoder.flat_params());
        assert_eq!(rep_a.final_scale, rep_b.final_scale);

        let head: f64 = rep_a.loss_trace[..10].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        let tail: f64 =
            rep_a.loss_trace[20..].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not fall: head {head:.4}, tail {tail:.4}");
        assert!(rep_a.max_power_rel_err < 1e-10, "power constraint violated");
        assert_eq!(rep_a.loss_trace[0].lr, 0.01);
    }

    #[test]
    fn schedule_decays_in_the_trace() {
        let fading = FadingConfig::default();
        let cfg = TrainConfig {
            n_train: 512,
            n_epochs: 3,
            batch_size: 256,
            schedule: TrainSchedule::new(0.01, 0.5, 2).unwrap(),
            master_seed: 13,
            ..TrainConfig::default()
        };
        let mut sys = default_system(13);
        let rep = train(&mut sys, &cfg, &fading, &LossWeights::default()).unwrap();
        let lrs: Vec<f64> = rep.loss_trace.iter().map(|p| p.lr).collect();
        assert_eq!(lrs, vec![0.01, 0.01, 0.005]);
    }

    #[test]
    fn untrained_system_decodes_at_chance_level() {
        let mut sys = default_system(14);
        let fading = FadingConfig::default();
        let mut r = rng(15);
        sys.freeze_inference_scale(&fading, 1000, &mut r).unwrap();
        let points = evaluate_ber(&sys, &[10.0], 100_000, &fading, &mut r).unwrap();
        let avg = points[0].ber_avg();
        assert!((avg - 0.5).abs() < 0.01, "untrained BER {avg}");
        assert_eq!(points[0].trials, 100_000);
    }

    #[test]
    fn evaluate_ber_enforces_preconditions() {
        let mut sys = default_system(16);
        let fading = FadingConfig::default();
        assert!(evaluate_ber(&sys, &[10.0], 50_000, &fading, &mut rng(1)).is_err());
        sys.freeze_inference_scale(&fading, 100, &mut rng(2)).unwrap();
        assert!(evaluate_ber(&sys, &[10.0], 100, &fading, &mut rng(3)).is_err());
    }

    #[test]
    fn frozen_scale_holds_population_power_near_budget() {
        let mut sys = default_system(17);
        let fading = FadingConfig::default();
        sys.freeze_inference_scale(&fading, 4000, &mut rng(18)).unwrap();
        let scale = sys.inference_scale().unwrap();
        // Re-estimate the deployed mean power on fresh draws.
        let mut r = rng(19);
        let combos = enumerate_bit_combos(sys.bit_config);
        let mut sum = 0.0;
        let n_draws = 4000;
        for _ in 0..n_draws {
            let re = sample_channel(&fading, &mut r);
            for (b1, b2) in &combos {
                let u = sys.encode(b1, b2, &re).unwrap();
                sum += (scale * u).norm_sqr();
            }
        }
        let mean = sum / (n_draws * combos.len()) as f64;
        assert!((mean / sys.power - 1.0).abs() < 0.02, "deployed power {mean}");
    }

    #[test]
    fn constellation_export_is_complete_and_channel_adaptive() {
        let mut sys = default_system(20);
        let fading = FadingConfig::default();
        assert!(sys.export_constellation(Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)).is_err());
        sys.freeze_inference_scale(&fading, 500, &mut rng(21)).unwrap();
        let a = sys
            .export_constellation(Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0))
            .unwrap();
        let b = sys
            .export_constellation(Complex64::new(1.0, 0.0), Complex64::new(2.0, 2.0))
            .unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a[0].bits1, vec![0, 0]);
        assert_eq!(a[0].bits2, vec![0, 0]);
        assert_eq!(a[15].bits1, vec![1, 1]);
        // All 16 labels distinct.
        for i in 0..16 {
            for j in 0..i {
                assert!(a[i].bits1 != a[j].bits1 || a[i].bits2 != a[j].bits2);
            }
        }
        let moved = a.iter().zip(&b).any(|(p, q)| (p.symbol - q.symbol).norm() > 1e-9);
        assert!(moved, "constellation ignores the channel state");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("noma_ae_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sys.ckpt");

        let cb1 = design_uniform(4, 1.0, 4.0).unwrap();
        let cb2 = design_uniform(8, 2.0, 4.0).unwrap();
        let mut sys = AeSystem::new(
            BitConfig::new(2, 3).unwrap(),
            1.0,
            CsiMode::Quantized { cb1, cb2 },
            &mut rng(22),
        )
        .unwrap();
        let fading = FadingConfig::default();
        // A couple of training steps so Adam state is nontrivial.
        let cfg = TrainConfig {
            n_train: 256,
            n_epochs: 2,
            batch_size: 128,
            master_seed: 23,
            ..TrainConfig::default()
        };
        train(&mut sys, &cfg, &fading, &LossWeights::default()).unwrap();
        sys.save(&path).unwrap();
        let loaded = AeSystem::load(&path).unwrap();
        assert_eq!(sys.bit_config, loaded.bit_config);
        assert_eq!(sys.csi_mode, loaded.csi_mode);
        assert_eq!(sys.inference_scale(), loaded.inference_scale());
        for (a, b) in [
            (&sys.encoder, &loaded.encoder),
            (&sys.decoder1, &loaded.decoder1),
            (&sys.decoder2, &loaded.decoder2),
        ] {
            let (pa, pb) = (a.flat_params(), b.flat_params());
            assert_eq!(pa.len(), pb.len());
            assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // The loaded system evaluates identically.
        let e_orig = evaluate_ber(&sys, &[10.0], 10_000, &fading, &mut rng(24)).unwrap();
        let e_load = evaluate_ber(&loaded, &[10.0], 10_000, &fading, &mut rng(24)).unwrap();
        assert_eq!(e_orig[0].ber1, e_load[0].ber1);
        assert_eq!(e_orig[0].ber2, e_load[0].ber2);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join("noma_ae_ckpt_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sys.ckpt");
        let sys = default_system(25);
        sys.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(AeSystem::load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(AeSystem::load(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn quantized_mode_trains_and_uses_quantized_features() {
        let cb1 = design_uniform(4, 1.0, 4.0).unwrap();
        let cb2 = design_uniform(4, 2.0, 4.0).unwrap();
        let mut sys = AeSystem::new(
            BitConfig::default(),
            1.0,
            CsiMode::Quantized { cb1: cb1.clone(), cb2 },
            &mut rng(26),
        )
        .unwrap();
        let fading = FadingConfig::default();
        let batch = TrainBatch::draw(&sys, &fading, 16, 1, &mut rng(27));
        // Feature columns l1+l2.. are quantizer levels, not raw gains.
        for i in 0..16 {
            let feats = batch.features.row(i);
            assert!(cb1.levels.contains(&feats[4]), "h1.re not quantized: {}", feats[4]);
        }
        let cfg = TrainConfig {
            n_train: 512,
            n_epochs: 2,
            batch_size: 256,
            master_seed: 28,
            ..TrainConfig::default()
        };
        let rep = train(&mut sys, &cfg, &fading, &LossWeights::default()).unwrap();
        assert!(rep.loss_trace.iter().all(|p| p.loss.is_finite()));
    }

    #[test]
    fn bit_combo_enumeration_orders_by_joint_label() {
        let combos = enumerate_bit_combos(BitConfig::new(1, 2).unwrap());
        assert_eq!(combos.len(), 8);
        assert_eq!(combos[0], (vec![0], vec![0, 0]));
        assert_eq!(combos[1], (vec![0], vec![0, 1]));
        assert_eq!(combos[5], (vec![1], vec![0, 1]));
        assert_eq!(combos[7], (vec![1], vec![1, 1]));
    }

    #[test]
    #[ignore = "manual timing probe for budgeting long runs"]
    fn train_step_throughput_probe() {
        let mut sys = default_system(40);
        let fading = FadingConfig::default();
        let gammas = gamma_points(&TrainConfig::default(), &LossWeights::default(), 0.5);
        let schedule = TrainSchedule::new(0.01, 0.95, 100).unwrap();
        let mut rng = rng(41);
        let batch = TrainBatch::draw(&sys, &fading, 512, gammas.len(), &mut rng);
        let mut scratch = sys.scratch(512);
        let mut grads = sys.grads();
        // Warm up, then time.
        for _ in 0..20 {
            grads.zero();
            batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, Some(&mut grads))
                .unwrap();
            sys.encoder.adam_step(&grads.encoder, &schedule, 0).unwrap();
            sys.decoder1.adam_step(&grads.decoder1, &schedule, 0).unwrap();
            sys.decoder2.adam_step(&grads.decoder2, &schedule, 0).unwrap();
        }
        let n = 200;
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            grads.zero();
            batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, Some(&mut grads))
                .unwrap();
            sys.encoder.adam_step(&grads.encoder, &schedule, 0).unwrap();
            sys.decoder1.adam_step(&grads.decoder1, &schedule, 0).unwrap();
            sys.decoder2.adam_step(&grads.decoder2, &schedule, 0).unwrap();
        }
        let per_step = t0.elapsed().as_secs_f64() / n as f64;
        let quick_minutes = per_step * (40_000 / 512) as f64 * 2000.0 * 3.0 / 60.0;
        println!("fixed-SNR step: {:.3} ms; quick profile (3 seeds): {quick_minutes:.1} min", per_step * 1e3);
    }

    /// Times the real training loop (gather, noise, bookkeeping included)
    /// over a short run and projects the 3-seed quick profile.
    #[test]
    #[ignore = "manual timing probe for budgeting long runs"]
    fn train_loop_throughput_probe() {
        let mut sys = default_system(44);
        let cfg = TrainConfig {
            n_epochs: 20,
            ..TrainConfig::default()
        };
        let fading = FadingConfig::default();
        let weights = LossWeights::default();
        let t0 = std::time::Instant::now();
        train(&mut sys, &cfg, &fading, &weights).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let steps = (cfg.n_train / cfg.batch_size) * cfg.n_epochs;
        let per_step = secs / steps as f64;
        let quick_minutes = per_step * (40_000 / 512) as f64 * 2000.0 * 3.0 / 60.0;
        println!(
            "train loop: {:.3} ms/step ({} steps in {:.2} s); quick profile (3 seeds): {:.1} min",
            per_step * 1e3,
            steps,
            secs,
            quick_minutes
        );
    }

    #[test]
    #[ignore = "manual timing probe for budgeting long runs"]
    fn kernel_split_probe() {
        let sys = default_system(42);
        let fading = FadingConfig::default();
        let gammas = gamma_points(&TrainConfig::default(), &LossWeights::default(), 0.5);
        let mut rng = rng(43);
        let batch = TrainBatch::draw(&sys, &fading, 512, gammas.len(), &mut rng);
        let mut scratch = sys.scratch(512);
        let mut grads = sys.grads();
        let n = 300;
        let time = |f: &mut dyn FnMut()| {
            for _ in 0..20 {
                f();
            }
            let t0 = std::time::Instant::now();
            for _ in 0..n {
                f();
            }
            t0.elapsed().as_secs_f64() / n as f64 * 1e3
        };
        let enc_in = batch.features.clone();
        let fwd_enc = time(&mut || sys.encoder.forward_batch(&enc_in, &mut scratch.enc_ws));
        let dec_in = Mat::zeros(512, 4);
        let fwd_dec = time(&mut || sys.decoder1.forward_batch(&dec_in, &mut scratch.dec_ws[0]));
        let seed = Mat::zeros(512, 2);
        let bwd_enc = time(&mut || {
            sys.encoder.forward_batch(&enc_in, &mut scratch.enc_ws);
            sys.encoder.backward_batch(&mut scratch.enc_ws, &seed, &mut grads.encoder);
        });
        let seed1 = Mat::zeros(512, 2);
        let bwd_dec = time(&mut || {
            sys.decoder1.forward_batch(&dec_in, &mut scratch.dec_ws[0]);
            sys.decoder1.backward_batch(&mut scratch.dec_ws[0], &seed1, &mut grads.decoder1);
        });
        let loss_only = time(&mut || {
            batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, None).unwrap();
        });
        let full = time(&mut || {
            grads.zero();
            batch_loss_and_grads(&sys, &batch, &gammas, 10.0, &mut scratch, Some(&mut grads))
                .unwrap();
        });
        println!(
            "enc fwd {fwd_enc:.3} ms | dec fwd {fwd_dec:.3} ms | enc f+b {bwd_enc:.3} ms | \
             dec f+b {bwd_dec:.3} ms | loss only {loss_only:.3} ms | full {full:.3} ms"
        );
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        assert!(BitConfig::new(0, 2).is_err());
        assert!(BitConfig::new(9, 8).is_err());
        assert!(LossWeights { w: 0.5, snr_set: vec![1.0] }.validate().is_err());
        assert!(LossWeights { w: 2.0, snr_set: vec![] }.validate().is_err());
        assert!(LossWeights { w: 2.0, snr_set: vec![-1.0] }.validate().is_err());
        let bad = TrainConfig { n_train: 100, batch_size: 512, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(AeSystem::new(BitConfig::default(), 0.0, CsiMode::Perfect, &mut rng(1)).is_err());
    }
}
