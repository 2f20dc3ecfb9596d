//! Experiment configuration: flat `key = value` sections, one file per
//! experiment.
//!
//! Every field has a default mirroring the reference training setup, so an
//! empty file runs the standard experiment unchanged and a config file only
//! states its deviations. Unknown sections or keys are rejected with the
//! offending name. The resolved configuration (after CLI overrides and
//! `--quick` scaling) has a canonical serialized form whose SHA-256 digest
//! fingerprints the run: any field change, and nothing else, changes it.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ae::{BitConfig, CsiMode, LossWeights, TrainConfig, TrainMode};
use crate::baselines::Constellation;
use crate::channel::FadingConfig;
use crate::error::{Error, Result};
use crate::nn::TrainSchedule;
use crate::quantizer::{
    design_lloyd_max, design_uniform, QuantizerKind, DEFAULT_SUPPORT_MULTIPLE,
};

/// Lloyd–Max design tolerance used whenever a recipe builds a codebook.
pub const LLOYD_TOL: f64 = 1e-7;
/// Lloyd–Max iteration cap used whenever a recipe builds a codebook.
pub const LLOYD_MAX_ITERS: usize = 1000;

// --- the experiment selector ---------------------------------------------------

/// The recipes the runner knows how to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Train one system per seed; emit checkpoints, loss traces, BER curve.
    Train,
    /// Re-evaluate previously trained checkpoints on the configured grid.
    Eval,
    /// Conventional superposition/SIC Monte-Carlo plus analytical curves.
    Baseline,
    /// Design codebooks and tabulate their quantization error.
    Quantizer,
    /// Train once and dump the learned constellations at fixed channels.
    Constellation,
    /// Learned system vs analytical NOMA and single-user references.
    Figure3,
    /// Mixed bit loads vs the matching conventional schemes.
    Figure4,
    /// Quantized-CSI variants vs the unquantized system.
    Figure5,
    /// Multi-SNR training objective vs fixed-SNR training.
    Figure6,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Eval => "eval",
            Experiment::Baseline => "baseline",
            Experiment::Quantizer => "quantizer",
            Experiment::Constellation => "constellation",
            Experiment::Figure3 => "figure3",
            Experiment::Figure4 => "figure4",
            Experiment::Figure5 => "figure5",
            Experiment::Figure6 => "figure6",
        }
    }

    pub const ALL: [Experiment; 9] = [
        Experiment::Train,
        Experiment::Eval,
        Experiment::Baseline,
        Experiment::Quantizer,
        Experiment::Constellation,
        Experiment::Figure3,
        Experiment::Figure4,
        Experiment::Figure5,
        Experiment::Figure6,
    ];
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.as_str()).collect();
                Error::Config(format!("unknown recipe {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

// --- sections -----------------------------------------------------------------

/// `[fading]` — per-component spreads of the two Rayleigh gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FadingSection {
    pub sigma_h1: f64,
    pub sigma_h2: f64,
}

impl Default for FadingSection {
    fn default() -> Self {
        FadingSection { sigma_h1: 1.0, sigma_h2: 2.0 }
    }
}

impl FadingSection {
    pub fn to_fading(&self) -> Result<FadingConfig> {
        FadingConfig::new(self.sigma_h1, self.sigma_h2)
            .map_err(|e| Error::Config(format!("[fading]: {e}")))
    }
}

/// `[bits]` — message lengths of the two users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitsSection {
    pub l1: usize,
    pub l2: usize,
}

impl Default for BitsSection {
    fn default() -> Self {
        BitsSection { l1: 2, l2: 2 }
    }
}

impl BitsSection {
    pub fn to_bit_config(&self) -> Result<BitConfig> {
        BitConfig::new(self.l1, self.l2).map_err(|e| Error::Config(format!("[bits]: {e}")))
    }
}

/// Objective selector for `[train] mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainModeKey {
    Fixed,
    Multi,
}

impl TrainModeKey {
    pub fn to_mode(self) -> TrainMode {
        match self {
            TrainModeKey::Fixed => TrainMode::FixedSnr,
            TrainModeKey::Multi => TrainMode::MultiSnr,
        }
    }
}

/// `[train]` — optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_train: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub mode: TrainModeKey,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_train: 40_000,
            n_epochs: 10_000,
            batch_size: 512,
            train_snr_db: 10.0,
            lr0: 0.01,
            lr_decay: 0.95,
            lr_decay_every: 100,
            mode: TrainModeKey::Fixed,
        }
    }
}

impl TrainSection {
    /// Build the library-level training config for one seed.
    pub fn to_train_config(&self, master_seed: u64) -> Result<TrainConfig> {
        let wrap = |e: Error| Error::Config(format!("[train]: {e}"));
        let schedule =
            TrainSchedule::new(self.lr0, self.lr_decay, self.lr_decay_every).map_err(wrap)?;
        let cfg = TrainConfig {
            n_train: self.n_train,
            n_epochs: self.n_epochs,
            batch_size: self.batch_size,
            train_snr_db: self.train_snr_db,
            schedule,
            master_seed,
            mode: self.mode.to_mode(),
        };
        cfg.validate().map_err(wrap)?;
        Ok(cfg)
    }
}

/// `[loss]` — fairness weight and the multi-SNR set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub w: f64,
    pub snr_set: Vec<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossWeights::default();
        LossSection { w: d.w, snr_set: d.snr_set }
    }
}

impl LossSection {
    pub fn to_loss_weights(&self) -> Result<LossWeights> {
        let w = LossWeights { w: self.w, snr_set: self.snr_set.clone() };
        w.validate().map_err(|e| Error::Config(format!("[loss]: {e}")))?;
        Ok(w)
    }
}

/// `[baseline]` — conventional-scheme simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub const1: String,
    pub const2: String,
    pub n_trials: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { const1: "qpsk".into(), const2: "qpsk".into(), n_trials: 1_000_000 }
    }
}

impl BaselineSection {
    pub fn constellations(&self) -> Result<(Constellation, Constellation)> {
        let wrap = |e: Error| Error::Config(format!("[baseline]: {e}"));
        Ok((
            Constellation::parse(&self.const1).map_err(wrap)?,
            Constellation::parse(&self.const2).map_err(wrap)?,
        ))
    }
}

/// CSI selector for `[quantizer] csi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiKey {
    None,
    Uniform,
    LloydMax,
}

impl CsiKey {
    pub fn kind(self) -> Option<QuantizerKind> {
        match self {
            CsiKey::None => None,
            CsiKey::Uniform => Some(QuantizerKind::Uniform),
            CsiKey::LloydMax => Some(QuantizerKind::LloydMax),
        }
    }
}

/// `[quantizer]` — CSI quantization for training plus standalone-table
/// settings. `levels` is the per-component codebook size the `train`/`eval`
/// recipes use when `csi` is not `none`; `sweep` drives the `quantizer`
/// recipe's table; `figure_levels` lists the sizes the quantized-CSI figure
/// compares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub csi: CsiKey,
    pub levels: usize,
    pub sweep: Vec<usize>,
    pub figure_levels: Vec<usize>,
    pub sigma: f64,
    pub samples: usize,
    pub design_seed: u64,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        QuantizerSection {
            csi: CsiKey::None,
            levels: 4,
            sweep: vec![2, 4, 8, 16],
            figure_levels: vec![4, 16],
            sigma: 1.0,
            samples: 1_000_000,
            design_seed: 7,
        }
    }
}

impl QuantizerSection {
    /// Design one codebook of the given kind and size for spread `sigma`.
    pub fn design(&self, kind: QuantizerKind, m: usize, sigma: f64) -> Result<crate::quantizer::QuantizerCodebook> {
        use rand::SeedableRng;
        let wrap = |e: Error| Error::Config(format!("[quantizer]: {e}"));
        match kind {
            QuantizerKind::Uniform => {
                design_uniform(m, sigma, DEFAULT_SUPPORT_MULTIPLE).map_err(wrap)
            }
            QuantizerKind::LloydMax => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.design_seed);
                design_lloyd_max(m, sigma, LLOYD_TOL, LLOYD_MAX_ITERS, &mut rng).map_err(wrap)
            }
        }
    }

    /// The CSI mode the `train`/`eval`/`constellation` recipes should use:
    /// perfect when `csi = "none"`, otherwise per-user codebooks of size
    /// `levels` matched to each gain's spread.
    pub fn to_csi_mode(&self, fading: &FadingConfig) -> Result<CsiMode> {
        match self.csi.kind() {
            None => Ok(CsiMode::Perfect),
            Some(kind) => Ok(CsiMode::Quantized {
                cb1: self.design(kind, self.levels, fading.sigma_h1)?,
                cb2: self.design(kind, self.levels, fading.sigma_h2)?,
            }),
        }
    }
}

/// `[constellation]` — channel states at which to dump the learned mapping,
/// each as `[h1_re, h1_im, h2_re, h2_im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstellationSection {
    pub states: Vec<[f64; 4]>,
}

impl Default for ConstellationSection {
    fn default() -> Self {
        ConstellationSection {
            states: vec![[1.0, 0.0, 2.0, 0.0], [0.5, 0.5, -1.0, 2.0]],
        }
    }
}

// --- the top-level config ----------------------------------------------------------

/// Everything one experiment run needs, resolved from a config file plus CLI
/// overrides. See the module docs for the format contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional in the file; the CLI recipe argument must agree when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    /// Average transmit power budget P.
    pub power: f64,
    /// Power allocation factor for analytical/conventional baselines.
    pub alpha: f64,
    /// Test SNRs in dB.
    pub snr_grid: Vec<f64>,
    /// Monte-Carlo symbols per SNR point when evaluating a learned system.
    pub n_test: usize,
    /// One independent training run per seed; curves average across them.
    pub seeds: Vec<u64>,
    /// Where artifacts land.
    pub out_dir: PathBuf,
    /// Where `eval` finds checkpoints; defaults to `out_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    pub fading: FadingSection,
    pub bits: BitsSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub baseline: BaselineSection,
    pub quantizer: QuantizerSection,
    pub constellation: ConstellationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: None,
            power: 1.0,
            alpha: 0.7,
            snr_grid: (0..=10).map(|i| 2.0 * i as f64).collect(),
            n_test: 1_000_000,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("out"),
            checkpoint_dir: None,
            fading: FadingSection::default(),
            bits: BitsSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            baseline: BaselineSection::default(),
            quantizer: QuantizerSection::default(),
            constellation: ConstellationSection::default(),
        }
    }
}

/// Reduced-scale profile applied by `--quick`: epochs capped at 2000, test
/// symbols at 10⁵, and at most 3 seeds.
pub const QUICK_EPOCH_CAP: usize = 2000;
pub const QUICK_TEST_CAP: usize = 100_000;
pub const QUICK_SEED_CAP: usize = 3;

impl ExperimentConfig {
    /// Parse a config file's text. An empty string yields all defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fold in the command line: the recipe (must agree with the file if the
    /// file names one), optional seed-list and output overrides, and the
    /// `--quick` scaling. Returns the resolved config ready to fingerprint.
    pub fn resolve_cli(
        mut self,
        recipe: Experiment,
        seed_list: Option<Vec<u64>>,
        out_dir: Option<PathBuf>,
        quick: bool,
    ) -> Result<Self> {
        if let Some(named) = self.experiment {
            if named != recipe {
                return Err(Error::Config(format!(
                    "config file names experiment {:?} but the command line asked for {:?}",
                    named.as_str(),
                    recipe.as_str()
                )));
            }
        }
        self.experiment = Some(recipe);
        if let Some(seeds) = seed_list {
            self.seeds = seeds;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        if quick {
            self.train.n_epochs = self.train.n_epochs.min(QUICK_EPOCH_CAP);
            self.n_test = self.n_test.min(QUICK_TEST_CAP);
            self.seeds.truncate(QUICK_SEED_CAP);
        }
        self.validate()?;
        Ok(self)
    }

    /// Field-level validation of everything the recipes will rely on.
    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Config(format!("power must be positive, got {}", self.power)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_grid must be a nonempty list of finite dB values".into()));
        }
        if self.n_test < 10_000 {
            return Err(Error::Config(format!(
                "n_test must be at least 10000 for a meaningful BER estimate, got {}",
                self.n_test
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.quantizer.levels < 2 {
            return Err(Error::Config(format!(
                "[quantizer]: levels must be at least 2, got {}",
                self.quantizer.levels
            )));
        }
        if self.baseline.n_trials == 0 {
            return Err(Error::Config("[baseline]: n_trials must be positive".into()));
        }
        if self.constellation.states.is_empty() {
            return Err(Error::Config("[constellation]: states must be nonempty".into()));
        }
        self.fading.to_fading()?;
        self.bits.to_bit_config()?;
        self.train.to_train_config(self.seeds[0])?;
        self.loss.to_loss_weights()?;
        self.baseline.constellations()?;
        Ok(())
    }

    /// Where `eval` looks for checkpoints.
    pub fn checkpoint_dir(&self) -> &Path {
        self.checkpoint_dir.as_deref().unwrap_or(&self.out_dir)
    }

    /// Canonical serialized form: field order is fixed by the type, floats
    /// round-trip, defaults are materialized.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// SHA-256 of the canonical form, hex-encoded. Two configs share a
    /// fingerprint exactly when every resolved field agrees.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write as _;
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
