//! Block-fading channel model and the SNR/energy conventions shared by the
//! whole crate.
//!
//! Every transmitted symbol sees `y_k = h_k·x + n_k` per user `k`, where
//! `h_k` is constant over the symbol (block fading) and `n_k` is circular
//! complex Gaussian noise with variance `σ²` per real dimension. Fading
//! components are i.i.d. `N(0, σ_hk²)`, so `|h_k|²` is exponential with mean
//! `2σ_hk²` and `|h_k|` is Rayleigh(σ_hk).
//!
//! SNR is always quoted as `E_b/σ²` in dB with `E_b = P/2`; mixed bit-length
//! configurations reuse the same reference energy so all curves share an
//! axis.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use num_complex::Complex64;

/// Per-user Rayleigh spread: real/imag parts of `h_k` are `N(0, sigma_hk²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingConfig {
    pub sigma_h1: f64,
    pub sigma_h2: f64,
}

impl FadingConfig {
    pub fn new(sigma_h1: f64, sigma_h2: f64) -> Result<Self> {
        if !(sigma_h1 > 0.0 && sigma_h1.is_finite()) || !(sigma_h2 > 0.0 && sigma_h2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fading spreads must be positive and finite, got ({sigma_h1}, {sigma_h2})"
            )));
        }
        Ok(Self { sigma_h1, sigma_h2 })
    }
}

impl Default for FadingConfig {
    /// The weak user sees σ_h1 = 1, the strong user σ_h2 = 2.
    fn default() -> Self {
        Self { sigma_h1: 1.0, sigma_h2: 2.0 }
    }
}

/// One block-fading draw, shared by a transmitted symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRealization {
    pub h1: Complex64,
    pub h2: Complex64,
}

/// An operating point on the SNR axis. `eb` is derived, never set directly:
/// `eb = total_power / 2` by the crate-wide convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrSpec {
    pub snr_db: f64,
    pub total_power: f64,
    pub eb: f64,
}

impl SnrSpec {
    pub fn new(snr_db: f64, total_power: f64) -> Result<Self> {
        if !(total_power > 0.0 && total_power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "total power must be positive and finite, got {total_power}"
            )));
        }
        if !snr_db.is_finite() {
            return Err(Error::InvalidArgument(format!("SNR must be finite, got {snr_db}")));
        }
        Ok(Self { snr_db, total_power, eb: total_power / 2.0 })
    }

    /// Noise standard deviation per real dimension at this operating point.
    pub fn noise_sigma(&self) -> f64 {
        noise_sigma_from_snr(self.snr_db, self.eb)
    }
}

/// `σ = sqrt(E_b · 10^(−snr_db/10))`: the per-real-dimension noise standard
/// deviation that realizes `E_b/σ²` equal to the requested SNR.
pub fn noise_sigma_from_snr(snr_db: f64, eb: f64) -> f64 {
    (eb * 10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Draw one block-fading realization. Sampling order is fixed (h1.re, h1.im,
/// h2.re, h2.im) so a seeded generator reproduces the same draw everywhere.
pub fn sample_channel<R: Rng + ?Sized>(cfg: &FadingConfig, rng: &mut R) -> ChannelRealization {
    let mut gauss = |s: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        s * z
    };
    let h1 = Complex64::new(gauss(cfg.sigma_h1), gauss(cfg.sigma_h1));
    let h2 = Complex64::new(gauss(cfg.sigma_h2), gauss(cfg.sigma_h2));
    ChannelRealization { h1, h2 }
}

/// Apply one user's channel to a symbol: `y = h·x + n` with noise variance
/// `noise_sigma²` per real dimension. `noise_sigma = 0` performs the exact
/// complex multiplication with no generator draws, so noiseless paths are
/// bit-reproducible.
pub fn apply_channel<R: Rng + ?Sized>(
    x: Complex64,
    h: Complex64,
    noise_sigma: f64,
    rng: &mut R,
) -> Complex64 {
    let y = h * x;
    if noise_sigma == 0.0 {
        return y;
    }
    let nr: f64 = rng.sample(StandardNormal);
    let ni: f64 = rng.sample(StandardNormal);
    Complex64::new(y.re + noise_sigma * nr, y.im + noise_sigma * ni)
}

// ---------------------------------------------------------------------------
