//! Two-user downlink NOMA over Rayleigh fading, learned end-to-end.
//!
//! The crate provides:
//!
//! - [`channel`]: block-fading channel model and SNR conventions shared by
//!   every other module,
//! - [`quantizer`]: uniform and Lloyd–Max scalar quantizers for CSI feedback,
//! - [`nn`]: a small dense-network engine (tanh/sigmoid/linear layers,
//!   residual skips, Adam) with reverse-mode gradients,
//! - [`ae`]: the autoencoder system — one encoder at the base station, one
//!   decoder per user — including training, BER evaluation and constellation
//!   export,
//! - [`baselines`]: conventional NOMA with SIC detection, closed-form and
//!   quadrature symbol-error analysis, and single-user reference curves,
//! - [`config`] / [`recipes`] / [`results`]: experiment configuration, the
//!   figure-style recipes behind the `noma-ae` binary, and CSV artifacts.
//!
//! Conventions, fixed once here and relied on everywhere: total transmit
//! power `P` (default 1) with reference bit energy `E_b = P/2`; SNR in dB is
//! `10·log10(E_b/σ²)` where `σ²` is the noise variance *per real dimension*;
//! fading coefficients have i.i.d. `N(0, σ_hk²)` real and imaginary parts so
//! `E[|h_k|²] = 2σ_hk²`.

pub mod ae;
pub mod baselines;
pub mod channel;
pub mod compare;
pub mod config;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod quantizer;
pub mod recipes;
pub mod results;

pub use channel::Complex64;
pub use error::{Error, Result};
