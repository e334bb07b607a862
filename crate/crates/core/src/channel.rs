//! AWGN and Wiener phase noise at the symbol rate.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_SYMBOL_RATE_BAUD: f64 = 32e9;

/// Operating point of the channel.
///
/// SNR is `E_s/N_0` with unit symbol energy, so `sigma_n² = N_0` is the total
/// complex noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub snr_db: f64,
    pub linewidth_hz: f64,
    pub symbol_rate_baud: f64,
    pub sigma_n: f64,
    pub sigma_phi: f64,
}

impl ChannelParams {
    pub fn new(snr_db: f64, linewidth_hz: f64, symbol_rate_baud: f64) -> Result<Self> {
        if !(symbol_rate_baud > 0.0) || !symbol_rate_baud.is_finite() {
            return Err(Error::Parameter(format!(
                "symbol rate must be positive, got {symbol_rate_baud}"
            )));
        }
        if !(linewidth_hz >= 0.0) || !linewidth_hz.is_finite() {
            return Err(Error::Parameter(format!(
                "linewidth must be non-negative, got {linewidth_hz}"
            )));
        }
        if !snr_db.is_finite() {
            return Err(Error::Parameter(format!("SNR must be finite, got {snr_db}")));
        }
        Ok(Self {
            snr_db,
            linewidth_hz,
            symbol_rate_baud,
            sigma_n: 10f64.powf(-snr_db / 10.0).sqrt(),
            sigma_phi: (2.0 * PI * linewidth_hz / symbol_rate_baud).sqrt(),
        })
    }

    /// Noise-free, phase-noise-free channel.
    pub fn ideal() -> Self {
        Self {
            snr_db: f64::INFINITY,
            linewidth_hz: 0.0,
            symbol_rate_baud: DEFAULT_SYMBOL_RATE_BAUD,
            sigma_n: 0.0,
            sigma_phi: 0.0,
        }
    }

    /// Total complex noise variance.
    pub fn n0(&self) -> f64 {
        self.sigma_n * self.sigma_n
    }
}

pub fn params_from(snr_db: f64, linewidth_hz: f64, symbol_rate_baud: f64) -> Result<ChannelParams> {
    ChannelParams::new(snr_db, linewidth_hz, symbol_rate_baud)
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be non-negative, got {sigma}")))
    }
}

/// Circularly symmetric complex Gaussian samples of total variance `sigma_n²`.
pub fn sample_awgn<R: Rng + ?Sized>(len: usize, sigma_n: f64, rng: &mut R) -> Result<Vec<Complex64>> {
    check_sigma("sigma_n", sigma_n)?;
    if sigma_n == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); len]);
    }
    let normal = Normal::new(0.0, sigma_n / 2f64.sqrt()).expect("validated sigma");
    Ok((0..len)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect())
}

/// Wiener phase track `φ_k = φ_{k-1} + Δφ_k` with `φ_0 = initial_phase` and
/// `Δφ_k ~ N(0, sigma_phi²)`.
pub fn sample_phase_track<R: Rng + ?Sized>(
    len: usize,
    sigma_phi: f64,
    initial_phase: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_sigma("sigma_phi", sigma_phi)?;
    if sigma_phi == 0.0 {
        return Ok(vec![initial_phase; len]);
    }
    let normal = Normal::new(0.0, sigma_phi).expect("validated sigma");
    let mut phi = initial_phase;
    Ok((0..len)
        .map(|k| {
            if k > 0 {
                phi += normal.sample(rng);
            }
            phi
        })
        .collect())
}

pub fn awgn<R: Rng + ?Sized>(x: &[Complex64], sigma_n: f64, rng: &mut R) -> Result<Vec<Complex64>> {
    let noise = sample_awgn(x.len(), sigma_n, rng)?;
    Ok(x.iter().zip(&noise).map(|(x, n)| x + n).collect())
}

/// Applies Wiener phase noise; returns the rotated block and the true phase track.
pub fn wiener_phase<R: Rng + ?Sized>(
    x: &[Complex64],
    sigma_phi: f64,
    rng: &mut R,
    initial_phase: f64,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let track = sample_phase_track(x.len(), sigma_phi, initial_phase, rng)?;
    let z = x
        .iter()
        .zip(&track)
        .map(|(x, &phi)| x * Complex64::from_polar(1.0, phi))
        .collect();
    Ok((z, track))
}

/// Full impairment `z_k = (x_k + n_k) e^{jφ_k}`.
pub fn transmit<R: Rng + ?Sized>(
    x: &[Complex64],
    params: &ChannelParams,
    initial_phase: f64,
    rng: &mut R,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let y = awgn(x, params.sigma_n, rng)?;
    wiener_phase(&y, params.sigma_phi, rng, initial_phase)
}
