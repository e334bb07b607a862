//! Carrier phase estimation by blind phase search.
//!
//! [`bps_hard`] is the classic feed-forward estimator used for validation.
//! [`bps_diff`] is its relaxation used during training: both the minimum over
//! constellation points and the selection among test angles become
//! temperature-controlled soft minima, so gradients reach the transmitter.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{softmin_weights, CVar, Tape, Var};

pub const DEFAULT_N_ANGLES: usize = 60;
pub const DEFAULT_WINDOW: usize = 120;

pub const INITIAL_TEMPERATURE: f64 = 1.0;
pub const FINAL_TEMPERATURE: f64 = 0.001;

/// Range searched by the test angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleSpan {
    /// `[-π/4, π/4)`, one quadrant.
    #[default]
    Quadrant,
    /// `[-π, π)`.
    Full,
}

impl AngleSpan {
    pub fn start(self) -> f64 {
        match self {
            AngleSpan::Quadrant => -FRAC_PI_4,
            AngleSpan::Full => -PI,
        }
    }

    /// Width of the span, which is also the unwrapping period.
    pub fn width(self) -> f64 {
        match self {
            AngleSpan::Quadrant => FRAC_PI_2,
            AngleSpan::Full => 2.0 * PI,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AngleSpan::Quadrant => "quadrant",
            AngleSpan::Full => "full",
        }
    }
}

impl std::str::FromStr for AngleSpan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrant" => Ok(AngleSpan::Quadrant),
            "full" => Ok(AngleSpan::Full),
            other => Err(Error::Parameter(format!("unknown angle span {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpsConfig {
    pub n_angles: usize,
    pub window: usize,
    pub span: AngleSpan,
}

impl Default for BpsConfig {
    fn default() -> Self {
        Self {
            n_angles: DEFAULT_N_ANGLES,
            window: DEFAULT_WINDOW,
            span: AngleSpan::Quadrant,
        }
    }
}

impl BpsConfig {
    pub fn new(n_angles: usize, window: usize, span: AngleSpan) -> Result<Self> {
        let cfg = Self {
            n_angles,
            window,
            span,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 2 {
            return Err(Error::Parameter(format!(
                "BPS needs at least 2 test angles, got {}",
                self.n_angles
            )));
        }
        if self.window == 0 {
            return Err(Error::Parameter("BPS window must be at least 1".into()));
        }
        Ok(())
    }

    /// Spacing of the test-angle grid.
    pub fn grid_step(&self) -> f64 {
        self.span.width() / self.n_angles as f64
    }

    /// Symbols at each block end whose window is clipped.
    pub fn edge(&self) -> usize {
        self.window / 2
    }

    /// Half-open window `[lo, hi)` around symbol `k` in a block of `len`.
    fn window_bounds(&self, k: usize, len: usize) -> (usize, usize) {
        let half = self.window / 2;
        let lo = k.saturating_sub(half);
        let hi = (k + self.window - half).min(len);
        (lo, hi)
    }
}

/// Annealed temperature of the soft minima, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Parameter(format!(
                "temperature must lie in (0, 1], got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Geometric schedule from 1.0 at step 0 down to 0.001 at `total_steps`.
pub fn anneal(step: usize, total_steps: usize) -> Result<Temperature> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Parameter(format!(
            "annealing step {step} outside 0..={total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    let ratio = FINAL_TEMPERATURE / INITIAL_TEMPERATURE;
    let value = if step == total_steps {
        FINAL_TEMPERATURE
    } else {
        INITIAL_TEMPERATURE * ratio.powf(frac)
    };
    Temperature::new(value)
}

/// `φ_b = start + b · width / B`.
pub fn test_angles(cfg: &BpsConfig) -> Vec<f64> {
    let step = cfg.grid_step();
    (0..cfg.n_angles)
        .map(|b| cfg.span.start() + b as f64 * step)
        .collect()
}

fn check_block(len: usize, cfg: &BpsConfig) -> Result<()> {
    cfg.validate()?;
    if len < cfg.window {
        return Err(Error::Input(format!(
            "block of {len} symbols is shorter than the BPS window {}",
            cfg.window
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpsOutput {
    /// Derotated symbols `x̂_k = z_k e^{-jφ̂_k}`.
    pub symbols: Vec<Complex64>,
    /// Unwrapped phase estimates.
    pub phases: Vec<f64>,
    /// Raw argmin test-angle index per symbol.
    pub indices: Vec<usize>,
    /// Steps where the unwrapped estimate moved by more than a quarter of
    /// the span; the branch decision there was ambiguous.
    pub slips: usize,
}

/// Windowed sums over axis 0 of a row-major (len × cols) table, clipped at
/// the block edges.
fn windowed_sums(d: &[f64], len: usize, cols: usize, cfg: &BpsConfig) -> Vec<f64> {
    let mut prefix = vec![0.0; (len + 1) * cols];
    for k in 0..len {
        for b in 0..cols {
            prefix[(k + 1) * cols + b] = prefix[k * cols + b] + d[k * cols + b];
        }
    }
    let mut out = vec![0.0; len * cols];
    for k in 0..len {
        let (lo, hi) = cfg.window_bounds(k, len);
        for b in 0..cols {
            out[k * cols + b] = prefix[hi * cols + b] - prefix[lo * cols + b];
        }
    }
    out
}

/// Hard blind phase search.
pub fn bps_hard(z: &[Complex64], points: &[Complex64], cfg: &BpsConfig) -> Result<BpsOutput> {
    check_block(z.len(), cfg)?;
    if points.is_empty() {
        return Err(Error::Input("empty constellation".into()));
    }
    let angles = test_angles(cfg);
    let rotors: Vec<Complex64> = angles.iter().map(|&a| Complex64::from_polar(1.0, -a)).collect();
    let n_angles = angles.len();

    let mut d = vec![0.0; z.len() * n_angles];
    d.par_chunks_mut(n_angles)
        .zip(z.par_iter())
        .for_each(|(row, &zk)| {
            for (slot, rot) in row.iter_mut().zip(&rotors) {
                let r = zk * rot;
                *slot = points
                    .iter()
                    .map(|c| (r - c).norm_sqr())
                    .fold(f64::INFINITY, f64::min);
            }
        });
    let sums = windowed_sums(&d, z.len(), n_angles, cfg);

    let period = cfg.span.width();
    let mut phases: Vec<f64> = Vec::with_capacity(z.len());
    let mut indices = Vec::with_capacity(z.len());
    let mut slips = 0;
    for (k, row) in sums.chunks_exact(n_angles).enumerate() {
        let best = argmin(row);
        let raw = angles[best];
        let phase = match phases.last() {
            None => raw,
            Some(&prev) => {
                let phase = raw + period * ((prev - raw) / period).round();
                if (phase - prev).abs() > period / 4.0 {
                    slips += 1;
                }
                phase
            }
        };
        debug_assert_eq!(k, phases.len());
        phases.push(phase);
        indices.push(best);
    }
    let symbols = z
        .iter()
        .zip(&phases)
        .map(|(zk, &p)| zk * Complex64::from_polar(1.0, -p))
        .collect();
    Ok(BpsOutput {
        symbols,
        phases,
        indices,
        slips,
    })
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// Output of the differentiable search.
#[derive(Debug, Clone)]
pub struct SoftBpsOutput {
    pub symbols: Vec<CVar>,
    /// Test-angle index carrying the largest weight per symbol.
    pub dominant: Vec<usize>,
}

/// Soft minimum `-t ln Σ_i exp(-|r - c_i|²/t)` of the squared distance from
/// `r = z e^{-jφ}` to the points, recorded as one node.
fn soft_nearest_distance(
    tape: &mut Tape,
    z: (Var, Var),
    zv: Complex64,
    rotor: Complex64,
    points: &[CVar],
    pv: &[Complex64],
    t: f64,
    scratch: &mut Vec<f64>,
) -> Result<Var> {
    let r = zv * rotor;
    scratch.clear();
    scratch.extend(pv.iter().map(|c| (r - c).norm_sqr()));
    let dmin = scratch.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for d in scratch.iter_mut() {
        *d = (-(*d - dmin) / t).exp();
        total += *d;
    }
    let value = dmin - t * total.ln();
    // ds/dd_i = w_i, dd_i/dr = 2 (r - c_i), dd_i/dc_i = -2 (r - c_i)
    let mut g = Complex64::new(0.0, 0.0);
    for (w, c) in scratch.iter_mut().zip(pv) {
        *w /= total;
        g += (r - c) * (2.0 * *w);
    }
    // r = z e^{-jφ}: ds/dz = conj-rotated gradient
    let gz = g * rotor.conj();
    let parents = [(z.0, gz.re), (z.1, gz.im)].into_iter().chain(
        points
            .iter()
            .zip(pv)
            .zip(scratch.iter())
            .flat_map(move |((cv, c), &w)| {
                let e = (r - c) * (-2.0 * w);
                [(cv.re, e.re), (cv.im, e.im)]
            }),
    );
    tape.node("soft_nearest_distance", value, parents)
}

/// Differentiable blind phase search.
///
/// Per symbol, the weights `softmin(D_{k,·}, t)` over windowed soft distances
/// average the candidate derotations: `x̂_k = Σ_b w_{k,b} z_k e^{-jφ_b}`.
pub fn bps_diff(
    tape: &mut Tape,
    z: &[CVar],
    points: &[CVar],
    cfg: &BpsConfig,
    temperature: Temperature,
) -> Result<SoftBpsOutput> {
    check_block(z.len(), cfg)?;
    if points.is_empty() {
        return Err(Error::Input("empty constellation".into()));
    }
    let t = temperature.value();
    let len = z.len();
    let angles = test_angles(cfg);
    let n_angles = angles.len();
    let rotors: Vec<Complex64> = angles.iter().map(|&a| Complex64::from_polar(1.0, -a)).collect();
    let zv: Vec<Complex64> = z.iter().map(|&v| tape.cvalue(v)).collect();
    let pv: Vec<Complex64> = points.iter().map(|&v| tape.cvalue(v)).collect();

    let mut scratch = Vec::with_capacity(points.len());
    let mut dist = Vec::with_capacity(len * n_angles);
    for (k, zk) in z.iter().enumerate() {
        for rot in &rotors {
            dist.push(soft_nearest_distance(
                tape,
                (zk.re, zk.im),
                zv[k],
                *rot,
                points,
                &pv,
                t,
                &mut scratch,
            )?);
        }
    }

    // Windowed sums as a sliding recurrence D_k = D_{k-1} + s_in - s_out.
    let dist_values: Vec<f64> = dist.iter().map(|&v| tape.value(v)).collect();
    let sums_values = windowed_sums(&dist_values, len, n_angles, cfg);
    let mut sums: Vec<Var> = Vec::with_capacity(len * n_angles);
    let mut prev_bounds = (0, 0);
    for k in 0..len {
        let (lo, hi) = cfg.window_bounds(k, len);
        for b in 0..n_angles {
            let value = sums_values[k * n_angles + b];
            let var = if k == 0 {
                let parents: Vec<_> = (lo..hi).map(|j| (dist[j * n_angles + b], 1.0)).collect();
                tape.node("window_sum", value, parents)?
            } else {
                let prev = sums[(k - 1) * n_angles + b];
                let entering = (prev_bounds.1..hi).map(|j| (dist[j * n_angles + b], 1.0));
                let leaving = (prev_bounds.0..lo).map(|j| (dist[j * n_angles + b], -1.0));
                let parents: Vec<_> = std::iter::once((prev, 1.0)).chain(entering).chain(leaving).collect();
                tape.node("window_sum", value, parents)?
            };
            sums.push(var);
        }
        prev_bounds = (lo, hi);
    }

    let mut symbols = Vec::with_capacity(len);
    let mut dominant = Vec::with_capacity(len);
    for k in 0..len {
        let row = &sums_values[k * n_angles..(k + 1) * n_angles];
        let w = softmin_weights(row, t)?;
        dominant.push(argmax(&w));
        let candidates: Vec<Complex64> = rotors.iter().map(|r| zv[k] * r).collect();
        let xhat: Complex64 = w.iter().zip(&candidates).map(|(w, u)| u * *w).sum();
        let mixer: Complex64 = w.iter().zip(&rotors).map(|(w, r)| r * *w).sum();
        // dx̂/dD_b = -(w_b / t) (u_b - x̂)
        let d_sums: Vec<Complex64> = w
            .iter()
            .zip(&candidates)
            .map(|(w, u)| (u - xhat) * (-w / t))
            .collect();
        let row_vars = &sums[k * n_angles..(k + 1) * n_angles];
        let re = tape.node(
            "bps_diff",
            xhat.re,
            [(z[k].re, mixer.re), (z[k].im, -mixer.im)]
                .into_iter()
                .chain(row_vars.iter().zip(&d_sums).map(|(&v, d)| (v, d.re))),
        )?;
        let im = tape.node(
            "bps_diff",
            xhat.im,
            [(z[k].re, mixer.im), (z[k].im, mixer.re)]
                .into_iter()
                .chain(row_vars.iter().zip(&d_sums).map(|(&v, d)| (v, d.im))),
        )?;
        symbols.push(CVar { re, im });
    }
    Ok(SoftBpsOutput { symbols, dominant })
}

fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = i;
        }
    }
    best
}
