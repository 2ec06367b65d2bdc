//! High-pass filtering and Welch spectral estimation.
//!
//! The high-pass is a Butterworth design (analog prototype, high-pass
//! transform, bilinear transform with pre-warping) run forward and backward
//! for zero phase. PSDs are one-sided densities in amplitude²/Hz, scaled so
//! that summing `power · Δf` over all bins recovers the signal's mean square.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cutoff of the preprocessing high-pass, Hz.
pub const DEFAULT_HIGHPASS_HZ: f64 = 1.0;
pub const DEFAULT_HIGHPASS_ORDER: usize = 4;

/// IIR coefficients in transfer-function form, `a[0] == 1`, plus the same
/// filter factored into second-order sections `[b0, b1, b2, 1, a1, a2]`.
/// Filtering runs on the sections; the expanded polynomial loses too much
/// precision near DC for a 1 Hz cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub sos: Vec<[f64; 6]>,
    pub cutoff_hz: f64,
    pub order: usize,
    pub fs: f64,
    /// z-plane poles, kept for the stability check.
    #[serde(skip)]
    poles: Vec<Complex64>,
}

impl FilterCoeffs {
    /// Single-pass complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.fs;
        let eval = |c: &[f64]| -> Complex64 {
            c.iter()
                .enumerate()
                .map(|(k, &ck)| ck * Complex64::from_polar(1.0, -w * k as f64))
                .sum()
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Single-pass gain in dB.
    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Gain of the forward-backward (zero-phase) application in dB.
    pub fn zero_phase_gain_db(&self, freq_hz: f64) -> f64 {
        2.0 * self.gain_db(freq_hz)
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    pub fn is_stable(&self) -> bool {
        self.poles.iter().all(|p| p.norm() < 1.0)
    }

    /// Edge padding used by [`apply_zero_phase`].
    pub fn pad_len(&self) -> usize {
        3 * self.a.len().max(self.b.len())
    }

    /// Causal (single-pass) filtering from rest.
    pub fn apply_causal(&self, signal: &[f64]) -> Vec<f64> {
        let rest = vec![[0.0; 2]; self.sos.len()];
        sosfilt(&self.sos, signal, &rest)
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs
}

/// Butterworth high-pass with its -3 dB point at `cutoff_hz`.
pub fn design_highpass(cutoff_hz: f64, order: usize, fs: f64) -> Result<FilterCoeffs> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::invalid(format!(
            "sampling rate must be positive, got {fs}"
        )));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::invalid(format!(
            "cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    if order == 0 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    let n = order as f64;
    let fs2 = 2.0 * fs;
    let warped = fs2 * (PI * cutoff_hz / fs).tan();

    // Analog low-pass prototype poles on the left half of the unit circle.
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let m = -(n - 1.0) + 2.0 * k as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect();
    // Low-pass to high-pass: s -> warped / s; all zeros land at s = 0.
    let analog_poles: Vec<Complex64> = proto.iter().map(|&p| warped / p).collect();
    let analog_gain = 1.0 / proto.iter().map(|&p| -p).product::<Complex64>().re;

    // Bilinear transform: zeros at s = 0 map to z = 1.
    let poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|&p| (fs2 + p) / (fs2 - p))
        .collect();
    let zeros = vec![Complex64::new(1.0, 0.0); order];
    let gain = analog_gain
        * (Complex64::new(fs2.powi(order as i32), 0.0)
            / analog_poles.iter().map(|&p| fs2 - p).product::<Complex64>())
        .re;

    let b: Vec<f64> = poly_from_roots(&zeros)
        .iter()
        .map(|c| gain * c.re)
        .collect();
    let a: Vec<f64> = poly_from_roots(&poles).iter().map(|c| c.re).collect();
    let sos = second_order_sections(&poles, gain);
    let coeffs = FilterCoeffs {
        b,
        a,
        sos,
        cutoff_hz,
        order,
        fs,
        poles,
    };
    debug_assert!(coeffs.is_stable());
    Ok(coeffs)
}

/// Groups poles into conjugate pairs (a lone real pole gets a first-order
/// section). Every section carries the zeros at z = 1; `gain` goes on the first.
fn second_order_sections(poles: &[Complex64], gain: f64) -> Vec<[f64; 6]> {
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    upper.sort_by(|x, y| x.norm().total_cmp(&y.norm()));
    let mut sections: Vec<[f64; 6]> = upper
        .iter()
        .map(|p| [1.0, -2.0, 1.0, 1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for p in poles.iter().filter(|p| p.im.abs() <= 1e-12) {
        sections.push([1.0, -1.0, 0.0, 1.0, -p.re, 0.0]);
    }
    for v in &mut sections[0][..3] {
        *v *= gain;
    }
    sections
}

fn sosfilt(sos: &[[f64; 6]], x: &[f64], zi: &[[f64; 2]]) -> Vec<f64> {
    let mut y = x.to_vec();
    for (sec, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2, _, a1, a2] = *sec;
        let mut z = *z0;
        for v in y.iter_mut() {
            let xn = *v;
            let yn = b0 * xn + z[0];
            z[0] = b1 * xn - a1 * yn + z[1];
            z[1] = b2 * xn - a2 * yn;
            *v = yn;
        }
    }
    y
}

/// Steady-state section states for a unit step at the cascade input.
fn sosfilt_zi(sos: &[[f64; 6]]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    let mut out = Vec::with_capacity(sos.len());
    for sec in sos {
        let zi = lfilter_zi(&sec[..3], &sec[3..]);
        out.push([scale * zi[0], scale * zi[1]]);
        scale *= (sec[0] + sec[1] + sec[2]) / (sec[3] + sec[4] + sec[5]);
    }
    out
}

/// Direct-form II transposed IIR filter with initial state `zi`.
#[cfg(test)]
fn lfilter(b: &[f64], a: &[f64], x: &[f64], zi: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let coef = |c: &[f64], i: usize| c.get(i).copied().unwrap_or(0.0);
    let mut z = zi.to_vec();
    z.resize(n, 0.0);
    let mut y = Vec::with_capacity(x.len());
    for &xn in x {
        let yn = coef(b, 0) * xn + z[0];
        for i in 1..n {
            z[i - 1] = coef(b, i) * xn - coef(a, i) * yn + z[i];
        }
        y.push(yn);
    }
    y
}

/// Steady-state filter state for a unit step input.
fn lfilter_zi(b: &[f64], a: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let coef = |c: &[f64], i: usize| c.get(i).copied().unwrap_or(0.0);
    let m = n - 1;
    if m == 0 {
        return Vec::new();
    }
    // Solve (I - Cᵀ) zi = b[1:] - a[1:]·b[0], C the companion matrix of `a`.
    let mut mat = vec![vec![0.0; m + 1]; m];
    for (r, row) in mat.iter_mut().enumerate() {
        row[r] += 1.0;
        row[0] += coef(a, r + 1);
        if r + 1 < m {
            row[r + 1] -= 1.0;
        }
        row[m] = coef(b, r + 1) - coef(a, r + 1) * coef(b, 0);
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| mat[i][col].abs().total_cmp(&mat[j][col].abs()))
            .unwrap();
        mat.swap(col, pivot);
        for r in 0..m {
            if r != col {
                let factor = mat[r][col] / mat[col][col];
                if factor != 0.0 {
                    #[allow(clippy::needless_range_loop)]
                    for c in col..=m {
                        mat[r][c] -= factor * mat[col][c];
                    }
                }
            }
        }
    }
    (0..m).map(|r| mat[r][m] / mat[r][r]).collect()
}

/// Forward-backward filtering with odd (point-reflected) edge extension and
/// steady-state initial conditions. Output length equals input length.
pub fn apply_zero_phase(coeffs: &FilterCoeffs, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = coeffs.pad_len();
    let n = signal.len();
    if n <= pad {
        return Err(Error::invalid(format!(
            "signal of {n} samples is too short for zero-phase filtering (needs more than {pad})"
        )));
    }
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let zi = sosfilt_zi(&coeffs.sos);
    let scaled = |s: f64| zi.iter().map(|z| [z[0] * s, z[1] * s]).collect::<Vec<_>>();

    let mut y = sosfilt(&coeffs.sos, &ext, &scaled(ext[0]));
    y.reverse();
    let mut y = sosfilt(&coeffs.sos, &y, &scaled(y[0]));
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Zero-phase filters every channel row of a `[channels × time]` array.
pub fn filter_channels(coeffs: &FilterCoeffs, data: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(data.raw_dim());
    for (row_in, mut row_out) in data.rows().into_iter().zip(out.rows_mut()) {
        let filtered = apply_zero_phase(coeffs, &row_in.to_vec())?;
        row_out.assign(&ArrayView1::from(&filtered));
    }
    Ok(out)
}

/// One-sided Welch PSD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub window_len: usize,
    pub overlap: f64,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        self.freqs.get(1).copied().unwrap_or(0.0) - self.freqs[0]
    }

    /// Frequency of the largest bin.
    pub fn peak_frequency(&self) -> f64 {
        let idx = self
            .power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.freqs[idx]
    }

    /// Index of the bin nearest to `freq_hz`.
    pub fn bin_of(&self, freq_hz: f64) -> usize {
        let idx = (freq_hz / self.resolution()).round().max(0.0) as usize;
        idx.min(self.freqs.len() - 1)
    }

    /// Sum of `power · Δf`: the mean square of the analysed signal.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution()
    }

    /// `freq,power` CSV with header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq,power\n");
        for (f, p) in self.freqs.iter().zip(&self.power) {
            writeln!(out, "{f},{p}").unwrap();
        }
        out
    }
}

/// Reusable Welch estimator: Hann window (periodic), fixed segment length,
/// overlap fraction, density scaling. No detrending.
pub struct WelchEstimator {
    fs: f64,
    window_len: usize,
    step: usize,
    overlap: f64,
    window: Vec<f64>,
    scale: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for WelchEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WelchEstimator")
            .field("fs", &self.fs)
            .field("window_len", &self.window_len)
            .field("overlap", &self.overlap)
            .finish()
    }
}

impl WelchEstimator {
    pub fn new(fs: f64, window_len: usize, overlap: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        if window_len < 2 {
            return Err(Error::invalid("Welch window must span at least 2 samples"));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::invalid(format!(
                "overlap must be in [0, 1), got {overlap}"
            )));
        }
        let noverlap = ((overlap * window_len as f64).floor() as usize).min(window_len - 1);
        let window: Vec<f64> = (0..window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window_len as f64).cos())
            .collect();
        let energy: f64 = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(window_len);
        Ok(WelchEstimator {
            fs,
            window_len,
            step: window_len - noverlap,
            overlap,
            window,
            scale: 1.0 / (fs * energy),
            fft,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n_bins())
            .map(|k| k as f64 * self.fs / self.window_len as f64)
            .collect()
    }

    /// Adds this signal's averaged periodogram into `acc` (length `n_bins`).
    pub fn accumulate(&self, signal: &[f64], acc: &mut [f64]) -> Result<()> {
        if signal.len() < self.window_len {
            return Err(Error::invalid(format!(
                "Welch window of {} samples is longer than the {}-sample signal",
                self.window_len,
                signal.len()
            )));
        }
        let n_bins = self.n_bins();
        debug_assert_eq!(acc.len(), n_bins);
        let segments = (signal.len() - self.window_len) / self.step + 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.window_len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let even = self.window_len.is_multiple_of(2);
        let norm = self.scale / segments as f64;
        for seg in 0..segments {
            let start = seg * self.step;
            for (b, (&x, &w)) in buf.iter_mut().zip(
                signal[start..start + self.window_len]
                    .iter()
                    .zip(&self.window),
            ) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, slot) in acc.iter_mut().enumerate() {
                let one_sided = if k == 0 || (even && k == n_bins - 1) {
                    1.0
                } else {
                    2.0
                };
                *slot += one_sided * norm * buf[k].norm_sqr();
            }
        }
        Ok(())
    }

    pub fn estimate(&self, signal: &[f64]) -> Result<PsdEstimate> {
        let mut power = vec![0.0; self.n_bins()];
        self.accumulate(signal, &mut power)?;
        Ok(self.finish(power))
    }

    /// Wraps an accumulated power vector into an estimate.
    pub fn finish(&self, power: Vec<f64>) -> PsdEstimate {
        PsdEstimate {
            freqs: self.freqs(),
            power,
            window_len: self.window_len,
            overlap: self.overlap,
        }
    }
}

/// Welch PSD of a single signal.
pub fn welch_psd(signal: &[f64], fs: f64, window_len: usize, overlap: f64) -> Result<PsdEstimate> {
    WelchEstimator::new(fs, window_len, overlap)?.estimate(signal)
}

/// Mean across channels of a `[channels × time]` array.
pub fn channel_mean(data: &Array2<f64>) -> Vec<f64> {
    data.mean_axis(ndarray::Axis(0))
        .expect("at least one channel")
        .to_vec()
}
