//! Probing a model with synthetic inputs: sinusoid sweeps through the
//! pooling layer and white noise through the convolution.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{conv1d_same, pooled_features, ModelParams};
use crate::preprocess::{PsdEstimate, WelchEstimator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub name: &'static str,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// Conventional EEG bands, for annotating plots.
pub const BANDS: [Band; 5] = [
    Band {
        name: "delta",
        low_hz: 0.1,
        high_hz: 4.0,
    },
    Band {
        name: "theta",
        low_hz: 4.0,
        high_hz: 8.0,
    },
    Band {
        name: "alpha",
        low_hz: 8.0,
        high_hz: 13.0,
    },
    Band {
        name: "beta",
        low_hz: 13.0,
        high_hz: 30.0,
    },
    Band {
        name: "gamma",
        low_hz: 30.0,
        high_hz: f64::INFINITY,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub frequencies: Vec<f64>,
    pub amplitude: f64,
    pub repeats_sine: usize,
    pub repeats_noise: usize,
    pub fs: f64,
    pub epoch_len: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec::new(500.0, 2500, 59, 0)
    }
}

impl ProbeSpec {
    /// Integer-Hz grid from 0 to Nyquist and the default repeat counts.
    pub fn new(fs: f64, epoch_len: usize, channels: usize, seed: u64) -> Self {
        ProbeSpec {
            frequencies: integer_grid(fs),
            amplitude: 1.0,
            repeats_sine: 100,
            repeats_noise: 300,
            fs,
            epoch_len,
            channels,
            seed,
        }
    }

    pub fn nyquist(&self) -> f64 {
        self.fs / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.repeats_sine == 0 || self.repeats_noise == 0 {
            return Err(Error::invalid("probe repeats must be at least 1"));
        }
        if self.epoch_len == 0 || self.channels == 0 {
            return Err(Error::invalid(
                "probe epochs need at least one channel and sample",
            ));
        }
        if let Some(&f) = self
            .frequencies
            .iter()
            .find(|&&f| !(f >= 0.0 && f <= self.nyquist()))
        {
            return Err(Error::invalid(format!(
                "probe frequency {f} Hz outside [0, {}] Hz",
                self.nyquist()
            )));
        }
        Ok(())
    }

    fn check_model(&self, params: &ModelParams) -> Result<()> {
        self.validate()?;
        if params.config.in_channels != self.channels {
            return Err(Error::Shape(format!(
                "probe has {} channels, model expects {}",
                self.channels, params.config.in_channels
            )));
        }
        Ok(())
    }
}

/// `0, 1, …, floor(fs/2)` Hz.
pub fn integer_grid(fs: f64) -> Vec<f64> {
    (0..=(fs / 2.0).floor() as usize)
        .map(|f| f as f64)
        .collect()
}

/// `A·sin(2πft + φ_n)` on every channel, with independent uniform phases.
pub fn gen_sinusoid_probe(f: f64, spec: &ProbeSpec, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
    if !(f >= 0.0 && f <= spec.nyquist()) {
        return Err(Error::invalid(format!(
            "probe frequency {f} Hz outside [0, {}] Hz",
            spec.nyquist()
        )));
    }
    let omega = 2.0 * PI * f / spec.fs;
    // sin(ωn + φ) = sin(ωn)·cos φ + cos(ωn)·sin φ, from one shared table.
    let (sin_t, cos_t): (Vec<f64>, Vec<f64>) = (0..spec.epoch_len)
        .map(|n| (omega * n as f64).sin_cos())
        .unzip();
    let mut out = Array2::zeros((spec.channels, spec.epoch_len));
    for mut row in out.rows_mut() {
        let (sp, cp) = (rng.random::<f64>() * 2.0 * PI).sin_cos();
        let (a, b) = (spec.amplitude * cp, spec.amplitude * sp);
        for ((v, s), c) in row.iter_mut().zip(&sin_t).zip(&cos_t) {
            *v = s * a + c * b;
        }
    }
    Ok(out)
}

/// Independent standard Gaussian samples.
pub fn gen_white_noise(spec: &ProbeSpec, rng: &mut dyn RngCore) -> Array2<f64> {
    Array2::from_shape_simple_fn((spec.channels, spec.epoch_len), || {
        rng.sample::<f64, _>(StandardNormal)
    })
}

const SINE_SALT: u64 = 0x5349_4e45_5052_4f42;
const NOISE_SALT: u64 = 0x4e4f_4953_4550_524f;

fn task_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

/// Mean pooled activation per output channel and probe frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub freqs: Vec<f64>,
    /// `[pool outputs × freqs]`
    pub activation: Array2<f64>,
}

impl SensitivityMap {
    /// Header `output,<f0>,<f1>,…`, then one row per pooled output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("output");
        for f in &self.freqs {
            write!(out, ",{f}").unwrap();
        }
        out.push('\n');
        for (o, row) in self.activation.axis_iter(Axis(0)).enumerate() {
            write!(out, "{o}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `repeats_sine` random-phase sinusoids per frequency through the
/// model in eval mode and averages the pooling-layer outputs.
pub fn pooling_sensitivity(params: &ModelParams, spec: &ProbeSpec) -> Result<SensitivityMap> {
    spec.check_model(params)?;
    let repeats = spec.repeats_sine as u64;
    let columns: Vec<Vec<f64>> = spec
        .frequencies
        .par_iter()
        .enumerate()
        .map(|(fi, &f)| {
            let mut sum = vec![0.0; params.config.out_channels];
            for r in 0..repeats {
                let mut rng = task_rng(spec.seed, SINE_SALT, fi as u64 * repeats + r);
                let probe = gen_sinusoid_probe(f, spec, &mut rng)?;
                let pooled = pooled_features(params, probe.view())?;
                for (s, p) in sum.iter_mut().zip(pooled.iter()) {
                    *s += p;
                }
            }
            Ok(sum.into_iter().map(|s| s / repeats as f64).collect())
        })
        .collect::<Result<_>>()?;

    let mut activation = Array2::zeros((params.config.out_channels, spec.frequencies.len()));
    for (fi, col) in columns.iter().enumerate() {
        for (o, &v) in col.iter().enumerate() {
            activation[[o, fi]] = v;
        }
    }
    Ok(SensitivityMap {
        freqs: spec.frequencies.clone(),
        activation,
    })
}

/// Averaged Welch PSD of each convolution output under white-noise input.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResponseMap {
    pub freqs: Vec<f64>,
    /// `[conv outputs × bins]`
    pub power: Array2<f64>,
    pub window_len: usize,
    pub overlap: f64,
    pub repeats: usize,
}

impl FilterResponseMap {
    pub fn n_channels(&self) -> usize {
        self.power.nrows()
    }

    pub fn channel(&self, o: usize) -> PsdEstimate {
        PsdEstimate {
            freqs: self.freqs.clone(),
            power: self.power.row(o).to_vec(),
            window_len: self.window_len,
            overlap: self.overlap,
        }
    }

    /// Writes `channel_<o>.csv` (`freq,power`) per output channel.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let width = self.n_channels().saturating_sub(1).to_string().len();
        for o in 0..self.n_channels() {
            let path = dir.join(format!("channel_{o:0width$}.csv"));
            std::fs::write(&path, self.channel(o).to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Repeats folded into one partial sum before the ordered merge.
const NOISE_CHUNK: usize = 10;

/// White noise through the convolution, taken before the ReLU; Welch PSD
/// per output with a one-second Hann window and half overlap, averaged
/// over `repeats_noise` probes.
pub fn conv_filter_response(params: &ModelParams, spec: &ProbeSpec) -> Result<FilterResponseMap> {
    spec.check_model(params)?;
    let window_len = (spec.fs.round() as usize).min(spec.epoch_len);
    let welch = WelchEstimator::new(spec.fs, window_len, 0.5)?;
    let n_bins = welch.n_bins();
    let out_channels = params.config.out_channels;
    let repeats: Vec<usize> = (0..spec.repeats_noise).collect();

    let partials: Vec<Array2<f64>> = repeats
        .par_chunks(NOISE_CHUNK)
        .map(|chunk| {
            let mut acc = Array2::<f64>::zeros((out_channels, n_bins));
            for &r in chunk {
                let mut rng = task_rng(spec.seed, NOISE_SALT, r as u64);
                let noise = gen_white_noise(spec, &mut rng);
                let conv = conv1d_same(params, noise.view())?;
                for (row, mut slot) in conv.rows().into_iter().zip(acc.rows_mut()) {
                    let row = row.as_slice().expect("conv output is contiguous");
                    welch.accumulate(row, slot.as_slice_mut().expect("contiguous"))?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut power = Array2::<f64>::zeros((out_channels, n_bins));
    for p in &partials {
        power += p;
    }
    power /= spec.repeats_noise as f64;
    Ok(FilterResponseMap {
        freqs: welch.freqs(),
        power,
        window_len,
        overlap: 0.5,
        repeats: spec.repeats_noise,
    })
}
