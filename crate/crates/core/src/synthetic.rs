//! Two-class synthetic recordings: a sinusoid per class plus white noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{
    epoch_len, write_subject_csv, Label, Manifest, ManifestEntry, SubjectRecording,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub channels: usize,
    pub fs: f64,
    pub epoch_seconds: f64,
    pub control_hz: f64,
    pub pd_hz: f64,
    pub amplitude: f64,
    /// Sinusoid power over noise power, in dB.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 20,
            epochs_per_subject: 12,
            channels: 59,
            fs: 500.0,
            epoch_seconds: 5.0,
            control_hz: 10.0,
            pd_hz: 25.0,
            amplitude: 1.0,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Standard deviation of the additive noise.
    pub fn noise_sigma(&self) -> f64 {
        let signal_power = self.amplitude * self.amplitude / 2.0;
        (signal_power / 10f64.powf(self.snr_db / 10.0)).sqrt()
    }

    pub fn channel_names(&self) -> Vec<String> {
        (1..=self.channels).map(|c| format!("Ch{c:02}")).collect()
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("synth-{i:03}")
    }

    /// Subjects alternate Control, PD, Control, …
    pub fn label(&self, i: usize) -> Label {
        if i.is_multiple_of(2) {
            Label::Control
        } else {
            Label::Pd
        }
    }
}

/// Every channel carries the same class sinusoid (one random phase per
/// subject) plus independent Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SubjectRecording>> {
    if spec.subjects == 0 || spec.epochs_per_subject == 0 || spec.channels == 0 {
        return Err(Error::invalid(
            "synthetic dataset needs subjects, epochs and channels",
        ));
    }
    for f in [spec.control_hz, spec.pd_hz] {
        if !(f >= 0.0 && f <= spec.fs / 2.0) {
            return Err(Error::invalid(format!(
                "class frequency {f} Hz above Nyquist"
            )));
        }
    }
    let len = epoch_len(spec.fs, spec.epoch_seconds)? * spec.epochs_per_subject;
    let noise = Normal::new(0.0, spec.noise_sigma())
        .map_err(|e| Error::invalid(format!("noise level: {e}")))?;
    (0..spec.subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let label = spec.label(i);
            let f = match label {
                Label::Control => spec.control_hz,
                Label::Pd => spec.pd_hz,
            };
            let omega = 2.0 * PI * f / spec.fs;
            let phase = rng.random::<f64>() * 2.0 * PI;
            let mut samples = Array2::zeros((spec.channels, len));
            for mut row in samples.rows_mut() {
                for (n, v) in row.iter_mut().enumerate() {
                    *v = spec.amplitude * (omega * n as f64 + phase).sin() + noise.sample(&mut rng);
                }
            }
            SubjectRecording::new(
                spec.subject_id(i),
                label,
                spec.fs,
                spec.channel_names(),
                samples,
            )
        })
        .collect()
}

/// Writes one CSV per subject plus `manifest.json` into `dir`; returns the
/// manifest path.
pub fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects = generate(spec)?;
    let mut entries = Vec::with_capacity(subjects.len());
    for rec in &subjects {
        let file = PathBuf::from(format!("{}.csv", rec.subject_id));
        write_subject_csv(rec, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id: rec.subject_id.clone(),
            file,
            label: rec.label,
        });
    }
    let manifest = Manifest {
        fs: spec.fs,
        channels: spec.channel_names(),
        subjects: entries,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
