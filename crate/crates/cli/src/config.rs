//! Flat TOML run configuration. Every key is optional; command-line flags
//! win over the file, and the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,

    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub partition: Option<String>,

    pub highpass_hz: Option<f64>,
    pub no_highpass: Option<bool>,
    pub epoch_seconds: Option<f64>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,

    pub kernel: Option<usize>,
    pub out_channels: Option<usize>,
    pub dropout: Option<f64>,

    pub fs: Option<f64>,
    pub epoch_len: Option<usize>,
    pub min_freq: Option<f64>,
    pub max_freq: Option<f64>,
    pub amplitude: Option<f64>,
    pub repeats_sine: Option<usize>,
    pub repeats_noise: Option<usize>,

    pub parameter: Option<String>,
    pub values: Option<Vec<usize>>,
    pub seed_policy: Option<String>,

    pub subjects: Option<usize>,
    pub epochs_per_subject: Option<usize>,
    pub channels: Option<usize>,
    pub snr_db: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// `flag`, else `file`, else `default`.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
