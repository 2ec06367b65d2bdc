//! Architecture sweeps over kernel size or output channels, and per-group
//! PSD summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::ModelConfig;
use crate::preprocess::{channel_mean, WelchEstimator};
use crate::signal_io::{DatasetSplit, Epoch, Label};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    KernelSize,
    OutChannels,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::KernelSize => "kernel_size",
            SweepParameter::OutChannels => "out_channels",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every point trains from the base seed.
    #[default]
    Fixed,
    /// Point `i` trains from `base seed + i`.
    PerValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<usize>,
    pub base_train_config: TrainConfig,
    pub base_model_config: ModelConfig,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
}

/// Odd kernel sizes 11, 13, …, 39.
pub fn default_kernel_values() -> Vec<usize> {
    (11..=39).step_by(2).collect()
}

pub fn default_channel_values() -> Vec<usize> {
    vec![20, 30, 40, 50, 59]
}

impl SweepConfig {
    pub fn new(parameter: SweepParameter, values: Vec<usize>) -> Self {
        SweepConfig {
            parameter,
            values,
            base_train_config: TrainConfig::default(),
            base_model_config: ModelConfig::default(),
            seed_policy: SeedPolicy::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("sweep has no values"));
        }
        for &v in &self.values {
            match self.parameter {
                SweepParameter::KernelSize if v < 3 || v % 2 == 0 => {
                    return Err(Error::invalid(format!(
                        "kernel sizes must be odd and at least 3, got {v}"
                    )))
                }
                SweepParameter::OutChannels if v == 0 => {
                    return Err(Error::invalid("output channel counts must be at least 1"))
                }
                _ => {}
            }
        }
        self.base_train_config.validate()?;
        for i in 0..self.values.len() {
            self.model_config(i).validate()?;
        }
        Ok(())
    }

    /// The base model with the swept field set to `values[i]`.
    pub fn model_config(&self, i: usize) -> ModelConfig {
        let mut cfg = self.base_model_config;
        match self.parameter {
            SweepParameter::KernelSize => cfg.kernel = self.values[i],
            SweepParameter::OutChannels => cfg.out_channels = self.values[i],
        }
        cfg
    }

    pub fn train_config(&self, i: usize) -> TrainConfig {
        let mut cfg = self.base_train_config;
        if self.seed_policy == SeedPolicy::PerValue {
            cfg.seed = cfg.seed.wrapping_add(i as u64);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub model_config: ModelConfig,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricsReport>,
    /// Why this point produced no metrics.
    pub error: Option<String>,
}

pub const METRIC_NAMES: [&str; 5] = ["precision", "recall", "f1", "auc", "accuracy"];

fn metric(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "precision" => Some(report.precision),
        "recall" => Some(report.recall),
        "f1" => Some(report.f1),
        "auc" => report.auc,
        "accuracy" => Some(report.accuracy),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub parameter: SweepParameter,
    pub points: Vec<SweepPoint>,
    /// Per metric, one entry per point; `None` where the point has no value.
    pub normalized: BTreeMap<String, Vec<Option<f64>>>,
}

/// Min-max scaling to [0, 1]; a constant array maps to all ones.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

fn normalize_sparse(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let mut scaled = normalize(&present).into_iter();
    values
        .iter()
        .map(|v| v.and_then(|_| scaled.next()))
        .collect()
}

impl AblationReport {
    pub fn from_points(parameter: SweepParameter, points: Vec<SweepPoint>) -> AblationReport {
        let normalized = METRIC_NAMES
            .iter()
            .map(|&name| {
                let raw: Vec<Option<f64>> = points
                    .iter()
                    .map(|p| p.metrics.as_ref().and_then(|m| metric(m, name)))
                    .collect();
                (name.to_string(), normalize_sparse(&raw))
            })
            .collect();
        AblationReport {
            parameter,
            points,
            normalized,
        }
    }

    /// `value,<metrics>,normalized_<metrics>`; missing entries are `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value");
        for name in METRIC_NAMES {
            write!(out, ",{name}").unwrap();
        }
        for name in METRIC_NAMES {
            write!(out, ",normalized_{name}").unwrap();
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        for (i, p) in self.points.iter().enumerate() {
            write!(out, "{}", p.value).unwrap();
            for name in METRIC_NAMES {
                let v = p.metrics.as_ref().and_then(|m| metric(m, name));
                write!(out, ",{}", cell(v)).unwrap();
            }
            for name in METRIC_NAMES {
                write!(out, ",{}", cell(self.normalized[name][i])).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn run_point(config: &SweepConfig, i: usize, data: &DatasetSplit) -> SweepPoint {
    let model_config = config.model_config(i);
    let train_config = config.train_config(i);
    let outcome = train(data, &train_config, model_config)
        .and_then(|h| Ok((h.best_epoch, evaluate(&h.best_checkpoint, &data.test)?)));
    let (best_epoch, metrics, error) = match outcome {
        Ok((epoch, report)) => (Some(epoch), Some(report), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    SweepPoint {
        value: config.values[i],
        model_config,
        seed: train_config.seed,
        best_epoch,
        metrics,
        error,
    }
}

/// Trains and tests one model per sweep value. A failing point is recorded
/// in its `error` field and the sweep carries on.
pub fn run_sweep(config: &SweepConfig, data: &DatasetSplit) -> Result<AblationReport> {
    run_sweep_with_observer(config, data, &|_| {})
}

pub fn run_sweep_with_observer(
    config: &SweepConfig,
    data: &DatasetSplit,
    observer: &(dyn Fn(&SweepPoint) + Sync),
) -> Result<AblationReport> {
    config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::invalid(
            "sweeps need non-empty train, validation and test partitions",
        ));
    }
    let points: Vec<SweepPoint> = (0..config.values.len())
        .into_par_iter()
        .map(|i| {
            let point = run_point(config, i, data);
            observer(&point);
            point
        })
        .collect();
    Ok(AblationReport::from_points(config.parameter, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n_epochs: usize,
    pub mean: Vec<f64>,
    /// Standard error of the mean (sample deviation over √n; 0 when n = 1).
    pub sem: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPsd {
    pub freqs: Vec<f64>,
    pub groups: BTreeMap<Label, GroupStats>,
}

impl GroupPsd {
    /// `freq,mean_Control,sem_Control,mean_PD,sem_PD`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq");
        for label in self.groups.keys() {
            write!(out, ",mean_{label},sem_{label}").unwrap();
        }
        out.push('\n');
        for (k, f) in self.freqs.iter().enumerate() {
            write!(out, "{f}").unwrap();
            for g in self.groups.values() {
                write!(out, ",{},{}", g.mean[k], g.sem[k]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Channel-averaged Welch PSD per epoch (one-second Hann window, half
/// overlap), summarized per label as mean ± SEM across epochs.
pub fn group_psd(epochs: &[Epoch], fs: f64) -> Result<GroupPsd> {
    let mut by_label: BTreeMap<Label, Vec<&Epoch>> = BTreeMap::new();
    for e in epochs {
        by_label.entry(e.label).or_default().push(e);
    }
    if by_label.len() < 2 {
        return Err(Error::invalid("group PSD needs epochs from both groups"));
    }
    let len = epochs[0].data.ncols();
    if let Some(e) = epochs.iter().find(|e| e.data.ncols() != len) {
        return Err(Error::Shape(format!(
            "epoch {} of {} has {} samples, expected {len}",
            e.epoch_index,
            e.subject_id,
            e.data.ncols()
        )));
    }
    let welch = WelchEstimator::new(fs, (fs.round() as usize).min(len), 0.5)?;
    let n_bins = welch.n_bins();

    let mut groups = BTreeMap::new();
    for (label, members) in by_label {
        let psds: Vec<Vec<f64>> = members
            .par_iter()
            .map(|e| {
                let mut p = vec![0.0; n_bins];
                welch.accumulate(&channel_mean(&e.data), &mut p)?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let n = psds.len() as f64;
        let mut mean = vec![0.0; n_bins];
        for p in &psds {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let sem = (0..n_bins)
            .map(|k| {
                if psds.len() < 2 {
                    return 0.0;
                }
                let ss: f64 = psds.iter().map(|p| (p[k] - mean[k]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt() / n.sqrt()
            })
            .collect();
        groups.insert(
            label,
            GroupStats {
                n_epochs: psds.len(),
                mean,
                sem,
            },
        );
    }
    Ok(GroupPsd {
        freqs: welch.freqs(),
        groups,
    })
}
