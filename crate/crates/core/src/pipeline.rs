//! Recording-to-split preparation and the on-disk split index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    design_highpass, filter_channels, DEFAULT_HIGHPASS_HZ, DEFAULT_HIGHPASS_ORDER,
};
use crate::signal_io::{
    assign_subjects, epoch_recording, DatasetSplit, Label, Manifest, Partition, SplitRatios,
    SubjectRecording,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// High-pass cutoff; `None` skips filtering.
    pub highpass_hz: Option<f64>,
    pub filter_order: usize,
    pub epoch_seconds: f64,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            highpass_hz: Some(DEFAULT_HIGHPASS_HZ),
            filter_order: DEFAULT_HIGHPASS_ORDER,
            epoch_seconds: 5.0,
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }
}

/// Zero-phase high-pass filtering of every channel, in place.
pub fn filter_subjects(subjects: &mut [SubjectRecording], opts: &PrepareOptions) -> Result<()> {
    let Some(cutoff) = opts.highpass_hz else {
        return Ok(());
    };
    subjects.par_iter_mut().try_for_each(|rec| {
        let coeffs = design_highpass(cutoff, opts.filter_order, rec.fs)?;
        rec.samples = filter_channels(&coeffs, &rec.samples)
            .map_err(|e| Error::invalid(format!("filtering subject {:?}: {e}", rec.subject_id)))?;
        Ok(())
    })
}

fn epochs_sorted(
    subjects: &[SubjectRecording],
    epoch_seconds: f64,
) -> Result<Vec<crate::signal_io::Epoch>> {
    let mut sorted: Vec<&SubjectRecording> = subjects.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut epochs = Vec::new();
    for rec in sorted {
        epochs.extend(epoch_recording(rec, epoch_seconds)?);
    }
    Ok(epochs)
}

/// Filter, cut into epochs and split at the subject level.
pub fn prepare(mut subjects: Vec<SubjectRecording>, opts: &PrepareOptions) -> Result<DatasetSplit> {
    filter_subjects(&mut subjects, opts)?;
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let assignment = assign_subjects(&ids, opts.ratios, opts.seed)?;
    DatasetSplit::from_assignment(
        epochs_sorted(&subjects, opts.epoch_seconds)?,
        assignment,
        opts.seed,
    )
}

pub const SPLIT_INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: Label,
    pub partition: Partition,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub subject_id: String,
    pub epoch_index: usize,
    pub partition: Partition,
}

/// Which subject and epoch went to which partition, and how to rebuild the
/// epochs from the source manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub format_version: u32,
    pub manifest: PathBuf,
    pub options: PrepareOptions,
    pub counts: BTreeMap<Partition, usize>,
    pub subjects: Vec<SubjectEntry>,
    pub epochs: Vec<EpochEntry>,
}

impl SplitIndex {
    pub fn from_split(
        split: &DatasetSplit,
        manifest: &Path,
        options: PrepareOptions,
    ) -> SplitIndex {
        let mut per_subject: BTreeMap<&str, (Label, usize)> = BTreeMap::new();
        let mut epochs = Vec::new();
        let mut counts = BTreeMap::new();
        for part in [Partition::Train, Partition::Validation, Partition::Test] {
            counts.insert(part, split.subjects_in(part));
            for e in split.partition(part) {
                per_subject.entry(&e.subject_id).or_insert((e.label, 0)).1 += 1;
                epochs.push(EpochEntry {
                    subject_id: e.subject_id.clone(),
                    epoch_index: e.epoch_index,
                    partition: part,
                });
            }
        }
        let subjects = split
            .subject_assignment
            .iter()
            .map(|(id, &partition)| {
                let (label, n) = per_subject
                    .get(id.as_str())
                    .copied()
                    .unwrap_or((Label::Control, 0));
                SubjectEntry {
                    id: id.clone(),
                    label,
                    partition,
                    epochs: n,
                }
            })
            .collect();
        SplitIndex {
            format_version: SPLIT_INDEX_VERSION,
            manifest: manifest.to_path_buf(),
            options,
            counts,
            subjects,
            epochs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split index serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitIndex> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: SplitIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if index.format_version != SPLIT_INDEX_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported split index version {}", index.format_version),
            });
        }
        Ok(index)
    }

    pub fn assignment(&self) -> BTreeMap<String, Partition> {
        self.subjects
            .iter()
            .map(|s| (s.id.clone(), s.partition))
            .collect()
    }

    /// Reloads the manifest's recordings, reapplies the preprocessing and
    /// routes epochs by the stored assignment. Fails if the recordings no
    /// longer produce the indexed epochs.
    pub fn materialize(&self) -> Result<DatasetSplit> {
        let manifest = Manifest::load(&self.manifest)?;
        let mut subjects = manifest.load_subjects()?;
        filter_subjects(&mut subjects, &self.options)?;
        let epochs = epochs_sorted(&subjects, self.options.epoch_seconds)?;
        let split = DatasetSplit::from_assignment(epochs, self.assignment(), self.options.seed)?;
        let rebuilt = SplitIndex::from_split(&split, &self.manifest, self.options);
        if rebuilt.epochs != self.epochs {
            return Err(Error::Format {
                path: self.manifest.clone(),
                message: "recordings no longer match the split index".into(),
            });
        }
        Ok(split)
    }
}
