//! Subject recordings on disk, fixed-length epoching and subject-level splits.
//!
//! A dataset is a JSON manifest plus one CSV per subject. CSV rows are time
//! samples and columns are channels; the first row holds channel names.
//! Recordings are held in memory as `[channels × time]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class label. PD is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "Control")]
    Control,
    #[serde(rename = "PD")]
    Pd,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Pd => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Control),
            1 => Some(Label::Pd),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Control => f.write_str("Control"),
            Label::Pd => f.write_str("PD"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: PathBuf,
    pub label: Label,
}

/// Dataset manifest: `{"fs": .., "channels": [..], "subjects": [{"id", "file", "label"}]}`.
///
/// Relative subject paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fs: f64,
    pub channels: Vec<String>,
    pub subjects: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(bad(format!("fs must be positive, got {}", self.fs)));
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &self.subjects {
            if !seen.insert(entry.id.as_str()) {
                return Err(bad(format!("duplicate subject id {:?}", entry.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.file.is_absolute() {
            entry.file.clone()
        } else {
            self.base_dir.join(&entry.file)
        }
    }

    /// Loads every subject listed in the manifest, in manifest order.
    pub fn load_subjects(&self) -> Result<Vec<SubjectRecording>> {
        self.subjects
            .iter()
            .map(|entry| {
                load_subject_csv(&self.resolve(entry), entry, self.fs, Some(&self.channels))
            })
            .collect()
    }
}

/// One subject's continuous multichannel recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecording {
    pub subject_id: String,
    pub label: Label,
    pub fs: f64,
    pub channel_names: Vec<String>,
    /// `[channels × time]`
    pub samples: Array2<f64>,
}

impl SubjectRecording {
    pub fn new(
        subject_id: impl Into<String>,
        label: Label,
        fs: f64,
        channel_names: Vec<String>,
        samples: Array2<f64>,
    ) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        if samples.nrows() == 0 {
            return Err(Error::invalid("recording has no channels"));
        }
        if channel_names.len() != samples.nrows() {
            return Err(Error::Shape(format!(
                "{} channel names for {} channel rows",
                channel_names.len(),
                samples.nrows()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            let (c, t) = (pos / samples.ncols(), pos % samples.ncols());
            return Err(Error::NonFinite(format!(
                "recording channel {c}, sample {t}"
            )));
        }
        Ok(SubjectRecording {
            subject_id: subject_id.into(),
            label,
            fs,
            channel_names,
            samples,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }
}

/// A fixed-length `[channels × epoch_len]` window: the unit the classifier sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub data: Array2<f64>,
    pub label: Label,
    pub subject_id: String,
    pub epoch_index: usize,
}

/// Reads a subject CSV (header of channel names, one row per sample).
///
/// `expected_channels`, when given, must match the header exactly.
/// Error positions are 1-based: `row` counts data rows after the header.
pub fn load_subject_csv(
    path: &Path,
    entry: &ManifestEntry,
    fs: f64,
    expected_channels: Option<&[String]>,
) -> Result<SubjectRecording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));

    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(0, 0, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(
            0,
            1,
            "missing header row of channel names".into(),
        ));
    }
    if let Some(expected) = expected_channels {
        if expected.len() != header.len() {
            return Err(parse_err(
                0,
                header.len().min(expected.len()) + 1,
                format!(
                    "file has {} channels but the manifest lists {}",
                    header.len(),
                    expected.len()
                ),
            ));
        }
        if let Some(i) = (0..header.len()).find(|&i| header[i] != expected[i]) {
            return Err(parse_err(
                0,
                i + 1,
                format!(
                    "channel {:?} where the manifest lists {:?}",
                    header[i], expected[i]
                ),
            ));
        }
    }

    let n_channels = header.len();
    let mut flat: Vec<f64> = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(parse_err(row + 1, 0, e.to_string())),
        }
        row += 1;
        if record.len() != n_channels {
            return Err(parse_err(
                row,
                record.len().min(n_channels) + 1,
                format!("expected {n_channels} fields, found {}", record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, col + 1, format!("not a number: {cell:?}")))?;
            if !value.is_finite() {
                return Err(parse_err(
                    row,
                    col + 1,
                    format!("non-finite value {cell:?}"),
                ));
            }
            flat.push(value);
        }
    }

    let by_time =
        Array2::from_shape_vec((row, n_channels), flat).expect("row lengths were checked");
    let samples = by_time.t().as_standard_layout().into_owned();
    SubjectRecording::new(entry.id.clone(), entry.label, fs, header, samples)
}

/// Writes a recording in the subject CSV layout. Values use Rust's shortest
/// round-trip float formatting, so reloading is exact.
pub fn write_subject_csv(rec: &SubjectRecording, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", rec.channel_names.join(",")).map_err(io)?;
    for t in 0..rec.n_samples() {
        for c in 0..rec.n_channels() {
            if c > 0 {
                out.write_all(b",").map_err(io)?;
            }
            write!(out, "{}", rec.samples[[c, t]]).map_err(io)?;
        }
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Number of samples in an epoch of `epoch_seconds` at `fs`, if integral.
pub fn epoch_len(fs: f64, epoch_seconds: f64) -> Result<usize> {
    let exact = fs * epoch_seconds;
    let rounded = exact.round();
    if !(rounded >= 1.0 && (exact - rounded).abs() < 1e-9 * rounded.max(1.0)) {
        return Err(Error::invalid(format!(
            "epoch of {epoch_seconds} s at {fs} Hz is not a positive whole number of samples"
        )));
    }
    Ok(rounded as usize)
}

/// Cuts a recording into consecutive non-overlapping epochs, dropping the
/// trailing partial window. A recording shorter than one epoch yields none.
pub fn epoch_recording(rec: &SubjectRecording, epoch_seconds: f64) -> Result<Vec<Epoch>> {
    let len = epoch_len(rec.fs, epoch_seconds)?;
    let count = rec.n_samples() / len;
    Ok((0..count)
        .map(|e| Epoch {
            data: rec.samples.slice(s![.., e * len..(e + 1) * len]).to_owned(),
            label: rec.label,
            subject_id: rec.subject_id.clone(),
            epoch_index: e,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid(format!(
                "split ratios must all be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Subject counts per partition for `n` subjects: train and validation are
    /// rounded, test takes the remainder. No partition is left empty.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(Error::invalid(format!(
                "{n} subjects cannot fill 3 partitions"
            )));
        }
        let mut train = ((self.train * n as f64).round() as usize).max(1);
        let validation = ((self.validation * n as f64).round() as usize).clamp(1, n - 2);
        while train + validation >= n {
            train -= 1;
        }
        Ok((train, validation, n - train - validation))
    }
}

/// Seeded subject-level assignment. Ids are sorted before shuffling, so the
/// result does not depend on input order.
pub fn assign_subjects<S: AsRef<str>>(
    subject_ids: &[S],
    ratios: SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Partition>> {
    let mut ids: Vec<&str> = subject_ids.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate subject ids"));
    }
    let (n_train, n_val, _) = ratios.counts(ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let part = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Validation
            } else {
                Partition::Test
            };
            (id.to_owned(), part)
        })
        .collect())
}

/// Epochs grouped by partition, plus the subject assignment that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Epoch>,
    pub validation: Vec<Epoch>,
    pub test: Vec<Epoch>,
    pub seed: u64,
    pub subject_assignment: BTreeMap<String, Partition>,
}

impl DatasetSplit {
    /// Routes already-cut epochs according to `assignment`. Every epoch's
    /// subject must be assigned.
    pub fn from_assignment(
        epochs: impl IntoIterator<Item = Epoch>,
        assignment: BTreeMap<String, Partition>,
        seed: u64,
    ) -> Result<DatasetSplit> {
        let mut split = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            seed,
            subject_assignment: assignment,
        };
        for epoch in epochs {
            let part = *split
                .subject_assignment
                .get(&epoch.subject_id)
                .ok_or_else(|| {
                    Error::invalid(format!("subject {:?} has no partition", epoch.subject_id))
                })?;
            split.partition_mut(part).push(epoch);
        }
        Ok(split)
    }

    pub fn partition(&self, part: Partition) -> &[Epoch] {
        match part {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    fn partition_mut(&mut self, part: Partition) -> &mut Vec<Epoch> {
        match part {
            Partition::Train => &mut self.train,
            Partition::Validation => &mut self.validation,
            Partition::Test => &mut self.test,
        }
    }

    pub fn subjects_in(&self, part: Partition) -> usize {
        self.subject_assignment
            .values()
            .filter(|&&p| p == part)
            .count()
    }
}

/// Epochs every subject and splits them at the subject level.
pub fn split_dataset(
    subjects: &[SubjectRecording],
    ratios: SplitRatios,
    seed: u64,
    epoch_seconds: f64,
) -> Result<DatasetSplit> {
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let assignment = assign_subjects(&ids, ratios, seed)?;
    let mut sorted: Vec<&SubjectRecording> = subjects.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut epochs = Vec::new();
    for rec in sorted {
        epochs.extend(epoch_recording(rec, epoch_seconds)?);
    }
    DatasetSplit::from_assignment(epochs, assignment, seed)
}
