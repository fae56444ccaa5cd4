//! On-disk datasets and synthetic generators.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! features/<split>/<id>.<modality>.csv
//! ```
//!
//! Feature files have no header: one row per step, one decimal column per
//! feature dimension, written with 17 significant digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusionnet::{validate_modalities, ModalitySpec, MultimodalSequence};
use crate::numerics::{Matrix, SeededRng};

pub const DATASET_FORMAT_VERSION: &str = "gethr-data-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Amplitude of every synthetic motif.
pub const MOTIF_SCALE: f64 = 1.0;
/// Noise level used by the acceptance experiments.
pub const DEFAULT_NOISE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sequence `{id}`: missing feature file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sequence `{id}`: {path}:{line} has {actual} columns, modality `{modality}` declares {expected}")]
    Dimension {
        id: String,
        modality: String,
        path: PathBuf,
        line: usize,
        expected: usize,
        actual: usize,
    },
    #[error("sequence `{id}`: {path} has {actual} rows, manifest declares length {expected}")]
    Length {
        id: String,
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("sequence `{id}`: unknown label `{label}`")]
    UnknownLabel { id: String, label: String },
    #[error("sequence `{id}`: no file for modality `{modality}`")]
    MissingModality { id: String, modality: String },
    #[error("sequence `{id}`: file for undeclared modality `{modality}`")]
    ExtraModality { id: String, modality: String },
    #[error("duplicate sequence id `{0}`")]
    DuplicateId(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("generator: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub id: String,
    pub label: String,
    pub length: usize,
    /// Modality name → feature file path relative to the dataset root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecords {
    pub train: Vec<SequenceRecord>,
    pub val: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub modalities: Vec<ModalitySpec>,
    pub classes: Vec<String>,
    pub splits: SplitRecords,
}

/// Modalities and classes shared by every sequence of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<ModalitySpec>,
    pub classes: Vec<String>,
}

impl Schema {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// A validated in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub train: Vec<MultimodalSequence>,
    pub val: Vec<MultimodalSequence>,
    pub test: Vec<MultimodalSequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[MultimodalSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn feature_path(split: Split, id: &str, modality: &str) -> String {
    format!("features/{}/{id}.{modality}.csv", split.name())
}

fn format_row(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    cells.join(",")
}

fn parse_csv(path: &Path, text: &str) -> Result<Vec<Vec<f64>>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|cell| {
                    let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("`{}` is not a decimal number", cell.trim()),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            message: format!("non-finite value `{}`", cell.trim()),
                        });
                    }
                    Ok(v)
                })
                .collect()
        })
        .collect()
}

/// Reads `dir/manifest.json` and every feature file it references,
/// verifying labels, modality coverage, lengths and dimensions.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format version `{}` (expected `{DATASET_FORMAT_VERSION}`)",
            manifest.format_version
        )));
    }
    validate_modalities(&manifest.modalities).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.classes.is_empty() {
        return Err(DataError::Manifest("no classes declared".into()));
    }
    let unique: BTreeSet<&String> = manifest.classes.iter().collect();
    if unique.len() != manifest.classes.len() {
        return Err(DataError::Manifest("duplicate class names".into()));
    }
    let schema = Schema {
        modalities: manifest.modalities.clone(),
        classes: manifest.classes.clone(),
    };

    let mut seen = BTreeSet::new();
    let mut load_split = |records: &[SequenceRecord]| -> Result<Vec<MultimodalSequence>, DataError> {
        records
            .iter()
            .map(|r| {
                if !seen.insert(r.id.clone()) {
                    return Err(DataError::DuplicateId(r.id.clone()));
                }
                load_record(dir, &schema, r)
            })
            .collect()
    };
    let train = load_split(&manifest.splits.train)?;
    let val = load_split(&manifest.splits.val)?;
    let test = load_split(&manifest.splits.test)?;
    Ok(Dataset {
        schema,
        train,
        val,
        test,
    })
}

fn load_record(dir: &Path, schema: &Schema, record: &SequenceRecord) -> Result<MultimodalSequence, DataError> {
    let label = schema
        .class_index(&record.label)
        .ok_or_else(|| DataError::UnknownLabel {
            id: record.id.clone(),
            label: record.label.clone(),
        })?;
    if let Some(extra) = record
        .files
        .keys()
        .find(|m| !schema.modalities.iter().any(|s| &&s.name == m))
    {
        return Err(DataError::ExtraModality {
            id: record.id.clone(),
            modality: extra.clone(),
        });
    }
    let mut seq = MultimodalSequence::new(record.id.clone(), label);
    for spec in &schema.modalities {
        let rel = record.files.get(&spec.name).ok_or_else(|| DataError::MissingModality {
            id: record.id.clone(),
            modality: spec.name.clone(),
        })?;
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(DataError::MissingFile {
                id: record.id.clone(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let rows = parse_csv(&path, &text)?;
        if rows.len() != record.length {
            return Err(DataError::Length {
                id: record.id.clone(),
                path,
                expected: record.length,
                actual: rows.len(),
            });
        }
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != spec.dim) {
            return Err(DataError::Dimension {
                id: record.id.clone(),
                modality: spec.name.clone(),
                path,
                line: i + 1,
                expected: spec.dim,
                actual: row.len(),
            });
        }
        let matrix = Matrix::from_rows(&rows).map_err(|e| DataError::Manifest(e.to_string()))?;
        seq.features.insert(spec.name.clone(), matrix);
    }
    Ok(seq)
}

/// Writes `dataset` under `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest, DataError> {
    let mut splits = SplitRecords::default();
    for split in Split::ALL {
        let split_dir = dir.join("features").join(split.name());
        fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        let mut records = Vec::new();
        for seq in dataset.split(split) {
            let mut files = BTreeMap::new();
            for spec in &dataset.schema.modalities {
                let m = seq.features.get(&spec.name).ok_or_else(|| DataError::MissingModality {
                    id: seq.id.clone(),
                    modality: spec.name.clone(),
                })?;
                let rel = feature_path(split, &seq.id, &spec.name);
                let mut text = String::new();
                for t in 0..m.rows() {
                    text.push_str(&format_row(m.row(t)));
                    text.push('\n');
                }
                let path = dir.join(&rel);
                fs::write(&path, text).map_err(io_err(&path))?;
                files.insert(spec.name.clone(), rel);
            }
            records.push(SequenceRecord {
                id: seq.id.clone(),
                label: dataset.schema.classes[seq.label].clone(),
                length: seq.len(),
                files,
            });
        }
        match split {
            Split::Train => splits.train = records,
            Split::Val => splits.val = records,
            Split::Test => splits.test = records,
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION.to_string(),
        modalities: dataset.schema.modalities.clone(),
        classes: dataset.schema.classes.clone(),
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Xor,
    Distractor,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xor" => Ok(Task::Xor),
            "distractor" => Ok(Task::Distractor),
            other => Err(format!("unknown task `{other}` (expected xor|distractor)")),
        }
    }
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub num_classes: usize,
    pub modalities: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub length: usize,
    pub dim: usize,
    pub noise: f64,
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn xor(train: usize, val: usize, test: usize, length: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            task: Task::Xor,
            num_classes: 2,
            modalities: 2,
            train,
            val,
            test,
            length,
            dim,
            noise,
            distractor_fraction: 0.0,
            seed,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn distractor(
        num_classes: usize,
        train: usize,
        val: usize,
        test: usize,
        length: usize,
        dim: usize,
        noise: f64,
        distractor_fraction: f64,
        seed: u64,
    ) -> Self {
        Self {
            task: Task::Distractor,
            num_classes,
            modalities: 2,
            train,
            val,
            test,
            length,
            dim,
            noise,
            distractor_fraction,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.length == 0 || self.dim == 0 || self.modalities == 0 {
            return bad("length, dimension and modality count must be positive".into());
        }
        if self.train + self.val + self.test == 0 {
            return bad("all split counts are zero".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite value ≥ 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return bad(format!(
                "distractor fraction must lie in [0, 1], got {}",
                self.distractor_fraction
            ));
        }
        match self.task {
            Task::Xor => {
                if !self.length.is_multiple_of(2) {
                    return bad(format!("xor task needs an even length, got {}", self.length));
                }
                if self.modalities != 2 {
                    return bad(format!("xor task needs exactly 2 modalities, got {}", self.modalities));
                }
                if self.num_classes != 2 {
                    return bad(format!("xor task has exactly 2 classes, got {}", self.num_classes));
                }
                if self.dim < 2 {
                    return bad("xor task needs dimension ≥ 2 for its two motifs".into());
                }
            }
            Task::Distractor => {
                if self.num_classes < 2 {
                    return bad("distractor task needs at least 2 classes".into());
                }
                if self.num_classes > self.dim {
                    return bad(format!(
                        "{} classes need {} distinct basis directions but dimension is {}",
                        self.num_classes, self.num_classes, self.dim
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `modA`, `modB`, … for the synthetic generators.
pub fn modality_name(index: usize) -> String {
    if index < 26 {
        format!("mod{}", (b'A' + index as u8) as char)
    } else {
        format!("mod{index}")
    }
}

fn split_sizes(cfg: &GenConfig) -> [(Split, usize); 3] {
    [
        (Split::Train, cfg.train),
        (Split::Val, cfg.val),
        (Split::Test, cfg.test),
    ]
}

fn add_noise(m: &mut Matrix, sigma: f64, rng: &mut SeededRng) {
    if sigma > 0.0 {
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += sigma * rng.standard_normal());
    }
}

/// Two-motif sequence: bit 0 emits `e₀` for the first half then `e₁`, bit 1
/// the reverse.
pub fn xor_motif(bit: bool, length: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(length, dim);
    let half = length / 2;
    for t in 0..length {
        let first_half = t < half;
        let axis = if first_half != bit { 0 } else { 1 };
        m.set(t, axis, MOTIF_SCALE);
    }
    m
}

/// Each modality carries one uniformly drawn bit as the order of two
/// motifs; the label is the XOR of the two bits, so neither modality alone
/// carries any information about it.
pub fn generate_xor(cfg: &GenConfig, rng: &mut SeededRng) -> Result<Dataset, DataError> {
    let cfg = GenConfig {
        task: Task::Xor,
        ..cfg.clone()
    };
    cfg.validate()?;
    let schema = Schema {
        modalities: (0..2).map(|i| ModalitySpec::new(modality_name(i), cfg.dim)).collect(),
        classes: vec!["parity0".into(), "parity1".into()],
    };
    let mut splits: BTreeMap<Split, Vec<MultimodalSequence>> = BTreeMap::new();
    for (split, count) in split_sizes(&cfg) {
        let seqs = (0..count)
            .map(|i| {
                let bits = [rng.bit(), rng.bit()];
                let mut seq =
                    MultimodalSequence::new(format!("{}-{i:05}", split.name()), usize::from(bits[0] ^ bits[1]));
                for (spec, &bit) in schema.modalities.iter().zip(&bits) {
                    let mut m = xor_motif(bit, cfg.length, cfg.dim);
                    add_noise(&mut m, cfg.noise, rng);
                    seq.features.insert(spec.name.clone(), m);
                }
                seq
            })
            .collect();
        splits.insert(split, seqs);
    }
    Ok(assemble(schema, splits))
}

/// Class `k` emits `e_k` at every step; with probability
/// `distractor_fraction` the final ⌈T/2⌉ steps of a sequence (in every
/// modality) are replaced by a class-independent motif along `𝟙/√D`.
pub fn generate_distractor(cfg: &GenConfig, rng: &mut SeededRng) -> Result<Dataset, DataError> {
    let cfg = GenConfig {
        task: Task::Distractor,
        ..cfg.clone()
    };
    cfg.validate()?;
    let schema = Schema {
        modalities: (0..cfg.modalities)
            .map(|i| ModalitySpec::new(modality_name(i), cfg.dim))
            .collect(),
        classes: (0..cfg.num_classes).map(|k| format!("class{k}")).collect(),
    };
    let distractor_from = cfg.length - cfg.length.div_ceil(2);
    let distractor_level = MOTIF_SCALE / (cfg.dim as f64).sqrt();
    let mut splits: BTreeMap<Split, Vec<MultimodalSequence>> = BTreeMap::new();
    for (split, count) in split_sizes(&cfg) {
        let seqs = (0..count)
            .map(|i| {
                let label = (rng.next_u64() % cfg.num_classes as u64) as usize;
                let distracted = rng.unit() < cfg.distractor_fraction;
                let mut seq = MultimodalSequence::new(format!("{}-{i:05}", split.name()), label);
                for spec in &schema.modalities {
                    let mut m = Matrix::zeros(cfg.length, cfg.dim);
                    for t in 0..cfg.length {
                        if distracted && t >= distractor_from {
                            m.row_mut(t).fill(distractor_level);
                        } else {
                            m.set(t, label, MOTIF_SCALE);
                        }
                    }
                    add_noise(&mut m, cfg.noise, rng);
                    seq.features.insert(spec.name.clone(), m);
                }
                seq
            })
            .collect();
        splits.insert(split, seqs);
    }
    Ok(assemble(schema, splits))
}

fn assemble(schema: Schema, mut splits: BTreeMap<Split, Vec<MultimodalSequence>>) -> Dataset {
    Dataset {
        schema,
        train: splits.remove(&Split::Train).unwrap_or_default(),
        val: splits.remove(&Split::Val).unwrap_or_default(),
        test: splits.remove(&Split::Test).unwrap_or_default(),
    }
}

/// Generates the configured task from `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset, DataError> {
    let mut rng = SeededRng::new(cfg.seed);
    match cfg.task {
        Task::Xor => generate_xor(cfg, &mut rng),
        Task::Distractor => generate_distractor(cfg, &mut rng),
    }
}

pub fn synth_xor(cfg: &GenConfig, rng: &mut SeededRng, dir: &Path) -> Result<Dataset, DataError> {
    let ds = generate_xor(cfg, rng)?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}

pub fn synth_distractor(cfg: &GenConfig, rng: &mut SeededRng, dir: &Path) -> Result<Dataset, DataError> {
    let ds = generate_distractor(cfg, rng)?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}
