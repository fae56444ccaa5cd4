use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gethr_core::data::{load_dataset, Dataset, Split};
use gethr_core::fusionnet::{combine_components, load_model, Model, MultimodalSequence};
use gethr_core::metrics::{collapse_decode, normalized_edit_score, MetricError};
use gethr_core::numerics::ScoreVector;
use gethr_core::trainer::{predict_all, score_metric, TrainConfig, ValMetric};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Prints the resolved settings of a command as `# key = value` lines.
pub fn print_config<T: Serialize>(verb: &str, settings: &T) {
    println!("# command = {verb}");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(settings) {
        for (k, v) in map {
            println!("# {k} = {v}");
        }
    }
}

pub fn load_train_config(path: Option<&Path>, preset: Option<&str>) -> Result<TrainConfig, CliError> {
    let base = match preset {
        Some(name) => TrainConfig::preset(name).ok_or_else(|| CliError::Usage(format!("unknown preset `{name}`")))?,
        None => TrainConfig::default(),
    };
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let mut value = serde_json::to_value(&base).expect("config serializes");
    let overrides: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    let serde_json::Value::Object(overrides) = overrides else {
        return Err(CliError::Usage(format!(
            "config file {} must hold a JSON object",
            path.display()
        )));
    };
    let target = value.as_object_mut().expect("config is an object");
    for (k, v) in overrides {
        if !target.contains_key(&k) {
            return Err(CliError::Usage(format!(
                "config file {}: unknown field `{k}`",
                path.display()
            )));
        }
        target.insert(k, v);
    }
    let config: TrainConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn open_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(dir)?)
}

/// Evaluation metric, including the stream-level edit score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Accuracy,
    Map,
    Edit,
}

impl EvalMetric {
    /// Criterion used when a metric has to be optimized on validation data.
    pub fn selection(self) -> ValMetric {
        match self {
            EvalMetric::Map => ValMetric::Map,
            EvalMetric::Accuracy | EvalMetric::Edit => ValMetric::Accuracy,
        }
    }

    pub fn lower_is_better(self) -> bool {
        self == EvalMetric::Edit
    }
}

impl fmt::Display for EvalMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::Map => "map",
            EvalMetric::Edit => "edit",
        })
    }
}

impl FromStr for EvalMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(EvalMetric::Accuracy),
            "map" => Ok(EvalMetric::Map),
            "edit" => Ok(EvalMetric::Edit),
            other => Err(format!("unknown metric `{other}` (expected accuracy|map|edit)")),
        }
    }
}

/// Sequences sorted by id and cut into consecutive streams of
/// `stream_size`; each stream is decoded by collapsing repeated labels.
pub fn edit_streams(
    seqs: &[MultimodalSequence],
    predicted: &[usize],
    stream_size: usize,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&a, &b| seqs[a].id.cmp(&seqs[b].id));
    let mut pred_streams = Vec::new();
    let mut truth_streams = Vec::new();
    for chunk in order.chunks(stream_size.max(1)) {
        let p: Vec<usize> = chunk.iter().map(|&i| predicted[i]).collect();
        let t: Vec<usize> = chunk.iter().map(|&i| seqs[i].label).collect();
        pred_streams.push(collapse_decode(&p, None, 1));
        truth_streams.push(collapse_decode(&t, None, 1));
    }
    (pred_streams, truth_streams)
}

pub fn evaluate_scores(
    scores: &[ScoreVector],
    seqs: &[MultimodalSequence],
    metric: EvalMetric,
    stream_size: usize,
) -> Result<f64, MetricError> {
    if seqs.is_empty() {
        return Err(MetricError::Empty);
    }
    let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
    match metric {
        EvalMetric::Accuracy => score_metric(scores, &labels, ValMetric::Accuracy),
        EvalMetric::Map => score_metric(scores, &labels, ValMetric::Map),
        EvalMetric::Edit => {
            let predicted: Vec<usize> = scores.iter().map(ScoreVector::argmax).collect();
            let (p, t) = edit_streams(seqs, &predicted, stream_size);
            normalized_edit_score(&p, &t)
        }
    }
}

pub const ENSEMBLE_FORMAT_VERSION: &str = "gethr-ensemble-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleComponent {
    pub path: PathBuf,
    pub weight: f64,
}

/// Component model files with their simplex weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    pub format_version: String,
    pub selection_metric: ValMetric,
    pub components: Vec<EnsembleComponent>,
}

impl EnsembleFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: EnsembleFile =
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if file.format_version != ENSEMBLE_FORMAT_VERSION {
            return Err(CliError::Io(format!(
                "{}: unsupported format version `{}`",
                path.display(),
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("ensemble serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Something that scores sequences: one model or a weighted ensemble.
pub enum Scorer {
    Single(Box<Model>),
    Ensemble { models: Vec<Model>, weights: Vec<f64> },
}

impl Scorer {
    pub fn open_model(path: &Path) -> Result<Self, CliError> {
        let model = load_model(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Scorer::Single(Box::new(model)))
    }

    pub fn open_ensemble(path: &Path) -> Result<Self, CliError> {
        let file = EnsembleFile::load(path)?;
        let models = file
            .components
            .iter()
            .map(|c| load_model(&c.path).map_err(|e| CliError::Io(format!("{}: {e}", c.path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scorer::Ensemble {
            models,
            weights: file.components.iter().map(|c| c.weight).collect(),
        })
    }

    pub fn classes(&self) -> &[String] {
        match self {
            Scorer::Single(m) => &m.classes,
            Scorer::Ensemble { models, .. } => &models[0].classes,
        }
    }

    pub fn score(&self, seqs: &[MultimodalSequence]) -> Result<Vec<ScoreVector>, CliError> {
        match self {
            Scorer::Single(m) => Ok(predict_all(m, seqs)?),
            Scorer::Ensemble { models, weights } => {
                let per_model = models
                    .iter()
                    .map(|m| predict_all(m, seqs))
                    .collect::<Result<Vec<_>, _>>()?;
                combine_per_sequence(&per_model, weights)
            }
        }
    }
}

/// Combines component score tables (`tables[c][i]`) sequence by sequence.
pub fn combine_per_sequence(tables: &[Vec<ScoreVector>], weights: &[f64]) -> Result<Vec<ScoreVector>, CliError> {
    let n = tables.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let parts: Vec<ScoreVector> = tables.iter().map(|t| t[i].clone()).collect();
            combine_components(&parts, weights).map_err(CliError::from)
        })
        .collect()
}

pub fn check_classes(dataset: &Dataset, classes: &[String]) -> Result<(), CliError> {
    if dataset.schema.classes != classes {
        return Err(CliError::Usage(format!(
            "model classes {:?} do not match dataset classes {:?}",
            classes, dataset.schema.classes
        )));
    }
    Ok(())
}

/// One line per sequence: id, true class, predicted class, then the score
/// of every class in declared order.
pub fn write_predictions(
    path: &Path,
    classes: &[String],
    seqs: &[MultimodalSequence],
    scores: &[ScoreVector],
) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(out, "id\ttruth\tpredicted\t{}", classes.join("\t"))?;
    for (s, v) in seqs.iter().zip(scores) {
        let cells: Vec<String> = v.as_slice().iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            s.id,
            classes[s.label],
            classes[v.argmax()],
            cells.join("\t")
        )?;
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn split_of(dataset: &Dataset, split: Split) -> &[MultimodalSequence] {
    dataset.split(split)
}
