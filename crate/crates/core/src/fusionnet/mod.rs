//! Network topologies over multimodal sequences.
//!
//! * [`HybridParams`]: per-modality LSTMs, a linear+sigmoid fusion layer
//!   over their concatenated hidden states, and a combined LSTM on top.
//! * [`EarlyParams`]: raw features concatenated per step, linear+sigmoid,
//!   one LSTM.
//! * [`TemporalParams`]: a single-modality LSTM.
//! * [`EtoeParams`]: per-modality LSTMs whose pooled states feed one
//!   trainable linear layer.
//! * [`FrameHeadParams`]: order-free per-frame linear-softmax classifier.
//!
//! Every sequence-level forward pools per-step logits and applies softmax
//! once. [`Model`] wraps any of them with class names for training and
//! serialization.

mod combine;
mod early;
mod etoe;
mod frame;
mod head;
mod hybrid;
mod io;
mod model;
mod temporal;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, init_params, InitScheme, Matrix, NumericsError, ParamTensor, SeededRng};
use crate::recurrent::{LstmParams, RecurrentError};
use crate::trainer::dropout_mask;

pub use crate::numerics::ScoreVector;
pub use combine::{combine_components, late_fusion_scores};
pub use early::{EarlyCache, EarlyParams};
pub use etoe::{EtoeCache, EtoeParams};
pub use frame::{frame_classifier_forward, nontemporal_sequence_predict, FrameCache, FrameHeadParams};
pub use hybrid::{HybridCache, HybridParams};
pub use io::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use model::{ForwardCache, LayerSizes, Model, Network};
pub use temporal::{TemporalCache, TemporalParams};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("sequence is missing modality `{0}`")]
    MissingModality(String),
    #[error("modality `{name}`: expected dimension {expected}, got {actual}")]
    ModalityDim {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("modality `{name}` has {actual} steps, expected {expected}")]
    LengthMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("frame has {actual} features, expected {expected}")]
    FrameDim { expected: usize, actual: usize },
    #[error("score vectors disagree on class count: {expected} vs {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("{scores} score vectors but {weights} weights")]
    CountMismatch { scores: usize, weights: usize },
    #[error("weights must be nonnegative and sum to 1: {0:?}")]
    NotSimplex(Vec<f64>),
    #[error("backward requires a train-mode cache")]
    EvalCache,
    #[error("cache was produced by a different topology")]
    CacheKind,
    #[error("unknown topology `{0}`")]
    UnknownTopology(String),
    #[error("duplicate modality `{0}`")]
    DuplicateModality(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Recurrent(#[from] RecurrentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One input stream and its per-step feature dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

/// Checks names are unique and dimensions positive.
pub fn validate_modalities(modalities: &[ModalitySpec]) -> Result<(), FusionError> {
    for (i, m) in modalities.iter().enumerate() {
        if m.dim == 0 {
            return Err(FusionError::ModalityDim {
                name: m.name.clone(),
                expected: 1,
                actual: 0,
            });
        }
        if modalities[..i].iter().any(|o| o.name == m.name) {
            return Err(FusionError::DuplicateModality(m.name.clone()));
        }
    }
    Ok(())
}

/// Per-modality `T × D_m` feature matrices and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub id: String,
    pub label: usize,
    pub features: BTreeMap<String, Matrix>,
}

impl MultimodalSequence {
    pub fn new(id: impl Into<String>, label: usize) -> Self {
        Self {
            id: id.into(),
            label,
            features: BTreeMap::new(),
        }
    }

    pub fn with(mut self, modality: impl Into<String>, features: Matrix) -> Self {
        self.features.insert(modality.into(), features);
        self
    }

    /// Number of steps (taken from any modality; 0 if none).
    pub fn len(&self) -> usize {
        self.features.values().next().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrices for `required`, in that order, after checking dimensions
    /// and that every modality present shares one positive length.
    pub fn matrices<'a>(&'a self, required: &[ModalitySpec]) -> Result<Vec<&'a Matrix>, FusionError> {
        let steps = self.len();
        if steps == 0 {
            return Err(FusionError::EmptySequence);
        }
        for (name, m) in &self.features {
            if m.rows() != steps {
                return Err(FusionError::LengthMismatch {
                    name: name.clone(),
                    expected: steps,
                    actual: m.rows(),
                });
            }
        }
        required
            .iter()
            .map(|spec| {
                let m = self
                    .features
                    .get(&spec.name)
                    .ok_or_else(|| FusionError::MissingModality(spec.name.clone()))?;
                if m.cols() != spec.dim {
                    return Err(FusionError::ModalityDim {
                        name: spec.name.clone(),
                        expected: spec.dim,
                        actual: m.cols(),
                    });
                }
                Ok(m)
            })
            .collect()
    }
}

/// Rule mapping per-step outputs to one sequence-level output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last" => Ok(Pooling::Last),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}` (expected last|mean)")),
        }
    }
}

/// Reduces a `T × K` matrix to one row: the last row, or the column means.
pub fn pool_outputs(per_step: &Matrix, pooling: Pooling) -> Result<Vec<f64>, FusionError> {
    let steps = per_step.rows();
    if steps == 0 {
        return Err(FusionError::EmptySequence);
    }
    Ok(match pooling {
        Pooling::Last => per_step.row(steps - 1).to_vec(),
        Pooling::Mean => {
            let mut acc = vec![0.0; per_step.cols()];
            for t in 0..steps {
                acc.iter_mut().zip(per_step.row(t)).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= steps as f64);
            acc
        }
    })
}

/// Spreads a pooled gradient back over `steps` rows.
pub(crate) fn pool_backward(d_pooled: &[f64], steps: usize, pooling: Pooling) -> Matrix {
    let mut d = Matrix::zeros(steps, d_pooled.len());
    match pooling {
        Pooling::Last => d.row_mut(steps - 1).copy_from_slice(d_pooled),
        Pooling::Mean => {
            let scale = 1.0 / steps as f64;
            for t in 0..steps {
                d.row_mut(t).iter_mut().zip(d_pooled).for_each(|(o, v)| *o = v * scale);
            }
        }
    }
    d
}

/// Which network a model is.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    Hybrid,
    Early,
    EtoeLate,
    Temporal(String),
    NonTemporal(String),
}

impl Topology {
    pub fn modality(&self) -> Option<&str> {
        match self {
            Topology::Temporal(m) | Topology::NonTemporal(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Hybrid => f.write_str("hybrid"),
            Topology::Early => f.write_str("early"),
            Topology::EtoeLate => f.write_str("etoe_late"),
            Topology::Temporal(m) => write!(f, "temporal:{m}"),
            Topology::NonTemporal(m) => write!(f, "nontemporal:{m}"),
        }
    }
}

impl FromStr for Topology {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => return Ok(Topology::Hybrid),
            "early" => return Ok(Topology::Early),
            "etoe" | "etoe_late" => return Ok(Topology::EtoeLate),
            _ => {}
        }
        match s.split_once(':') {
            Some(("temporal", m)) if !m.is_empty() => Ok(Topology::Temporal(m.to_string())),
            Some(("nontemporal", m)) if !m.is_empty() => Ok(Topology::NonTemporal(m.to_string())),
            _ => Err(FusionError::UnknownTopology(s.to_string())),
        }
    }
}

impl Serialize for Topology {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Topology {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Forward-pass mode. Train mode draws inverted-dropout masks for every
/// LSTM output exposed to the next layer.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut SeededRng, dropout: f64 },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// `None` in eval mode, otherwise a `rows × cols` mask.
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        match self {
            Mode::Eval => None,
            Mode::Train { rng, dropout } => {
                let data: Vec<f64> = (0..rows).flat_map(|_| dropout_mask(cols, *dropout, rng)).collect();
                Some(Matrix::from_vec(rows, cols, data).expect("mask size"))
            }
        }
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl Dense {
    /// U(−0.08, 0.08) weights and zero bias, or all zeros without an rng.
    pub fn init(prefix: &str, inputs: usize, outputs: usize, rng: Option<&mut SeededRng>) -> Result<Self, FusionError> {
        let w_name = format!("{prefix}.w");
        let b_name = format!("{prefix}.b");
        Ok(match rng {
            Some(rng) => Self {
                w: init_params(w_name, (outputs, inputs), InitScheme::Uniform008, rng)?,
                b: init_params(b_name, (outputs, 1), InitScheme::Zeros, rng)?,
            },
            None => {
                if inputs == 0 || outputs == 0 {
                    return Err(NumericsError::ZeroDimension((outputs, inputs)).into());
                }
                Self {
                    w: ParamTensor::zeros(w_name, outputs, inputs),
                    b: ParamTensor::zeros(b_name, outputs, 1),
                }
            }
        })
    }

    pub fn inputs(&self) -> usize {
        self.w.value.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.value.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.value.as_slice().to_vec();
        self.w.value.matvec_add(x, &mut y);
        y
    }

    /// `W x + b` accumulated one column block at a time, in the order the
    /// blocks are listed. Listing blocks in an order that ignores their
    /// position makes the result invariant to permuting them.
    pub fn forward_blocks(&self, x: &[f64], blocks: &[Range<usize>]) -> Vec<f64> {
        let mut y = self.b.value.as_slice().to_vec();
        for (r, o) in y.iter_mut().enumerate() {
            let row = self.w.value.row(r);
            for block in blocks {
                *o += dot(&row[block.clone()], &x[block.clone()]);
            }
        }
        y
    }

    /// Row-wise [`Dense::forward_blocks`].
    pub fn forward_rows_blocks(&self, xs: &Matrix, blocks: &[Range<usize>]) -> Matrix {
        let mut out = Matrix::zeros(xs.rows(), self.outputs());
        for t in 0..xs.rows() {
            let y = self.forward_blocks(xs.row(t), blocks);
            out.row_mut(t).copy_from_slice(&y);
        }
        out
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        self.w.grad.add_outer(dy, x);
        self.b.grad.add_column(dy);
        let mut dx = vec![0.0; self.inputs()];
        self.w.value.matvec_transposed_add(dy, &mut dx);
        dx
    }

    /// Row-wise forward over a `T × inputs` matrix.
    pub fn forward_rows(&self, xs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(xs.rows(), self.outputs());
        for t in 0..xs.rows() {
            let y = self.forward(xs.row(t));
            out.row_mut(t).copy_from_slice(&y);
        }
        out
    }

    /// Row-wise backward; returns `T × inputs`.
    pub fn backward_rows(&mut self, xs: &Matrix, dys: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(xs.rows(), self.inputs());
        for t in 0..xs.rows() {
            if dys.row(t).iter().all(|&v| v == 0.0) {
                continue;
            }
            let d = self.backward(xs.row(t), dys.row(t));
            dx.row_mut(t).copy_from_slice(&d);
        }
        dx
    }

    pub fn tensors(&self) -> [&ParamTensor; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub(crate) fn lstm_block(
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: Option<&mut SeededRng>,
) -> Result<LstmParams, FusionError> {
    Ok(match rng {
        Some(rng) => LstmParams::init(prefix, input, hidden, rng)?,
        None => {
            if input == 0 || hidden == 0 {
                return Err(NumericsError::ZeroDimension((hidden, input)).into());
            }
            LstmParams::zeros(prefix, input, hidden)
        }
    })
}

/// Column ranges of the concatenated modality blocks, listed by modality
/// name so the summation order does not depend on the declared order.
pub(crate) fn canonical_blocks(modalities: &[ModalitySpec], widths: &[usize]) -> Vec<Range<usize>> {
    let mut offset = 0;
    let mut blocks: Vec<(&str, Range<usize>)> = modalities
        .iter()
        .zip(widths)
        .map(|(m, &w)| {
            offset += w;
            (m.name.as_str(), offset - w..offset)
        })
        .collect();
    blocks.sort_by(|a, b| a.0.cmp(b.0));
    blocks.into_iter().map(|(_, r)| r).collect()
}

/// Concatenates the rows of several `T × n_i` matrices side by side.
pub(crate) fn concat_columns(parts: &[&Matrix]) -> Matrix {
    let steps = parts.first().map_or(0, |m| m.rows());
    let width: usize = parts.iter().map(|m| m.cols()).sum();
    let mut out = Matrix::zeros(steps, width);
    for t in 0..steps {
        let row = out.row_mut(t);
        let mut offset = 0;
        for m in parts {
            row[offset..offset + m.cols()].copy_from_slice(m.row(t));
            offset += m.cols();
        }
    }
    out
}

/// Inverse of [`concat_columns`] for gradients.
pub(crate) fn split_columns(m: &Matrix, widths: &[usize]) -> Vec<Matrix> {
    let mut offset = 0;
    widths
        .iter()
        .map(|&w| {
            let mut part = Matrix::zeros(m.rows(), w);
            for t in 0..m.rows() {
                part.row_mut(t).copy_from_slice(&m.row(t)[offset..offset + w]);
            }
            offset += w;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        let single = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        assert_eq!(pool_outputs(&single, Pooling::Last).unwrap(), vec![0.3, -2.0]);
        assert_eq!(pool_outputs(&single, Pooling::Mean).unwrap(), vec![0.3, -2.0]);
        let two = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(pool_outputs(&two, Pooling::Mean).unwrap(), vec![2.0, 2.0]);
        let three = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(pool_outputs(&three, Pooling::Last).unwrap(), vec![5.0, 5.0]);
        assert!(pool_outputs(&Matrix::zeros(0, 2), Pooling::Last).is_err());
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let d = pool_backward(&[1.0, -2.0], 4, Pooling::Mean);
        assert!(d.as_slice().chunks(2).all(|r| r == [0.25, -0.5]));
        let d = pool_backward(&[1.0, -2.0], 3, Pooling::Last);
        assert_eq!(d.row(2), &[1.0, -2.0]);
        assert_eq!(d.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn topology_names_round_trip() {
        for name in ["hybrid", "early", "etoe_late", "temporal:audio", "nontemporal:skeleton"] {
            let t: Topology = name.parse().unwrap();
            assert_eq!(t.to_string(), name);
        }
        assert_eq!("etoe".parse::<Topology>().unwrap(), Topology::EtoeLate);
        assert!("temporal:".parse::<Topology>().is_err());
        assert!("late".parse::<Topology>().is_err());
    }

    #[test]
    fn sequence_validation() {
        let seq = MultimodalSequence::new("s", 0)
            .with("a", Matrix::zeros(3, 2))
            .with("b", Matrix::zeros(3, 4));
        let specs = [ModalitySpec::new("b", 4), ModalitySpec::new("a", 2)];
        let ms = seq.matrices(&specs).unwrap();
        assert_eq!(ms[0].cols(), 4);
        assert!(matches!(
            seq.matrices(&[ModalitySpec::new("c", 1)]),
            Err(FusionError::MissingModality(_))
        ));
        assert!(matches!(
            seq.matrices(&[ModalitySpec::new("a", 3)]),
            Err(FusionError::ModalityDim { .. })
        ));
        let ragged = seq.clone().with("c", Matrix::zeros(2, 1));
        assert!(matches!(
            ragged.matrices(&specs),
            Err(FusionError::LengthMismatch { .. })
        ));
        let empty = MultimodalSequence::new("e", 0).with("a", Matrix::zeros(0, 2));
        assert!(matches!(empty.matrices(&specs[1..]), Err(FusionError::EmptySequence)));
    }

    #[test]
    fn modality_specs_validated() {
        assert!(validate_modalities(&[ModalitySpec::new("a", 1), ModalitySpec::new("a", 2)]).is_err());
        assert!(validate_modalities(&[ModalitySpec::new("a", 0)]).is_err());
        assert!(validate_modalities(&[ModalitySpec::new("a", 1), ModalitySpec::new("b", 2)]).is_ok());
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let z = concat_columns(&[&a, &b]);
        assert_eq!(z.row(1), &[2.0, 5.0, 6.0]);
        let parts = split_columns(&z, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
