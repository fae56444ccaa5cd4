//! Floating-point substrate: matrices, activations, softmax and
//! cross-entropy, trainable parameter containers and seeded initialization.
//!
//! Everything is `f64`. Finite-difference gradient checks at 1e-4 relative
//! error are not reliable in single precision.

mod matrix;
mod rng;

pub use matrix::{dot, Matrix};
pub use rng::{derive_seed, SeededRng, RNG_ALGORITHM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability floor used by [`cross_entropy_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform weight initialization interval.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("empty input")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("row {row} has {actual} entries, expected {expected}")]
    RaggedRow { row: usize, expected: usize, actual: usize },
    #[error("zero dimension in requested shape {0:?}")]
    ZeroDimension((usize, usize)),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Logistic sigmoid, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `kind` entrywise. Rejects non-finite input, naming the first
/// offending index.
pub fn elementwise_activation(kind: Activation, x: &Matrix) -> Result<Matrix, NumericsError> {
    if let Some((row, col)) = x.first_non_finite() {
        return Err(NumericsError::NonFinite {
            row,
            col,
            value: x.get(row, col),
        });
    }
    let data = x.as_slice().iter().map(|&v| kind.apply(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Class-confidence vector: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Wraps raw scores, checking nonnegativity and unit sum within 1e-9.
    pub fn new(scores: Vec<f64>) -> Result<Self, NumericsError> {
        if scores.is_empty() {
            return Err(NumericsError::Empty);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(NumericsError::NonFinite {
                row: i,
                col: 0,
                value: scores[i],
            });
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NumericsError::NonFinite {
                row: 0,
                col: 0,
                value: sum,
            });
        }
        Ok(Self(scores))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub(crate) fn from_raw(scores: Vec<f64>) -> Self {
        Self(scores)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest score; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for ScoreVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Smallest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<ScoreVector, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty);
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite {
            row: i,
            col: 0,
            value: logits[i],
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ScoreVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Backpropagates `dscores` (gradient w.r.t. the softmax output) to the
/// logits: `p ⊙ (d − ⟨d, p⟩)`.
pub fn softmax_backward(probs: &ScoreVector, dscores: &[f64]) -> Vec<f64> {
    let p = probs.as_slice();
    let inner = dot(p, dscores);
    p.iter().zip(dscores).map(|(pi, di)| pi * (di - inner)).collect()
}

/// `−ln(max(p[label], 1e-12))`.
pub fn cross_entropy_loss(probs: &ScoreVector, label: usize) -> Result<f64, NumericsError> {
    let p = class_prob(probs, label)?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of [`cross_entropy_loss`] w.r.t. the probabilities. Zero when
/// the floor is active.
pub fn cross_entropy_grad(probs: &ScoreVector, label: usize) -> Result<Vec<f64>, NumericsError> {
    let p = class_prob(probs, label)?;
    let mut d = vec![0.0; probs.len()];
    if p > PROB_FLOOR {
        d[label] = -1.0 / p;
    }
    Ok(d)
}

fn class_prob(probs: &ScoreVector, label: usize) -> Result<f64, NumericsError> {
    probs
        .as_slice()
        .get(label)
        .copied()
        .ok_or(NumericsError::LabelOutOfRange {
            label,
            classes: probs.len(),
        })
}

/// A trainable tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// i.i.d. U(−0.08, 0.08).
    Uniform008,
    Zeros,
    /// All ones; LSTM forget-gate bias rows only.
    ForgetBiasOne,
}

pub fn init_params(
    name: impl Into<String>,
    shape: (usize, usize),
    scheme: InitScheme,
    rng: &mut SeededRng,
) -> Result<ParamTensor, NumericsError> {
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(NumericsError::ZeroDimension(shape));
    }
    let value = match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::ForgetBiasOne => Matrix::filled(rows, cols, 1.0),
        InitScheme::Uniform008 => {
            let data = (0..rows * cols).map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE)).collect();
            Matrix::from_vec(rows, cols, data)?
        }
    };
    Ok(ParamTensor::new(name, value))
}
