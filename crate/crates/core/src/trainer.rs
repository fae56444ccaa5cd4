//! SGD with momentum, the step-decay learning-rate schedule, gradient
//! clipping, finite-difference gradient checks and the validation search
//! for component combination weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{modality_name, Schema};
use crate::fusionnet::{
    combine_components, FusionError, LayerSizes, ModalitySpec, Mode, Model, MultimodalSequence, Pooling, Topology,
};
use crate::metrics::{accuracy, map_from_scores, MetricError};
use crate::numerics::{derive_seed, Matrix, ParamTensor, ScoreVector, SeededRng};

/// Epochs trained at the base rate before decay starts.
pub const CONSTANT_LR_EPOCHS: usize = 5;
pub const LR_DECAY: f64 = 0.9;
/// Lattice step of the combination-weight search, as `1 / SIMPLEX_DIVISIONS`.
pub const SIMPLEX_DIVISIONS: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("sequence `{id}`: {detail}")]
    Sequence { id: String, detail: String },
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("optimizer state does not match the parameters: {0}")]
    StateMismatch(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Model-selection and weight-search criterion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValMetric {
    #[default]
    Accuracy,
    Map,
}

impl fmt::Display for ValMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValMetric::Accuracy => "accuracy",
            ValMetric::Map => "map",
        })
    }
}

impl FromStr for ValMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(ValMetric::Accuracy),
            "map" => Ok(ValMetric::Map),
            other => Err(format!("unknown metric `{other}` (expected accuracy|map)")),
        }
    }
}

/// Training hyperparameters. Field names are the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Global gradient-norm bound; `null` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub pooling: Pooling,
    pub seed: u64,
    /// First-layer LSTM width per modality; missing entries use
    /// `default_hidden`.
    pub hidden_sizes: BTreeMap<String, usize>,
    pub default_hidden: usize,
    pub fusion_size: usize,
    pub combined_hidden: usize,
    pub val_metric: ValMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0002,
            momentum: 0.9,
            dropout: 0.3,
            epochs: 30,
            clip_norm: Some(5.0),
            batch_size: 1,
            pooling: Pooling::Last,
            seed: 0,
            hidden_sizes: BTreeMap::new(),
            default_hidden: 32,
            fusion_size: 32,
            combined_hidden: 32,
            val_metric: ValMetric::Accuracy,
        }
    }
}

/// Named layer-size presets for the three benchmark corpora.
pub const PRESETS: [&str; 3] = ["ucf101", "ccv", "mmg"];

impl TrainConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let (branches, fusion, combined, metric): (&[(&str, usize)], usize, usize, ValMetric) = match name {
            "ucf101" => (&[("appearance", 576), ("motion", 576)], 768, 448, ValMetric::Accuracy),
            "ccv" => (
                &[("appearance", 512), ("motion", 512), ("audio", 512)],
                896,
                640,
                ValMetric::Map,
            ),
            "mmg" => (&[("audio", 192), ("skeleton", 256)], 384, 256, ValMetric::Accuracy),
            _ => return None,
        };
        Some(Self {
            hidden_sizes: branches.iter().map(|(m, h)| (m.to_string(), *h)).collect(),
            fusion_size: fusion,
            combined_hidden: combined,
            val_metric: metric,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.default_hidden == 0 || self.fusion_size == 0 || self.combined_hidden == 0 {
            return bad("layer sizes must be positive".into());
        }
        if let Some((m, _)) = self.hidden_sizes.iter().find(|(_, h)| **h == 0) {
            return bad(format!("hidden size for `{m}` must be positive"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, modalities: &[ModalitySpec]) -> LayerSizes {
        LayerSizes {
            branch_hidden: modalities
                .iter()
                .map(|m| {
                    let h = self.hidden_sizes.get(&m.name).copied().unwrap_or(self.default_hidden);
                    (m.name.clone(), h)
                })
                .collect(),
            fusion: self.fusion_size,
            combined_hidden: self.combined_hidden,
        }
    }
}

/// Learning rate for a 1-based epoch: `base` for the first five epochs,
/// then `base · 0.9^(epoch − 5)`.
///
/// The decay is carried out on the decimal representation of `base`, so
/// the result is the double nearest to the exact decimal product (for
/// instance exactly `0.0001458` for base `0.0002` at epoch 8, which
/// repeated binary multiplication misses by one ulp).
pub fn lr_at_epoch(base: f64, epoch: usize) -> Result<f64, TrainError> {
    if epoch == 0 {
        return Err(TrainError::Config("epochs are numbered from 1".into()));
    }
    if epoch <= CONSTANT_LR_EPOCHS {
        return Ok(base);
    }
    Ok(decimal_decay(base, epoch - CONSTANT_LR_EPOCHS))
}

fn decimal_decay(base: f64, steps: usize) -> f64 {
    if !base.is_finite() || base == 0.0 {
        return base * LR_DECAY.powi(steps as i32);
    }
    // Shortest round-trip form, e.g. "2e-4" or "1.5e-3".
    let repr = format!("{:e}", base.abs());
    let (mantissa, exponent) = repr.split_once('e').expect("exponent form");
    let mut exp: i64 = exponent.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    exp -= mantissa.split_once('.').map_or(0, |(_, frac)| frac.len() as i64);
    let mut m: u128 = digits.parse().expect("decimal mantissa");
    const LIMIT: u128 = 10u128.pow(36);
    for _ in 0..steps {
        m *= 9;
        exp -= 1;
        while m >= LIMIT {
            m = (m + 5) / 10;
            exp += 1;
        }
    }
    let value: f64 = format!("{m}e{exp}").parse().expect("decimal literal");
    value.copysign(base)
}

/// Heavy-ball velocities, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocities: Vec<Matrix>,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a ParamTensor>) -> Self {
        Self {
            velocities: params
                .into_iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.tensors())
    }
}

/// Gradient statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    /// Factor applied to the gradients by clipping (1 when not clipped).
    pub scale: f64,
}

/// Global gradient L2 norm.
pub fn global_grad_norm(params: &[&mut ParamTensor]) -> f64 {
    params.iter().map(|p| p.grad.sum_of_squares()).sum::<f64>().sqrt()
}

/// One update: clip the global gradient norm to `clip_norm`, then
/// `v ← μ·v − lr·g`, `w ← w + v`, then zero the gradients.
pub fn sgd_momentum_step(
    params: &mut [&mut ParamTensor],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
) -> Result<StepStats, TrainError> {
    if params.len() != state.velocities.len() {
        return Err(TrainError::StateMismatch(format!(
            "{} tensors, {} velocities",
            params.len(),
            state.velocities.len()
        )));
    }
    for (p, v) in params.iter().zip(&state.velocities) {
        if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
            return Err(TrainError::StateMismatch(format!("shape of `{}`", p.name)));
        }
        if p.grad.first_non_finite().is_some() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    let grad_norm = global_grad_norm(params);
    let scale = match clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    for (p, v) in params.iter_mut().zip(&mut state.velocities) {
        let ParamTensor { value, grad, .. } = &mut **p;
        for ((w, g), vel) in value
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            let g = if scale == 1.0 { *g } else { *g * scale };
            *vel = momentum * *vel - lr * g;
            *w += *vel;
        }
        grad.fill(0.0);
    }
    Ok(StepStats { grad_norm, scale })
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_metric: f64,
    pub lr: f64,
}

impl EpochReport {
    pub const TSV_HEADER: &'static str = "epoch\tmean_loss\ttrain_accuracy\tval_metric\tlr";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{}",
            self.epoch, self.mean_loss, self.train_accuracy, self.val_metric, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric (the
    /// initial model when no epoch ran).
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
}

/// Scores of `model` on every sequence in eval mode.
pub fn predict_all(model: &Model, seqs: &[MultimodalSequence]) -> Result<Vec<ScoreVector>, TrainError> {
    seqs.iter()
        .map(|s| model.predict(s).map_err(TrainError::from))
        .collect()
}

/// Accuracy or mAP of a score table against labels.
pub fn score_metric(scores: &[ScoreVector], labels: &[usize], metric: ValMetric) -> Result<f64, MetricError> {
    match metric {
        ValMetric::Accuracy => {
            let predicted: Vec<usize> = scores.iter().map(ScoreVector::argmax).collect();
            accuracy(&predicted, labels)
        }
        ValMetric::Map => {
            let classes = scores.first().map_or(0, ScoreVector::len);
            let rows: Vec<&[f64]> = scores.iter().map(ScoreVector::as_slice).collect();
            map_from_scores(&rows, labels, classes)
        }
    }
}

pub fn labels_of(seqs: &[MultimodalSequence]) -> Vec<usize> {
    seqs.iter().map(|s| s.label).collect()
}

fn check_sequences(model: &Model, seqs: &[MultimodalSequence]) -> Result<(), TrainError> {
    let modalities = model.modalities();
    for s in seqs {
        if s.label >= model.num_classes() {
            return Err(TrainError::Sequence {
                id: s.id.clone(),
                detail: format!("label {} outside {} classes", s.label, model.num_classes()),
            });
        }
        s.matrices(&modalities).map_err(|e| TrainError::Sequence {
            id: s.id.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(())
}

/// Trains `topology` on `train`, selecting the epoch with the best
/// validation metric.
pub fn train_model(
    train: &[MultimodalSequence],
    val: &[MultimodalSequence],
    schema: &Schema,
    topology: &Topology,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_model_with(train, val, schema, topology, config, |_| {})
}

/// [`train_model`] with a callback invoked after every epoch.
pub fn train_model_with(
    train: &[MultimodalSequence],
    val: &[MultimodalSequence],
    schema: &Schema,
    topology: &Topology,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if schema.classes.is_empty() {
        return Err(TrainError::Config("dataset declares no classes".into()));
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut init_rng = SeededRng::derive(config.seed, "init");
    let mut model = Model::new(
        topology,
        &schema.modalities,
        schema.classes.clone(),
        &config.layer_sizes(&schema.modalities),
        config.pooling,
        Some(&mut init_rng),
    )?;
    check_sequences(&model, train)?;
    check_sequences(&model, val)?;

    let mut shuffle_rng = SeededRng::derive(config.seed, "shuffle");
    let mut dropout_rng = SeededRng::derive(config.seed, "dropout");
    let mut state = OptimState::for_model(&model);
    let train_labels = labels_of(train);
    let val_labels = labels_of(val);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut reports = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = lr_at_epoch(config.base_lr, epoch)?;
        let diverged = |detail: String| TrainError::Diverged { epoch, detail };
        shuffle_rng.shuffle(&mut order);
        model.zero_grads();
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                let mut mode = Mode::Train {
                    rng: &mut dropout_rng,
                    dropout: config.dropout,
                };
                let (loss, _) = model.accumulate_gradients(&train[i], &mut mode)?;
                if !loss.is_finite() {
                    return Err(diverged(format!("loss {loss} on sequence `{}`", train[i].id)));
                }
                loss_sum += loss;
            }
            let mut params = model.tensors_mut();
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                params.iter_mut().for_each(|p| p.grad.scale(inv));
            }
            sgd_momentum_step(&mut params, &mut state, lr, config.momentum, config.clip_norm).map_err(|e| match e {
                TrainError::NonFiniteGradient(name) => diverged(format!("non-finite gradient in `{name}`")),
                other => other,
            })?;
        }
        if let Some(name) = model.tensors().iter().find(|t| t.value.first_non_finite().is_some()) {
            return Err(diverged(format!("non-finite weight in `{}`", name.name)));
        }

        let train_scores = predict_all(&model, train)?;
        let train_accuracy = score_metric(&train_scores, &train_labels, ValMetric::Accuracy)?;
        let val_scores = predict_all(&model, val)?;
        let val_metric = score_metric(&val_scores, &val_labels, config.val_metric)?;
        let report = EpochReport {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy,
            val_metric,
            lr,
        };
        on_epoch(&report);
        reports.push(report);
        if best.as_ref().is_none_or(|(m, _, _)| val_metric > *m) {
            best = Some((val_metric, epoch, model.clone()));
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, Some(epoch)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
    })
}

/// Instance size for gradient checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub modalities: usize,
    pub dim: usize,
    pub hidden: usize,
    pub fusion: usize,
    pub combined_hidden: usize,
    pub classes: usize,
    pub length: usize,
    pub pooling: Pooling,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            modalities: 2,
            dim: 2,
            hidden: 2,
            fusion: 3,
            combined_hidden: 2,
            classes: 2,
            length: 3,
            pooling: Pooling::Last,
        }
    }
}

/// Parameter budget of [`grad_check`].
pub const GRAD_CHECK_MAX_PARAMS: usize = 2000;

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Largest relative error between backpropagated gradients and central
/// differences of the training objective, over every scalar parameter of
/// a random instance of `topology`.
pub fn grad_check(topology: &Topology, tiny: &TinyConfig, seed: u64, eps: f64) -> Result<f64, TrainError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(TrainError::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let modalities: Vec<ModalitySpec> = (0..tiny.modalities)
        .map(|i| ModalitySpec::new(modality_name(i), tiny.dim))
        .collect();
    let classes = (0..tiny.classes).map(|k| format!("c{k}")).collect();
    let sizes = LayerSizes::uniform(&modalities, tiny.hidden, tiny.fusion, tiny.combined_hidden);
    let mut rng = SeededRng::new(seed);
    let mut model = Model::new(topology, &modalities, classes, &sizes, tiny.pooling, None)?;
    let count = model.parameter_count();
    if count > GRAD_CHECK_MAX_PARAMS {
        return Err(TrainError::Config(format!(
            "{count} parameters exceed the gradient-check budget of {GRAD_CHECK_MAX_PARAMS}"
        )));
    }
    // Weights well away from zero exercise every nonlinearity.
    for t in model.tensors_mut() {
        t.value
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = rng.uniform(-1.0, 1.0));
    }
    let label = (rng.next_u64() % tiny.classes as u64) as usize;
    let mut seq = MultimodalSequence::new("gradcheck", label);
    for m in &modalities {
        let data = (0..tiny.length * tiny.dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        seq.features.insert(
            m.name.clone(),
            Matrix::from_vec(tiny.length, tiny.dim, data).map_err(FusionError::from)?,
        );
    }

    model.zero_grads();
    let mut no_dropout = SeededRng::new(0);
    model.accumulate_gradients(
        &seq,
        &mut Mode::Train {
            rng: &mut no_dropout,
            dropout: 0.0,
        },
    )?;
    let analytic: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.grad.as_slice().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let original = model.tensors()[ti].value.as_slice()[j];
            let mut eval_at = |w: f64| -> Result<f64, TrainError> {
                model.tensors_mut()[ti].value.as_mut_slice()[j] = w;
                Ok(model.loss(&seq)?)
            };
            let plus = eval_at(original + eps)?;
            let minus = eval_at(original - eps)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Every point of the simplex lattice with `divisions` steps over `n`
/// components, as integer numerators.
fn simplex_lattice(n: usize, divisions: usize) -> Vec<Vec<usize>> {
    fn fill(prefix: &mut Vec<usize>, n: usize, remaining: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == n {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            fill(prefix, n, remaining - k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::with_capacity(n), n, divisions, &mut out);
    out
}

/// Searches the simplex lattice of step 0.05 for the component weights that
/// maximize `metric` of the combined validation scores.
///
/// Ties go to fewer nonzero weights, then to the lexicographically greatest
/// weight vector (so the earlier component wins between equals).
pub fn learn_combination_weights(
    component_scores: &[Vec<ScoreVector>],
    labels: &[usize],
    metric: ValMetric,
) -> Result<Vec<f64>, TrainError> {
    let n = component_scores.len();
    if n == 0 {
        return Err(TrainError::Config("no components to combine".into()));
    }
    if let Some(bad) = component_scores.iter().find(|c| c.len() != labels.len()) {
        return Err(MetricError::LengthMismatch(bad.len(), labels.len()).into());
    }
    if labels.is_empty() {
        return Err(MetricError::Empty.into());
    }
    let to_weights =
        |point: &[usize]| -> Vec<f64> { point.iter().map(|&k| k as f64 / SIMPLEX_DIVISIONS as f64).collect() };
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    let mut per_sequence: Vec<ScoreVector> = Vec::with_capacity(labels.len());
    let mut components: Vec<ScoreVector> = Vec::with_capacity(n);
    for point in simplex_lattice(n, SIMPLEX_DIVISIONS) {
        let weights = to_weights(&point);
        per_sequence.clear();
        for i in 0..labels.len() {
            components.clear();
            components.extend(component_scores.iter().map(|c| c[i].clone()));
            per_sequence.push(combine_components(&components, &weights)?);
        }
        let value = score_metric(&per_sequence, labels, metric)?;
        let nonzeros = point.iter().filter(|&&k| k > 0).count();
        let better = match &best {
            None => true,
            Some((v, nz, p)) => value > *v || (value == *v && (nonzeros < *nz || (nonzeros == *nz && point > *p))),
        };
        if better {
            best = Some((value, nonzeros, point));
        }
    }
    Ok(to_weights(&best.expect("lattice is non-empty").2))
}

/// Per-row seed for parallel training of several models from one master
/// seed.
pub fn topology_seed(master: u64, topology: &Topology) -> u64 {
    derive_seed(master, &topology.to_string())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 − rate)`.
pub fn dropout_mask(length: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; length];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..length)
        .map(|_| if rng.unit() < rate { 0.0 } else { keep })
        .collect()
}
