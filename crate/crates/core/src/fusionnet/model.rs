use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{cross_entropy_grad, cross_entropy_loss, ParamTensor, ScoreVector, SeededRng};

use super::{
    EarlyCache, EarlyParams, EtoeCache, EtoeParams, FrameCache, FrameHeadParams, FusionError, HybridCache,
    HybridParams, ModalitySpec, Mode, MultimodalSequence, Pooling, TemporalCache, TemporalParams, Topology,
};

/// Layer widths. `branch_hidden` gives the first-layer LSTM size per
/// modality (also used by the single-modality and end-to-end late-fusion
/// networks); `fusion` is the width of the linear+sigmoid layer and
/// `combined_hidden` the LSTM that consumes it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub branch_hidden: BTreeMap<String, usize>,
    pub fusion: usize,
    pub combined_hidden: usize,
}

impl LayerSizes {
    pub fn uniform(modalities: &[ModalitySpec], branch: usize, fusion: usize, combined_hidden: usize) -> Self {
        Self {
            branch_hidden: modalities.iter().map(|m| (m.name.clone(), branch)).collect(),
            fusion,
            combined_hidden,
        }
    }

    pub fn branch(&self, modality: &str) -> Result<usize, FusionError> {
        self.branch_hidden
            .get(modality)
            .copied()
            .ok_or_else(|| FusionError::InvalidModel(format!("no branch size for modality `{modality}`")))
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Hybrid(HybridParams),
    Early(EarlyParams),
    EtoeLate(EtoeParams),
    Temporal(TemporalParams),
    NonTemporal(FrameHeadParams),
}

#[derive(Clone, Debug)]
pub enum ForwardCache {
    Hybrid(HybridCache),
    Early(EarlyCache),
    EtoeLate(EtoeCache),
    Temporal(TemporalCache),
    NonTemporal(FrameCache),
}

/// A trained or trainable network with its class names.
#[derive(Clone, Debug)]
pub struct Model {
    pub classes: Vec<String>,
    pub net: Network,
}

impl Model {
    /// Builds a model. With `rng` the weights are initialized randomly,
    /// otherwise every tensor is zero.
    pub fn new(
        topology: &Topology,
        modalities: &[ModalitySpec],
        classes: Vec<String>,
        sizes: &LayerSizes,
        pooling: Pooling,
        rng: Option<&mut SeededRng>,
    ) -> Result<Self, FusionError> {
        let k = classes.len();
        if k == 0 {
            return Err(FusionError::InvalidModel("no classes".into()));
        }
        let find = |name: &str| {
            modalities
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| FusionError::MissingModality(name.to_string()))
        };
        let branch_sizes = || {
            modalities
                .iter()
                .map(|m| sizes.branch(&m.name))
                .collect::<Result<Vec<_>, _>>()
        };
        let net = match topology {
            Topology::Hybrid => Network::Hybrid(HybridParams::init(
                modalities,
                &branch_sizes()?,
                sizes.fusion,
                sizes.combined_hidden,
                k,
                pooling,
                rng,
            )?),
            Topology::Early => Network::Early(EarlyParams::init(
                modalities,
                sizes.fusion,
                sizes.combined_hidden,
                k,
                pooling,
                rng,
            )?),
            Topology::EtoeLate => Network::EtoeLate(EtoeParams::init(modalities, &branch_sizes()?, k, pooling, rng)?),
            Topology::Temporal(m) => {
                let spec = find(m)?;
                Network::Temporal(TemporalParams::init(spec, sizes.branch(m)?, k, pooling, rng)?)
            }
            Topology::NonTemporal(m) => Network::NonTemporal(FrameHeadParams::init(find(m)?, k, rng)?),
        };
        Ok(Self { classes, net })
    }

    pub fn topology(&self) -> Topology {
        match &self.net {
            Network::Hybrid(_) => Topology::Hybrid,
            Network::Early(_) => Topology::Early,
            Network::EtoeLate(_) => Topology::EtoeLate,
            Network::Temporal(p) => Topology::Temporal(p.modality.name.clone()),
            Network::NonTemporal(p) => Topology::NonTemporal(p.modality.name.clone()),
        }
    }

    /// Modalities the network reads, in concatenation order.
    pub fn modalities(&self) -> Vec<ModalitySpec> {
        match &self.net {
            Network::Hybrid(p) => p.modalities.clone(),
            Network::Early(p) => p.modalities.clone(),
            Network::EtoeLate(p) => p.modalities.clone(),
            Network::Temporal(p) => vec![p.modality.clone()],
            Network::NonTemporal(p) => vec![p.modality.clone()],
        }
    }

    pub fn pooling(&self) -> Pooling {
        match &self.net {
            Network::Hybrid(p) => p.pooling,
            Network::Early(p) => p.pooling,
            Network::EtoeLate(p) => p.pooling,
            Network::Temporal(p) => p.pooling,
            // Frame heads always average over time.
            Network::NonTemporal(_) => Pooling::Mean,
        }
    }

    /// Actual layer widths of this network. Unused entries are zero.
    pub fn sizes(&self) -> LayerSizes {
        let branches = |mods: &[ModalitySpec], lstms: &[crate::recurrent::LstmParams]| {
            mods.iter()
                .zip(lstms)
                .map(|(m, l)| (m.name.clone(), l.hidden_size()))
                .collect::<BTreeMap<_, _>>()
        };
        match &self.net {
            Network::Hybrid(p) => LayerSizes {
                branch_hidden: branches(&p.modalities, &p.branches),
                fusion: p.fusion.outputs(),
                combined_hidden: p.combined.hidden_size(),
            },
            Network::Early(p) => LayerSizes {
                branch_hidden: BTreeMap::new(),
                fusion: p.fusion.outputs(),
                combined_hidden: p.lstm.hidden_size(),
            },
            Network::EtoeLate(p) => LayerSizes {
                branch_hidden: branches(&p.modalities, &p.branches),
                fusion: 0,
                combined_hidden: 0,
            },
            Network::Temporal(p) => LayerSizes {
                branch_hidden: BTreeMap::from([(p.modality.name.clone(), p.lstm.hidden_size())]),
                fusion: 0,
                combined_hidden: 0,
            },
            Network::NonTemporal(_) => LayerSizes {
                branch_hidden: BTreeMap::new(),
                fusion: 0,
                combined_hidden: 0,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(ScoreVector, ForwardCache), FusionError> {
        Ok(match &self.net {
            Network::Hybrid(p) => {
                let (s, c) = p.forward(seq, mode)?;
                (s, ForwardCache::Hybrid(c))
            }
            Network::Early(p) => {
                let (s, c) = p.forward(seq, mode)?;
                (s, ForwardCache::Early(c))
            }
            Network::EtoeLate(p) => {
                let (s, c) = p.forward(seq, mode)?;
                (s, ForwardCache::EtoeLate(c))
            }
            Network::Temporal(p) => {
                let (s, c) = p.forward(seq, mode)?;
                (s, ForwardCache::Temporal(c))
            }
            Network::NonTemporal(p) => {
                let (s, c) = p.forward(seq)?;
                (s, ForwardCache::NonTemporal(c))
            }
        })
    }

    /// Eval-mode scores.
    pub fn predict(&self, seq: &MultimodalSequence) -> Result<ScoreVector, FusionError> {
        Ok(self.forward(seq, &mut Mode::Eval)?.0)
    }

    /// Training objective without dropout: cross-entropy of the sequence
    /// scores, or mean per-frame cross-entropy for frame heads.
    pub fn loss(&self, seq: &MultimodalSequence) -> Result<f64, FusionError> {
        let (scores, cache) = self.forward(seq, &mut Mode::Eval)?;
        self.objective(seq.label, &scores, &cache)
    }

    fn objective(&self, label: usize, scores: &ScoreVector, cache: &ForwardCache) -> Result<f64, FusionError> {
        match (&self.net, cache) {
            (Network::NonTemporal(p), ForwardCache::NonTemporal(c)) => p.frame_loss(c, label),
            _ => Ok(cross_entropy_loss(scores, label)?),
        }
    }

    /// One forward/backward pass on `seq`, adding into the gradient slots.
    /// Returns the loss and the forward scores.
    pub fn accumulate_gradients(
        &mut self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(f64, ScoreVector), FusionError> {
        let (scores, cache) = self.forward(seq, mode)?;
        let loss = self.objective(seq.label, &scores, &cache)?;
        if let (Network::NonTemporal(p), ForwardCache::NonTemporal(c)) = (&mut self.net, &cache) {
            p.backward(c, seq.label)?;
        } else {
            let dscores = cross_entropy_grad(&scores, seq.label)?;
            self.backward(&cache, &dscores)?;
        }
        Ok((loss, scores))
    }

    /// Backpropagates a score gradient. Frame heads are trained on the
    /// per-frame objective and are rejected here.
    pub fn backward(&mut self, cache: &ForwardCache, dscores: &[f64]) -> Result<(), FusionError> {
        match (&mut self.net, cache) {
            (Network::Hybrid(p), ForwardCache::Hybrid(c)) => p.backward(c, dscores),
            (Network::Early(p), ForwardCache::Early(c)) => p.backward(c, dscores),
            (Network::EtoeLate(p), ForwardCache::EtoeLate(c)) => p.backward(c, dscores),
            (Network::Temporal(p), ForwardCache::Temporal(c)) => p.backward(c, dscores),
            _ => Err(FusionError::CacheKind),
        }
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        match &self.net {
            Network::Hybrid(p) => p.tensors(),
            Network::Early(p) => p.tensors(),
            Network::EtoeLate(p) => p.tensors(),
            Network::Temporal(p) => p.tensors(),
            Network::NonTemporal(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        match &mut self.net {
            Network::Hybrid(p) => p.tensors_mut(),
            Network::Early(p) => p.tensors_mut(),
            Network::EtoeLate(p) => p.tensors_mut(),
            Network::Temporal(p) => p.tensors_mut(),
            Network::NonTemporal(p) => p.tensors_mut(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }
}
