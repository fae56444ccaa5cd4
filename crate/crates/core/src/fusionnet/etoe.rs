use crate::numerics::{softmax, softmax_backward, Matrix, ParamTensor, ScoreVector, SeededRng};
use crate::recurrent::{lstm_sequence_backward, lstm_sequence_forward, LstmCache, LstmParams};

use super::{
    canonical_blocks, lstm_block, pool_backward, pool_outputs, validate_modalities, Dense, FusionError, ModalitySpec,
    Mode, MultimodalSequence, Pooling,
};

/// End-to-end late fusion: per-modality LSTMs, each pooled over time, then
/// one trainable linear layer over the concatenated pooled states.
#[derive(Clone, Debug)]
pub struct EtoeParams {
    pub modalities: Vec<ModalitySpec>,
    pub branches: Vec<LstmParams>,
    /// `K × ΣH_m`.
    pub linear: Dense,
    pub pooling: Pooling,
}

#[derive(Clone, Debug)]
pub struct EtoeCache {
    branches: Vec<LstmCache>,
    pooled: Vec<f64>,
    probs: ScoreVector,
    train: bool,
}

impl EtoeParams {
    pub fn init(
        modalities: &[ModalitySpec],
        branch_hidden: &[usize],
        classes: usize,
        pooling: Pooling,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Self, FusionError> {
        validate_modalities(modalities)?;
        if modalities.is_empty() || branch_hidden.len() != modalities.len() {
            return Err(FusionError::InvalidModel(format!(
                "{} modalities but {} branch sizes",
                modalities.len(),
                branch_hidden.len()
            )));
        }
        let branches = modalities
            .iter()
            .zip(branch_hidden)
            .map(|(m, &h)| lstm_block(&format!("branch.{}", m.name), m.dim, h, rng.as_deref_mut()))
            .collect::<Result<Vec<_>, _>>()?;
        let linear = Dense::init("linear", branch_hidden.iter().sum(), classes, rng)?;
        Ok(Self {
            modalities: modalities.to_vec(),
            branches,
            linear,
            pooling,
        })
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(ScoreVector, EtoeCache), FusionError> {
        let inputs = seq.matrices(&self.modalities)?;
        let mut pooled = Vec::new();
        let mut caches = Vec::with_capacity(inputs.len());
        for (x, lstm) in inputs.iter().zip(&self.branches) {
            let mask = mode.mask(x.rows(), lstm.hidden_size());
            let (h, cache) = lstm_sequence_forward(x, lstm, mask.as_ref())?;
            pooled.extend(pool_outputs(&h, self.pooling)?);
            caches.push(cache);
        }
        let widths: Vec<usize> = self.branches.iter().map(LstmParams::hidden_size).collect();
        let logits = self
            .linear
            .forward_blocks(&pooled, &canonical_blocks(&self.modalities, &widths));
        let probs = softmax(&logits)?;
        Ok((
            probs.clone(),
            EtoeCache {
                branches: caches,
                pooled,
                probs,
                train: mode.is_train(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &EtoeCache, dscores: &[f64]) -> Result<(), FusionError> {
        if !cache.train {
            return Err(FusionError::EvalCache);
        }
        if cache.branches.len() != self.branches.len() {
            return Err(FusionError::CacheKind);
        }
        if dscores.len() != cache.probs.len() {
            return Err(FusionError::ClassCountMismatch {
                expected: cache.probs.len(),
                actual: dscores.len(),
            });
        }
        let dlogits = softmax_backward(&cache.probs, dscores);
        let d_pooled = self.linear.backward(&cache.pooled, &dlogits);
        let mut offset = 0;
        for (lstm, branch) in self.branches.iter_mut().zip(&cache.branches) {
            let width = lstm.hidden_size();
            let d_h: Matrix = pool_backward(&d_pooled[offset..offset + width], branch.len(), self.pooling);
            lstm_sequence_backward(branch, &d_h, lstm)?;
            offset += width;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.branches.iter().flat_map(|b| b.tensors()).collect();
        out.extend(self.linear.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.extend(self.linear.tensors_mut());
        out
    }
}
