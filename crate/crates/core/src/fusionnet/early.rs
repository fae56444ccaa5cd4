use crate::numerics::{ParamTensor, ScoreVector, SeededRng};
use crate::recurrent::LstmParams;

use super::head::{
    lstm_readout_backward, lstm_readout_forward, sigmoid_layer_backward, sigmoid_layer_forward, ReadoutCache,
    SigmoidLayerCache,
};
use super::{
    canonical_blocks, concat_columns, lstm_block, validate_modalities, Dense, FusionError, ModalitySpec, Mode,
    MultimodalSequence, Pooling,
};

/// Early fusion: raw features concatenated per step, a linear+sigmoid
/// transform, then a single LSTM with pooled softmax readout.
#[derive(Clone, Debug)]
pub struct EarlyParams {
    pub modalities: Vec<ModalitySpec>,
    /// `P × ΣD_m`.
    pub fusion: Dense,
    pub lstm: LstmParams,
    pub readout: Dense,
    pub pooling: Pooling,
}

#[derive(Clone, Debug)]
pub struct EarlyCache {
    fusion: SigmoidLayerCache,
    head: ReadoutCache,
    train: bool,
}

impl EarlyParams {
    pub fn init(
        modalities: &[ModalitySpec],
        fusion_size: usize,
        hidden: usize,
        classes: usize,
        pooling: Pooling,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Self, FusionError> {
        validate_modalities(modalities)?;
        let total: usize = modalities.iter().map(|m| m.dim).sum();
        Ok(Self {
            modalities: modalities.to_vec(),
            fusion: Dense::init("fusion", total, fusion_size, rng.as_deref_mut())?,
            lstm: lstm_block("lstm", fusion_size, hidden, rng.as_deref_mut())?,
            readout: Dense::init("readout", hidden, classes, rng)?,
            pooling,
        })
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(ScoreVector, EarlyCache), FusionError> {
        let inputs = seq.matrices(&self.modalities)?;
        let dims: Vec<usize> = self.modalities.iter().map(|m| m.dim).collect();
        let blocks = canonical_blocks(&self.modalities, &dims);
        let fusion = sigmoid_layer_forward(concat_columns(&inputs), &self.fusion, &blocks);
        let (probs, head) = lstm_readout_forward(&fusion.output, &self.lstm, &self.readout, self.pooling, mode)?;
        Ok((
            probs,
            EarlyCache {
                fusion,
                head,
                train: mode.is_train(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &EarlyCache, dscores: &[f64]) -> Result<(), FusionError> {
        if !cache.train {
            return Err(FusionError::EvalCache);
        }
        let d_fused = lstm_readout_backward(&cache.head, dscores, &mut self.lstm, &mut self.readout, self.pooling)?;
        sigmoid_layer_backward(&cache.fusion, &d_fused, &mut self.fusion);
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.fusion.tensors().into();
        out.extend(self.lstm.tensors());
        out.extend(self.readout.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.fusion.tensors_mut().into();
        out.extend(self.lstm.tensors_mut());
        out.extend(self.readout.tensors_mut());
        out
    }
}
