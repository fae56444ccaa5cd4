use crate::numerics::{ParamTensor, ScoreVector, SeededRng};
use crate::recurrent::LstmParams;

use super::head::{lstm_readout_backward, lstm_readout_forward, ReadoutCache};
use super::{lstm_block, Dense, FusionError, ModalitySpec, Mode, MultimodalSequence, Pooling};

/// Single-modality LSTM classifier.
#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub modality: ModalitySpec,
    pub lstm: LstmParams,
    pub readout: Dense,
    pub pooling: Pooling,
}

#[derive(Clone, Debug)]
pub struct TemporalCache {
    head: ReadoutCache,
    train: bool,
}

impl TemporalParams {
    pub fn init(
        modality: &ModalitySpec,
        hidden: usize,
        classes: usize,
        pooling: Pooling,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Self, FusionError> {
        Ok(Self {
            modality: modality.clone(),
            lstm: lstm_block("lstm", modality.dim, hidden, rng.as_deref_mut())?,
            readout: Dense::init("readout", hidden, classes, rng)?,
            pooling,
        })
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(ScoreVector, TemporalCache), FusionError> {
        let x = seq.matrices(std::slice::from_ref(&self.modality))?[0];
        let (probs, head) = lstm_readout_forward(x, &self.lstm, &self.readout, self.pooling, mode)?;
        Ok((
            probs,
            TemporalCache {
                head,
                train: mode.is_train(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &TemporalCache, dscores: &[f64]) -> Result<(), FusionError> {
        if !cache.train {
            return Err(FusionError::EvalCache);
        }
        lstm_readout_backward(&cache.head, dscores, &mut self.lstm, &mut self.readout, self.pooling)?;
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.lstm.tensors().into();
        out.extend(self.readout.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.lstm.tensors_mut().into();
        out.extend(self.readout.tensors_mut());
        out
    }
}
