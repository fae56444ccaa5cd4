use crate::numerics::{Matrix, ParamTensor, ScoreVector, SeededRng};
use crate::recurrent::{lstm_sequence_backward, lstm_sequence_forward, LstmCache, LstmParams};

use super::head::{
    lstm_readout_backward, lstm_readout_forward, sigmoid_layer_backward, sigmoid_layer_forward, ReadoutCache,
    SigmoidLayerCache,
};
use super::{
    canonical_blocks, concat_columns, lstm_block, split_columns, validate_modalities, Dense, FusionError, ModalitySpec,
    Mode, MultimodalSequence, Pooling,
};

/// Temporally hybrid network.
///
/// Layer 1 runs one LSTM per modality (`h^m_t`). Layer 2 concatenates the
/// per-modality hidden states in declared modality order into `z_t` and maps
/// them through `p_t = σ(W_z z_t + b_z)`. Layer 3 runs a combined LSTM over
/// `p_t`; its per-step readout `W_o h^c_t + b_o` is pooled and softmaxed.
#[derive(Clone, Debug)]
pub struct HybridParams {
    pub modalities: Vec<ModalitySpec>,
    pub branches: Vec<LstmParams>,
    /// `W_z`, `b_z`: `P × ΣH_m`.
    pub fusion: Dense,
    pub combined: LstmParams,
    /// `W_o`, `b_o`: `K × H_c`.
    pub readout: Dense,
    pub pooling: Pooling,
}

#[derive(Clone, Debug)]
pub struct HybridCache {
    branches: Vec<LstmCache>,
    fusion: SigmoidLayerCache,
    head: ReadoutCache,
    train: bool,
}

impl HybridCache {
    /// Concatenated first-layer outputs, `T × ΣH_m`.
    pub fn concatenated(&self) -> &Matrix {
        &self.fusion.input
    }

    /// Fused representation `p_t`, `T × P`.
    pub fn fused(&self) -> &Matrix {
        &self.fusion.output
    }
}

impl HybridParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        modalities: &[ModalitySpec],
        branch_hidden: &[usize],
        fusion_size: usize,
        combined_hidden: usize,
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
        let total: usize = branch_hidden.iter().sum();
        let fusion = Dense::init("fusion", total, fusion_size, rng.as_deref_mut())?;
        let combined = lstm_block("combined", fusion_size, combined_hidden, rng.as_deref_mut())?;
        let readout = Dense::init("readout", combined_hidden, classes, rng)?;
        Ok(Self {
            modalities: modalities.to_vec(),
            branches,
            fusion,
            combined,
            readout,
            pooling,
        })
    }

    pub fn classes(&self) -> usize {
        self.readout.outputs()
    }

    pub fn forward(
        &self,
        seq: &MultimodalSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(ScoreVector, HybridCache), FusionError> {
        let inputs = seq.matrices(&self.modalities)?;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut branch_caches = Vec::with_capacity(inputs.len());
        for (x, lstm) in inputs.iter().zip(&self.branches) {
            let mask = mode.mask(x.rows(), lstm.hidden_size());
            let (h, cache) = lstm_sequence_forward(x, lstm, mask.as_ref())?;
            outputs.push(h);
            branch_caches.push(cache);
        }
        let z = concat_columns(&outputs.iter().collect::<Vec<_>>());
        let widths: Vec<usize> = self.branches.iter().map(LstmParams::hidden_size).collect();
        let fusion = sigmoid_layer_forward(z, &self.fusion, &canonical_blocks(&self.modalities, &widths));
        let (probs, head) = lstm_readout_forward(&fusion.output, &self.combined, &self.readout, self.pooling, mode)?;
        Ok((
            probs,
            HybridCache {
                branches: branch_caches,
                fusion,
                head,
                train: mode.is_train(),
            },
        ))
    }

    /// Accumulates gradients of every tensor given `dscores`, the loss
    /// gradient w.r.t. the output scores.
    pub fn backward(&mut self, cache: &HybridCache, dscores: &[f64]) -> Result<(), FusionError> {
        if !cache.train {
            return Err(FusionError::EvalCache);
        }
        if cache.branches.len() != self.branches.len() {
            return Err(FusionError::CacheKind);
        }
        let d_fused = lstm_readout_backward(
            &cache.head,
            dscores,
            &mut self.combined,
            &mut self.readout,
            self.pooling,
        )?;
        let dz = sigmoid_layer_backward(&cache.fusion, &d_fused, &mut self.fusion);
        let widths: Vec<usize> = self.branches.iter().map(LstmParams::hidden_size).collect();
        for ((d_h, lstm), branch_cache) in split_columns(&dz, &widths)
            .iter()
            .zip(&mut self.branches)
            .zip(&cache.branches)
        {
            lstm_sequence_backward(branch_cache, d_h, lstm)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self.branches.iter().flat_map(|b| b.tensors()).collect();
        out.extend(self.fusion.tensors());
        out.extend(self.combined.tensors());
        out.extend(self.readout.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.extend(self.fusion.tensors_mut());
        out.extend(self.combined.tensors_mut());
        out.extend(self.readout.tensors_mut());
        out
    }
}
