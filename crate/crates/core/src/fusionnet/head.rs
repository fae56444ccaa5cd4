//! Building blocks shared by the recurrent topologies: an LSTM followed by
//! a per-step readout, pooling and softmax, optionally preceded by a
//! linear+sigmoid transform of its input.

use std::ops::Range;

use crate::numerics::{sigmoid, softmax, softmax_backward, Matrix, ScoreVector};
use crate::recurrent::{lstm_sequence_backward, lstm_sequence_forward, LstmCache, LstmParams};

use super::{pool_backward, pool_outputs, Dense, FusionError, Mode, Pooling};

#[derive(Clone, Debug)]
pub(crate) struct ReadoutCache {
    pub lstm: LstmCache,
    pub hidden: Matrix,
    pub probs: ScoreVector,
}

/// LSTM over `input`, readout logits per step, pool, softmax.
pub(crate) fn lstm_readout_forward(
    input: &Matrix,
    lstm: &LstmParams,
    readout: &Dense,
    pooling: Pooling,
    mode: &mut Mode<'_>,
) -> Result<(ScoreVector, ReadoutCache), FusionError> {
    let mask = mode.mask(input.rows(), lstm.hidden_size());
    let (hidden, lstm_cache) = lstm_sequence_forward(input, lstm, mask.as_ref())?;
    let logits = readout.forward_rows(&hidden);
    let probs = softmax(&pool_outputs(&logits, pooling)?)?;
    Ok((
        probs.clone(),
        ReadoutCache {
            lstm: lstm_cache,
            hidden,
            probs,
        },
    ))
}

/// Reverse of [`lstm_readout_forward`]; returns the input gradient.
pub(crate) fn lstm_readout_backward(
    cache: &ReadoutCache,
    dscores: &[f64],
    lstm: &mut LstmParams,
    readout: &mut Dense,
    pooling: Pooling,
) -> Result<Matrix, FusionError> {
    if dscores.len() != cache.probs.len() {
        return Err(FusionError::ClassCountMismatch {
            expected: cache.probs.len(),
            actual: dscores.len(),
        });
    }
    let dlogits = softmax_backward(&cache.probs, dscores);
    let d_steps = pool_backward(&dlogits, cache.hidden.rows(), pooling);
    let d_hidden = readout.backward_rows(&cache.hidden, &d_steps);
    Ok(lstm_sequence_backward(&cache.lstm, &d_hidden, lstm)?)
}

#[derive(Clone, Debug)]
pub(crate) struct SigmoidLayerCache {
    pub input: Matrix,
    pub output: Matrix,
}

/// `σ(W x_t + b)` for every row.
pub(crate) fn sigmoid_layer_forward(input: Matrix, layer: &Dense, blocks: &[Range<usize>]) -> SigmoidLayerCache {
    let mut output = layer.forward_rows_blocks(&input, blocks);
    output.as_mut_slice().iter_mut().for_each(|a| *a = sigmoid(*a));
    SigmoidLayerCache { input, output }
}

pub(crate) fn sigmoid_layer_backward(cache: &SigmoidLayerCache, d_output: &Matrix, layer: &mut Dense) -> Matrix {
    let mut d_pre = d_output.clone();
    d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(cache.output.as_slice())
        .for_each(|(d, p)| *d *= p * (1.0 - p));
    layer.backward_rows(&cache.input, &d_pre)
}
