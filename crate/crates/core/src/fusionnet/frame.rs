use crate::numerics::{
    cross_entropy_grad, cross_entropy_loss, softmax, softmax_backward, Matrix, ParamTensor, ScoreVector, SeededRng,
};

use super::{Dense, FusionError, ModalitySpec, MultimodalSequence};

/// Linear-softmax classifier applied to single frames of one modality.
/// Training treats every frame as an example labelled with its sequence's
/// class; prediction averages the per-frame scores.
#[derive(Clone, Debug)]
pub struct FrameHeadParams {
    pub modality: ModalitySpec,
    /// `K × D_m`.
    pub head: Dense,
}

#[derive(Clone, Debug)]
pub struct FrameCache {
    frames: Matrix,
    probs: Vec<ScoreVector>,
}

impl FrameHeadParams {
    pub fn init(modality: &ModalitySpec, classes: usize, rng: Option<&mut SeededRng>) -> Result<Self, FusionError> {
        Ok(Self {
            modality: modality.clone(),
            head: Dense::init("head", modality.dim, classes, rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    /// Per-frame scores plus their mean.
    pub fn forward(&self, seq: &MultimodalSequence) -> Result<(ScoreVector, FrameCache), FusionError> {
        let frames = seq.matrices(std::slice::from_ref(&self.modality))?[0].clone();
        let probs = (0..frames.rows())
            .map(|t| frame_classifier_forward(frames.row(t), self))
            .collect::<Result<Vec<_>, _>>()?;
        let mean = mean_scores(&probs);
        Ok((mean, FrameCache { frames, probs }))
    }

    /// Mean per-frame cross-entropy.
    pub fn frame_loss(&self, cache: &FrameCache, label: usize) -> Result<f64, FusionError> {
        let mut total = 0.0;
        for p in &cache.probs {
            total += cross_entropy_loss(p, label)?;
        }
        Ok(total / cache.probs.len() as f64)
    }

    /// Accumulates the gradient of [`Self::frame_loss`].
    pub fn backward(&mut self, cache: &FrameCache, label: usize) -> Result<(), FusionError> {
        let scale = 1.0 / cache.probs.len() as f64;
        for (t, p) in cache.probs.iter().enumerate() {
            let mut dlogits = softmax_backward(p, &cross_entropy_grad(p, label)?);
            dlogits.iter_mut().for_each(|d| *d *= scale);
            self.head.backward(cache.frames.row(t), &dlogits);
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        self.head.tensors().into()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.head.tensors_mut().into()
    }
}

/// `softmax(W · frame + b)`.
pub fn frame_classifier_forward(frame: &[f64], head: &FrameHeadParams) -> Result<ScoreVector, FusionError> {
    if frame.len() != head.head.inputs() {
        return Err(FusionError::FrameDim {
            expected: head.head.inputs(),
            actual: frame.len(),
        });
    }
    Ok(softmax(&head.head.forward(frame))?)
}

/// Arithmetic mean of the per-frame scores over the whole sequence.
pub fn nontemporal_sequence_predict(
    seq: &MultimodalSequence,
    head: &FrameHeadParams,
) -> Result<ScoreVector, FusionError> {
    Ok(head.forward(seq)?.0)
}

fn mean_scores(scores: &[ScoreVector]) -> ScoreVector {
    let k = scores[0].len();
    let mut acc = vec![0.0; k];
    for s in scores {
        acc.iter_mut().zip(s.as_slice()).for_each(|(a, v)| *a += v);
    }
    let n = scores.len() as f64;
    ScoreVector::from_raw(acc.into_iter().map(|a| a / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(rows: &[Vec<f64>]) -> FrameHeadParams {
        let mut h = FrameHeadParams::init(&ModalitySpec::new("m", rows[0].len()), rows.len(), None).unwrap();
        h.head.w.value = Matrix::from_rows(rows).unwrap();
        h
    }

    #[test]
    fn zero_head_is_uniform() {
        let h = FrameHeadParams::init(&ModalitySpec::new("m", 3), 5, None).unwrap();
        let s = frame_classifier_forward(&[1.0, -2.0, 0.5], &h).unwrap();
        assert!(s.as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn analytic_two_class_frame() {
        let h = head(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = frame_classifier_forward(&[2f64.ln(), 0.0], &h).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            frame_classifier_forward(&[1.0], &h),
            Err(FusionError::FrameDim { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn sequence_prediction_averages_frames() {
        let h = head(&[vec![50.0, 0.0], vec![0.0, 50.0]]);
        let seq =
            MultimodalSequence::new("s", 0).with("m", Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = nontemporal_sequence_predict(&seq, &h).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);

        let one = MultimodalSequence::new("s", 0).with("m", Matrix::from_rows(&[vec![0.3, -0.1]]).unwrap());
        assert_eq!(
            nontemporal_sequence_predict(&one, &h).unwrap(),
            frame_classifier_forward(&[0.3, -0.1], &h).unwrap()
        );

        let empty = MultimodalSequence::new("e", 0).with("m", Matrix::zeros(0, 2));
        assert!(matches!(
            nontemporal_sequence_predict(&empty, &h),
            Err(FusionError::EmptySequence)
        ));
    }

    #[test]
    fn frame_order_does_not_matter() {
        let h = head(&[vec![0.3, -1.0], vec![0.7, 0.2], vec![-0.4, 0.9]]);
        let rows = vec![vec![0.1, 0.2], vec![-1.0, 0.5], vec![2.0, -0.3]];
        let a = MultimodalSequence::new("a", 0).with("m", Matrix::from_rows(&rows).unwrap());
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let b = MultimodalSequence::new("b", 0).with("m", Matrix::from_rows(&rev).unwrap());
        let sa = nontemporal_sequence_predict(&a, &h).unwrap();
        let sb = nontemporal_sequence_predict(&b, &h).unwrap();
        for (x, y) in sa.as_slice().iter().zip(sb.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_head_gradcheck() {
        let mut rng = SeededRng::new(31);
        let mut h = FrameHeadParams::init(&ModalitySpec::new("m", 3), 4, Some(&mut rng)).unwrap();
        for t in h.tensors_mut() {
            t.value
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-1.0, 1.0));
        }
        let frames = Matrix::from_vec(5, 3, (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let seq = MultimodalSequence::new("s", 2).with("m", frames);
        let (_, cache) = h.forward(&seq).unwrap();
        h.backward(&cache, 2).unwrap();

        let loss = |h: &FrameHeadParams| {
            let (_, c) = h.forward(&seq).unwrap();
            h.frame_loss(&c, 2).unwrap()
        };
        let eps = 1e-5;
        for ti in 0..2 {
            for k in 0..h.tensors()[ti].value.len() {
                let mut plus = h.clone();
                plus.tensors_mut()[ti].value.as_mut_slice()[k] += eps;
                let mut minus = h.clone();
                minus.tensors_mut()[ti].value.as_mut_slice()[k] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let a = h.tensors()[ti].grad.as_slice()[k];
                assert!((a - fd).abs() / fd.abs().max(1.0) < 1e-6);
            }
        }
    }
}
