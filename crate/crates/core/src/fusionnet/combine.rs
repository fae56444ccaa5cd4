use crate::numerics::ScoreVector;

use super::FusionError;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Weighted average of per-modality score vectors (late fusion).
pub fn late_fusion_scores(per_modality: &[ScoreVector], weights: &[f64]) -> Result<ScoreVector, FusionError> {
    weighted_average(per_modality, weights)
}

/// Weighted average of the component score vectors. The predicted label is
/// [`ScoreVector::argmax`] of the result.
pub fn combine_components(components: &[ScoreVector], weights: &[f64]) -> Result<ScoreVector, FusionError> {
    weighted_average(components, weights)
}

/// Computes `s_p + Σ_{j≠p} w_j (s_j − s_p)` with `p` the heaviest
/// component, so that a vertex weight returns its component exactly and
/// identical inputs are a fixed point.
fn weighted_average(scores: &[ScoreVector], weights: &[f64]) -> Result<ScoreVector, FusionError> {
    if scores.len() != weights.len() || scores.is_empty() {
        return Err(FusionError::CountMismatch {
            scores: scores.len(),
            weights: weights.len(),
        });
    }
    let classes = scores[0].len();
    if let Some(bad) = scores.iter().find(|s| s.len() != classes) {
        return Err(FusionError::ClassCountMismatch {
            expected: classes,
            actual: bad.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(FusionError::NotSimplex(weights.to_vec()));
    }

    let pivot = crate::numerics::argmax(weights);
    let base = scores[pivot].as_slice();
    let mut out = base.to_vec();
    for (j, (s, &w)) in scores.iter().zip(weights).enumerate() {
        if j == pivot || w == 0.0 {
            continue;
        }
        for (o, (&v, &b)) in out.iter_mut().zip(s.as_slice().iter().zip(base)) {
            *o += w * (v - b);
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(ScoreVector::from_raw(out))
}
