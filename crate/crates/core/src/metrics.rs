//! Evaluation protocols: classification accuracy, (mean) average precision
//! over score-ranked sequences, and normalized edit distance between
//! decoded label streams.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no items to evaluate")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("average precision undefined: no relevant items")]
    NoRelevant,
    #[error("mean average precision undefined: no class has a relevant item")]
    AllUndefined,
    #[error("normalized edit distance undefined: reference streams contain no labels")]
    NoReference,
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Non-interpolated average precision.
///
/// Items are ranked by descending score; equal scores keep ascending index
/// order, so callers pass items sorted by sequence id to get the
/// id-based tie-break. AP is the mean of precision@k over the ranks `k` of
/// the relevant items.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != relevant.len() {
        return Err(MetricError::LengthMismatch(scores.len(), relevant.len()));
    }
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(MetricError::NoRelevant);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Arithmetic mean over the classes whose AP is defined.
pub fn mean_average_precision(per_class: &[Option<f64>]) -> Result<f64, MetricError> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricError::AllUndefined);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// mAP of a score table: `scores[i][k]` is the confidence that item `i`
/// (in ascending-id order) belongs to class `k`.
pub fn map_from_scores(scores: &[&[f64]], labels: &[usize], classes: usize) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let column: Vec<f64> = scores.iter().map(|s| s[k]).collect();
            let relevant: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            average_precision(&column, &relevant).ok()
        })
        .collect();
    mean_average_precision(&per_class)
}

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(x != y);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `Σ levenshtein(pred_i, truth_i) / Σ |truth_i|`.
pub fn normalized_edit_score(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), truth.len()));
    }
    let total: usize = truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(MetricError::NoReference);
    }
    let distance: usize = predicted.iter().zip(truth).map(|(p, t)| levenshtein(p, t)).sum();
    Ok(distance as f64 / total as f64)
}

/// Turns a per-step label stream into an ordered label sequence.
///
/// Consecutive duplicates collapse into runs; runs shorter than `min_run`
/// and runs of `null_id` are dropped; neighbours left equal by a drop are
/// merged.
pub fn collapse_decode(per_step: &[usize], null_id: Option<usize>, min_run: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < per_step.len() {
        let symbol = per_step[i];
        let mut j = i;
        while j < per_step.len() && per_step[j] == symbol {
            j += 1;
        }
        if j - i >= min_run && Some(symbol) != null_id && out.last() != Some(&symbol) {
            out.push(symbol);
        }
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        let ap = average_precision(&[0.4, 0.3, 0.2, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
        assert_eq!(
            average_precision(&[0.3, 0.2], &[false, false]),
            Err(MetricError::NoRelevant)
        );
    }

    #[test]
    fn ties_rank_by_index() {
        // Equal scores: item 0 ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_average_precision(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(mean_average_precision(&[Some(0.3)]).unwrap(), 0.3);
        let m = mean_average_precision(&[Some(0.833333), Some(1.0), Some(0.5)]).unwrap();
        assert!((m - 0.777778).abs() < 1e-6);
        assert_eq!(mean_average_precision(&[Some(1.0), None]).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[None, None]), Err(MetricError::AllUndefined));
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<usize>(&[], &[4, 5]), 2);
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&kitten, &sitting), 3);
    }

    #[test]
    fn normalized_edit_examples() {
        let s = vec![vec![1, 2, 3], vec![4]];
        assert_eq!(normalized_edit_score(&s, &s).unwrap(), 0.0);
        let truth = vec![(0..10).collect::<Vec<_>>()];
        let mut pred = truth.clone();
        pred[0][4] = 99;
        assert_eq!(normalized_edit_score(&pred, &truth).unwrap(), 0.1);
        assert_eq!(
            normalized_edit_score(&[vec![]], &[vec![]]),
            Err(MetricError::NoReference)
        );
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_decode(&[1, 1, 1, 2, 2, 0, 0, 3], Some(0), 1), vec![1, 2, 3]);
        assert_eq!(collapse_decode(&[5, 5, 5], None, 1), vec![5]);
        assert!(collapse_decode(&[1, 2, 1], None, 2).is_empty());
        assert_eq!(collapse_decode(&[1, 1, 2, 1, 1], None, 2), vec![1]);
    }

    // Full-matrix DP used as an independent oracle.
    fn oracle(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    fn short_seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..8)
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, oracle(&a, &b));
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }

        #[test]
        fn ap_invariant_under_monotone_maps(
            scores in prop::collection::vec(-5.0f64..5.0, 1..12),
            rel in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mut relevant = rel[..scores.len()].to_vec();
            relevant[0] = true;
            let a = average_precision(&scores, &relevant).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
            let b = average_precision(&mapped, &relevant).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn edit_score_zero_iff_exact(streams in prop::collection::vec(prop::collection::vec(0usize..3, 1..5), 1..4), flip in any::<bool>()) {
            let mut pred = streams.clone();
            if flip {
                pred[0].push(7);
            }
            let s = normalized_edit_score(&pred, &streams).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s == 0.0, !flip);
        }

        #[test]
        fn collapse_is_idempotent(stream in prop::collection::vec(0usize..4, 0..20), min_run in 1usize..3, null in prop::option::of(0usize..4)) {
            let once = collapse_decode(&stream, null, min_run);
            let rendered: Vec<usize> = once.iter().flat_map(|&s| std::iter::repeat_n(s, min_run)).collect();
            prop_assert_eq!(collapse_decode(&rendered, null, min_run), once);
        }
    }
}
