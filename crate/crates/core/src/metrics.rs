//! Performance metrics shared by the unwrapper, merging and model comparison.

use std::cmp::Ordering;

/// Mean squared error. Zero for empty input.
pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), y.len());
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks
/// for tied scores. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum_pos += midrank * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
