//! Accuracy, macro F1, and one-vs-rest macro AUC.

use log::warn;

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counted as one half. `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

/// Per-class F1 from predicted and true labels. A class with no predictions
/// and no instances scores 0.
pub fn per_class_f1(pred: &[usize], truth: &[usize], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fneg = 0usize;
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

/// `probs[i]` is the class distribution predicted for sample `i`.
pub fn classification_metrics(probs: &[Vec<f64>], truth: &[usize], classes: usize) -> ClassificationMetrics {
    assert_eq!(probs.len(), truth.len());
    let n = truth.len();
    let pred: Vec<usize> = probs.iter().map(|p| crate::heads::argmax(p)).collect();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };

    let f1 = per_class_f1(&pred, truth, classes);
    let macro_f1 = f1.iter().sum::<f64>() / classes as f64;

    let mut aucs = Vec::new();
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        match binary_auc(&scores, &pos) {
            Some(a) => aucs.push(a),
            None => warn!("class {c}: AUC undefined (split lacks positives or negatives), skipped"),
        }
    }
    let macro_auc = if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    ClassificationMetrics {
        accuracy,
        macro_f1,
        macro_auc,
    }
}
