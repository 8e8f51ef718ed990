use super::loss::{TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Class chosen from bag probabilities: threshold 0.5 for one probability,
/// arg-max (lowest index on ties) otherwise.
pub fn predicted_class(probs: &[f64]) -> usize {
    if probs.len() == 1 {
        return usize::from(probs[0] > 0.5);
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of bags whose predicted class equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| predicted_class(p) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary AUROC via the Mann-Whitney statistic; tied scores count one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in AUROC".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep the sum integral: mid-rank of a tie group is (lo + hi)
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let p = n_pos as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// AUROC for a task: binary uses the positive-class probability; multiclass
/// is the macro average of one-vs-rest AUROC over classes that occur with at
/// least one negative.
pub fn auroc_for_task(probs: &[Vec<f64>], labels: &[usize], task: &TaskSpec) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    match task.kind {
        TaskKind::SubtypeBinary => {
            let scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            auroc(&scores, &pos)
        }
        TaskKind::Multiclass => {
            let mut total = 0.0;
            let mut used = 0;
            for c in 0..task.num_classes {
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                match auroc(&scores, &pos) {
                    Ok(a) => {
                        total += a;
                        used += 1;
                    }
                    Err(Error::UndefinedAuroc(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                return Err(Error::UndefinedAuroc("only one class present".into()));
            }
            Ok(total / used as f64)
        }
    }
}
