use super::BenchError;

fn class_counts(labels: &[f64], scores: &[f64]) -> Result<(usize, usize), BenchError> {
    if labels.len() != scores.len() {
        return Err(BenchError::Shape(format!(
            "{} labels, {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(BenchError::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by score ascending, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability a
/// random positive outscores a random negative, ties counting one half.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64, BenchError> {
    let (pos, neg) = class_counts(labels, scores)?;
    let mut negatives_below = 0usize;
    let mut wins = 0.0;
    for group in tie_groups(scores) {
        let p = group.iter().filter(|&&i| labels[i] == 1.0).count();
        let n = group.len() - p;
        wins += p as f64 * (negatives_below as f64 + 0.5 * n as f64);
        negatives_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Kolmogorov-Smirnov separation in percent: 100 * max |TPR - FPR| over
/// thresholds placed between distinct scores.
pub fn ks(labels: &[f64], scores: &[f64]) -> Result<f64, BenchError> {
    let (pos, neg) = class_counts(labels, scores)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for group in tie_groups(scores).into_iter().rev() {
        for &i in &group {
            if labels[i] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        best = best.max((tp as f64 / pos as f64 - fp as f64 / neg as f64).abs());
    }
    Ok(100.0 * best)
}
