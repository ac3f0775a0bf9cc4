use std::collections::BTreeMap;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology};
use crate::network::{FeatureExtractor, ModelState};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Computed from average ranks (Mann-Whitney U). The rank sum of the
/// positives is a multiple of 1/2, so the result equals exhaustive pair
/// counting exactly.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum keeps everything integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, average (i + 1 + j) / 2
        let twice_avg = (i + 1 + j) as u64;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_tie;
        i = j;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// AUC of each target-domain label over target samples with known labels.
/// Labels with a single class present map to `None`.
pub fn per_label_auc<E: FeatureExtractor>(
    model: &ModelState<E>,
    samples: &[Sample],
    topology: &LabelTopology,
) -> Result<BTreeMap<String, Option<f64>>> {
    let eval: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.domain == Domain::Target && s.evaluation_labels().is_some())
        .collect();
    if eval.is_empty() {
        return Err(Error::invalid("evaluation set has no labeled target samples"));
    }
    let mut scores = Vec::with_capacity(eval.len());
    for s in &eval {
        let h = model.forward_features(&s.image)?;
        scores.push(model.classify(&h)?);
    }
    per_label_auc_from_scores(&scores, &eval, topology)
}

fn per_label_auc_from_scores(
    scores: &[Vec<f64>],
    samples: &[&Sample],
    topology: &LabelTopology,
) -> Result<BTreeMap<String, Option<f64>>> {
    let mut out = BTreeMap::new();
    for name in topology.target_labels() {
        let l = topology.index_of(name).expect("target label is in the unified index");
        let s: Vec<f64> = scores.iter().map(|y| y[l]).collect();
        let y: Vec<bool> = samples
            .iter()
            .map(|x| x.evaluation_labels().expect("filtered").values()[l])
            .collect();
        let auc = match auc_roc(&s, &y) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc { .. }) => None,
            Err(e) => return Err(e),
        };
        out.insert(name.clone(), auc);
    }
    Ok(out)
}

/// Mean over the defined entries.
pub fn mean_auc(aucs: &BTreeMap<String, Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = aucs.values().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let y = [true, true, false, false];
        assert_eq!(auc_roc(&s, &y).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 4], &y).unwrap(), 0.5);
        let s = [0.9, 0.4, 0.8, 0.3];
        assert_eq!(auc_roc(&s, &y).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedAuc { positives: 2, negatives: 0 })
        ));
        assert!(matches!(auc_roc(&[0.1], &[false]), Err(Error::UndefinedAuc { .. })));
        assert!(auc_roc(&[0.1], &[false, true]).is_err());
    }

    #[test]
    fn strictly_increasing_transform_invariance() {
        let s = [0.1, 0.5, 0.5, 0.7, 0.2, 0.9, 0.3];
        let y = [false, true, false, true, false, true, true];
        let a = auc_roc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (5.0 * v).exp() - 3.0).collect();
        assert_eq!(a, auc_roc(&t, &y).unwrap());
    }
}
