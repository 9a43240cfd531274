//! Classification and group-fairness metrics.
//!
//! Imparity is the average absolute gap in class-conditional acceptance rates
//! over every unordered pair of demographic groups; reduction compares it
//! against a reference run trained without the fairness term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/label length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("imparity needs at least 2 groups, got {0}")]
    TooFewGroups(usize),

    #[error("demographic group {0} has no samples; metrics over it are undefined")]
    EmptyGroup(usize),

    #[error("group {0} has no positive samples; true-positive rate undefined")]
    NoPositives(usize),

    #[error("reduction undefined: reference imparity must be > 0")]
    ZeroReferenceImparity,

    #[error("label {label} out of range for {bound} {kind}")]
    OutOfRange {
        label: usize,
        bound: usize,
        kind: &'static str,
    },
}

/// Metrics for one evaluated model on one group partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub imparity: f64,
    /// `1 - imparity / reference`, present when a reference run is known.
    pub reduction: Option<f64>,
    /// Reference (no-fairness-term) imparity the reduction was computed from.
    pub reference_imparity: Option<f64>,
    /// `acceptance_rates[group][class]` = Pr(prediction = class | group).
    pub acceptance_rates: Vec<Vec<f64>>,
}

fn check_range(
    values: &[usize],
    bound: usize,
    kind: &'static str,
) -> Result<(), MetricsError> {
    for &v in values {
        if v >= bound {
            return Err(MetricsError::OutOfRange {
                label: v,
                bound,
                kind,
            });
        }
    }
    Ok(())
}

/// Micro and macro F1. Micro counts globally; macro averages per-class F1,
/// with empty-denominator classes scored 0.
pub fn micro_macro_f1(
    predictions: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<(f64, f64), MetricsError> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), truth.len()));
    }
    check_range(predictions, classes, "classes")?;
    check_range(truth, classes, "classes")?;

    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }

    let (tp_sum, fp_sum, fn_sum) = (
        tp.iter().sum::<usize>() as f64,
        fp.iter().sum::<usize>() as f64,
        fn_.iter().sum::<usize>() as f64,
    );
    let micro_denom = 2.0 * tp_sum + fp_sum + fn_sum;
    let micro = if micro_denom > 0.0 {
        2.0 * tp_sum / micro_denom
    } else {
        0.0
    };

    let macro_ = (0..classes)
        .map(|c| {
            let denom = 2.0 * tp[c] as f64 + fp[c] as f64 + fn_[c] as f64;
            if denom > 0.0 {
                2.0 * tp[c] as f64 / denom
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / classes as f64;

    Ok((micro, macro_))
}

/// `acceptance_rates[g][c]` = share of group `g` predicted as class `c`.
/// Errors if any group has no samples.
pub fn acceptance_rates(
    predictions: &[usize],
    groups: &[usize],
    classes: usize,
    group_count: usize,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if predictions.len() != groups.len() {
        return Err(MetricsError::LengthMismatch(
            predictions.len(),
            groups.len(),
        ));
    }
    check_range(predictions, classes, "classes")?;
    check_range(groups, group_count, "groups")?;

    let mut counts = vec![vec![0usize; classes]; group_count];
    let mut totals = vec![0usize; group_count];
    for (&p, &g) in predictions.iter().zip(groups) {
        counts[g][p] += 1;
        totals[g] += 1;
    }
    let mut rates = vec![vec![0.0; classes]; group_count];
    for g in 0..group_count {
        if totals[g] == 0 {
            return Err(MetricsError::EmptyGroup(g));
        }
        for c in 0..classes {
            rates[g][c] = counts[g][c] as f64 / totals[g] as f64;
        }
    }
    Ok(rates)
}

/// Average statistical imparity: mean over all class labels and unordered
/// group pairs of the absolute acceptance-rate gap.
pub fn imparity(
    predictions: &[usize],
    groups: &[usize],
    classes: usize,
    group_count: usize,
) -> Result<f64, MetricsError> {
    if group_count < 2 {
        return Err(MetricsError::TooFewGroups(group_count));
    }
    let rates = acceptance_rates(predictions, groups, classes, group_count)?;
    Ok(imparity_of_rates(&rates))
}

/// Imparity from a precomputed acceptance-rate table.
pub fn imparity_of_rates(rates: &[Vec<f64>]) -> f64 {
    let group_count = rates.len();
    let classes = rates[0].len();
    let mut total = 0.0;
    let mut terms = 0usize;
    for c in 0..classes {
        for g1 in 0..group_count {
            for g2 in (g1 + 1)..group_count {
                total += (rates[g1][c] - rates[g2][c]).abs();
                terms += 1;
            }
        }
    }
    total / terms as f64
}

/// Relative imparity decrease versus a reference: `1 - debiased/reference`.
/// Negative when the debiased outcome is more biased than the reference.
pub fn reduction(reference: f64, debiased: f64) -> Result<f64, MetricsError> {
    if reference <= 0.0 {
        return Err(MetricsError::ZeroReferenceImparity);
    }
    Ok(1.0 - debiased / reference)
}

/// Mean absolute pairwise gap in true-positive rates across groups, for
/// binary labels. Errors if any group has no positive samples.
pub fn eo_disparity(
    predictions: &[usize],
    groups: &[usize],
    truth: &[usize],
    group_count: usize,
) -> Result<f64, MetricsError> {
    if predictions.len() != groups.len() || predictions.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), groups.len()));
    }
    if group_count < 2 {
        return Err(MetricsError::TooFewGroups(group_count));
    }
    check_range(truth, 2, "binary labels")?;
    check_range(predictions, 2, "binary labels")?;
    check_range(groups, group_count, "groups")?;

    let mut positives = vec![0usize; group_count];
    let mut hits = vec![0usize; group_count];
    for i in 0..truth.len() {
        if truth[i] == 1 {
            positives[groups[i]] += 1;
            if predictions[i] == 1 {
                hits[groups[i]] += 1;
            }
        }
    }
    let mut tpr = vec![0.0; group_count];
    for g in 0..group_count {
        if positives[g] == 0 {
            return Err(MetricsError::NoPositives(g));
        }
        tpr[g] = hits[g] as f64 / positives[g] as f64;
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for g1 in 0..group_count {
        for g2 in (g1 + 1)..group_count {
            total += (tpr[g1] - tpr[g2]).abs();
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::assert_close;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let y = vec![0, 1, 2, 1, 0];
        let (micro, macro_) = micro_macro_f1(&y, &y, 3).unwrap();
        assert_eq!((micro, macro_), (1.0, 1.0));
    }

    #[test]
    fn degenerate_binary_predictor_hand_case() {
        // All predicted class 0, truth half and half: micro 0.5,
        // macro (2/3 + 0)/2 = 1/3 from the confusion matrix.
        let pred = vec![0; 8];
        let truth = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let (micro, macro_) = micro_macro_f1(&pred, &truth, 2).unwrap();
        assert_close(micro, 0.5, 1e-15);
        assert_close(macro_, 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn f1_rejects_length_mismatch() {
        assert!(matches!(
            micro_macro_f1(&[0, 1], &[0], 2),
            Err(MetricsError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn identical_group_distributions_have_zero_imparity() {
        let pred = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let groups = vec![0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(imparity(&pred, &groups, 2, 2).unwrap(), 0.0);
    }

    #[test]
    fn imparity_hand_case_point_two() {
        // Group 0 accepts 8/10, group 1 accepts 6/10: both class terms gap 0.2.
        let mut pred = Vec::new();
        let mut groups = Vec::new();
        for i in 0..10 {
            pred.push(usize::from(i < 8));
            groups.push(0);
        }
        for i in 0..10 {
            pred.push(usize::from(i < 6));
            groups.push(1);
        }
        let imp = imparity(&pred, &groups, 2, 2).unwrap();
        assert_close(imp, 0.2, 1e-12);
    }

    #[test]
    fn imparity_rejects_empty_group_and_single_group() {
        let pred = vec![0, 1];
        let groups = vec![0, 0];
        assert!(matches!(
            imparity(&pred, &groups, 2, 2),
            Err(MetricsError::EmptyGroup(1))
        ));
        assert!(matches!(
            imparity(&pred, &groups, 2, 1),
            Err(MetricsError::TooFewGroups(1))
        ));
    }

    #[test]
    fn reduction_reference_points() {
        assert_eq!(reduction(0.25, 0.25).unwrap(), 0.0);
        assert_eq!(reduction(0.25, 0.0).unwrap(), 1.0);
        assert_close(reduction(0.066, 0.047).unwrap(), 1.0 - 0.047 / 0.066, 0.0);
        assert_close(reduction(0.066, 0.047).unwrap(), 0.2879, 1e-4);
        assert!(reduction(0.05, 0.08).unwrap() < 0.0);
        assert!(matches!(
            reduction(0.0, 0.1),
            Err(MetricsError::ZeroReferenceImparity)
        ));
    }

    #[test]
    fn eo_disparity_hand_cases() {
        // Equal TPRs.
        let truth = vec![1, 1, 1, 1];
        let pred = vec![1, 0, 1, 0];
        let groups = vec![0, 0, 1, 1];
        assert_eq!(eo_disparity(&pred, &groups, &truth, 2).unwrap(), 0.0);

        // TPR 1.0 vs 0.5.
        let truth = vec![1, 1, 1, 1];
        let pred = vec![1, 1, 1, 0];
        let groups = vec![0, 0, 1, 1];
        assert_close(eo_disparity(&pred, &groups, &truth, 2).unwrap(), 0.5, 1e-15);

        // No positives in group 1.
        let truth = vec![1, 1, 0, 0];
        let pred = vec![1, 1, 0, 0];
        let groups = vec![0, 0, 1, 1];
        assert!(matches!(
            eo_disparity(&pred, &groups, &truth, 2),
            Err(MetricsError::NoPositives(1))
        ));
    }

    #[test]
    fn eo_disparity_equals_imparity_on_positive_subset() {
        // For binary predictions the two class terms of imparity are equal,
        // so imparity restricted to y=1 rows equals the TPR-gap metric.
        let truth = vec![1, 1, 1, 0, 1, 1, 0, 1, 1, 1];
        let pred = vec![1, 0, 1, 1, 0, 1, 0, 1, 1, 0];
        let groups = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let eo = eo_disparity(&pred, &groups, &truth, 2).unwrap();

        let pos: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == 1).collect();
        let sub_pred: Vec<usize> = pos.iter().map(|&i| pred[i]).collect();
        let sub_groups: Vec<usize> = pos.iter().map(|&i| groups[i]).collect();
        let imp = imparity(&sub_pred, &sub_groups, 2, 2).unwrap();
        assert_close(eo, imp, 1e-15);
    }

    proptest! {
        // Imparity is invariant to relabeling groups and classes.
        #[test]
        fn imparity_is_permutation_invariant(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let classes = rng.gen_range(2..4usize);
            let group_count = rng.gen_range(2..4usize);
            let n = 60;
            let mut pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let mut groups: Vec<usize> = (0..n).map(|_| rng.gen_range(0..group_count)).collect();
            // Force every group nonempty.
            for g in 0..group_count { groups[g] = g; }

            let base = imparity(&pred, &groups, classes, group_count).unwrap();

            let mut class_perm: Vec<usize> = (0..classes).collect();
            class_perm.shuffle(&mut rng);
            let mut group_perm: Vec<usize> = (0..group_count).collect();
            group_perm.shuffle(&mut rng);
            for p in pred.iter_mut() { *p = class_perm[*p]; }
            for g in groups.iter_mut() { *g = group_perm[*g]; }

            let permuted = imparity(&pred, &groups, classes, group_count).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12);
        }
    }
}
