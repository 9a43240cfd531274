//! Exact mutual-information oracle over tabulated discrete distributions.
//!
//! Everything here is a finite double sum, so the identities the training
//! objective relies on can be certified numerically: zero MI iff independence,
//! the three-term variational decomposition summing back to brute-force MI
//! for any valid conditional table, and MI monotonicity under projecting a
//! joint sensitive attribute onto a subset.
//!
//! All information quantities are in nats.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("probability table must not be empty")]
    EmptyTable,

    #[error("expected {expected} probabilities for shape {shape:?}, got {actual}")]
    WrongLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("negative probability {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },

    #[error("probabilities sum to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),

    #[error("conditional table has {rows} rows x {cols} cols, joint is {a} x {b}")]
    ConditionalShape {
        rows: usize,
        cols: usize,
        a: usize,
        b: usize,
    },

    #[error("conditional row {row} sums to {sum}, expected 1 within 1e-9")]
    ConditionalNotNormalized { row: usize, sum: f64 },

    #[error("q({b}|{a}) = 0 where the joint mass is positive")]
    ZeroWherePositive { a: usize, b: usize },

    #[error("empirical joint needs at least one sample")]
    NoSamples,
}

const MASS_TOL: f64 = 1e-12;

/// Joint probability table over (outcome, group), row-major `a * b`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    outcomes: usize,
    groups: usize,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(outcomes: usize, groups: usize, probs: Vec<f64>) -> Result<Self, OracleError> {
        if outcomes == 0 || groups == 0 {
            return Err(OracleError::EmptyTable);
        }
        if probs.len() != outcomes * groups {
            return Err(OracleError::WrongLength {
                shape: vec![outcomes, groups],
                expected: outcomes * groups,
                actual: probs.len(),
            });
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if p < 0.0 {
                return Err(OracleError::NegativeMass { index: i, value: p });
            }
            total += p;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(OracleError::NotNormalized(total));
        }
        Ok(Self {
            outcomes,
            groups,
            probs,
        })
    }

    /// Normalize arbitrary nonnegative weights into a joint.
    pub fn from_weights(
        outcomes: usize,
        groups: usize,
        weights: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(OracleError::NotNormalized(total));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Self::new(outcomes, groups, probs)
    }

    pub fn outcomes(&self) -> usize {
        self.outcomes
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.groups + b]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn outcome_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.outcomes];
        for a in 0..self.outcomes {
            for b in 0..self.groups {
                m[a] += self.prob(a, b);
            }
        }
        m
    }

    pub fn group_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.groups];
        for a in 0..self.outcomes {
            for b in 0..self.groups {
                m[b] += self.prob(a, b);
            }
        }
        m
    }

    pub fn transposed(&self) -> Self {
        let mut probs = vec![0.0; self.probs.len()];
        for a in 0..self.outcomes {
            for b in 0..self.groups {
                probs[b * self.outcomes + a] = self.prob(a, b);
            }
        }
        Self {
            outcomes: self.groups,
            groups: self.outcomes,
            probs,
        }
    }

    /// Draw a random joint with the given shape; entries are uniform weights.
    pub fn random<R: Rng>(outcomes: usize, groups: usize, rng: &mut R) -> Self {
        let weights: Vec<f64> = (0..outcomes * groups).map(|_| rng.gen::<f64>()).collect();
        Self::from_weights(outcomes, groups, weights).expect("positive weights normalize")
    }
}

fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Brute-force mutual information: sum of `p(a,b) ln(p(a,b)/(p(a)p(b)))`
/// with zero-mass terms dropped.
pub fn brute_mi(joint: &DiscreteJoint) -> f64 {
    let pa = joint.outcome_marginal();
    let pb = joint.group_marginal();
    let mut mi = 0.0;
    for a in 0..joint.outcomes() {
        for b in 0..joint.groups() {
            let p = joint.prob(a, b);
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi
}

/// The three-term split of mutual information through a variational
/// conditional `q(group | outcome)`, plus its sum.
#[derive(Debug, Clone, Copy)]
pub struct Decomposition {
    /// Entropy of the group marginal.
    pub group_entropy: f64,
    /// Expected log-likelihood the conditional assigns to the true pairs.
    pub log_likelihood: f64,
    /// Expected log density ratio between the true joint and the
    /// conditional-induced joint.
    pub density_ratio: f64,
    /// Sum of the three; equals [`brute_mi`] for every valid conditional.
    pub total: f64,
}

/// Evaluate the decomposition for a conditional table `q[a][b] = q(b|a)`.
/// Rows must be probability vectors, positive wherever the joint has mass.
pub fn variational_decomposition(
    joint: &DiscreteJoint,
    conditional: &[Vec<f64>],
) -> Result<Decomposition, OracleError> {
    let (a_card, b_card) = (joint.outcomes(), joint.groups());
    if conditional.len() != a_card || conditional.iter().any(|row| row.len() != b_card) {
        return Err(OracleError::ConditionalShape {
            rows: conditional.len(),
            cols: conditional.first().map_or(0, Vec::len),
            a: a_card,
            b: b_card,
        });
    }
    for (row, q_row) in conditional.iter().enumerate() {
        let sum: f64 = q_row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || q_row.iter().any(|&q| q < 0.0) {
            return Err(OracleError::ConditionalNotNormalized { row, sum });
        }
    }
    for a in 0..a_card {
        for b in 0..b_card {
            if joint.prob(a, b) > 0.0 && conditional[a][b] <= 0.0 {
                return Err(OracleError::ZeroWherePositive { a, b });
            }
        }
    }

    let pa = joint.outcome_marginal();
    let group_entropy = entropy(&joint.group_marginal());
    let mut log_likelihood = 0.0;
    let mut density_ratio = 0.0;
    for a in 0..a_card {
        for b in 0..b_card {
            let p = joint.prob(a, b);
            if p > 0.0 {
                let q = conditional[a][b];
                log_likelihood += p * q.ln();
                density_ratio += p * (p / (pa[a] * q)).ln();
            }
        }
    }
    Ok(Decomposition {
        group_entropy,
        log_likelihood,
        density_ratio,
        total: group_entropy + log_likelihood + density_ratio,
    })
}

/// Three-way joint over (outcome, first group attribute, second group
/// attribute), row-major `a * b1 * b2`.
#[derive(Debug, Clone)]
pub struct ThreeWayJoint {
    outcomes: usize,
    first: usize,
    second: usize,
    probs: Vec<f64>,
}

impl ThreeWayJoint {
    pub fn new(
        outcomes: usize,
        first: usize,
        second: usize,
        probs: Vec<f64>,
    ) -> Result<Self, OracleError> {
        if outcomes == 0 || first == 0 || second == 0 {
            return Err(OracleError::EmptyTable);
        }
        if probs.len() != outcomes * first * second {
            return Err(OracleError::WrongLength {
                shape: vec![outcomes, first, second],
                expected: outcomes * first * second,
                actual: probs.len(),
            });
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if p < 0.0 {
                return Err(OracleError::NegativeMass { index: i, value: p });
            }
            total += p;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(OracleError::NotNormalized(total));
        }
        Ok(Self {
            outcomes,
            first,
            second,
            probs,
        })
    }

    pub fn from_weights(
        outcomes: usize,
        first: usize,
        second: usize,
        weights: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(OracleError::NotNormalized(total));
        }
        Self::new(
            outcomes,
            first,
            second,
            weights.iter().map(|w| w / total).collect(),
        )
    }

    pub fn random<R: Rng>(outcomes: usize, first: usize, second: usize, rng: &mut R) -> Self {
        let weights: Vec<f64> = (0..outcomes * first * second)
            .map(|_| rng.gen::<f64>())
            .collect();
        Self::from_weights(outcomes, first, second, weights).expect("positive weights normalize")
    }

    fn prob(&self, a: usize, b1: usize, b2: usize) -> f64 {
        self.probs[(a * self.first + b1) * self.second + b2]
    }

    /// Collapse onto (outcome, first attribute).
    pub fn project_first(&self) -> DiscreteJoint {
        let mut probs = vec![0.0; self.outcomes * self.first];
        for a in 0..self.outcomes {
            for b1 in 0..self.first {
                for b2 in 0..self.second {
                    probs[a * self.first + b1] += self.prob(a, b1, b2);
                }
            }
        }
        DiscreteJoint {
            outcomes: self.outcomes,
            groups: self.first,
            probs,
        }
    }

    /// Collapse onto (outcome, second attribute).
    pub fn project_second(&self) -> DiscreteJoint {
        let mut probs = vec![0.0; self.outcomes * self.second];
        for a in 0..self.outcomes {
            for b1 in 0..self.first {
                for b2 in 0..self.second {
                    probs[a * self.second + b2] += self.prob(a, b1, b2);
                }
            }
        }
        DiscreteJoint {
            outcomes: self.outcomes,
            groups: self.second,
            probs,
        }
    }

    /// Flatten the two group attributes into their product, preserving mass.
    pub fn flatten_groups(&self) -> DiscreteJoint {
        DiscreteJoint {
            outcomes: self.outcomes,
            groups: self.first * self.second,
            probs: self.probs.clone(),
        }
    }
}

/// MI of each single-attribute projection against MI of the flattened pair.
#[derive(Debug, Clone, Copy)]
pub struct SubsetMiWitness {
    pub mi_first: f64,
    pub mi_second: f64,
    pub mi_joint: f64,
    /// True when both projections are bounded by the joint MI (+1e-12).
    pub monotone: bool,
}

/// Check that projecting the sensitive pair onto either attribute can only
/// lose information about the outcome.
pub fn subset_mi_monotone(joint: &ThreeWayJoint) -> SubsetMiWitness {
    let mi_first = brute_mi(&joint.project_first());
    let mi_second = brute_mi(&joint.project_second());
    let mi_joint = brute_mi(&joint.flatten_groups());
    SubsetMiWitness {
        mi_first,
        mi_second,
        mi_joint,
        monotone: mi_first <= mi_joint + MASS_TOL && mi_second <= mi_joint + MASS_TOL,
    }
}

/// Normalized count table over observed (prediction, group) pairs.
pub fn empirical_joint(
    predictions: &[usize],
    groups: &[usize],
) -> Result<DiscreteJoint, OracleError> {
    if predictions.len() != groups.len() {
        return Err(OracleError::WrongLength {
            shape: vec![predictions.len()],
            expected: predictions.len(),
            actual: groups.len(),
        });
    }
    if predictions.is_empty() {
        return Err(OracleError::NoSamples);
    }
    let outcomes = predictions.iter().max().unwrap() + 1;
    let group_card = groups.iter().max().unwrap() + 1;
    let mut weights = vec![0.0; outcomes * group_card];
    for (&p, &g) in predictions.iter().zip(groups) {
        weights[p * group_card + g] += 1.0;
    }
    DiscreteJoint::from_weights(outcomes, group_card, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::assert_close;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn product_joint(pa: &[f64], pb: &[f64]) -> DiscreteJoint {
        let mut probs = Vec::with_capacity(pa.len() * pb.len());
        for &a in pa {
            for &b in pb {
                probs.push(a * b);
            }
        }
        DiscreteJoint::new(pa.len(), pb.len(), probs).unwrap()
    }

    #[test]
    fn independent_joint_has_zero_mi() {
        let joint = product_joint(&[0.3, 0.7], &[0.2, 0.5, 0.3]);
        assert!(brute_mi(&joint).abs() < 1e-12);
    }

    #[test]
    fn perfectly_correlated_binary_joint_is_ln2() {
        let joint = DiscreteJoint::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_close(brute_mi(&joint), 2.0f64.ln(), 1e-15);
    }

    #[test]
    fn mi_is_symmetric_under_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let joint = DiscreteJoint::random(3, 5, &mut rng);
            assert_close(brute_mi(&joint), brute_mi(&joint.transposed()), 1e-12);
        }
    }

    #[test]
    fn mass_validation_rejects_bad_tables() {
        assert!(matches!(
            DiscreteJoint::new(1, 2, vec![0.6, 0.6]),
            Err(OracleError::NotNormalized(_))
        ));
        assert!(matches!(
            DiscreteJoint::new(1, 2, vec![-0.2, 1.2]),
            Err(OracleError::NegativeMass { .. })
        ));
        assert!(matches!(
            DiscreteJoint::new(0, 2, vec![]),
            Err(OracleError::EmptyTable)
        ));
    }

    #[test]
    fn true_conditional_makes_ratio_vanish() {
        let joint = DiscreteJoint::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let pa = joint.outcome_marginal();
        let q: Vec<Vec<f64>> = (0..2)
            .map(|a| (0..2).map(|b| joint.prob(a, b) / pa[a]).collect())
            .collect();
        let d = variational_decomposition(&joint, &q).unwrap();
        assert_close(d.density_ratio, 0.0, 1e-12);
        assert_close(d.total, brute_mi(&joint), 1e-12);
    }

    #[test]
    fn independent_joint_with_marginal_conditional() {
        // q = group marginal: both the ratio and the total collapse to zero
        // and the log-likelihood term is exactly -H(group).
        let joint = product_joint(&[0.6, 0.4], &[0.25, 0.75]);
        let pb = joint.group_marginal();
        let q = vec![pb.clone(), pb.clone()];
        let d = variational_decomposition(&joint, &q).unwrap();
        assert_close(d.density_ratio, 0.0, 1e-12);
        assert_close(d.total, 0.0, 1e-12);
        assert_close(d.log_likelihood, -d.group_entropy, 1e-12);
    }

    #[test]
    fn decomposition_rejects_zero_where_positive() {
        let joint = DiscreteJoint::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let q = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert!(matches!(
            variational_decomposition(&joint, &q),
            Err(OracleError::ZeroWherePositive { a: 0, b: 1 })
        ));
    }

    #[test]
    fn decomposition_matches_brute_mi_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = rng.gen_range(1..=4);
            let b = rng.gen_range(1..=6);
            let joint = DiscreteJoint::random(a, b, &mut rng);
            let q: Vec<Vec<f64>> = (0..a)
                .map(|_| {
                    let w: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let s: f64 = w.iter().sum();
                    w.iter().map(|v| v / s).collect()
                })
                .collect();
            let d = variational_decomposition(&joint, &q).unwrap();
            worst = worst.max((d.total - brute_mi(&joint)).abs());
        }
        assert!(worst < 1e-10, "worst residual {worst}");
    }

    #[test]
    fn three_way_independent_product_has_zero_mis() {
        let (pa, pb1, pb2) = ([0.5, 0.5], [0.3, 0.7], [0.2, 0.3, 0.5]);
        let mut probs = Vec::new();
        for &a in &pa {
            for &b1 in &pb1 {
                for &b2 in &pb2 {
                    probs.push(a * b1 * b2);
                }
            }
        }
        let joint = ThreeWayJoint::new(2, 2, 3, probs).unwrap();
        let w = subset_mi_monotone(&joint);
        assert!(w.mi_first.abs() < 1e-12);
        assert!(w.mi_second.abs() < 1e-12);
        assert!(w.mi_joint.abs() < 1e-12);
        assert!(w.monotone);
    }

    #[test]
    fn deterministic_first_attribute_carries_all_information() {
        // outcome == first attribute (uniform binary), second independent.
        let pb2 = [0.4, 0.6];
        let mut probs = vec![0.0; 2 * 2 * 2];
        for a in 0..2 {
            for (b2, &p2) in pb2.iter().enumerate() {
                probs[(a * 2 + a) * 2 + b2] = 0.5 * p2;
            }
        }
        let joint = ThreeWayJoint::new(2, 2, 2, probs).unwrap();
        let w = subset_mi_monotone(&joint);
        let h_outcome = 2.0f64.ln();
        assert_close(w.mi_first, h_outcome, 1e-12);
        assert_close(w.mi_joint, h_outcome, 1e-12);
        assert_close(w.mi_second, 0.0, 1e-12);
        assert!(w.monotone);
    }

    #[test]
    fn monotone_on_random_three_way_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = rng.gen_range(1..=3);
            let b1 = rng.gen_range(1..=3);
            let b2 = rng.gen_range(1..=3);
            let joint = ThreeWayJoint::random(a, b1, b2, &mut rng);
            assert!(subset_mi_monotone(&joint).monotone);
        }
    }

    #[test]
    fn empirical_joint_independence_and_bias() {
        // Per-group prediction distributions exactly proportional: MI 0.
        let pred = vec![0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0];
        let grp = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let joint = empirical_joint(&pred, &grp).unwrap();
        assert!(brute_mi(&joint).abs() < 1e-12);

        // Single sample: zero MI.
        let joint = empirical_joint(&[0], &[0]).unwrap();
        assert!(brute_mi(&joint).abs() < 1e-12);

        // Hand-built biased set: group 0 accepts 3/4, group 1 accepts 1/4.
        let pred = vec![1, 1, 1, 0, 1, 0, 0, 0];
        let grp = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let joint = empirical_joint(&pred, &grp).unwrap();
        assert!(brute_mi(&joint) > 0.0);
        let imp = crate::metrics::imparity(&pred, &grp, 2, 2).unwrap();
        assert!(imp > 0.0);
    }

    proptest! {
        // The decomposition identity holds for arbitrary valid (joint, q).
        #[test]
        fn decomposition_identity_property(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rng.gen_range(1..=4);
            let b = rng.gen_range(1..=6);
            let joint = DiscreteJoint::random(a, b, &mut rng);
            let q: Vec<Vec<f64>> = (0..a).map(|_| {
                let w: Vec<f64> = (0..b).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            }).collect();
            let d = variational_decomposition(&joint, &q).unwrap();
            prop_assert!((d.total - brute_mi(&joint)).abs() < 1e-10);
        }

        // MI of a random joint is nonnegative.
        #[test]
        fn mi_nonnegative_property(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let joint = DiscreteJoint::random(rng.gen_range(1..=5), rng.gen_range(1..=5), &mut rng);
            prop_assert!(brute_mi(&joint) >= -1e-12);
        }
    }
}
