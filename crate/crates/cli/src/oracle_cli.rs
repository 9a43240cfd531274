//! Oracle verification suites and the plain-text joint-table format.
//!
//! With no arguments, runs randomized checks of the identities the training
//! objective rests on and reports worst-case residuals. Given a joint table
//! (and optionally a conditional table), verifies that specific pair instead.
//!
//! Table format: a dimensions line `A B`, then A lines of B probabilities.

use anyhow::{bail, Context, Result};
use fairmi::oracle::{
    brute_mi, subset_mi_monotone, variational_decomposition, DiscreteJoint, ThreeWayJoint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} cases, worst residual {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst_residual,
            self.tolerance
        )
    }
}

/// Parse the `A B` + row-major probabilities text format.
pub fn parse_joint_table(text: &str) -> Result<DiscreteJoint> {
    let mut numbers = text.split_whitespace();
    let a: usize = numbers
        .next()
        .context("missing outcome dimension")?
        .parse()
        .context("outcome dimension must be an integer")?;
    let b: usize = numbers
        .next()
        .context("missing group dimension")?
        .parse()
        .context("group dimension must be an integer")?;
    let probs: Vec<f64> = numbers
        .map(|tok| tok.parse::<f64>().with_context(|| format!("bad number '{tok}'")))
        .collect::<Result<_>>()?;
    DiscreteJoint::new(a, b, probs).map_err(anyhow::Error::from)
}

/// Parse a conditional table with the same layout; row i holds q(.|a=i).
pub fn parse_conditional_table(text: &str) -> Result<Vec<Vec<f64>>> {
    let joint_like = parse_joint_table_unnormalized(text)?;
    Ok(joint_like)
}

fn parse_joint_table_unnormalized(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut numbers = text.split_whitespace();
    let a: usize = numbers
        .next()
        .context("missing outcome dimension")?
        .parse()
        .context("outcome dimension must be an integer")?;
    let b: usize = numbers
        .next()
        .context("missing group dimension")?
        .parse()
        .context("group dimension must be an integer")?;
    let values: Vec<f64> = numbers
        .map(|tok| tok.parse::<f64>().with_context(|| format!("bad number '{tok}'")))
        .collect::<Result<_>>()?;
    if values.len() != a * b {
        bail!("expected {} values for a {a}x{b} table, got {}", a * b, values.len());
    }
    Ok(values.chunks(b).map(<[f64]>::to_vec).collect())
}

fn random_conditional<R: Rng>(a: usize, b: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..a)
        .map(|_| {
            let raw: Vec<f64> = (0..b).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Decomposition identity on random (joint, conditional) pairs.
pub fn decomposition_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let a = rng.gen_range(1..=4);
        let b = rng.gen_range(1..=6);
        let joint = DiscreteJoint::random(a, b, &mut rng);
        let conditional = random_conditional(a, b, &mut rng);
        let d = variational_decomposition(&joint, &conditional)
            .expect("random conditionals are strictly positive");
        worst = worst.max((d.total - brute_mi(&joint)).abs());
    }
    let tolerance = 1e-10;
    SuiteResult {
        name: "variational decomposition equals brute-force MI",
        cases,
        worst_residual: worst,
        tolerance,
        passed: worst < tolerance,
    }
}

/// Projection monotonicity on random three-way joints.
pub fn monotonicity_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5173);
    let mut worst: f64 = 0.0;
    let mut all_monotone = true;
    for _ in 0..cases {
        let joint = ThreeWayJoint::random(
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            &mut rng,
        );
        let witness = subset_mi_monotone(&joint);
        all_monotone &= witness.monotone;
        let overshoot = (witness.mi_first - witness.mi_joint)
            .max(witness.mi_second - witness.mi_joint)
            .max(0.0);
        worst = worst.max(overshoot);
    }
    let tolerance = 1e-12;
    SuiteResult {
        name: "subset MI never exceeds joint MI",
        cases,
        worst_residual: worst,
        tolerance,
        passed: all_monotone,
    }
}

/// Zero MI on exact product joints.
pub fn independence_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfade);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let a = rng.gen_range(1..=5);
        let b = rng.gen_range(1..=5);
        let pa: Vec<f64> = {
            let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.05..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        };
        let pb: Vec<f64> = {
            let raw: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        };
        let mut probs = Vec::with_capacity(a * b);
        for &x in &pa {
            for &y in &pb {
                probs.push(x * y);
            }
        }
        // Tiny normalization drift from the products is repaired explicitly.
        let total: f64 = probs.iter().sum();
        let joint = DiscreteJoint::new(a, b, probs.iter().map(|p| p / total).collect())
            .expect("product table is a valid joint");
        worst = worst.max(brute_mi(&joint).abs());
    }
    let tolerance = 1e-12;
    SuiteResult {
        name: "independent joints have zero MI",
        cases,
        worst_residual: worst,
        tolerance,
        passed: worst < tolerance,
    }
}

/// Run all randomized suites; `Err` when any residual exceeds tolerance.
pub fn cmd_oracle(seed: u64, joint: Option<&Path>, conditional: Option<&Path>) -> Result<Vec<String>> {
    let mut lines = Vec::new();

    if let Some(joint_path) = joint {
        let joint_text = std::fs::read_to_string(joint_path)
            .with_context(|| format!("reading joint table {}", joint_path.display()))?;
        let joint = parse_joint_table(&joint_text)?;
        let mi = brute_mi(&joint);
        lines.push(format!(
            "joint {}x{}: mutual information {:.12} nats",
            joint.outcomes(),
            joint.groups(),
            mi
        ));
        if let Some(q_path) = conditional {
            let q_text = std::fs::read_to_string(q_path)
                .with_context(|| format!("reading conditional table {}", q_path.display()))?;
            let q = parse_conditional_table(&q_text)?;
            let d = variational_decomposition(&joint, &q)?;
            lines.push(format!(
                "decomposition: H(group) {:.12} + E[log q] {:.12} + ratio {:.12} = {:.12}",
                d.group_entropy, d.log_likelihood, d.density_ratio, d.total
            ));
            let residual = (d.total - mi).abs();
            lines.push(format!("residual vs brute-force MI: {residual:.3e}"));
            if residual >= 1e-10 {
                bail!("decomposition residual {residual:.3e} exceeds 1e-10");
            }
        }
        return Ok(lines);
    }

    let suites = [
        decomposition_suite(seed, 100),
        monotonicity_suite(seed, 100),
        independence_suite(seed, 50),
    ];
    let mut failed = false;
    for suite in &suites {
        lines.push(suite.to_string());
        failed |= !suite.passed;
    }
    if failed {
        bail!("oracle verification failed:\n{}", lines.join("\n"));
    }
    Ok(lines)
}
