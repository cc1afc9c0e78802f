//! Post-hoc analyses: Fisher overlap between task pairs and retention
//! fractions over evaluation logs.

use crate::baselines::FisherDiagonal;
use crate::error::{Error, Result};

/// Overlap between one pair of tasks' importance profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub task_a: String,
    pub task_b: String,
    pub overlap: f64,
}

/// Scale a Fisher diagonal so its trainable entries sum to one.
pub fn unit_trace_normalize(f: &FisherDiagonal) -> Result<FisherDiagonal> {
    let trace: f64 = f.flatten().iter().sum();
    if trace <= 0.0 {
        return Err(Error::contract("unit-trace normalisation needs a positive trace"));
    }
    let mut diag = f.diag.clone();
    for seg in diag.segments_mut() {
        if seg.trainable {
            seg.tensor = seg.tensor.map(|v| v / trace);
        }
    }
    Ok(FisherDiagonal { diag, beta: f.beta })
}

/// Overlap `1 - d^2` between two unit-trace diagonals. For diagonal
/// matrices the Frechet-style distance collapses to an elementwise form:
/// `d^2 = 1/2 * sum_i (sqrt(f1_i) - sqrt(f2_i))^2`.
pub fn fisher_overlap(f1: &FisherDiagonal, f2: &FisherDiagonal) -> Result<f64> {
    f1.diag.check_layout(&f2.diag)?;
    let a = f1.flatten();
    let b = f2.flatten();
    let d2: f64 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x.max(0.0).sqrt() - y.max(0.0).sqrt();
            d * d
        })
        .sum::<f64>()
        * 0.5;
    Ok(1.0 - d2)
}

/// Overlap of a pre-normalised pair, as a report row.
pub fn overlap_report(task_a: &str, f1: &FisherDiagonal, task_b: &str, f2: &FisherDiagonal) -> Result<OverlapReport> {
    let n1 = unit_trace_normalize(f1)?;
    let n2 = unit_trace_normalize(f2)?;
    Ok(OverlapReport { task_a: task_a.to_string(), task_b: task_b.to_string(), overlap: fisher_overlap(&n1, &n2)? })
}

/// Retention fraction: the current mean score on a task divided by its
/// reference mean (the score at that task's consolidation completion).
/// Clamped below at zero; values above one are legitimate improvement.
pub fn retention_metric(current_mean: f64, reference_mean: f64) -> Result<f64> {
    if !reference_mean.is_finite() || reference_mean == 0.0 {
        return Err(Error::contract("retention needs a non-zero finite reference score"));
    }
    Ok((current_mean / reference_mean).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{NetworkParams, Segment, Tensor};

    fn fisher_of(values: &[f64]) -> FisherDiagonal {
        FisherDiagonal {
            diag: NetworkParams::from_segments(vec![Segment {
                name: "w".into(),
                tensor: Tensor::from_vec(values.to_vec()),
                trainable: true,
            }]),
            beta: 1.0,
        }
    }

    #[test]
    fn unit_trace_examples() {
        let f = unit_trace_normalize(&fisher_of(&[1.0, 1.0, 2.0])).unwrap();
        assert_eq!(f.flatten(), vec![0.25, 0.25, 0.5]);
        let same = unit_trace_normalize(&f).unwrap();
        assert_eq!(same.flatten(), f.flatten());
        let trace: f64 = f.flatten().iter().sum();
        assert!((trace - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_fisher_is_contract_error() {
        assert!(matches!(unit_trace_normalize(&fisher_of(&[0.0, 0.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let f = fisher_of(&[0.3, 0.7]);
        assert!((fisher_overlap(&f, &f).unwrap() - 1.0).abs() < 1e-15);
        let a = fisher_of(&[1.0, 0.0]);
        let b = fisher_of(&[0.0, 1.0]);
        assert!(fisher_overlap(&a, &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn overlap_hand_arithmetic() {
        let a = fisher_of(&[0.5, 0.5]);
        let b = fisher_of(&[0.25, 0.75]);
        let expect = 1.0
            - 0.5 * ((0.5f64.sqrt() - 0.25f64.sqrt()).powi(2) + (0.5f64.sqrt() - 0.75f64.sqrt()).powi(2));
        assert!((fisher_overlap(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn overlap_symmetry_and_range_on_random_diagonals() {
        use rand::Rng as _;
        let mut rng = crate::rng::SeedStream::new(7).rng();
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let raw_a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let raw_b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = unit_trace_normalize(&fisher_of(&raw_a));
            let b = unit_trace_normalize(&fisher_of(&raw_b));
            let (a, b) = match (a, b) {
                (Ok(a), Ok(b)) => (a, b),
                _ => continue,
            };
            let ab = fisher_overlap(&a, &b).unwrap();
            let ba = fisher_overlap(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1e-12..=1.0 + 1e-12).contains(&ab), "overlap {ab} out of range");
        }
    }

    #[test]
    fn retention_examples() {
        assert_eq!(retention_metric(10.0, 10.0).unwrap(), 1.0);
        assert_eq!(retention_metric(5.0, 10.0).unwrap(), 0.5);
        assert_eq!(retention_metric(-3.0, 10.0).unwrap(), 0.0);
        assert!(retention_metric(1.0, 0.0).is_err());
    }
}
