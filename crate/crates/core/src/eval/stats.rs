//! Friedman rank test with the Nemenyi post-hoc critical difference.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Studentized range statistic divided by √2 at α = 0.05, indexed by k − 2.
const Q_ALPHA_005: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
/// Same at α = 0.10.
const Q_ALPHA_010: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    /// Mean rank per method; rank 1 is the best score.
    pub mean_ranks: Vec<f64>,
}

/// Average ranks of one row; ties share the mean of their positions.
pub fn rank_row(row: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal);
        if higher_is_better {
            ord.reverse()
        } else {
            ord
        }
    });
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `scores[case][method]`.
pub fn friedman_test(scores: &[Vec<f64>], higher_is_better: bool) -> Result<FriedmanResult> {
    let n = scores.len();
    let k = scores.first().map_or(0, |r| r.len());
    if k < 2 {
        return Err(Error::DegenerateInput(format!("need k >= 2 methods, got {k}")));
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!("need N >= 2 cases, got {n}")));
    }
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::DegenerateInput("ragged score table".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite score".into()));
    }
    let mut rank_sums = vec![0.0; k];
    for row in scores {
        for (s, r) in rank_sums.iter_mut().zip(rank_row(row, higher_is_better)) {
            *s += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let chi2 = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    // rounding can leave a tiny negative value on fully tied tables
    let chi2 = if chi2.abs() < 1e-9 { 0.0 } else { chi2 };
    let df = k - 1;
    let p = 1.0 - ChiSquared::new(df as f64).expect("df >= 1").cdf(chi2.max(0.0));
    Ok(FriedmanResult {
        chi2,
        df,
        p,
        mean_ranks: rank_sums.iter().map(|r| r / nf).collect(),
    })
}

/// Critical difference of mean ranks for `k` methods over `n` cases.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(Error::KOutOfTableRange(k));
    }
    if n == 0 {
        return Err(Error::DegenerateInput("N must be >= 1".into()));
    }
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_ALPHA_005
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_ALPHA_010
    } else {
        return Err(Error::DegenerateInput(format!(
            "alpha {alpha} not tabulated (0.05 or 0.10)"
        )));
    };
    let (kf, nf) = (k as f64, n as f64);
    Ok(table[k - 2] * (kf * (kf + 1.0) / (6.0 * nf)).sqrt())
}

/// Pairs `(i, j)`, `i < j`, whose mean-rank difference exceeds `cd`.
pub fn nemenyi_pairs(mean_ranks: &[f64], cd: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..mean_ranks.len() {
        for j in i + 1..mean_ranks.len() {
            if (mean_ranks[i] - mean_ranks[j]).abs() > cd {
                out.push((i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<Vec<f64>> {
        // method 0 always best, 1 middle, 2 worst
        vec![
            vec![0.9, 0.8, 0.7],
            vec![0.95, 0.6, 0.5],
            vec![0.7, 0.65, 0.1],
            vec![0.99, 0.98, 0.97],
        ]
    }

    #[test]
    fn friedman_fixture() {
        let r = friedman_test(&fixture(), true).unwrap();
        assert_eq!(r.chi2, 8.0);
        assert_eq!(r.df, 2);
        assert!((r.p - (-4.0f64).exp()).abs() < 1e-12);
        assert_eq!(r.mean_ranks, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn friedman_ties_and_symmetry() {
        let tied = vec![vec![0.5; 3]; 5];
        let r = friedman_test(&tied, true).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);

        let permuted: Vec<Vec<f64>> = fixture().iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        assert_eq!(friedman_test(&permuted, true).unwrap().chi2, 8.0);
    }

    #[test]
    fn friedman_degenerate() {
        assert!(matches!(
            friedman_test(&[vec![1.0], vec![2.0]], true),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn rank_row_averages_ties() {
        assert_eq!(rank_row(&[3.0, 1.0, 3.0, 2.0], true), vec![1.5, 4.0, 1.5, 3.0]);
        assert_eq!(rank_row(&[3.0, 1.0, 2.0], false), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn nemenyi_examples() {
        let cd = nemenyi_cd(3, 16, 0.05).unwrap();
        assert!((cd - 2.343 * (12.0f64 / 96.0).sqrt()).abs() < 1e-12);
        assert!((cd - 0.8285).abs() < 1e-3);
        // |1.0 − 1.9| = 0.9 also exceeds 0.83
        assert_eq!(nemenyi_pairs(&[1.0, 1.9, 3.0], 0.83), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(nemenyi_pairs(&[1.0, 1.8, 3.0], 0.83), vec![(0, 2), (1, 2)]);
        assert!(nemenyi_cd(3, 1_000_000_000, 0.05).unwrap() < 1e-3);
        assert!(matches!(nemenyi_cd(11, 5, 0.05), Err(Error::KOutOfTableRange(11))));
        assert!(matches!(nemenyi_cd(1, 5, 0.05), Err(Error::KOutOfTableRange(1))));
    }

    proptest::proptest! {
        #[test]
        fn friedman_invariant_under_monotone_maps(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 3..8)
        ) {
            let a = friedman_test(&rows, true).unwrap();
            let mapped: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| (3.0 * v).exp() + 1.0).collect()).collect();
            let b = friedman_test(&mapped, true).unwrap();
            proptest::prop_assert!((a.chi2 - b.chi2).abs() < 1e-9);
        }
    }
}
