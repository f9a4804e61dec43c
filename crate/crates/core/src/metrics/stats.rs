//! Rank and linear correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{RavError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p from the t approximation; reaches 0 at |rho| = 1.
    pub p_two_sided: f64,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(RavError::UndefinedCorrelation("length mismatch"));
    }
    if xs.len() < 2 {
        return Err(RavError::UndefinedCorrelation("fewer than two samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RavError::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    if xs.len() != ys.len() {
        return Err(RavError::UndefinedCorrelation("length mismatch"));
    }
    if xs.len() < 3 {
        return Err(RavError::UndefinedCorrelation("fewer than three samples"));
    }
    let rho = pearson_r(&average_ranks(xs), &average_ranks(ys))?;
    let dof = (xs.len() - 2) as f64;
    let p_two_sided = if (1.0 - rho.abs()) <= f64::EPSILON {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("dof is positive");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(Spearman { rho, p_two_sided })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.5, 9.0, 10.0, 100.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&xs, &up).unwrap().rho - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&xs, &down).unwrap().rho + 1.0).abs() < 1e-12);
        assert_eq!(spearman_rho(&xs, &up).unwrap().p_two_sided, 0.0);
    }

    #[test]
    fn spearman_constant_input_errors() {
        assert!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_p_value_for_weak_correlation() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let s = spearman_rho(&xs, &ys).unwrap();
        // ranks differ by adjacent swaps: rho = 1 - 6*6/(6*35)
        assert!((s.rho - (1.0 - 36.0 / 210.0)).abs() < 1e-12);
        assert!(s.p_two_sided > 0.0 && s.p_two_sided < 0.1);
    }

    #[test]
    fn pearson_affine_and_negated() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_r(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_case() {
        // means 3 and 4; sxy = 9, sxx = 10, syy = 10
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 3.0, 5.0, 6.0];
        let r = pearson_r(&xs, &ys).unwrap();
        assert!((r - 0.9).abs() < 1e-12, "{r}");
    }

    #[test]
    fn pearson_zero_variance_errors() {
        assert!(pearson_r(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }
}
