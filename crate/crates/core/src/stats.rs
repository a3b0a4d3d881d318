//! Two-sample Mann-Whitney U test and small summary helpers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Above this combined sample size the normal approximation is used.
const EXACT_LIMIT: usize = 60;

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Doubled midranks of the pooled sample, so tied ranks stay integral.
fn doubled_ranks(pooled: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean; doubled that is i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Returns `None` when either sample is empty or contains NaN.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Option<MannWhitney> {
    if x.is_empty() || y.is_empty() || x.iter().chain(y).any(|v| v.is_nan()) {
        return None;
    }
    let (n1, n2) = (x.len(), y.len());
    let n = n1 + n2;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let observed: u64 = ranks[..n1].iter().sum();
    let u = observed as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    // Doubled expected rank sum of the first sample: n1 (N + 1).
    let centre = (n1 * (n + 1)) as f64;
    let deviation = (observed as f64 - centre).abs();

    if n <= EXACT_LIMIT {
        let max_sum = ranks.iter().sum::<u64>() as usize;
        // ways[k][s]: subsets of size k with doubled rank sum s.
        let mut ways = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
        ways[0][0] = 1.0;
        for &r in &ranks {
            let r = r as usize;
            for k in (1..=n1).rev() {
                let (lo, hi) = ways.split_at_mut(k);
                for s in (r..=max_sum).rev() {
                    hi[0][s] += lo[k - 1][s - r];
                }
            }
        }
        let total: f64 = ways[n1].iter().sum();
        let extreme: f64 = ways[n1]
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as f64 - centre).abs() >= deviation - 1e-9)
            .map(|(_, w)| w)
            .sum();
        return Some(MannWhitney { u, p_value: (extreme / total).min(1.0), exact: true });
    }

    let (f1, f2, nf) = (n1 as f64, n2 as f64, n as f64);
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let variance = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if variance <= 0.0 {
        return Some(MannWhitney { u, p_value: 1.0, exact: false });
    }
    let z = (deviation / 2.0) / variance.sqrt();
    let normal = Normal::standard();
    Some(MannWhitney { u, p_value: (2.0 * (1.0 - normal.cdf(z))).min(1.0), exact: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
    }

    #[test]
    fn complete_separation_small_samples() {
        // 3 vs 3 fully separated: only 2 of C(6,3)=20 splits are as extreme.
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        assert!(r.exact);
    }

    #[test]
    fn identical_samples_are_not_significant() {
        let r = mann_whitney(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.u, 4.5);
    }

    #[test]
    fn ten_versus_ten_separated() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = (10..20).map(f64::from).collect();
        let r = mann_whitney(&x, &y).unwrap();
        // 2 / C(20,10)
        assert!((r.p_value - 2.0 / 184_756.0).abs() < 1e-15);
    }

    #[test]
    fn ties_use_midranks() {
        // Pooled ranks: 1, 2.5, 2.5, 4; x holds ranks 1 and 2.5.
        let r = mann_whitney(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert_eq!(r.u, 0.5);
        // Doubled sums of 2-subsets of {2,5,5,8}: 7,7,10,10,13,13; observed 7.
        assert!((r.p_value - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn normal_approximation_for_large_samples() {
        let x: Vec<f64> = (0..40).map(f64::from).collect();
        let y: Vec<f64> = (0..40).map(|v| v as f64 + 0.5).collect();
        let r = mann_whitney(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.5);
        let far: Vec<f64> = (100..140).map(f64::from).collect();
        assert!(mann_whitney(&x, &far).unwrap().p_value < 1e-10);
        assert!(mann_whitney(&[], &x).is_none());
    }
}
