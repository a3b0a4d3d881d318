//! The six pairwise behavioural distances: four count-based error metrics,
//! cosine distance between wrong-prediction vectors and cosine distance
//! between architectural representations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::ArchRep;
use crate::learner::PredictionProfile;

#[derive(Debug, Error, PartialEq)]
pub enum DiversityError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vectors must be non-empty")]
    Empty,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

/// Agreement counts over a validation set: both correct (`n11`), both wrong
/// (`n00`), only the second correct (`n01`), only the first correct (`n10`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub n11: usize,
    pub n00: usize,
    pub n01: usize,
    pub n10: usize,
}

impl PairCounts {
    pub fn total(&self) -> usize {
        self.n11 + self.n00 + self.n01 + self.n10
    }

    fn differing(&self) -> f64 {
        (self.n01 + self.n10) as f64
    }
}

pub fn pair_counts(p_i: &[bool], p_j: &[bool]) -> Result<PairCounts, DiversityError> {
    if p_i.len() != p_j.len() {
        return Err(DiversityError::LengthMismatch(p_i.len(), p_j.len()));
    }
    if p_i.is_empty() {
        return Err(DiversityError::Empty);
    }
    let mut c = PairCounts { n11: 0, n00: 0, n01: 0, n10: 0 };
    for (&a, &b) in p_i.iter().zip(p_j) {
        match (a, b) {
            (true, true) => c.n11 += 1,
            (false, false) => c.n00 += 1,
            (false, true) => c.n01 += 1,
            (true, false) => c.n10 += 1,
        }
    }
    Ok(c)
}

fn ratio_or_zero(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Proportion of differing outcomes among instances where at least one is correct.
pub fn metric_prop1(c: &PairCounts) -> f64 {
    ratio_or_zero(c.differing(), c.n11 + c.n01 + c.n10)
}

/// Proportion of differing outcomes among instances where at least one is wrong.
pub fn metric_prop2(c: &PairCounts) -> f64 {
    ratio_or_zero(c.differing(), c.n00 + c.n01 + c.n10)
}

pub fn metric_prop_harm(c: &PairCounts) -> f64 {
    let (a, b) = (metric_prop1(c), metric_prop2(c));
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn metric_dis(c: &PairCounts) -> f64 {
    ratio_or_zero(c.differing(), c.total())
}

/// `1 - cos(a, b)`; 0 when both vectors are zero, 1 when exactly one is.
fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, DiversityError> {
    if a.len() != b.len() {
        return Err(DiversityError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        // sqrt(s * s) == s, so identical vectors land on exactly 0.
        _ => (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 1.0),
    })
}

pub fn metric_cos_dist(w_i: &[bool], w_j: &[bool]) -> Result<f64, DiversityError> {
    if w_i.len() != w_j.len() {
        return Err(DiversityError::LengthMismatch(w_i.len(), w_j.len()));
    }
    // Integer counts keep the binary case exact: w·w = |w|.
    let both = w_i.iter().zip(w_j).filter(|(a, b)| **a && **b).count();
    let ni = w_i.iter().filter(|&&w| w).count();
    let nj = w_j.iter().filter(|&&w| w).count();
    Ok(match (ni == 0, nj == 0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - both as f64 / ((ni * nj) as f64).sqrt()).clamp(0.0, 1.0),
    })
}

pub fn metric_arch_dist(a_i: &ArchRep, a_j: &ArchRep) -> Result<f64, DiversityError> {
    cosine_distance(a_i.values(), a_j.values())
}

/// Selects one of the six distances; the discriminant is the position in
/// [`DistanceVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Prop1,
    Prop2,
    PropHarm,
    Dis,
    CosDist,
    ArchDist,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::Prop1, Metric::Prop2, Metric::PropHarm, Metric::Dis, Metric::CosDist, Metric::ArchDist];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column name used in distance datasets.
    pub fn column(self) -> &'static str {
        match self {
            Metric::Prop1 => "prop1",
            Metric::Prop2 => "prop2",
            Metric::PropHarm => "prop_harm",
            Metric::Dis => "dis",
            Metric::CosDist => "cos_dist",
            Metric::ArchDist => "arch_dist",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Metric::Prop1 => "prop1",
            Metric::Prop2 => "prop2",
            Metric::PropHarm => "prop-harm",
            Metric::Dis => "dis",
            Metric::CosDist => "cos-dist",
            Metric::ArchDist => "arch-dist",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for Metric {
    type Err = DiversityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.flag() == s || m.column() == s)
            .ok_or_else(|| DiversityError::UnknownMetric(s.to_string()))
    }
}

/// `(prop1, prop2, prop_harm, dis, cos_dist, arch_dist)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistanceVector(pub [f64; 6]);

impl DistanceVector {
    pub fn get(&self, metric: Metric) -> f64 {
        self.0[metric.index()]
    }
    pub fn values(&self) -> &[f64; 6] {
        &self.0
    }
}

pub fn exact_distance(
    profile_i: &PredictionProfile,
    profile_j: &PredictionProfile,
    arch_i: &ArchRep,
    arch_j: &ArchRep,
) -> Result<DistanceVector, DiversityError> {
    let c = pair_counts(profile_i.correct(), profile_j.correct())?;
    let cos = metric_cos_dist(&profile_i.wrong(), &profile_j.wrong())?;
    let arch = metric_arch_dist(arch_i, arch_j)?;
    Ok(DistanceVector([metric_prop1(&c), metric_prop2(&c), metric_prop_harm(&c), metric_dis(&c), cos, arch]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{arch_rep, NormalizedRep};

    fn counts(n11: usize, n00: usize, n01: usize, n10: usize) -> PairCounts {
        PairCounts { n11, n00, n01, n10 }
    }

    fn arch(v: &[f64]) -> ArchRep {
        let mut full = vec![0.0];
        full.extend_from_slice(v);
        if full.len() % 2 == 1 {
            full.push(0.0);
        }
        let full = NormalizedRep::from_values(full).unwrap();
        arch_rep(&full)
    }

    #[test]
    fn hand_counted_pair() {
        let c = pair_counts(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
        let same = pair_counts(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((same.n01, same.n10), (0, 0));
        let comp = pair_counts(&[true, false, true], &[false, true, false]).unwrap();
        assert_eq!((comp.n11, comp.n00), (0, 0));
        assert_eq!(pair_counts(&[true], &[true, false]), Err(DiversityError::LengthMismatch(1, 2)));
    }

    #[test]
    fn worked_values() {
        let c = counts(5, 2, 2, 1);
        assert_eq!(metric_prop1(&c), 0.375);
        assert_eq!(metric_prop2(&c), 0.6);
        assert!((metric_prop_harm(&c) - 0.461_538_461_538_461_5).abs() < 1e-15);
        assert_eq!(metric_dis(&c), 0.3);
    }

    #[test]
    fn degenerate_denominators() {
        assert_eq!(metric_prop1(&counts(0, 7, 0, 0)), 0.0);
        assert_eq!(metric_prop2(&counts(7, 0, 0, 0)), 0.0);
        assert_eq!(metric_prop2(&counts(0, 0, 3, 0)), 1.0);
        assert_eq!(metric_prop_harm(&counts(4, 3, 0, 0)), 0.0);
        assert_eq!(metric_dis(&counts(0, 0, 2, 2)), 1.0);
    }

    #[test]
    fn harmonic_mean_of_equal_proportions() {
        // n11 == n00 makes the two proportions equal.
        let c = counts(3, 3, 2, 1);
        assert_eq!(metric_prop1(&c), metric_prop2(&c));
        assert!((metric_prop_harm(&c) - metric_prop1(&c)).abs() < 1e-15);
    }

    #[test]
    fn cosine_on_wrong_vectors() {
        assert_eq!(metric_cos_dist(&[true, true, false, false], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(metric_cos_dist(&[true, false, true], &[true, false, true]).unwrap(), 0.0);
        assert_eq!(metric_cos_dist(&[false, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(metric_cos_dist(&[false, false], &[false, false]).unwrap(), 0.0);
        assert!(metric_cos_dist(&[false], &[false, true]).is_err());
    }

    #[test]
    fn architectural_cosine() {
        let a = arch(&[0.5, 0.0, 1.0]);
        assert_eq!(metric_arch_dist(&a, &a).unwrap(), 0.0);
        let x = arch(&[1.0, 0.0, 0.0]);
        let y = arch(&[0.0, 1.0, 0.0]);
        assert_eq!(metric_arch_dist(&x, &y).unwrap(), 1.0);
        let expected = 1.0 - 0.5 / (1.25f64.sqrt());
        assert!((metric_arch_dist(&a, &x).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.552_786).abs() < 1e-6);
    }

    #[test]
    fn identical_models_are_at_distance_zero() {
        let p = PredictionProfile::from_correct(vec![true, false, true, true]);
        let a = arch(&[0.2, 0.4, 0.9]);
        assert_eq!(exact_distance(&p, &p, &a, &a).unwrap(), DistanceVector([0.0; 6]));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.flag().parse::<Metric>().unwrap(), m);
            assert_eq!(m.column().parse::<Metric>().unwrap(), m);
        }
        assert!("kappa".parse::<Metric>().is_err());
    }
}
