//! Architecture genomes `[J, C, O¹..Oʳ, D¹..Dʳ]`, their fixed-length normalized
//! encoding and the mutation operators used by the search.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GenomeError {
    #[error("invalid search-space bounds: {0}")]
    InvalidBounds(String),
    #[error("genome violates bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid genome record: {0}")]
    InvalidRecord(String),
}

/// Inclusive ranges for every gene. `max_blocks` is the padded length R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoundsRecord", into = "BoundsRecord")]
pub struct SearchSpaceBounds {
    min_blocks: usize,
    max_blocks: usize,
    min_first_width: usize,
    max_first_width: usize,
    min_block_width: usize,
    max_block_width: usize,
    min_dropout: f64,
    max_dropout: f64,
}

#[derive(Serialize, Deserialize)]
struct BoundsRecord {
    blocks: (usize, usize),
    first_width: (usize, usize),
    block_width: (usize, usize),
    dropout: (f64, f64),
}

impl TryFrom<BoundsRecord> for SearchSpaceBounds {
    type Error = GenomeError;
    fn try_from(r: BoundsRecord) -> Result<Self, Self::Error> {
        SearchSpaceBounds::new(r.blocks, r.first_width, r.block_width, r.dropout)
    }
}

impl From<SearchSpaceBounds> for BoundsRecord {
    fn from(b: SearchSpaceBounds) -> Self {
        BoundsRecord {
            blocks: (b.min_blocks, b.max_blocks),
            first_width: (b.min_first_width, b.max_first_width),
            block_width: (b.min_block_width, b.max_block_width),
            dropout: (b.min_dropout, b.max_dropout),
        }
    }
}

impl SearchSpaceBounds {
    pub fn new(
        blocks: (usize, usize),
        first_width: (usize, usize),
        block_width: (usize, usize),
        dropout: (f64, f64),
    ) -> Result<Self, GenomeError> {
        let bad = |m: &str| Err(GenomeError::InvalidBounds(m.to_string()));
        if blocks.0 < 1 {
            return bad("minimum block count must be at least 1");
        }
        if blocks.0 > blocks.1 {
            return bad("minimum block count exceeds maximum");
        }
        if first_width.0 >= first_width.1 {
            return bad("first-layer width range is empty or degenerate");
        }
        if first_width.0 < 1 || block_width.0 < 1 {
            return bad("widths must be at least 1");
        }
        if block_width.0 >= block_width.1 {
            return bad("block width range is empty or degenerate");
        }
        let (dl, dh) = dropout;
        if !(dl.is_finite() && dh.is_finite() && 0.0 <= dl && dl < dh && dh < 1.0) {
            return bad("dropout range must satisfy 0 <= min < max < 1");
        }
        Ok(Self {
            min_blocks: blocks.0,
            max_blocks: blocks.1,
            min_first_width: first_width.0,
            max_first_width: first_width.1,
            min_block_width: block_width.0,
            max_block_width: block_width.1,
            min_dropout: dl,
            max_dropout: dh,
        })
    }

    /// Test set 1 ranges: 2:6 blocks, 4:16 first width, 24:32 block width, 0.1:0.4 dropout.
    pub fn runtime_comparison() -> Self {
        Self::new((2, 6), (4, 16), (24, 32), (0.1, 0.4)).expect("static bounds")
    }

    /// Test set 2 ranges: 2:6 blocks, 4:16 first width, 16:64 block width, 0.1:0.9 dropout.
    pub fn expanded() -> Self {
        Self::new((2, 6), (4, 16), (16, 64), (0.1, 0.9)).expect("static bounds")
    }

    pub fn block_range(&self) -> (usize, usize) {
        (self.min_blocks, self.max_blocks)
    }
    pub fn first_width_range(&self) -> (usize, usize) {
        (self.min_first_width, self.max_first_width)
    }
    pub fn block_width_range(&self) -> (usize, usize) {
        (self.min_block_width, self.max_block_width)
    }
    pub fn dropout_range(&self) -> (f64, f64) {
        (self.min_dropout, self.max_dropout)
    }
    pub fn max_blocks(&self) -> usize {
        self.max_blocks
    }

    /// Length of a [`NormalizedRep`] under these bounds: `2 + 2R`.
    pub fn rep_len(&self) -> usize {
        2 + 2 * self.max_blocks
    }

    fn random_block<R: Rng + ?Sized>(&self, rng: &mut R) -> Block {
        Block {
            width: rng.random_range(self.min_block_width..=self.max_block_width),
            dropout: rng.random_range(self.min_dropout..=self.max_dropout),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub width: usize,
    pub dropout: f64,
}

/// A residual-network descriptor. `joint` selects joint vs separate training
/// when the network ends up in the final ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenomeRecord", into = "GenomeRecord")]
pub struct Genome {
    pub joint: bool,
    pub first_width: usize,
    pub blocks: Vec<Block>,
}

/// Wire shape: `{"j":0|1,"c":int,"blocks":[[o,d],...]}`.
#[derive(Serialize, Deserialize)]
struct GenomeRecord {
    j: u8,
    c: usize,
    blocks: Vec<(usize, f64)>,
}

impl TryFrom<GenomeRecord> for Genome {
    type Error = GenomeError;
    fn try_from(r: GenomeRecord) -> Result<Self, Self::Error> {
        let joint = match r.j {
            0 => false,
            1 => true,
            other => return Err(GenomeError::InvalidRecord(format!("j must be 0 or 1, got {other}"))),
        };
        if r.blocks.is_empty() {
            return Err(GenomeError::InvalidRecord("genome has no blocks".into()));
        }
        Ok(Genome {
            joint,
            first_width: r.c,
            blocks: r.blocks.into_iter().map(|(width, dropout)| Block { width, dropout }).collect(),
        })
    }
}

impl From<Genome> for GenomeRecord {
    fn from(g: Genome) -> Self {
        GenomeRecord {
            j: g.joint as u8,
            c: g.first_width,
            blocks: g.blocks.into_iter().map(|b| (b.width, b.dropout)).collect(),
        }
    }
}

impl Genome {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self, bounds: &SearchSpaceBounds) -> Result<(), GenomeError> {
        let r = self.blocks.len();
        let oob = |m: String| Err(GenomeError::OutOfBounds(m));
        if r < bounds.min_blocks || r > bounds.max_blocks {
            return oob(format!("{r} blocks outside [{}, {}]", bounds.min_blocks, bounds.max_blocks));
        }
        if self.first_width < bounds.min_first_width || self.first_width > bounds.max_first_width {
            return oob(format!("first width {} out of range", self.first_width));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width < bounds.min_block_width || b.width > bounds.max_block_width {
                return oob(format!("block {i} width {} out of range", b.width));
            }
            if !(b.dropout >= bounds.min_dropout && b.dropout <= bounds.max_dropout) {
                return oob(format!("block {i} dropout {} out of range", b.dropout));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genome serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, GenomeError> {
        serde_json::from_str(s).map_err(|e| GenomeError::InvalidRecord(e.to_string()))
    }
}

pub fn random_genome<R: Rng + ?Sized>(bounds: &SearchSpaceBounds, rng: &mut R) -> Genome {
    let r = rng.random_range(bounds.min_blocks..=bounds.max_blocks);
    let first_width = rng.random_range(bounds.min_first_width..=bounds.max_first_width);
    let joint = rng.random_bool(0.5);
    let blocks = (0..r).map(|_| bounds.random_block(rng)).collect();
    Genome { joint, first_width, blocks }
}

/// Fixed-length encoding, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRep(Vec<f64>);

/// [`NormalizedRep`] without the joint flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchRep(Vec<f64>);

impl NormalizedRep {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    /// Wraps a raw vector, checking the layout invariants (used when reading
    /// distance datasets back from disk).
    pub fn from_values(values: Vec<f64>) -> Result<Self, GenomeError> {
        if values.len() < 4 || values.len() % 2 != 0 {
            return Err(GenomeError::InvalidRecord(format!("bad representation length {}", values.len())));
        }
        if values[0] != 0.0 && values[0] != 1.0 {
            return Err(GenomeError::InvalidRecord("joint entry must be 0 or 1".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GenomeError::InvalidRecord("entries must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }
}

impl ArchRep {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn unit(value: f64, lo: f64, hi: f64) -> f64 {
    ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// `[j, c', 0×(R−r), o'…, 0×(R−r), d'…]` where primes are min-max rescaled
/// against the search-space bounds. Pad zeros precede each block sequence.
pub fn normalize(g: &Genome, bounds: &SearchSpaceBounds) -> NormalizedRep {
    let big_r = bounds.max_blocks;
    let r = g.blocks.len();
    debug_assert!(r <= big_r);
    let pad = big_r.saturating_sub(r);
    let mut v = Vec::with_capacity(2 + 2 * big_r);
    v.push(if g.joint { 1.0 } else { 0.0 });
    v.push(unit(g.first_width as f64, bounds.min_first_width as f64, bounds.max_first_width as f64));
    v.extend(std::iter::repeat_n(0.0, pad));
    v.extend(g.blocks.iter().take(big_r).map(|b| {
        unit(b.width as f64, bounds.min_block_width as f64, bounds.max_block_width as f64)
    }));
    v.extend(std::iter::repeat_n(0.0, pad));
    v.extend(g.blocks.iter().take(big_r).map(|b| unit(b.dropout, bounds.min_dropout, bounds.max_dropout)));
    NormalizedRep(v)
}

pub fn arch_rep(n: &NormalizedRep) -> ArchRep {
    ArchRep(n.0[1..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationKind {
    AddBlock,
    RemoveBlock,
    Reparameterize,
    SwapConsecutive,
}

impl MutationKind {
    pub const ALL: [MutationKind; 4] = [
        MutationKind::AddBlock,
        MutationKind::RemoveBlock,
        MutationKind::Reparameterize,
        MutationKind::SwapConsecutive,
    ];

    pub fn feasible(self, g: &Genome, bounds: &SearchSpaceBounds) -> bool {
        let r = g.blocks.len();
        match self {
            MutationKind::AddBlock => r < bounds.max_blocks,
            MutationKind::RemoveBlock => r > bounds.min_blocks,
            MutationKind::Reparameterize => r >= 1,
            MutationKind::SwapConsecutive => r >= 2,
        }
    }
}

pub fn mutate<R: Rng + ?Sized>(g: &Genome, bounds: &SearchSpaceBounds, rng: &mut R) -> Genome {
    mutate_with_kind(g, bounds, rng).0
}

/// Applies one mutation drawn uniformly from the kinds feasible for `g`.
pub fn mutate_with_kind<R: Rng + ?Sized>(
    g: &Genome,
    bounds: &SearchSpaceBounds,
    rng: &mut R,
) -> (Genome, MutationKind) {
    let feasible: Vec<MutationKind> =
        MutationKind::ALL.iter().copied().filter(|k| k.feasible(g, bounds)).collect();
    let kind = *feasible.choose(rng).expect("reparameterize is always feasible");
    (apply_mutation(g, kind, bounds, rng), kind)
}

pub fn apply_mutation<R: Rng + ?Sized>(
    g: &Genome,
    kind: MutationKind,
    bounds: &SearchSpaceBounds,
    rng: &mut R,
) -> Genome {
    let mut child = g.clone();
    let r = child.blocks.len();
    match kind {
        MutationKind::AddBlock => {
            let at = rng.random_range(0..=r);
            child.blocks.insert(at, bounds.random_block(rng));
        }
        MutationKind::RemoveBlock => {
            let at = rng.random_range(0..r);
            child.blocks.remove(at);
        }
        MutationKind::Reparameterize => {
            let at = rng.random_range(0..r);
            child.blocks[at] = bounds.random_block(rng);
        }
        MutationKind::SwapConsecutive => {
            let at = rng.random_range(0..r - 1);
            child.blocks.swap(at, at + 1);
        }
    }
    child
}

/// Layer plan for the residual MLP built from a genome.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub blocks: Vec<Block>,
}

pub fn genome_to_config(g: &Genome) -> NetworkSpec {
    NetworkSpec { input_width: g.first_width, blocks: g.blocks.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn block(width: usize, dropout: f64) -> Block {
        Block { width, dropout }
    }

    #[test]
    fn bounds_reject_degenerate_dropout() {
        assert!(SearchSpaceBounds::new((2, 6), (4, 16), (16, 64), (0.1, 0.1)).is_err());
        assert!(SearchSpaceBounds::new((0, 6), (4, 16), (16, 64), (0.1, 0.2)).is_err());
        assert!(SearchSpaceBounds::new((3, 2), (4, 16), (16, 64), (0.1, 0.2)).is_err());
        assert!(SearchSpaceBounds::new((2, 6), (4, 16), (16, 64), (0.1, 1.0)).is_err());
    }

    #[test]
    fn degenerate_block_range_fixes_block_count() {
        let bounds = SearchSpaceBounds::new((2, 2), (4, 16), (16, 64), (0.1, 0.9)).unwrap();
        let mut rng = seeded(3);
        for _ in 0..200 {
            assert_eq!(random_genome(&bounds, &mut rng).block_count(), 2);
        }
    }

    #[test]
    fn block_count_is_uniform() {
        let bounds = SearchSpaceBounds::new((2, 6), (4, 16), (16, 64), (0.1, 0.9)).unwrap();
        let mut rng = seeded(11);
        let mut counts = [0usize; 7];
        let n = 10_000;
        for _ in 0..n {
            let g = random_genome(&bounds, &mut rng);
            g.validate(&bounds).unwrap();
            counts[g.block_count()] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts[2..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, 0.999 quantile
        assert!(chi2 < 18.47, "chi2 = {chi2}");
        for &c in &counts[2..] {
            assert!((c as f64 / n as f64 - 0.2).abs() <= 0.02);
        }
    }

    #[test]
    fn normalize_worked_example() {
        let bounds = SearchSpaceBounds::expanded();
        let g = Genome { joint: true, first_width: 10, blocks: vec![block(16, 0.1), block(64, 0.9)] };
        let n = normalize(&g, &bounds);
        let expected = [1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(n.values(), &expected);
    }

    #[test]
    fn normalize_lower_and_upper_corners() {
        let bounds = SearchSpaceBounds::expanded();
        let lo = Genome { joint: false, first_width: 4, blocks: vec![block(16, 0.1); 6] };
        assert_eq!(normalize(&lo, &bounds).values(), &[0.0; 14]);
        let hi = Genome { joint: true, first_width: 16, blocks: vec![block(64, 0.9); 6] };
        let mut expected = vec![1.0; 14];
        expected[0] = 1.0;
        assert_eq!(normalize(&hi, &bounds).values(), expected.as_slice());
    }

    #[test]
    fn arch_rep_drops_joint_flag() {
        let n = NormalizedRep::from_values(vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(arch_rep(&n).values(), &[0.5, 0.0, 1.0]);

        let bounds = SearchSpaceBounds::expanded();
        let a = Genome { joint: true, first_width: 9, blocks: vec![block(20, 0.3), block(40, 0.5)] };
        let b = Genome { joint: false, ..a.clone() };
        let (na, nb) = (normalize(&a, &bounds), normalize(&b, &bounds));
        assert_ne!(na, nb);
        assert_eq!(arch_rep(&na), arch_rep(&nb));
        assert_eq!(na.len(), 14);
        assert_eq!(arch_rep(&na).len(), 13);
    }

    #[test]
    fn swap_exchanges_the_two_blocks() {
        let bounds = SearchSpaceBounds::expanded();
        let g = Genome { joint: false, first_width: 8, blocks: vec![block(20, 0.2), block(30, 0.3)] };
        let child = apply_mutation(&g, MutationKind::SwapConsecutive, &bounds, &mut seeded(0));
        assert_eq!(child.blocks, vec![block(30, 0.3), block(20, 0.2)]);
    }

    #[test]
    fn mutation_never_exceeds_max_blocks() {
        let bounds = SearchSpaceBounds::expanded();
        let mut rng = seeded(5);
        let g = Genome { joint: true, first_width: 8, blocks: vec![block(20, 0.2); 6] };
        for _ in 0..1000 {
            let (child, kind) = mutate_with_kind(&g, &bounds, &mut rng);
            assert_ne!(kind, MutationKind::AddBlock);
            assert!(child.block_count() <= 6);
            child.validate(&bounds).unwrap();
        }
    }

    #[test]
    fn single_block_genome_never_swaps() {
        let bounds = SearchSpaceBounds::new((1, 3), (4, 16), (16, 64), (0.1, 0.9)).unwrap();
        let g = Genome { joint: true, first_width: 8, blocks: vec![block(20, 0.2)] };
        let mut rng = seeded(9);
        for _ in 0..500 {
            let (_, kind) = mutate_with_kind(&g, &bounds, &mut rng);
            assert!(matches!(kind, MutationKind::AddBlock | MutationKind::Reparameterize));
        }
    }

    #[test]
    fn interior_mutation_kinds_are_uniform() {
        let bounds = SearchSpaceBounds::expanded();
        let g = Genome { joint: false, first_width: 8, blocks: vec![block(20, 0.2); 4] };
        let mut rng = seeded(21);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(mutate_with_kind(&g, &bounds, &mut rng).1).or_insert(0usize) += 1;
        }
        for kind in MutationKind::ALL {
            let f = counts[&kind] as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "{kind:?}: {f}");
        }
    }

    #[test]
    fn config_mirrors_blocks() {
        let g = Genome { joint: false, first_width: 7, blocks: vec![block(16, 0.1), block(64, 0.9)] };
        let spec = genome_to_config(&g);
        assert_eq!(spec.input_width, 7);
        assert_eq!(spec.blocks.iter().map(|b| b.width).collect::<Vec<_>>(), vec![16, 64]);
        assert_eq!(spec, genome_to_config(&g.clone()));
    }

    #[test]
    fn json_record_shape() {
        let g = Genome { joint: true, first_width: 10, blocks: vec![block(16, 0.1), block(64, 0.123456789012345)] };
        let s = g.to_json();
        assert_eq!(s, r#"{"j":1,"c":10,"blocks":[[16,0.1],[64,0.123456789012345]]}"#);
        assert_eq!(Genome::from_json(&s).unwrap(), g);
        assert!(Genome::from_json(r#"{"j":2,"c":10,"blocks":[[16,0.1]]}"#).is_err());
    }

    fn arb_genome() -> impl Strategy<Value = (Genome, u64)> {
        (any::<u64>(), any::<u64>()).prop_map(|(a, b)| {
            (random_genome(&SearchSpaceBounds::expanded(), &mut seeded(a)), b)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn mutation_preserves_invariants((g, seed) in arb_genome()) {
            let bounds = SearchSpaceBounds::expanded();
            let mut rng = seeded(seed);
            let mut current = g;
            for _ in 0..50 {
                current = mutate(&current, &bounds, &mut rng);
                prop_assert!(current.validate(&bounds).is_ok());
            }
        }

        #[test]
        fn normalized_entries_in_unit_range((g, _) in arb_genome()) {
            let bounds = SearchSpaceBounds::expanded();
            let n = normalize(&g, &bounds);
            prop_assert_eq!(n.len(), bounds.rep_len());
            prop_assert!(n.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let pad = 6 - g.block_count();
            prop_assert!(n.values()[2..2 + pad].iter().all(|&v| v == 0.0));
            prop_assert!(n.values()[8..8 + pad].iter().all(|&v| v == 0.0));
        }

        #[test]
        fn normalize_is_injective_for_fixed_block_count((a, s) in arb_genome()) {
            let bounds = SearchSpaceBounds::expanded();
            let mut rng = seeded(s);
            let mut b = random_genome(&bounds, &mut rng);
            b.blocks = (0..a.block_count()).map(|_| bounds.random_block(&mut rng)).collect();
            if a != b {
                prop_assert_ne!(normalize(&a, &bounds), normalize(&b, &bounds));
            }
        }

        #[test]
        fn json_round_trip((g, _) in arb_genome()) {
            prop_assert_eq!(Genome::from_json(&g.to_json()).unwrap(), g);
        }
    }
}
