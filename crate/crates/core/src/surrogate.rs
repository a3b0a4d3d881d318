//! Distance datasets built from trained architecture samples, and the
//! multi-output random forest that estimates all six distances from a pair of
//! normalized representations.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diversity::{exact_distance, DistanceVector, DiversityError, Metric};
use crate::genome::{arch_rep, normalize, Genome, NormalizedRep, SearchSpaceBounds};
use crate::learner::PredictionProfile;
use crate::rng::{derive_seed, seeded, tag};

pub const OUTPUTS: usize = 6;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("invalid forest parameters: {0}")]
    Params(String),
    #[error("every record has the same input vector")]
    DegenerateData,
    #[error("input has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("distance dataset: {0}")]
    Csv(String),
}

/// One row of the distance dataset: `x = norm_rep_i ++ norm_rep_j`, `d` the
/// exact distances between the two trained models.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub x: Vec<f64>,
    pub d: DistanceVector,
}

impl DistanceRecord {
    pub fn mirrored(&self) -> Self {
        let half = self.x.len() / 2;
        let mut x = self.x[half..].to_vec();
        x.extend_from_slice(&self.x[..half]);
        Self { x, d: self.d }
    }

    /// Key shared by a record and its mirror.
    fn pair_key(&self) -> Vec<u64> {
        let half = self.x.len() / 2;
        let (a, b) = self.x.split_at(half);
        let (a, b): (Vec<u64>, Vec<u64>) = (a.iter().map(|v| v.to_bits()).collect(), b.iter().map(|v| v.to_bits()).collect());
        if a <= b {
            [a, b].concat()
        } else {
            [b, a].concat()
        }
    }
}

pub fn pair_input(n_i: &NormalizedRep, n_j: &NormalizedRep) -> Vec<f64> {
    let mut x = n_i.values().to_vec();
    x.extend_from_slice(n_j.values());
    x
}

/// One record per unordered pair `i < j`; with `symmetrize` each record is
/// followed by its mirror.
pub fn build_distance_dataset(
    sample: &[(Genome, PredictionProfile)],
    bounds: &SearchSpaceBounds,
    symmetrize: bool,
) -> Result<Vec<DistanceRecord>, SurrogateError> {
    if sample.len() < 2 {
        return Err(SurrogateError::TooFewRecords { needed: 2, got: sample.len() });
    }
    let reps: Vec<NormalizedRep> = sample.iter().map(|(g, _)| normalize(g, bounds)).collect();
    let archs: Vec<_> = reps.iter().map(arch_rep).collect();
    let pairs: Vec<(usize, usize)> =
        (0..sample.len()).flat_map(|i| (i + 1..sample.len()).map(move |j| (i, j))).collect();
    let rows: Result<Vec<Vec<DistanceRecord>>, SurrogateError> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let d = exact_distance(&sample[i].1, &sample[j].1, &archs[i], &archs[j])?;
            let record = DistanceRecord { x: pair_input(&reps[i], &reps[j]), d };
            Ok(if symmetrize { vec![record.clone(), record.mirrored()] } else { vec![record] })
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    /// Candidate features per split; `None` means `ceil(dim / 3)`.
    pub m_try: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { trees: 100, m_try: None, min_leaf: 2, seed: 0 }
    }
}

impl ForestParams {
    fn resolve_m_try(&self, dim: usize) -> Result<usize, SurrogateError> {
        if self.trees < 1 {
            return Err(SurrogateError::Params("tree count must be at least 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(SurrogateError::Params("min_leaf must be at least 1".into()));
        }
        let m = self.m_try.unwrap_or(dim.div_ceil(3));
        if m < 1 || m > dim {
            return Err(SurrogateError::Params(format!("m_try {m} outside [1, {dim}]")));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: [f64; OUTPUTS] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> [f64; OUTPUTS] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

fn leaf_mean(rows: &[usize], targets: &[[f64; OUTPUTS]]) -> [f64; OUTPUTS] {
    let mut sum = [0.0; OUTPUTS];
    for &r in rows {
        for k in 0..OUTPUTS {
            sum[k] += targets[r][k];
        }
    }
    sum.map(|s| s / rows.len() as f64)
}

/// Summed squared error around the mean, over all outputs.
fn sse(sum: &[f64; OUTPUTS], sum_sq: &[f64; OUTPUTS], n: usize) -> f64 {
    (0..OUTPUTS).map(|k| sum_sq[k] - sum[k] * sum[k] / n as f64).sum()
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    /// Rows routed to the left child.
    left_rows: Vec<usize>,
}

struct TreeBuilder<'a> {
    inputs: &'a [Vec<f64>],
    targets: &'a [[f64; OUTPUTS]],
    m_try: usize,
    min_leaf: usize,
}

impl TreeBuilder<'_> {
    fn best_split<R: Rng>(&self, rows: &[usize], rng: &mut R) -> Option<SplitChoice> {
        let n = rows.len();
        let dim = self.inputs[0].len();
        let mut total_sum = [0.0; OUTPUTS];
        let mut total_sq = [0.0; OUTPUTS];
        for &r in rows {
            for k in 0..OUTPUTS {
                total_sum[k] += self.targets[r][k];
                total_sq[k] += self.targets[r][k] * self.targets[r][k];
            }
        }
        let parent = sse(&total_sum, &total_sq, n);
        if parent <= 1e-14 {
            return None;
        }
        let mut features: Vec<usize> = (0..dim).collect();
        features.shuffle(rng);
        let mut evaluated = 0;
        let mut best: Option<SplitChoice> = None;
        let mut sorted: Vec<usize> = rows.to_vec();
        for &f in &features {
            if evaluated == self.m_try {
                break;
            }
            sorted.sort_by(|&a, &b| self.inputs[a][f].total_cmp(&self.inputs[b][f]).then(a.cmp(&b)));
            let lo = self.inputs[sorted[0]][f];
            let hi = self.inputs[sorted[n - 1]][f];
            if lo == hi {
                continue;
            }
            evaluated += 1;
            let mut left_sum = [0.0; OUTPUTS];
            let mut left_sq = [0.0; OUTPUTS];
            for k in 1..n {
                let r = sorted[k - 1];
                for o in 0..OUTPUTS {
                    left_sum[o] += self.targets[r][o];
                    left_sq[o] += self.targets[r][o] * self.targets[r][o];
                }
                if k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let (a, b) = (self.inputs[sorted[k - 1]][f], self.inputs[sorted[k]][f]);
                if a == b {
                    continue;
                }
                let mut right_sum = [0.0; OUTPUTS];
                let mut right_sq = [0.0; OUTPUTS];
                for o in 0..OUTPUTS {
                    right_sum[o] = total_sum[o] - left_sum[o];
                    right_sq[o] = total_sq[o] - left_sq[o];
                }
                let gain = parent - sse(&left_sum, &left_sq, k) - sse(&right_sum, &right_sq, n - k);
                let threshold = a + (b - a) / 2.0;
                let better = match &best {
                    None => true,
                    Some(cur) => {
                        gain > cur.gain
                            || (gain == cur.gain
                                && (f < cur.feature || (f == cur.feature && threshold < cur.threshold)))
                    }
                };
                if better {
                    best = Some(SplitChoice { feature: f, threshold, gain, left_rows: Vec::new() });
                }
            }
        }
        let mut best = best.filter(|b| b.gain > 1e-14)?;
        best.left_rows = rows.iter().copied().filter(|&r| self.inputs[r][best.feature] <= best.threshold).collect();
        Some(best)
    }

    fn grow<R: Rng>(&self, rows: Vec<usize>, rng: &mut R) -> RegressionTree {
        let mut nodes = vec![Node::Leaf { value: [0.0; OUTPUTS] }];
        let mut stack = vec![(0usize, rows)];
        while let Some((slot, rows)) = stack.pop() {
            let split = if rows.len() >= 2 * self.min_leaf { self.best_split(&rows, rng) } else { None };
            match split {
                None => nodes[slot] = Node::Leaf { value: leaf_mean(&rows, self.targets) },
                Some(choice) => {
                    let right_rows: Vec<usize> =
                        rows.iter().copied().filter(|&r| self.inputs[r][choice.feature] > choice.threshold).collect();
                    let left = nodes.len();
                    nodes.push(Node::Leaf { value: [0.0; OUTPUTS] });
                    let right = nodes.len();
                    nodes.push(Node::Leaf { value: [0.0; OUTPUTS] });
                    nodes[slot] = Node::Split { feature: choice.feature, threshold: choice.threshold, left, right };
                    stack.push((right, right_rows));
                    stack.push((left, choice.left_rows));
                }
            }
        }
        RegressionTree { nodes }
    }
}

/// Out-of-bag fit quality, per output.
#[derive(Debug, Clone, PartialEq)]
pub struct OobReport {
    pub mse: [f64; OUTPUTS],
    /// `None` for outputs with zero variance among covered records.
    pub r2: [Option<f64>; OUTPUTS],
    pub covered: usize,
}

impl OobReport {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / OUTPUTS as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestSurrogate {
    trees: Vec<RegressionTree>,
    feature_dim: usize,
    m_try: usize,
    min_leaf: usize,
    seed: u64,
    /// Predictions average both input orders, making them exactly symmetric.
    symmetric: bool,
}

pub const FOREST_VERSION: u32 = 1;
const FOREST_MAGIC: &[u8; 4] = b"NSRF";

pub fn fit(records: &[DistanceRecord], params: &ForestParams, symmetric: bool) -> Result<RandomForestSurrogate, SurrogateError> {
    Ok(fit_with_oob(records, params, symmetric)?.0)
}

/// Fits `params.trees` trees on bootstrap resamples and reports out-of-bag error.
pub fn fit_with_oob(
    records: &[DistanceRecord],
    params: &ForestParams,
    symmetric: bool,
) -> Result<(RandomForestSurrogate, OobReport), SurrogateError> {
    if records.len() < 2 {
        return Err(SurrogateError::TooFewRecords { needed: 2, got: records.len() });
    }
    let dim = records[0].x.len();
    if let Some(bad) = records.iter().find(|r| r.x.len() != dim) {
        return Err(SurrogateError::Dimension { expected: dim, got: bad.x.len() });
    }
    if symmetric && dim % 2 != 0 {
        return Err(SurrogateError::Params("symmetric forests need an even input width".into()));
    }
    let m_try = params.resolve_m_try(dim)?;
    if records.iter().all(|r| r.x == records[0].x) {
        return Err(SurrogateError::DegenerateData);
    }
    let inputs: Vec<Vec<f64>> = records.iter().map(|r| r.x.clone()).collect();
    let targets: Vec<[f64; OUTPUTS]> = records.iter().map(|r| r.d.0).collect();
    let builder = TreeBuilder { inputs: &inputs, targets: &targets, m_try, min_leaf: params.min_leaf };
    let n = records.len();
    let grown: Vec<(RegressionTree, Vec<bool>)> = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(derive_seed(params.seed, tag::TREE, t as u64));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            rows.iter().for_each(|&r| in_bag[r] = true);
            (builder.grow(rows, &mut rng), in_bag)
        })
        .collect();

    let mut sums = vec![[0.0; OUTPUTS]; n];
    let mut counts = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            let p = tree.predict(&inputs[i]);
            for k in 0..OUTPUTS {
                sums[i][k] += p[k];
            }
            counts[i] += 1;
        }
    }
    let covered: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
    let mut mse = [0.0; OUTPUTS];
    let mut r2 = [None; OUTPUTS];
    if !covered.is_empty() {
        for k in 0..OUTPUTS {
            let mean = covered.iter().map(|&i| targets[i][k]).sum::<f64>() / covered.len() as f64;
            let (mut sse, mut sst) = (0.0, 0.0);
            for &i in &covered {
                let pred = sums[i][k] / counts[i] as f64;
                sse += (pred - targets[i][k]).powi(2);
                sst += (targets[i][k] - mean).powi(2);
            }
            mse[k] = sse / covered.len() as f64;
            r2[k] = (sst > 0.0).then(|| 1.0 - sse / sst);
        }
    }
    let forest = RandomForestSurrogate {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        feature_dim: dim,
        m_try,
        min_leaf: params.min_leaf,
        seed: params.seed,
        symmetric,
    };
    Ok((forest, OobReport { mse, r2, covered: covered.len() }))
}

impl RandomForestSurrogate {
    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn m_try(&self) -> usize {
        self.m_try
    }
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    fn mean_over_trees(&self, x: &[f64]) -> [f64; OUTPUTS] {
        let mut sum = [0.0; OUTPUTS];
        for t in &self.trees {
            let p = t.predict(x);
            for k in 0..OUTPUTS {
                sum[k] += p[k];
            }
        }
        sum.map(|s| s / self.trees.len() as f64)
    }

    /// Raw forest output for an arbitrary input row.
    pub fn predict_features(&self, x: &[f64]) -> Result<[f64; OUTPUTS], SurrogateError> {
        if x.len() != self.feature_dim {
            return Err(SurrogateError::Dimension { expected: self.feature_dim, got: x.len() });
        }
        if !self.symmetric {
            return Ok(self.mean_over_trees(x));
        }
        let half = x.len() / 2;
        let mut swapped = x[half..].to_vec();
        swapped.extend_from_slice(&x[..half]);
        let (a, b) = (self.mean_over_trees(x), self.mean_over_trees(&swapped));
        Ok(std::array::from_fn(|k| 0.5 * (a[k] + b[k])))
    }

    pub fn predict(&self, n_i: &NormalizedRep, n_j: &NormalizedRep) -> Result<DistanceVector, SurrogateError> {
        let raw = self.predict_features(&pair_input(n_i, n_j))?;
        Ok(DistanceVector(raw.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SurrogateError> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        crate::harness::write_atomic(path.as_ref(), &bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SurrogateError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), SurrogateError> {
        out.write_all(FOREST_MAGIC)?;
        out.write_all(&FOREST_VERSION.to_le_bytes())?;
        out.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        out.write_all(&(self.m_try as u32).to_le_bytes())?;
        out.write_all(&(self.min_leaf as u32).to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&[self.symmetric as u8])?;
        out.write_all(&(self.trees.len() as u32).to_le_bytes())?;
        for t in &self.trees {
            out.write_all(&(t.nodes.len() as u32).to_le_bytes())?;
            for node in &t.nodes {
                match node {
                    Node::Split { feature, threshold, left, right } => {
                        out.write_all(&[1])?;
                        out.write_all(&(*feature as u32).to_le_bytes())?;
                        out.write_all(&threshold.to_le_bytes())?;
                        out.write_all(&(*left as u32).to_le_bytes())?;
                        out.write_all(&(*right as u32).to_le_bytes())?;
                    }
                    Node::Leaf { value } => {
                        out.write_all(&[0])?;
                        for v in value {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SurrogateError> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(4)? != FOREST_MAGIC {
            return Err(SurrogateError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FOREST_VERSION {
            return Err(SurrogateError::Version { found: version, expected: FOREST_VERSION });
        }
        let feature_dim = r.u32()? as usize;
        let m_try = r.u32()? as usize;
        let min_leaf = r.u32()? as usize;
        let seed = r.u64()?;
        let symmetric = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(SurrogateError::Corrupt(format!("bad symmetry flag {other}"))),
        };
        let tree_count = r.u32()? as usize;
        if tree_count == 0 {
            return Err(SurrogateError::Corrupt("forest has no trees".into()));
        }
        let mut trees = Vec::with_capacity(tree_count.min(1 << 16));
        for _ in 0..tree_count {
            let count = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let node = match r.take(1)?[0] {
                    1 => {
                        let feature = r.u32()? as usize;
                        let threshold = r.f64()?;
                        let left = r.u32()? as usize;
                        let right = r.u32()? as usize;
                        if feature >= feature_dim || left >= count || right >= count {
                            return Err(SurrogateError::Corrupt("node index out of range".into()));
                        }
                        Node::Split { feature, threshold, left, right }
                    }
                    0 => {
                        let mut value = [0.0; OUTPUTS];
                        for v in value.iter_mut() {
                            *v = r.f64()?;
                        }
                        Node::Leaf { value }
                    }
                    other => return Err(SurrogateError::Corrupt(format!("bad node tag {other}"))),
                };
                nodes.push(node);
            }
            if nodes.is_empty() {
                return Err(SurrogateError::Corrupt("empty tree".into()));
            }
            trees.push(RegressionTree { nodes });
        }
        if r.at != bytes.len() {
            return Err(SurrogateError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { trees, feature_dim, m_try, min_leaf, seed, symmetric })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SurrogateError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SurrogateError::Corrupt("unexpected end of file".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, SurrogateError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SurrogateError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, SurrogateError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Average ranks (1-based), ties share the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
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

/// Spearman correlation; `None` when either side has zero variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFidelity {
    pub metric: Metric,
    pub spearman: f64,
    /// Set when predictions or targets were constant; `spearman` is then 0.
    pub degenerate: bool,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub records: usize,
    pub metrics: Vec<MetricFidelity>,
}

impl FidelityReport {
    pub fn get(&self, metric: Metric) -> &MetricFidelity {
        &self.metrics[metric.index()]
    }
}

/// Rank agreement between predicted and exact distances on held-out records.
pub fn rank_fidelity<F>(predict: F, held_out: &[DistanceRecord]) -> Result<FidelityReport, SurrogateError>
where
    F: Fn(&[f64]) -> Result<[f64; OUTPUTS], SurrogateError>,
{
    if held_out.len() < 10 {
        return Err(SurrogateError::TooFewRecords { needed: 10, got: held_out.len() });
    }
    let preds: Vec<[f64; OUTPUTS]> = held_out.iter().map(|r| predict(&r.x)).collect::<Result<_, _>>()?;
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            let k = m.index();
            let p: Vec<f64> = preds.iter().map(|v| v[k].clamp(0.0, 1.0)).collect();
            let t: Vec<f64> = held_out.iter().map(|r| r.d.0[k]).collect();
            let corr = spearman(&p, &t);
            let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
            MetricFidelity { metric: m, spearman: corr.unwrap_or(0.0), degenerate: corr.is_none(), mean_abs_error: mae }
        })
        .collect();
    Ok(FidelityReport { records: held_out.len(), metrics })
}

pub fn forest_fidelity(rf: &RandomForestSurrogate, held_out: &[DistanceRecord]) -> Result<FidelityReport, SurrogateError> {
    rank_fidelity(|x| rf.predict_features(x), held_out)
}

/// Splits records into (fit, held-out) so that a record and its mirror land
/// on the same side. Roughly `fraction` of unordered pairs are held out.
pub fn holdout_split(records: &[DistanceRecord], fraction: f64, seed: u64) -> (Vec<DistanceRecord>, Vec<DistanceRecord>) {
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.pair_key()).or_default().push(i);
    }
    let mut keys: Vec<&Vec<u64>> = groups.keys().collect();
    keys.shuffle(&mut seeded(derive_seed(seed, tag::HOLDOUT, 0)));
    let held = ((keys.len() as f64) * fraction).round() as usize;
    let mut held_rows: Vec<usize> = keys[..held].iter().flat_map(|k| groups[*k].iter().copied()).collect();
    held_rows.sort_unstable();
    let mut is_held = vec![false; records.len()];
    held_rows.iter().for_each(|&i| is_held[i] = true);
    let (mut fit_part, mut held_part) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if is_held[i] {
            held_part.push(r.clone());
        } else {
            fit_part.push(r.clone());
        }
    }
    (fit_part, held_part)
}

pub fn distance_csv_header(rep_len: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..rep_len).map(|k| format!("i{k}")).collect();
    h.extend((0..rep_len).map(|k| format!("j{k}")));
    h.extend(Metric::ALL.iter().map(|m| m.column().to_string()));
    h
}

/// CSV with `2·L` input columns then the six targets. Values use the shortest
/// representation that round-trips exactly.
pub fn write_distance_csv<W: Write>(records: &[DistanceRecord], out: W) -> Result<(), SurrogateError> {
    let rep_len = records.first().map(|r| r.x.len() / 2).unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| SurrogateError::Csv(e.to_string());
    w.write_record(distance_csv_header(rep_len)).map_err(csv_err)?;
    for r in records {
        let row: Vec<String> = r.x.iter().chain(r.d.0.iter()).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_distance_csv<R: Read>(input: R) -> Result<Vec<DistanceRecord>, SurrogateError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = rdr.headers().map_err(|e| SurrogateError::Csv(e.to_string()))?.clone();
    let cols = headers.len();
    if cols < OUTPUTS + 4 || (cols - OUTPUTS) % 2 != 0 {
        return Err(SurrogateError::Csv(format!("unexpected column count {cols}")));
    }
    let expected = distance_csv_header((cols - OUTPUTS) / 2);
    if headers.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(SurrogateError::Csv("header does not match the canonical column names".into()));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| SurrogateError::Csv(format!("row {}: {e}", i + 2)))?;
        let values: Vec<f64> = row
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SurrogateError::Csv(format!("row {}: {e}", i + 2)))?;
        if values.len() != cols {
            return Err(SurrogateError::Csv(format!("row {} has {} columns", i + 2, values.len())));
        }
        let split = cols - OUTPUTS;
        let d: [f64; OUTPUTS] = values[split..].try_into().unwrap();
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SurrogateError::Csv(format!("row {} has values outside [0, 1]", i + 2)));
        }
        out.push(DistanceRecord { x: values[..split].to_vec(), d: DistanceVector(d) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(x: Vec<f64>, d: [f64; OUTPUTS]) -> DistanceRecord {
        DistanceRecord { x, d: DistanceVector(d) }
    }

    fn random_records(n: usize, dim: usize, seed: u64, f: impl Fn(&[f64]) -> [f64; OUTPUTS]) -> Vec<DistanceRecord> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
                let d = f(&x);
                record(x, d)
            })
            .collect()
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let recs = random_records(50, 4, 1, |_| [0.25; OUTPUTS]);
        let rf = fit(&recs, &ForestParams { trees: 8, ..Default::default() }, false).unwrap();
        for r in &recs {
            assert_eq!(rf.predict_features(&r.x).unwrap(), [0.25; OUTPUTS]);
        }
        assert!(rf.trees().iter().all(|t| t.node_count() == 1));
    }

    #[test]
    fn duplicated_record_is_reproduced() {
        let mut recs = vec![record(vec![0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]); 5];
        recs.push(record(vec![0.9, 0.9, 0.9, 0.9], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let rf = fit(&recs, &ForestParams { trees: 5, ..Default::default() }, false).unwrap();
        let got = rf.predict_features(&recs[0].x).unwrap();
        for (g, want) in got.iter().zip([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]) {
            assert!((g - want).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn identical_inputs_are_degenerate() {
        let recs = vec![record(vec![0.5, 0.5], [0.0; OUTPUTS]), record(vec![0.5, 0.5], [1.0; OUTPUTS])];
        assert!(matches!(fit(&recs, &ForestParams::default(), false), Err(SurrogateError::DegenerateData)));
        assert!(matches!(fit(&recs[..1], &ForestParams::default(), false), Err(SurrogateError::TooFewRecords { .. })));
    }

    #[test]
    fn parameter_validation() {
        let recs = random_records(10, 4, 2, |x| [x[0]; OUTPUTS]);
        for p in [
            ForestParams { trees: 0, ..Default::default() },
            ForestParams { m_try: Some(0), ..Default::default() },
            ForestParams { m_try: Some(5), ..Default::default() },
            ForestParams { min_leaf: 0, ..Default::default() },
        ] {
            assert!(matches!(fit(&recs, &p, false), Err(SurrogateError::Params(_))));
        }
    }

    #[test]
    fn leaves_respect_min_leaf() {
        let recs = random_records(200, 3, 3, |x| [x[0], x[1], x[2], x[0] * x[1], 0.5, x[2] * x[2]]);
        let params = ForestParams { trees: 4, min_leaf: 7, m_try: Some(3), seed: 1 };
        let rf = fit(&recs, &params, false).unwrap();
        // With min_leaf rows per leaf and bootstrap size n, the leaf count is at most n / min_leaf.
        for t in rf.trees() {
            let leaves = (t.node_count() + 1) / 2;
            assert!(leaves <= 200 / 7);
        }
    }

    #[test]
    fn synthetic_linear_target_is_learned() {
        let f = |x: &[f64]| -> [f64; OUTPUTS] {
            let y = (0.5 * x[0] + 0.3 * x[1] + 0.2 * x[2]).clamp(0.0, 1.0);
            [y, 1.0 - y, y * 0.5, y, 0.3 * x[3] + 0.7 * x[0], x[1]]
        };
        let recs = random_records(500, 6, 4, f);
        let (_, oob) = fit_with_oob(&recs, &ForestParams { trees: 64, seed: 7, ..Default::default() }, false).unwrap();
        assert!(oob.covered > 450);
        assert!(oob.r2[0].unwrap() >= 0.5, "{:?}", oob.r2);
    }

    #[test]
    fn more_trees_do_not_hurt_out_of_bag_error() {
        let f = |x: &[f64]| -> [f64; OUTPUTS] {
            let y = 0.6 * x[0] + 0.4 * x[1];
            [y, y, y, 1.0 - y, x[2], 0.5]
        };
        let recs = random_records(300, 5, 8, f);
        let mut few = Vec::new();
        let mut many = Vec::new();
        for seed in 0..10 {
            let p = |trees| ForestParams { trees, seed, ..Default::default() };
            few.push(fit_with_oob(&recs, &p(4), false).unwrap().1.mean_mse());
            many.push(fit_with_oob(&recs, &p(64), false).unwrap().1.mean_mse());
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            (v[4] + v[5]) / 2.0
        };
        assert!(median(&mut many) <= median(&mut few));
    }

    #[test]
    fn fitting_is_deterministic() {
        let recs = random_records(120, 4, 5, |x| [x[0], x[1], x[2], x[3], 0.0, 1.0]);
        let p = ForestParams { trees: 10, seed: 3, ..Default::default() };
        assert_eq!(fit(&recs, &p, true).unwrap(), fit(&recs, &p, true).unwrap());
    }

    #[test]
    fn symmetric_forest_is_exactly_symmetric_and_bounded() {
        let recs: Vec<DistanceRecord> = random_records(150, 4, 6, |x| {
            let v = (x[0] - x[2]).abs();
            [v, v * v, 0.5 * v, v, 1.0 - v, (x[1] + x[3]) / 2.0]
        })
        .into_iter()
        .flat_map(|r| [r.mirrored(), r])
        .collect();
        let rf = fit(&recs, &ForestParams { trees: 20, seed: 1, ..Default::default() }, true).unwrap();
        let mut rng = seeded(99);
        let mins: Vec<f64> = (0..OUTPUTS).map(|k| recs.iter().map(|r| r.d.0[k]).fold(f64::INFINITY, f64::min)).collect();
        let maxs: Vec<f64> = (0..OUTPUTS).map(|k| recs.iter().map(|r| r.d.0[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let swapped = [x[2], x[3], x[0], x[1]];
            let ab = rf.predict_features(&x).unwrap();
            assert_eq!(ab, rf.predict_features(&swapped).unwrap());
            for k in 0..OUTPUTS {
                assert!(ab[k] >= mins[k] && ab[k] <= maxs[k]);
            }
        }
    }

    #[test]
    fn prediction_checks_dimensions() {
        let recs = random_records(20, 4, 6, |x| [x[0]; OUTPUTS]);
        let rf = fit(&recs, &ForestParams { trees: 2, ..Default::default() }, false).unwrap();
        assert!(matches!(rf.predict_features(&[0.0; 3]), Err(SurrogateError::Dimension { expected: 4, got: 3 })));
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let recs = random_records(80, 4, 9, |x| [x[0], x[1], x[2], x[3], x[0] * x[1], 0.1]);
        let rf = fit(&recs, &ForestParams { trees: 6, seed: 2, ..Default::default() }, true).unwrap();
        let mut bytes = Vec::new();
        rf.write_to(&mut bytes).unwrap();
        let back = RandomForestSurrogate::from_bytes(&bytes).unwrap();
        let mut rng = seeded(4);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            assert_eq!(rf.predict_features(&x).unwrap(), back.predict_features(&x).unwrap());
        }
        assert!(matches!(
            RandomForestSurrogate::from_bytes(&bytes[..bytes.len() - 5]),
            Err(SurrogateError::Corrupt(_))
        ));
        let mut wrong = bytes.clone();
        wrong[4] = 7;
        assert!(matches!(RandomForestSurrogate::from_bytes(&wrong), Err(SurrogateError::Version { found: 7, .. })));
    }

    #[test]
    fn spearman_edge_cases() {
        let a = [0.1, 0.5, 0.3, 0.9];
        assert_eq!(spearman(&a, &a), Some(1.0));
        assert_eq!(spearman(&a, &[0.2; 4]), None);
        // Ranks (1,3,2,4) against (4,2,3,1): sum of squared differences 20.
        assert!((spearman(&a, &[0.9, 0.1, 0.5, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        // Ranks (1,3,2,4) against (2,4,1,3): sum of squared differences 4.
        assert!((spearman(&a, &[0.2, 0.8, 0.1, 0.6]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn fidelity_of_perfect_and_constant_predictors() {
        let recs = random_records(30, 4, 10, |x| [x[0], x[1], x[2], x[3], x[0], x[1]]);
        let perfect = rank_fidelity(|x| Ok([x[0], x[1], x[2], x[3], x[0], x[1]]), &recs).unwrap();
        assert!(perfect.metrics.iter().all(|m| m.spearman == 1.0 && !m.degenerate && m.mean_abs_error == 0.0));
        let constant = rank_fidelity(|_| Ok([0.5; OUTPUTS]), &recs).unwrap();
        assert!(constant.metrics.iter().all(|m| m.spearman == 0.0 && m.degenerate));
        assert!(rank_fidelity(|_| Ok([0.5; OUTPUTS]), &recs[..9]).is_err());
    }

    #[test]
    fn holdout_keeps_mirrors_together() {
        let base = random_records(40, 4, 11, |x| [x[0]; OUTPUTS]);
        let recs: Vec<DistanceRecord> = base.iter().flat_map(|r| [r.clone(), r.mirrored()]).collect();
        let (fit_part, held) = holdout_split(&recs, 0.2, 3);
        assert_eq!(held.len(), 16);
        assert_eq!(fit_part.len() + held.len(), recs.len());
        for r in &held {
            assert!(held.contains(&r.mirrored()));
            assert!(!fit_part.contains(&r.mirrored()));
        }
    }

    #[test]
    fn distance_csv_round_trip() {
        let recs = random_records(5, 4, 12, |x| [x[0], x[1], x[2], x[3], 0.0, 1.0]);
        let mut buf = Vec::new();
        write_distance_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i0,i1,j0,j1,prop1,prop2,prop_harm,dis,cos_dist,arch_dist\n"));
        assert_eq!(read_distance_csv(buf.as_slice()).unwrap(), recs);
    }
}
