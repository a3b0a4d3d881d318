//! Residual multilayer perceptrons built from genomes, trained with plain
//! mini-batch SGD on softmax cross-entropy, separately or as a joint group.
//!
//! Layout for a genome `(c, [(o¹,d¹)..(oʳ,dʳ)])`:
//!
//! ```text
//! h⁰   = relu(x W_in + b_in)                      F -> c
//! hⁱ   = dropout(relu(hⁱ⁻¹ Aⁱ + aⁱ), dⁱ) + skip(hⁱ⁻¹)   skip = identity or hⁱ⁻¹ Pⁱ
//! out  = hʳ W_head + b_head                       oʳ -> C
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataSplit, LabeledDataset};
use crate::genome::{genome_to_config, Genome};
use crate::rng::{derive_seed, seeded, tag};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("genome {index}: {source}")]
    Member { index: usize, source: Box<LearnerError> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl LearnerError {
    /// Index of the offending genome, when known.
    pub fn member_index(&self) -> Option<usize> {
        match self {
            LearnerError::Member { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.batch_size < 1 {
            return Err(LearnerError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnerError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, learning_rate: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Dense {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Self { w: uniform_matrix(fan_in, fan_out, gain, rng), b: Array1::zeros(fan_out) }
    }

    fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Uniform on `±sqrt(3 * gain / fan_in)`: `gain = 2` is He initialisation
/// for ReLU layers, `gain = 1` preserves variance through a linear map.
fn uniform_matrix<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let a = (3.0 * gain / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a))
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock {
    inner: Dense,
    /// `None` when input and output widths agree.
    skip: Option<Array2<f64>>,
    dropout: f64,
}

/// Trainable parameters, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    input: Dense,
    blocks: Vec<ResidualBlock>,
    head: Dense,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Self {
            input: self.input.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    inner: b.inner.zeros_like(),
                    skip: b.skip.as_ref().map(|p| Array2::zeros(p.raw_dim())),
                    dropout: b.dropout,
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.input.w.as_slice().unwrap(), self.input.b.as_slice().unwrap()];
        for b in &self.blocks {
            out.push(b.inner.w.as_slice().unwrap());
            out.push(b.inner.b.as_slice().unwrap());
            if let Some(p) = &b.skip {
                out.push(p.as_slice().unwrap());
            }
        }
        out.push(self.head.w.as_slice().unwrap());
        out.push(self.head.b.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.input.w.as_slice_mut().unwrap(), self.input.b.as_slice_mut().unwrap()];
        for b in &mut self.blocks {
            out.push(b.inner.w.as_slice_mut().unwrap());
            out.push(b.inner.b.as_slice_mut().unwrap());
            if let Some(p) = &mut b.skip {
                out.push(p.as_slice_mut().unwrap());
            }
        }
        out.push(self.head.w.as_slice_mut().unwrap());
        out.push(self.head.b.as_slice_mut().unwrap());
        out
    }

    /// Products of transposed views may come back non-contiguous for
    /// degenerate shapes; flattening needs row-major storage.
    fn into_standard_layout(mut self) -> Self {
        fn fix(a: &mut Array2<f64>) {
            if !a.is_standard_layout() {
                *a = a.as_standard_layout().into_owned();
            }
        }
        fix(&mut self.input.w);
        fix(&mut self.head.w);
        for b in &mut self.blocks {
            fix(&mut b.inner.w);
            if let Some(p) = &mut b.skip {
                fix(p);
            }
        }
        self
    }

    fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn to_vec(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
    }

    fn descend(&mut self, grads: &Params, rate: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= rate * g);
        }
    }
}

/// Per-block inverted-dropout masks for one batch: entries are `0` or `1/(1-d)`.
pub type DropoutMasks = Vec<Array2<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    genome: Genome,
    seed: u64,
    feature_dim: usize,
    class_count: usize,
    params: Params,
}

struct Cache {
    input_pre: Array2<f64>,
    /// Input to block i (`h^{i-1}`), followed by the final hidden state.
    hidden: Vec<Array2<f64>>,
    block_pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    logits: Array2<f64>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ResidualMlp {
    pub fn build(genome: &Genome, feature_dim: usize, class_count: usize, seed: u64) -> Result<Self, LearnerError> {
        if feature_dim < 1 || class_count < 2 {
            return Err(LearnerError::Shape(format!(
                "need feature_dim >= 1 and class_count >= 2, got {feature_dim}, {class_count}"
            )));
        }
        let spec = genome_to_config(genome);
        let mut rng = seeded(derive_seed(seed, tag::INIT, 0));
        let input = Dense::init(feature_dim, spec.input_width, 2.0, &mut rng);
        let mut width = spec.input_width;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        // Each branch adds to the running sum, so branches start at 1/r of
        // the He variance to keep the output scale independent of depth.
        let branch_gain = 2.0 / spec.blocks.len() as f64;
        for b in &spec.blocks {
            let inner = Dense::init(width, b.width, branch_gain, &mut rng);
            let skip = (width != b.width).then(|| uniform_matrix(width, b.width, 1.0, &mut rng));
            blocks.push(ResidualBlock { inner, skip, dropout: b.dropout });
            width = b.width;
        }
        let head = Dense::init(width, class_count, 1.0, &mut rng);
        Ok(Self { genome: genome.clone(), seed, feature_dim, class_count, params: Params { input, blocks, head } })
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn class_count(&self) -> usize {
        self.class_count
    }
    pub fn block_count(&self) -> usize {
        self.params.blocks.len()
    }
    pub fn block_widths(&self) -> Vec<usize> {
        self.params.blocks.iter().map(|b| b.inner.b.len()).collect()
    }
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
    pub fn parameters(&self) -> Vec<f64> {
        self.params.to_vec()
    }
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<(), LearnerError> {
        if values.len() != self.params.count() {
            return Err(LearnerError::Shape(format!("{} values for {} parameters", values.len(), self.params.count())));
        }
        self.params.assign(values);
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), LearnerError> {
        if x.ncols() != self.feature_dim {
            return Err(LearnerError::Shape(format!("model expects {} features, got {}", self.feature_dim, x.ncols())));
        }
        Ok(())
    }

    /// Draws inverted-dropout masks for a batch of `rows` rows.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DropoutMasks {
        self.params
            .blocks
            .iter()
            .map(|b| {
                let keep = 1.0 - b.dropout;
                let width = b.inner.b.len();
                Array2::from_shape_simple_fn((rows, width), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            })
            .collect()
    }

    fn forward(&self, x: &ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> Cache {
        let p = &self.params;
        let input_pre = p.input.apply(x);
        let mut h = relu(&input_pre);
        let mut hidden = Vec::with_capacity(p.blocks.len() + 1);
        let mut block_pre = Vec::with_capacity(p.blocks.len());
        let mut kept = Vec::with_capacity(p.blocks.len());
        for (i, b) in p.blocks.iter().enumerate() {
            let pre = b.inner.apply(&h.view());
            let mut z = relu(&pre);
            let mask = masks.map(|m| m[i].clone());
            if let Some(m) = &mask {
                z *= m;
            }
            let next = match &b.skip {
                Some(proj) => z + h.dot(proj),
                None => z + &h,
            };
            hidden.push(h);
            block_pre.push(pre);
            kept.push(mask);
            h = next;
        }
        let logits = p.head.apply(&h.view());
        hidden.push(h);
        Cache { input_pre, hidden, block_pre, masks: kept, logits }
    }

    fn backward(&self, x: &ArrayView2<f64>, cache: &Cache, dlogits: &Array2<f64>) -> Params {
        let p = &self.params;
        let mut g = p.zeros_like();
        let last = cache.hidden.last().expect("hidden states");
        g.head.w = last.t().dot(dlogits);
        g.head.b = dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&p.head.w.t());
        for i in (0..p.blocks.len()).rev() {
            let block = &p.blocks[i];
            let h_in = &cache.hidden[i];
            let mut dpre = dh.clone();
            if let Some(m) = &cache.masks[i] {
                dpre *= m;
            }
            relu_backward(&mut dpre, &cache.block_pre[i]);
            g.blocks[i].inner.w = h_in.t().dot(&dpre);
            g.blocks[i].inner.b = dpre.sum_axis(Axis(0));
            let mut dprev = dpre.dot(&block.inner.w.t());
            match &block.skip {
                Some(proj) => {
                    g.blocks[i].skip = Some(h_in.t().dot(&dh));
                    dprev += &dh.dot(&proj.t());
                }
                None => dprev += &dh,
            }
            dh = dprev;
        }
        relu_backward(&mut dh, &cache.input_pre);
        g.input.w = x.t().dot(&dh);
        g.input.b = dh.sum_axis(Axis(0));
        g.into_standard_layout()
    }

    pub fn logits(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>, LearnerError> {
        self.check_input(x)?;
        Ok(self.forward(x, None).logits)
    }

    pub fn predict_proba(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>, LearnerError> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Mean cross-entropy with evaluation-mode (no dropout) forward pass.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64, LearnerError> {
        Ok(cross_entropy(&self.logits(&data.features().view())?, data.labels()).0)
    }

    /// Loss and flattened parameter gradient for one batch under fixed dropout
    /// masks (`None` disables dropout). Exposed for gradient checking.
    pub fn loss_and_gradient(
        &self,
        x: &ArrayView2<f64>,
        labels: &[usize],
        masks: Option<&[Array2<f64>]>,
    ) -> Result<(f64, Vec<f64>), LearnerError> {
        self.check_input(x)?;
        let cache = self.forward(x, masks);
        let (loss, dlogits) = cross_entropy(&cache.logits, labels);
        Ok((loss, self.backward(x, &cache, &dlogits).to_vec()))
    }

    /// Persists the model: magic, version, JSON header length, JSON header,
    /// then the parameter vector as little-endian `f64`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LearnerError> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        crate::harness::write_atomic(path.as_ref(), &bytes)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), LearnerError> {
        let header = ModelHeader {
            genome: self.genome.clone(),
            feature_dim: self.feature_dim,
            class_count: self.class_count,
            seed: self.seed,
            parameter_count: self.params.count(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| LearnerError::Corrupt(e.to_string()))?;
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for v in self.params.to_vec() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LearnerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnerError> {
        let corrupt = |m: &str| LearnerError::Corrupt(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(LearnerError::Version { found: version, expected: MODEL_VERSION });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + header_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(body).map_err(|e| LearnerError::Corrupt(e.to_string()))?;
        let mut model = Self::build(&header.genome, header.feature_dim, header.class_count, header.seed)?;
        let data = &bytes[12 + header_len..];
        if model.params.count() != header.parameter_count || data.len() != 8 * header.parameter_count {
            return Err(corrupt("parameter block has the wrong length"));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        model.params.assign(&values);
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"NSMP";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    genome: Genome,
    feature_dim: usize,
    class_count: usize,
    seed: u64,
    parameter_count: usize,
}

fn check_data(model: &ResidualMlp, data: &LabeledDataset) -> Result<(), LearnerError> {
    if data.feature_dim() != model.feature_dim || data.class_count() > model.class_count {
        return Err(LearnerError::Shape(format!(
            "data has {} features / {} classes, model {} / {}",
            data.feature_dim(),
            data.class_count(),
            model.feature_dim,
            model.class_count
        )));
    }
    Ok(())
}

fn batch_order(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, tag::BATCHES, epoch as u64)));
    order
}

fn dropout_stream(model: &ResidualMlp, cfg: &TrainConfig) -> crate::rng::Rng {
    seeded(derive_seed(model.seed ^ cfg.seed.rotate_left(17), tag::DROPOUT, 0))
}

/// Trains the group as one composite whose logits are the mean of the member
/// logits. A group of one is ordinary training. Returns per-epoch mean batch loss.
fn train_group(
    mut models: Vec<ResidualMlp>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Vec<ResidualMlp>, Vec<f64>), LearnerError> {
    cfg.validate()?;
    for m in &models {
        check_data(m, data)?;
    }
    if models.is_empty() {
        return Ok((models, Vec::new()));
    }
    let n = data.len();
    let scale = 1.0 / models.len() as f64;
    let mut streams: Vec<_> = models.iter().map(|m| dropout_stream(m, cfg)).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = batch_order(cfg, epoch, n);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let masks: Vec<DropoutMasks> =
                models.iter().zip(streams.iter_mut()).map(|(m, rng)| m.sample_masks(chunk.len(), rng)).collect();
            let caches: Vec<Cache> =
                models.iter().zip(&masks).map(|(m, mk)| m.forward(&x.view(), Some(mk))).collect();
            let mut mean_logits = caches[0].logits.clone();
            for c in &caches[1..] {
                mean_logits += &c.logits;
            }
            if models.len() > 1 {
                mean_logits *= scale;
            }
            let (loss, mut dlogits) = cross_entropy(&mean_logits, &y);
            if !loss.is_finite() {
                return Err(LearnerError::Diverged { epoch });
            }
            if models.len() > 1 {
                dlogits *= scale;
            }
            for (m, cache) in models.iter_mut().zip(&caches) {
                let grads = m.backward(&x.view(), cache, &dlogits);
                m.params.descend(&grads, cfg.learning_rate);
            }
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    if models.iter().any(|m| m.params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite()))) {
        return Err(LearnerError::Diverged { epoch: cfg.epochs });
    }
    Ok((models, history))
}

pub fn train_separate(model: ResidualMlp, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ResidualMlp, LearnerError> {
    Ok(train_separate_logged(model, data, cfg)?.0)
}

/// As [`train_separate`], also returning the mean batch loss of every epoch.
pub fn train_separate_logged(
    model: ResidualMlp,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ResidualMlp, Vec<f64>), LearnerError> {
    let (mut models, history) = train_group(vec![model], data, cfg)?;
    Ok((models.pop().expect("one model"), history))
}

/// Models whose genome has the joint flag are trained together through the
/// mean-logit composite; the rest are trained one by one. Order is preserved.
pub fn train_joint(models: Vec<ResidualMlp>, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<ResidualMlp>, LearnerError> {
    if models.is_empty() {
        return Err(LearnerError::Config("no models to train".into()));
    }
    let total = models.len();
    let mut slots: Vec<Option<ResidualMlp>> = (0..total).map(|_| None).collect();
    let mut joint_idx = Vec::new();
    let mut joint = Vec::new();
    let mut separate = Vec::new();
    for (i, m) in models.into_iter().enumerate() {
        if m.genome.joint {
            joint_idx.push(i);
            joint.push(m);
        } else {
            separate.push((i, m));
        }
    }
    let first_joint = joint_idx.first().copied();
    let trained_separate: Vec<Result<(usize, ResidualMlp), LearnerError>> = separate
        .into_par_iter()
        .map(|(i, m)| {
            train_separate(m, data, cfg)
                .map(|m| (i, m))
                .map_err(|e| LearnerError::Member { index: i, source: Box::new(e) })
        })
        .collect();
    for r in trained_separate {
        let (i, m) = r?;
        slots[i] = Some(m);
    }
    let (trained_joint, _) = train_group(joint, data, cfg)
        .map_err(|e| LearnerError::Member { index: first_joint.unwrap_or(0), source: Box::new(e) })?;
    for (i, m) in joint_idx.into_iter().zip(trained_joint) {
        slots[i] = Some(m);
    }
    Ok(slots.into_iter().map(|m| m.expect("every slot trained")).collect())
}

/// Predictions on a validation set, with the correctness vector `p` and its
/// complement `w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionProfile {
    predictions: Vec<usize>,
    correct: Vec<bool>,
}

impl PredictionProfile {
    pub fn new(predictions: Vec<usize>, labels: &[usize]) -> Result<Self, LearnerError> {
        if predictions.len() != labels.len() {
            return Err(LearnerError::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        let correct = predictions.iter().zip(labels).map(|(p, l)| p == l).collect();
        Ok(Self { predictions, correct })
    }

    /// Builds a profile straight from a correctness vector (predictions are
    /// recorded as `0` for correct and `1` for wrong against all-zero labels).
    pub fn from_correct(correct: Vec<bool>) -> Self {
        let predictions = correct.iter().map(|&c| usize::from(!c)).collect();
        Self { predictions, correct }
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }
    pub fn correct(&self) -> &[bool] {
        &self.correct
    }
    pub fn wrong(&self) -> Vec<bool> {
        self.correct.iter().map(|c| !c).collect()
    }
    pub fn len(&self) -> usize {
        self.correct.len()
    }
    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }
}

pub fn evaluate(model: &ResidualMlp, data: &LabeledDataset) -> Result<PredictionProfile, LearnerError> {
    check_data(model, data)?;
    let logits = model.logits(&data.features().view())?;
    let predictions = logits.axis_iter(Axis(0)).map(argmax).collect();
    PredictionProfile::new(predictions, data.labels())
}

/// Seed of the model built for `genome` under `cfg`. It depends on the genome
/// alone, not on its position, so equal genomes train to equal models.
pub fn member_seed(cfg: &TrainConfig, genome: &Genome) -> u64 {
    let mut s = derive_seed(cfg.seed, tag::POPULATION, u64::from(genome.joint));
    s = derive_seed(s, tag::POPULATION, genome.first_width as u64);
    for b in &genome.blocks {
        s = derive_seed(s, b.width as u64, b.dropout.to_bits());
    }
    s
}

pub fn build_population(genomes: &[Genome], feature_dim: usize, class_count: usize, cfg: &TrainConfig) -> Result<Vec<ResidualMlp>, LearnerError> {
    genomes
        .iter()
        .map(|g| ResidualMlp::build(g, feature_dim, class_count, member_seed(cfg, g)))
        .collect()
}

/// Builds, trains (honouring joint flags) and profiles every genome on the
/// validation part. Output order matches input order.
pub fn train_population_models(
    genomes: &[Genome],
    data: &DataSplit,
    cfg: &TrainConfig,
) -> Result<Vec<ResidualMlp>, LearnerError> {
    if genomes.is_empty() {
        return Err(LearnerError::Config("empty population".into()));
    }
    let models = build_population(genomes, data.feature_dim(), data.class_count(), cfg)?;
    train_joint(models, &data.train, cfg)
}

pub fn train_population(genomes: &[Genome], data: &DataSplit, cfg: &TrainConfig) -> Result<Vec<PredictionProfile>, LearnerError> {
    let models = train_population_models(genomes, data, cfg)?;
    models.par_iter().map(|m| evaluate(m, &data.val)).collect()
}
