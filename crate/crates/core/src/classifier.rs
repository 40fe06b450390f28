//! The frozen source model: a small sequence classifier with an embedding
//! table, forward evaluation, and gradients with respect to its input
//! embeddings.
//!
//! Two architectures are available:
//!
//! * `bag_mlp`: mean-pool the embedded tokens, one tanh hidden layer, linear
//!   head.
//! * `birnn`: one forward and one backward tanh RNN over the embedded
//!   tokens; the two final states are concatenated and fed to a linear head.
//!
//! Parameters are stored as an ordered list of matrices (biases are n × 1):
//!
//! | architecture | order |
//! |---|---|
//! | `bag_mlp` | `w1` (h×d), `b1` (h), `w2` (C×h), `b2` (C) |
//! | `birnn` | `wx_f` (h×d), `wh_f` (h×h), `b_f` (h), `wx_b`, `wh_b`, `b_b`, `w_out` (C×2h), `b_out` (C) |
//!
//! The same order is used in checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, softmax, Matrix};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    BagMlp,
    Birnn,
}

impl Architecture {
    pub fn tensor_names(self) -> &'static [&'static str] {
        match self {
            Architecture::BagMlp => &["w1", "b1", "w2", "b2"],
            Architecture::Birnn => &["wx_f", "wh_f", "b_f", "wx_b", "wh_b", "b_b", "w_out", "b_out"],
        }
    }

    fn tensor_shapes(self, d: usize, hidden: usize, classes: usize) -> Vec<(usize, usize)> {
        match self {
            Architecture::BagMlp => vec![(hidden, d), (hidden, 1), (classes, hidden), (classes, 1)],
            Architecture::Birnn => vec![
                (hidden, d),
                (hidden, hidden),
                (hidden, 1),
                (hidden, d),
                (hidden, hidden),
                (hidden, 1),
                (classes, 2 * hidden),
                (classes, 1),
            ],
        }
    }
}

/// d × |V_S| embedding table; column `i` embeds source token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: Matrix,
}

impl EmbeddingTable {
    pub fn new(table: Matrix) -> Self {
        Self { table }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.cols()
    }

    /// Embedded sequence (d × L) for source tokens.
    pub fn gather(&self, tokens: &[usize]) -> Result<Matrix> {
        self.table.select_columns(tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    architecture: Architecture,
    num_classes: usize,
    hidden: usize,
    tensors: Vec<Matrix>,
}

impl ClassifierParams {
    pub fn new(
        architecture: Architecture,
        d: usize,
        hidden: usize,
        num_classes: usize,
        tensors: Vec<Matrix>,
    ) -> Result<Self> {
        let shapes = architecture.tensor_shapes(d, hidden, num_classes);
        if tensors.len() != shapes.len() {
            return Err(Error::shape(format!(
                "{:?} needs {} tensors, got {}",
                architecture,
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, want), name) in tensors.iter().zip(&shapes).zip(architecture.tensor_names()) {
            if t.shape() != *want {
                return Err(Error::shape(format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self {
            architecture,
            num_classes,
            hidden,
            tensors,
        })
    }

    fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }
}

/// Source model. Once frozen, nothing in this crate mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenClassifier {
    embeddings: EmbeddingTable,
    params: ClassifierParams,
    frozen: bool,
    seed: u64,
}

/// Intermediate activations kept for the backward pass.
enum Cache {
    BagMlp { mean: Vec<f64>, hidden: Vec<f64> },
    Birnn { fwd: Vec<Vec<f64>>, bwd: Vec<Vec<f64>> },
}

impl FrozenClassifier {
    /// Assembles a frozen model from existing weights.
    pub fn from_parts(embeddings: EmbeddingTable, params: ClassifierParams, seed: u64) -> Result<Self> {
        let expected = params
            .architecture
            .tensor_shapes(embeddings.dim(), params.hidden, params.num_classes);
        let first = params.tensors[0].cols();
        if first != embeddings.dim() || expected[0] != params.tensors[0].shape() {
            return Err(Error::shape(format!(
                "embedding dimension {} does not match input layer width {first}",
                embeddings.dim()
            )));
        }
        Ok(Self {
            embeddings,
            params,
            frozen: true,
            seed,
        })
    }

    /// Uniform[-0.1, 0.1] weights and embeddings, zero biases; not frozen.
    fn initialize(architecture: Architecture, d: usize, hidden: usize, vocab: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |r: usize, c: usize| {
            Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.1..=0.1)).expect("finite")
        };
        let table = uniform(d, vocab);
        let tensors = architecture
            .tensor_shapes(d, hidden, classes)
            .into_iter()
            .map(|(r, c)| if c == 1 { Matrix::zeros(r, 1) } else { uniform(r, c) })
            .collect();
        Self {
            embeddings: EmbeddingTable::new(table),
            params: ClassifierParams {
                architecture,
                num_classes: classes,
                hidden,
                tensors,
            },
            frozen: false,
            seed,
        }
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn params(&self) -> &ClassifierParams {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.vocab_size()
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() == 0 {
            return Err(Error::EmptySequence);
        }
        if x.rows() != self.dim() {
            return Err(Error::shape(format!(
                "embedded sequence has {} rows, model dimension is {}",
                x.rows(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Vec<f64>, Cache)> {
        self.check_input(x)?;
        let t = &self.params.tensors;
        match self.params.architecture {
            Architecture::BagMlp => {
                let len = x.cols() as f64;
                let mean: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum::<f64>() / len).collect();
                let hidden: Vec<f64> = affine(&t[0], &t[1], &mean).into_iter().map(f64::tanh).collect();
                let logits = affine(&t[2], &t[3], &hidden);
                Ok((logits, Cache::BagMlp { mean, hidden }))
            }
            Architecture::Birnn => {
                let h = self.params.hidden;
                let steps = x.cols();
                let columns: Vec<Vec<f64>> = (0..steps).map(|l| x.column(l)).collect();
                let mut fwd = Vec::with_capacity(steps);
                let mut state = vec![0.0; h];
                for col in &columns {
                    state = rnn_step(&t[0], &t[1], &t[2], col, &state);
                    fwd.push(state.clone());
                }
                let mut bwd = vec![Vec::new(); steps];
                let mut state = vec![0.0; h];
                for l in (0..steps).rev() {
                    state = rnn_step(&t[3], &t[4], &t[5], &columns[l], &state);
                    bwd[l] = state.clone();
                }
                let mut concat = fwd[steps - 1].clone();
                concat.extend_from_slice(&bwd[0]);
                let logits = affine(&t[6], &t[7], &concat);
                Ok((logits, Cache::Birnn { fwd, bwd }))
            }
        }
    }

    /// Back-propagates `dlogits` to the inputs, and to the parameters when
    /// `param_grads` is given (accumulating into it).
    fn backward(&self, x: &Matrix, cache: &Cache, dlogits: &[f64], mut param_grads: Option<&mut [Matrix]>) -> Matrix {
        let t = &self.params.tensors;
        let (d, steps) = x.shape();
        let mut dx = Matrix::zeros(d, steps);
        match cache {
            Cache::BagMlp { mean, hidden } => {
                let dh = t[2].tr_matvec(dlogits).expect("shape");
                let dz: Vec<f64> = dh.iter().zip(hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
                let dmean = t[0].tr_matvec(&dz).expect("shape");
                let inv = 1.0 / steps as f64;
                for i in 0..d {
                    for l in 0..steps {
                        dx.set(i, l, dmean[i] * inv);
                    }
                }
                if let Some(g) = param_grads.as_deref_mut() {
                    add_outer(&mut g[0], &dz, mean);
                    add_vec(&mut g[1], &dz);
                    add_outer(&mut g[2], dlogits, hidden);
                    add_vec(&mut g[3], dlogits);
                }
            }
            Cache::Birnn { fwd, bwd } => {
                let h = self.params.hidden;
                let dconcat = t[6].tr_matvec(dlogits).expect("shape");
                if let Some(g) = param_grads.as_deref_mut() {
                    let mut concat = fwd[steps - 1].clone();
                    concat.extend_from_slice(&bwd[0]);
                    add_outer(&mut g[6], dlogits, &concat);
                    add_vec(&mut g[7], dlogits);
                }
                let zeros = vec![0.0; h];

                let mut dh = dconcat[..h].to_vec();
                for l in (0..steps).rev() {
                    let prev = if l == 0 { &zeros } else { &fwd[l - 1] };
                    let da: Vec<f64> = dh.iter().zip(&fwd[l]).map(|(g, s)| g * (1.0 - s * s)).collect();
                    let dxl = t[0].tr_matvec(&da).expect("shape");
                    for i in 0..d {
                        dx.set(i, l, dx.get(i, l) + dxl[i]);
                    }
                    if let Some(g) = param_grads.as_deref_mut() {
                        add_outer(&mut g[0], &da, &x.column(l));
                        add_outer(&mut g[1], &da, prev);
                        add_vec(&mut g[2], &da);
                    }
                    dh = t[1].tr_matvec(&da).expect("shape");
                }

                let mut dh = dconcat[h..].to_vec();
                for l in 0..steps {
                    let prev = if l + 1 == steps { &zeros } else { &bwd[l + 1] };
                    let da: Vec<f64> = dh.iter().zip(&bwd[l]).map(|(g, s)| g * (1.0 - s * s)).collect();
                    let dxl = t[3].tr_matvec(&da).expect("shape");
                    for i in 0..d {
                        dx.set(i, l, dx.get(i, l) + dxl[i]);
                    }
                    if let Some(g) = param_grads.as_deref_mut() {
                        add_outer(&mut g[3], &da, &x.column(l));
                        add_outer(&mut g[4], &da, prev);
                        add_vec(&mut g[5], &da);
                    }
                    dh = t[4].tr_matvec(&da).expect("shape");
                }
            }
        }
        dx
    }

    /// Gradient of an arbitrary scalar with respect to the embedded inputs,
    /// given its gradient `dlogits` with respect to the logits.
    pub fn backprop_logit_grad(&self, embedded: &Matrix, dlogits: &[f64]) -> Result<Matrix> {
        if dlogits.len() != self.num_classes() {
            return Err(Error::shape(format!(
                "{} logit gradients for {} classes",
                dlogits.len(),
                self.num_classes()
            )));
        }
        let (_, cache) = self.forward_cached(embedded)?;
        Ok(self.backward(embedded, &cache, dlogits, None))
    }

    /// One forward pass, then back-propagation of `dlogits(logits)` to the
    /// inputs.
    pub(crate) fn forward_backward<F>(&self, embedded: &Matrix, dlogits: F) -> Result<(Vec<f64>, Matrix)>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        let (logits, cache) = self.forward_cached(embedded)?;
        let dl = dlogits(&logits);
        let dx = self.backward(embedded, &cache, &dl, None);
        Ok((logits, dx))
    }

    /// Stable fingerprint of every weight (hex SHA-256 over the bit patterns).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}", self.params.architecture).as_bytes());
        for m in std::iter::once(self.embeddings.matrix()).chain(&self.params.tensors) {
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| dot(w.row(i), x) + b.get(i, 0)).collect()
}

fn rnn_step(wx: &Matrix, wh: &Matrix, b: &Matrix, x: &[f64], prev: &[f64]) -> Vec<f64> {
    (0..wx.rows())
        .map(|i| (dot(wx.row(i), x) + dot(wh.row(i), prev) + b.get(i, 0)).tanh())
        .collect()
}

fn add_outer(g: &mut Matrix, a: &[f64], b: &[f64]) {
    let cols = g.cols();
    let data = g.data_mut();
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            data[i * cols + j] += ai * bj;
        }
    }
}

fn add_vec(g: &mut Matrix, a: &[f64]) {
    for (gi, &ai) in g.data_mut().iter_mut().zip(a) {
        *gi += ai;
    }
}

/// Logits for an embedded sequence (d × L).
pub fn forward_embedded(model: &FrozenClassifier, embedded: &Matrix) -> Result<Vec<f64>> {
    model.forward_cached(embedded).map(|(logits, _)| logits)
}

/// Logits for a sequence of source tokens.
pub fn forward_tokens(model: &FrozenClassifier, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    forward_embedded(model, &model.embeddings.gather(tokens)?)
}

/// ∂ cross_entropy(softmax(logits), target) / ∂ embedded.
pub fn input_gradient(model: &FrozenClassifier, embedded: &Matrix, target_class: usize) -> Result<Matrix> {
    if !model.frozen {
        return Err(Error::NotFrozen);
    }
    if target_class >= model.num_classes() {
        return Err(Error::Index {
            index: target_class,
            len: model.num_classes(),
        });
    }
    let (logits, cache) = model.forward_cached(embedded)?;
    let mut dlogits = softmax(&logits)?;
    dlogits[target_class] -= 1.0;
    Ok(model.backward(embedded, &cache, &dlogits, None))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &FrozenClassifier, dataset: &SequenceDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (seq, label) in dataset.iter() {
        if argmax(&forward_tokens(model, seq)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Embedding dimension.
    pub d: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::BagMlp,
            d: 32,
            hidden: 16,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("d, hidden, epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    /// Majority-class accuracy on the training data.
    pub majority_class_accuracy: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains embeddings and classifier from scratch with plain mini-batch SGD
/// and returns the frozen model.
pub fn train_source(
    train: &SequenceDataset,
    valid: &SequenceDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FrozenClassifier, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::DegenerateData("empty training set".into()));
    }
    let present = train.class_counts().iter().filter(|&&c| c > 0).count();
    if train.num_classes() < 2 || present < 2 {
        return Err(Error::DegenerateData("training data must contain at least two classes".into()));
    }

    let mut model = FrozenClassifier::initialize(
        cfg.architecture,
        cfg.d,
        cfg.hidden,
        train.vocab().len(),
        train.num_classes(),
        seed,
    );
    // Separate stream for shuffling so initialization does not depend on it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let mut emb_grad = Matrix::zeros(model.dim(), model.vocab_size());
            for &i in batch {
                let (seq, label) = train.get(i);
                let x = model.embeddings.gather(seq)?;
                let (logits, cache) = model.forward_cached(&x)?;
                epoch_loss += log_sum_exp(logits.iter().copied()) - logits[label];
                let mut dlogits = softmax(&logits)?;
                dlogits[label] -= 1.0;
                let dx = model.backward(&x, &cache, &dlogits, Some(&mut grads));
                for (l, &tok) in seq.iter().enumerate() {
                    for r in 0..model.dim() {
                        emb_grad.set(r, tok, emb_grad.get(r, tok) + dx.get(r, l));
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in model.params.tensors.iter_mut().zip(&grads) {
                sgd(p, g, step);
            }
            sgd(&mut model.embeddings.table, &emb_grad, step);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::numeric("training diverged"));
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
    }

    model.frozen = true;
    for j in 0..model.vocab_size() {
        if model.embeddings.table.column(j).iter().all(|&v| v == 0.0) {
            return Err(Error::numeric(format!("embedding column {j} collapsed to zero")));
        }
    }
    let report = TrainReport {
        train_accuracy: accuracy(&model, train)?,
        valid_accuracy: accuracy(&model, valid)?,
        majority_class_accuracy: train.majority_class_accuracy(),
        epoch_losses,
    };
    Ok((model, report))
}

fn sgd(p: &mut Matrix, g: &Matrix, step: f64) {
    for (pi, gi) in p.data_mut().iter_mut().zip(g.as_slice()) {
        *pi -= step * gi;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    architecture: Architecture,
    d: usize,
    vocab_size: usize,
    num_classes: usize,
    hidden: usize,
    seed: u64,
    /// `embeddings` first, then the architecture's tensors in order.
    tensors: Vec<TensorRecord>,
}

impl FrozenClassifier {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = vec![record("embeddings", self.embeddings.matrix())];
        for (name, m) in self.params.architecture.tensor_names().iter().zip(&self.params.tensors) {
            tensors.push(record(name, m));
        }
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.params.architecture,
            d: self.dim(),
            vocab_size: self.vocab_size(),
            num_classes: self.num_classes(),
            hidden: self.params.hidden,
            seed: self.seed,
            tensors,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// Parses a checkpoint; the result is always frozen.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", doc.format_version)));
        }
        let names = doc.architecture.tensor_names();
        if doc.tensors.len() != names.len() + 1 {
            return Err(Error::Format(format!("expected {} tensors", names.len() + 1)));
        }
        let mut matrices = Vec::with_capacity(doc.tensors.len());
        let expected_names = std::iter::once("embeddings").chain(names.iter().copied());
        for (rec, want) in doc.tensors.into_iter().zip(expected_names) {
            if rec.name != want {
                return Err(Error::Format(format!("expected tensor {want:?}, found {:?}", rec.name)));
            }
            matrices.push(Matrix::new(rec.rows, rec.cols, rec.data)?);
        }
        let table = matrices.remove(0);
        if table.shape() != (doc.d, doc.vocab_size) {
            return Err(Error::Format(format!(
                "embedding table is {:?}, header says {}x{}",
                table.shape(),
                doc.d,
                doc.vocab_size
            )));
        }
        let params = ClassifierParams::new(doc.architecture, doc.d, doc.hidden, doc.num_classes, matrices)?;
        FrozenClassifier::from_parts(EmbeddingTable::new(table), params, doc.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn record(name: &str, m: &Matrix) -> TensorRecord {
    TensorRecord {
        name: name.to_owned(),
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice().to_vec(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{split, synth_tasks, SplitSpec, SynthConfig};

    pub(crate) fn random_model(arch: Architecture, d: usize, hidden: usize, vocab: usize, classes: usize, seed: u64) -> FrozenClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FrozenClassifier::initialize(arch, d, hidden, vocab, classes, seed);
        // larger weights and non-zero biases so every path matters
        for t in m.params.tensors.iter_mut().chain(std::iter::once(&mut m.embeddings.table)) {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        m.frozen = true;
        m
    }

    fn random_input(d: usize, len: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(d, len, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn loss(model: &FrozenClassifier, x: &Matrix, class: usize) -> f64 {
        let logits = forward_embedded(model, x).unwrap();
        log_sum_exp(logits.iter().copied()) - logits[class]
    }

    /// Central differences, step 1e-6.
    fn fd_gradient(model: &FrozenClassifier, x: &Matrix, class: usize) -> Matrix {
        let h = 1e-6;
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            (loss(model, &plus, class) - loss(model, &minus, class)) / (2.0 * h)
        })
        .unwrap()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(1e-12)
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut m = random_model(Architecture::BagMlp, 4, 3, 5, 2, 1);
        for t in m.params.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = forward_embedded(&m, &Matrix::zeros(4, 3)).unwrap();
        assert_eq!(softmax(&logits).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_two_layer_logits() {
        // d = 2, hidden = 2, identity first layer, b1 = (0.5, 0), w2 = [[1, -1], [2, 0]], b2 = (0, 1)
        let params = ClassifierParams::new(
            Architecture::BagMlp,
            2,
            2,
            2,
            vec![
                Matrix::identity(2),
                Matrix::from_rows(&[[0.5], [0.0]]).unwrap(),
                Matrix::from_rows(&[[1.0, -1.0], [2.0, 0.0]]).unwrap(),
                Matrix::from_rows(&[[0.0], [1.0]]).unwrap(),
            ],
        )
        .unwrap();
        let table = Matrix::from_rows(&[[0.3, 1.0], [-0.2, 0.0]]).unwrap();
        let m = FrozenClassifier::from_parts(EmbeddingTable::new(table), params, 0).unwrap();
        let logits = forward_tokens(&m, &[0]).unwrap();
        let h0 = 0.8f64.tanh();
        let h1 = (-0.2f64).tanh();
        assert_eq!(logits, vec![h0 - h1, 2.0 * h0 + 1.0]);
    }

    #[test]
    fn bag_mlp_is_permutation_invariant() {
        let m = random_model(Architecture::BagMlp, 5, 4, 9, 3, 2);
        let a = forward_tokens(&m, &[1, 2, 3, 7]).unwrap();
        let b = forward_tokens(&m, &[7, 3, 1, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_tokens_is_gather_then_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [Architecture::BagMlp, Architecture::Birnn] {
            let m = random_model(arch, 6, 4, 20, 2, 3);
            let tokens: Vec<usize> = (0..7).map(|_| rng.gen_range(0..20)).collect();
            let cols: Vec<Vec<f64>> = tokens.iter().map(|&t| m.embeddings().matrix().column(t)).collect();
            let gathered = Matrix::from_columns(&cols).unwrap();
            assert_eq!(forward_tokens(&m, &tokens).unwrap(), forward_embedded(&m, &gathered).unwrap());
        }
    }

    #[test]
    fn forward_errors() {
        let m = random_model(Architecture::BagMlp, 3, 2, 4, 2, 4);
        assert!(matches!(forward_tokens(&m, &[]), Err(Error::EmptySequence)));
        assert!(matches!(forward_tokens(&m, &[4]), Err(Error::Index { .. })));
        assert!(matches!(forward_embedded(&m, &Matrix::zeros(3, 0)), Err(Error::EmptySequence)));
        assert!(matches!(
            input_gradient(&m, &Matrix::zeros(3, 1), 2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn gradient_vanishes_when_confident() {
        let mut m = random_model(Architecture::BagMlp, 3, 2, 4, 2, 5);
        m.params.tensors[3] = Matrix::from_rows(&[[60.0], [0.0]]).unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| 0.1 * (i + j) as f64).unwrap();
        let g = input_gradient(&m, &x, 0).unwrap();
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let arch = if trial % 2 == 0 { Architecture::BagMlp } else { Architecture::Birnn };
            let m = random_model(arch, 5, 4, 10, 3, 100 + trial);
            let x = random_input(5, 1 + trial as usize % 5, &mut rng);
            let class = trial as usize % 3;
            let g = input_gradient(&m, &x, class).unwrap();
            let fd = fd_gradient(&m, &x, class);
            assert!(rel_err(&g, &fd) <= 1e-5, "trial {trial}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for arch in [Architecture::BagMlp, Architecture::Birnn] {
            let m = random_model(arch, 4, 3, 6, 2, 8);
            let x = random_input(4, 3, &mut rng);
            let (logits, cache) = m.forward_cached(&x).unwrap();
            let mut dl = softmax(&logits).unwrap();
            dl[1] -= 1.0;
            let mut grads = m.params.zeros_like();
            m.backward(&x, &cache, &dl, Some(&mut grads));
            for (k, g) in grads.iter().enumerate() {
                for idx in 0..g.as_slice().len() {
                    let h = 1e-6;
                    let mut plus = m.clone();
                    plus.params.tensors[k].data_mut()[idx] += h;
                    let mut minus = m.clone();
                    minus.params.tensors[k].data_mut()[idx] -= h;
                    let fd = (loss(&plus, &x, 1) - loss(&minus, &x, 1)) / (2.0 * h);
                    let an = g.as_slice()[idx];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{arch:?} tensor {k}[{idx}]: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn training_requires_two_classes_and_is_deterministic() {
        let (source, _) = synth_tasks(1, &SynthConfig {
            source_size: 200,
            target_size: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let single = source.subset(&[0, 2, 4, 6]);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        assert!(matches!(train_source(&single, &single, &cfg, 1), Err(Error::DegenerateData(_))));

        let (a, ra) = train_source(&source, &source, &cfg, 11).unwrap();
        let (b, rb) = train_source(&source, &source, &cfg, 11).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ra, rb);
        assert!((ra.majority_class_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn synthetic_source_is_learnable() {
        let (source, _) = synth_tasks(21, &SynthConfig::default()).unwrap();
        let parts = split(&source, &SplitSpec::default()).unwrap();
        let (_, report) = train_source(&parts.train, &parts.valid, &TrainConfig::default(), 21).unwrap();
        assert!(report.valid_accuracy >= 0.95, "valid accuracy {}", report.valid_accuracy);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for arch in [Architecture::BagMlp, Architecture::Birnn] {
            let m = random_model(arch, 4, 3, 7, 2, 9);
            let back = FrozenClassifier::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.fingerprint(), m.fingerprint());
        }
        let m = random_model(Architecture::BagMlp, 4, 3, 7, 2, 9);
        let text = m.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(FrozenClassifier::from_json(&text), Err(Error::Format(_))));
    }
}
