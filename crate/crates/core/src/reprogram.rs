//! Reprogramming a frozen classifier for a new token vocabulary.
//!
//! Target token `j` is embedded as `V_S · θ[:, j]`, a combination of the
//! source embedding columns, and the source model's class probabilities are
//! pooled into target classes through a [`LabelMap`]. Training alternates a
//! sparse re-coding of the implied target embeddings against the normalized
//! source embeddings with mini-batch gradient steps on θ through the frozen
//! model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::FrozenClassifier;
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, matmul, softmax, Matrix};
use crate::sparse_coding::{ksvd_run, Dictionary, KsvdConfig};

pub const PROGRAM_FORMAT_VERSION: u32 = 1;

/// Total map from source classes onto target classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelMapDoc", into = "LabelMapDoc")]
pub struct LabelMap {
    source_to_target: Vec<usize>,
    num_target: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelMapDoc {
    source_to_target: Vec<usize>,
    num_target: usize,
}

impl TryFrom<LabelMapDoc> for LabelMap {
    type Error = Error;

    fn try_from(doc: LabelMapDoc) -> Result<Self> {
        LabelMap::new(doc.source_to_target, doc.num_target)
    }
}

impl From<LabelMap> for LabelMapDoc {
    fn from(m: LabelMap) -> Self {
        LabelMapDoc {
            source_to_target: m.source_to_target,
            num_target: m.num_target,
        }
    }
}

impl LabelMap {
    pub fn new(source_to_target: Vec<usize>, num_target: usize) -> Result<Self> {
        if source_to_target.is_empty() || num_target == 0 {
            return Err(Error::config("label map needs at least one source and one target class"));
        }
        let mut hit = vec![false; num_target];
        for &t in &source_to_target {
            if t >= num_target {
                return Err(Error::Index { index: t, len: num_target });
            }
            hit[t] = true;
        }
        if let Some(missing) = hit.iter().position(|h| !h) {
            return Err(Error::config(format!("target class {missing} receives no source class")));
        }
        Ok(Self {
            source_to_target,
            num_target,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            source_to_target: (0..n).collect(),
            num_target: n,
        }
    }

    pub fn num_source(&self) -> usize {
        self.source_to_target.len()
    }

    pub fn num_target(&self) -> usize {
        self.num_target
    }

    pub fn target_of(&self, source: usize) -> usize {
        self.source_to_target[source]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.source_to_target
    }

    /// Target class probabilities: each sums the source classes mapped to it.
    pub fn map_output(&self, source_probs: &[f64]) -> Result<Vec<f64>> {
        if source_probs.len() != self.num_source() {
            return Err(Error::shape(format!(
                "{} probabilities for {} source classes",
                source_probs.len(),
                self.num_source()
            )));
        }
        if source_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::numeric("probabilities must lie in [0, 1]"));
        }
        let total: f64 = source_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!("probabilities sum to {total}")));
        }
        let mut out = vec![0.0; self.num_target];
        for (&p, &t) in source_probs.iter().zip(&self.source_to_target) {
            out[t] += p;
        }
        Ok(out)
    }

    /// `ln q_t` for every target class, computed from logits in log space.
    fn target_log_probs(&self, logits: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(logits.iter().copied());
        (0..self.num_target)
            .map(|t| {
                let group = logits
                    .iter()
                    .zip(&self.source_to_target)
                    .filter(|&(_, &m)| m == t)
                    .map(|(&z, _)| z);
                log_sum_exp(group) - lse
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `alpha · gamma^(i-1)` at outer iteration `i`.
    ExponentialDecay { alpha: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::ExponentialDecay { alpha, gamma } => alpha * gamma.powi(iteration as i32 - 1),
        }
    }

    fn alpha(&self) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } | StepSchedule::ExponentialDecay { alpha, .. } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Re-code θ at the start of every outer iteration.
    EveryOuterIteration,
    /// Re-code θ once, before the first gradient step.
    EncodeOnce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R2dlConfig {
    pub outer_iterations: usize,
    pub ksvd: KsvdConfig,
    pub step_size: StepSchedule,
    pub batch_size: usize,
    pub projection_mode: ProjectionMode,
    pub seed: u64,
}

impl Default for R2dlConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 200,
            ksvd: KsvdConfig::default(),
            step_size: StepSchedule::Constant { alpha: 0.001 },
            batch_size: 32,
            projection_mode: ProjectionMode::EveryOuterIteration,
            seed: 0,
        }
    }
}

impl R2dlConfig {
    /// A zero step size is accepted: it turns training into pure sparse
    /// coding of the initial program.
    pub fn validate(&self, num_atoms: usize) -> Result<()> {
        if self.outer_iterations == 0 {
            return Err(Error::config("outer_iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let alpha = self.step_size.alpha();
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::config(format!("step size must be finite and >= 0, got {alpha}")));
        }
        if let StepSchedule::ExponentialDecay { gamma, .. } = self.step_size {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(Error::config(format!("decay gamma must be in (0, 1], got {gamma}")));
            }
        }
        self.ksvd.validate(num_atoms)
    }
}

/// θ (|V_S| × |V_T|) together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialProgram {
    theta: Matrix,
    /// Replacement for the source embedding table, present only when the
    /// dictionary was learned during training.
    dictionary_override: Option<Matrix>,
    config: R2dlConfig,
}

impl AdversarialProgram {
    pub fn new(theta: Matrix, config: R2dlConfig) -> Self {
        Self {
            theta,
            dictionary_override: None,
            config,
        }
    }

    pub fn with_dictionary(theta: Matrix, dictionary: Matrix, config: R2dlConfig) -> Result<Self> {
        if dictionary.cols() != theta.rows() {
            return Err(Error::shape(format!(
                "dictionary has {} atoms, theta has {} rows",
                dictionary.cols(),
                theta.rows()
            )));
        }
        Ok(Self {
            theta,
            dictionary_override: Some(dictionary),
            config,
        })
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn config(&self) -> &R2dlConfig {
        &self.config
    }

    pub fn dictionary_override(&self) -> Option<&Matrix> {
        self.dictionary_override.as_ref()
    }

    pub fn source_vocab_size(&self) -> usize {
        self.theta.rows()
    }

    pub fn target_vocab_size(&self) -> usize {
        self.theta.cols()
    }

    /// Non-zero count of each θ column.
    pub fn support_sizes(&self) -> Vec<usize> {
        support_sizes(&self.theta)
    }

    /// Appends zero columns so that `extra` additional target tokens (for
    /// example an unknown-token slot) embed to the zero vector.
    pub fn pad_target_vocab(&self, extra: usize) -> AdversarialProgram {
        let (r, c) = self.theta.shape();
        let theta = Matrix::from_fn(r, c + extra, |i, j| if j < c { self.theta.get(i, j) } else { 0.0 })
            .expect("finite");
        AdversarialProgram {
            theta,
            ..self.clone()
        }
    }

    fn table<'a>(&'a self, model: &'a FrozenClassifier) -> &'a Matrix {
        self.dictionary_override.as_ref().unwrap_or_else(|| model.embeddings().matrix())
    }

    /// d × |V_T| matrix of implied target-token embeddings.
    pub fn target_embeddings(&self, model: &FrozenClassifier) -> Result<Matrix> {
        let table = self.table(model);
        if table.cols() != self.theta.rows() || table.rows() != model.dim() {
            return Err(Error::shape(format!(
                "theta is {:?}, embedding table is {:?}",
                self.theta.shape(),
                table.shape()
            )));
        }
        matmul(table, &self.theta)
    }
}

fn support_sizes(theta: &Matrix) -> Vec<usize> {
    (0..theta.cols())
        .map(|j| (0..theta.rows()).filter(|&i| theta.get(i, j) != 0.0).count())
        .collect()
}

fn gather(embedded: &Matrix, tokens: &[usize]) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    embedded.select_columns(tokens)
}

/// Embedded sequence (d × L) for target tokens: column ℓ is
/// `table · θ[:, tokens[ℓ]]`.
pub fn apply_program(program: &AdversarialProgram, model: &FrozenClassifier, target_tokens: &[usize]) -> Result<Matrix> {
    gather(&program.target_embeddings(model)?, target_tokens)
}

/// One labelled target sample.
pub type Sample<'a> = (&'a [usize], usize);

fn check_compat(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap) -> Result<()> {
    if h.num_source() != model.num_classes() {
        return Err(Error::shape(format!(
            "label map covers {} source classes, model has {}",
            h.num_source(),
            model.num_classes()
        )));
    }
    if program.source_vocab_size() != model.vocab_size() {
        return Err(Error::shape(format!(
            "theta has {} rows, source vocabulary has {} tokens",
            program.source_vocab_size(),
            model.vocab_size()
        )));
    }
    Ok(())
}

fn check_label(h: &LabelMap, label: usize) -> Result<()> {
    if label >= h.num_target() {
        return Err(Error::Index {
            index: label,
            len: h.num_target(),
        });
    }
    Ok(())
}

/// Mean cross-entropy of the label-mapped source predictions.
pub fn r2dl_loss(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, batch: &[Sample<'_>]) -> Result<f64> {
    Ok(loss_and_grad(program, model, h, batch, false)?.0)
}

/// Gradient of [`r2dl_loss`] with respect to θ.
pub fn grad_theta(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, batch: &[Sample<'_>]) -> Result<Matrix> {
    Ok(loss_and_grad(program, model, h, batch, true)?.1.expect("requested"))
}

fn loss_and_grad(
    program: &AdversarialProgram,
    model: &FrozenClassifier,
    h: &LabelMap,
    batch: &[Sample<'_>],
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    check_compat(program, model, h)?;
    let embedded = program.target_embeddings(model)?;
    let (d, vt) = embedded.shape();
    // Gradient with respect to each target token's implied embedding.
    let mut token_grads = vec![vec![0.0; d]; vt];
    let mut total = 0.0;

    for &(tokens, label) in batch {
        check_label(h, label)?;
        let x = gather(&embedded, tokens)?;
        let mut sample_loss = 0.0;
        let (_, dx) = model.forward_backward(&x, |logits| {
            let lse = log_sum_exp(logits.iter().copied());
            let in_label = |k: usize| h.target_of(k) == label;
            let lse_label = log_sum_exp((0..logits.len()).filter(|&k| in_label(k)).map(|k| logits[k]));
            sample_loss = lse - lse_label;
            // ∂(−ln q_y)/∂z_k = p_k − [k ∈ y] · p_k / q_y
            logits
                .iter()
                .enumerate()
                .map(|(k, &z)| {
                    let p = (z - lse).exp();
                    if in_label(k) {
                        p - (z - lse_label).exp()
                    } else {
                        p
                    }
                })
                .collect()
        })?;
        total += sample_loss;
        if want_grad {
            for (l, &tok) in tokens.iter().enumerate() {
                for (r, g) in token_grads[tok].iter_mut().enumerate() {
                    *g += dx.get(r, l);
                }
            }
        }
    }

    let n = batch.len() as f64;
    let loss = (total / n).max(0.0);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let table = program.table(model);
    let mut grad = Matrix::zeros(program.source_vocab_size(), vt);
    for (j, g) in token_grads.iter().enumerate() {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mean: Vec<f64> = g.iter().map(|v| v / n).collect();
        grad.set_column(j, &table.tr_matvec(&mean)?);
    }
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok((loss, Some(grad)))
}

/// Predicted target class: argmax of the mapped log-probabilities.
pub fn predict(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, tokens: &[usize]) -> Result<usize> {
    let x = apply_program(program, model, tokens)?;
    predict_embedded(model, h, &x)
}

fn predict_embedded(model: &FrozenClassifier, h: &LabelMap, x: &Matrix) -> Result<usize> {
    let logits = crate::classifier::forward_embedded(model, x)?;
    Ok(crate::classifier::argmax(&h.target_log_probs(&logits)))
}

/// Target-class probabilities for one sequence.
pub fn predict_proba(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, tokens: &[usize]) -> Result<Vec<f64>> {
    let x = apply_program(program, model, tokens)?;
    let logits = crate::classifier::forward_embedded(model, &x)?;
    h.map_output(&softmax(&logits)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

pub fn evaluate(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, dataset: &SequenceDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::DegenerateData("cannot evaluate on an empty dataset".into()));
    }
    check_compat(program, model, h)?;
    let embedded = program.target_embeddings(model)?;
    let k = h.num_target();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (tokens, label) in dataset.iter() {
        check_label(h, label)?;
        let pred = predict_embedded(model, h, &gather(&embedded, tokens)?)?;
        confusion[label][pred] += 1;
        if pred == label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        confusion,
        samples: dataset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Mini-batch loss before this iteration's gradient step.
    pub loss: f64,
    pub valid_accuracy: f64,
    /// Mean non-zero count of the θ columns that were evaluated.
    pub mean_support: f64,
}

/// What one sparse re-coding of θ produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStage {
    pub iteration: usize,
    pub support_sizes: Vec<usize>,
    /// Residual l1 norm of each coded target embedding.
    pub residual_l1: Vec<f64>,
    /// Frobenius coding error after each k-SVD sweep.
    pub error_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct R2dlOutput {
    /// θ with the best validation accuracy (earliest on ties).
    pub program: AdversarialProgram,
    pub trace: Vec<TraceRow>,
    pub projections: Vec<ProjectionStage>,
    pub best_iteration: usize,
    pub best_valid_accuracy: f64,
    /// True when the dictionary (and thus the embedding table seen by the
    /// model) was altered by k-SVD updates.
    pub dictionary_modified: bool,
}

/// Initial θ: uniform in [-0.01, 0.01].
pub fn init_theta(source_vocab: usize, target_vocab: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(source_vocab, target_vocab, |_, _| rng.gen_range(-0.01..=0.01)).expect("finite")
}

struct Projector {
    dict: Dictionary,
    /// Norms of the raw table columns; codes are divided by these.
    norms: Vec<f64>,
    table: Matrix,
    modified: bool,
}

impl Projector {
    fn new(model: &FrozenClassifier) -> Result<Self> {
        let table = model.embeddings().matrix().clone();
        let (dict, norms) = Dictionary::normalized(&table)?;
        Ok(Self {
            dict,
            norms,
            table,
            modified: false,
        })
    }

    /// Sparse re-coding of the implied target embeddings `table · θ`.
    fn project(&mut self, theta: &Matrix, cfg: &KsvdConfig, iteration: usize) -> Result<(Matrix, ProjectionStage)> {
        let signals = matmul(&self.table, theta)?;
        let out = ksvd_run(&signals, &self.dict, cfg)?;
        if cfg.update_dictionary {
            self.dict = out.dictionary.clone();
            self.table = out.dictionary.atoms().clone();
            self.norms = vec![1.0; self.table.cols()];
            self.modified = true;
        }
        let codes = out.codes;
        let new_theta = Matrix::from_fn(codes.rows(), codes.cols(), |i, j| codes.get(i, j) / self.norms[i])?;
        let approx = matmul(&self.table, &new_theta)?;
        let residual_l1 = (0..signals.cols())
            .map(|j| {
                (0..signals.rows())
                    .map(|i| (signals.get(i, j) - approx.get(i, j)).abs())
                    .sum()
            })
            .collect();
        let stage = ProjectionStage {
            iteration,
            support_sizes: support_sizes(&new_theta),
            residual_l1,
            error_trace: out.error_trace,
        };
        Ok((new_theta, stage))
    }

    fn program(&self, theta: Matrix, cfg: &R2dlConfig) -> Result<AdversarialProgram> {
        if self.modified {
            AdversarialProgram::with_dictionary(theta, self.table.clone(), cfg.clone())
        } else {
            Ok(AdversarialProgram::new(theta, cfg.clone()))
        }
    }
}

/// Sparse-dictionary reprogramming of a frozen classifier.
///
/// Each outer iteration: (a) re-code θ by k-SVD against the normalized
/// source embeddings (every iteration, or only the first, depending on
/// `projection_mode`); (b) record validation accuracy of the current θ;
/// (c) take one mini-batch gradient step on the label-mapped cross-entropy.
pub fn r2dl_train(
    model: &FrozenClassifier,
    h: &LabelMap,
    train: &SequenceDataset,
    valid: &SequenceDataset,
    cfg: &R2dlConfig,
) -> Result<R2dlOutput> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen);
    }
    cfg.validate(model.vocab_size())?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::DegenerateData("training and validation sets must be non-empty".into()));
    }
    if h.num_source() != model.num_classes() || h.num_target() != train.num_classes() {
        return Err(Error::config(format!(
            "label map {}→{} does not fit model with {} classes and task with {}",
            h.num_source(),
            h.num_target(),
            model.num_classes(),
            train.num_classes()
        )));
    }
    let target_vocab = train.vocab().len();
    if valid.vocab().len() > target_vocab {
        return Err(Error::config("validation vocabulary is larger than the training vocabulary"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_theta(model.vocab_size(), target_vocab, &mut rng);
    let mut projector = Projector::new(model)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(cfg.outer_iterations);
    let mut projections = Vec::new();
    let mut best: Option<(usize, f64, AdversarialProgram)> = None;

    for it in 1..=cfg.outer_iterations {
        if it == 1 || cfg.projection_mode == ProjectionMode::EveryOuterIteration {
            let (projected, stage) = projector.project(&theta, &cfg.ksvd, it)?;
            theta = projected;
            projections.push(stage);
        }
        let program = projector.program(theta.clone(), cfg)?;
        let valid_accuracy = evaluate(&program, model, h, valid)?.accuracy;

        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<Sample<'_>> = order[cursor..end].iter().map(|&i| train.get(i)).collect();
        cursor = end;

        let (loss, grad) = loss_and_grad(&program, model, h, &batch, true)?;
        let sizes = support_sizes(&theta);
        trace.push(TraceRow {
            iteration: it,
            loss,
            valid_accuracy,
            mean_support: sizes.iter().sum::<usize>() as f64 / sizes.len() as f64,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| valid_accuracy > *acc) {
            best = Some((it, valid_accuracy, program));
        }

        let alpha = cfg.step_size.at(it);
        let grad = grad.expect("requested");
        for (t, g) in theta.data_mut().iter_mut().zip(grad.as_slice()) {
            *t -= alpha * g;
        }
        if !theta.is_finite() {
            return Err(Error::numeric(format!("theta diverged at iteration {it}")));
        }
    }

    let (best_iteration, best_valid_accuracy, program) = best.expect("at least one iteration");
    Ok(R2dlOutput {
        program,
        trace,
        projections,
        best_iteration,
        best_valid_accuracy,
        dictionary_modified: projector.modified,
    })
}

/// Trace as CSV with header `iteration,loss,valid_accuracy,mean_support`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,loss,valid_accuracy,mean_support\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.loss, r.valid_accuracy, r.mean_support);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramDoc {
    format_version: u32,
    source_vocab_size: usize,
    target_vocab_size: usize,
    target_vocab: Vec<String>,
    class_names: Vec<String>,
    label_map: LabelMap,
    config: R2dlConfig,
    /// Row-major |V_S| × |V_T|.
    theta: Vec<f64>,
    support_sizes: Vec<usize>,
    /// Row-major d × |V_S|, only when the dictionary was learned.
    dictionary: Option<(usize, Vec<f64>)>,
    trace: Vec<TraceRow>,
}

/// A program plus the metadata needed to use it on raw target data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramCheckpoint {
    pub program: AdversarialProgram,
    pub target_vocab: Vec<String>,
    pub class_names: Vec<String>,
    pub label_map: LabelMap,
    pub trace: Vec<TraceRow>,
}

impl ProgramCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.program;
        let doc = ProgramDoc {
            format_version: PROGRAM_FORMAT_VERSION,
            source_vocab_size: p.source_vocab_size(),
            target_vocab_size: p.target_vocab_size(),
            target_vocab: self.target_vocab.clone(),
            class_names: self.class_names.clone(),
            label_map: self.label_map.clone(),
            config: p.config.clone(),
            theta: p.theta.as_slice().to_vec(),
            support_sizes: p.support_sizes(),
            dictionary: p.dictionary_override.as_ref().map(|m| (m.rows(), m.as_slice().to_vec())),
            trace: self.trace.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProgramDoc = serde_json::from_str(text)?;
        if doc.format_version != PROGRAM_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported program version {}", doc.format_version)));
        }
        if doc.target_vocab.len() != doc.target_vocab_size {
            return Err(Error::Format(format!(
                "{} vocabulary entries for target_vocab_size {}",
                doc.target_vocab.len(),
                doc.target_vocab_size
            )));
        }
        if doc.class_names.len() != doc.label_map.num_target() {
            return Err(Error::Format("class names do not match the label map".into()));
        }
        let theta = Matrix::new(doc.source_vocab_size, doc.target_vocab_size, doc.theta)?;
        let program = match doc.dictionary {
            None => AdversarialProgram::new(theta, doc.config),
            Some((rows, data)) => {
                let dict = Matrix::new(rows, doc.source_vocab_size, data)?;
                AdversarialProgram::with_dictionary(theta, dict, doc.config)?
            }
        };
        Ok(Self {
            program,
            target_vocab: doc.target_vocab,
            class_names: doc.class_names,
            label_map: doc.label_map,
            trace: doc.trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::tests::random_model;
    use crate::classifier::Architecture;
    use crate::data::{Tokenization, Vocab};

    fn random_theta(vs: usize, vt: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(vs, vt, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn unit_column_selects_source_embedding() {
        let model = random_model(Architecture::BagMlp, 4, 3, 6, 2, 1);
        let theta = Matrix::from_fn(6, 3, |i, j| if (i, j) == (4, 1) { 1.0 } else { 0.0 }).unwrap();
        let program = AdversarialProgram::new(theta, R2dlConfig::default());
        let x = apply_program(&program, &model, &[1]).unwrap();
        assert_eq!(x.column(0), model.embeddings().matrix().column(4));
        let zero = AdversarialProgram::new(Matrix::zeros(6, 3), R2dlConfig::default());
        let x = apply_program(&zero, &model, &[0, 1, 2]).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(apply_program(&zero, &model, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn apply_is_linear_in_theta() {
        let model = random_model(Architecture::BagMlp, 5, 3, 8, 2, 2);
        let t1 = random_theta(8, 4, 3);
        let t2 = random_theta(8, 4, 4);
        let (a, b) = (0.7, -1.3);
        let combo = t1.scale(a).unwrap().add(&t2.scale(b).unwrap()).unwrap();
        let tokens = [0, 3, 3, 1, 2];
        let cfg = R2dlConfig::default();
        let lhs = apply_program(&AdversarialProgram::new(combo, cfg.clone()), &model, &tokens).unwrap();
        let x1 = apply_program(&AdversarialProgram::new(t1, cfg.clone()), &model, &tokens).unwrap();
        let x2 = apply_program(&AdversarialProgram::new(t2, cfg), &model, &tokens).unwrap();
        let rhs = x1.scale(a).unwrap().add(&x2.scale(b).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-12);
    }

    #[test]
    fn map_output_examples() {
        let swap = LabelMap::new(vec![1, 0], 2).unwrap();
        assert_eq!(swap.map_output(&[0.3, 0.7]).unwrap(), vec![0.7, 0.3]);
        assert_eq!(LabelMap::identity(3).map_output(&[0.2, 0.3, 0.5]).unwrap(), vec![0.2, 0.3, 0.5]);
        let pool = LabelMap::new(vec![0, 0, 1], 2).unwrap();
        assert_eq!(pool.map_output(&[0.2, 0.3, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(LabelMap::new(vec![0, 0], 2).is_err(), "not surjective");
        assert!(LabelMap::new(vec![0, 2], 2).is_err());
        assert!(pool.map_output(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_of_uniform_model_is_ln_classes() {
        let mut model = random_model(Architecture::BagMlp, 3, 2, 5, 2, 5);
        model = zero_head(model);
        let h = LabelMap::identity(2);
        let program = AdversarialProgram::new(random_theta(5, 3, 6), R2dlConfig::default());
        let batch: Vec<Sample<'_>> = vec![(&[0, 1][..], 0), (&[2][..], 1)];
        let loss = r2dl_loss(&program, &model, &h, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn zero_head(model: FrozenClassifier) -> FrozenClassifier {
        let p = model.params();
        let mut tensors = p.tensors().to_vec();
        let last = tensors.len() - 2;
        tensors[last] = Matrix::zeros(tensors[last].rows(), tensors[last].cols());
        tensors[last + 1] = Matrix::zeros(tensors[last + 1].rows(), 1);
        let params = crate::classifier::ClassifierParams::new(p.architecture(), model.dim(), p.hidden(), p.num_classes(), tensors).unwrap();
        FrozenClassifier::from_parts(model.embeddings().clone(), params, 0).unwrap()
    }

    #[test]
    fn loss_of_confident_model_is_near_zero() {
        let model = random_model(Architecture::BagMlp, 3, 2, 5, 2, 7);
        let p = model.params();
        let mut tensors = p.tensors().to_vec();
        tensors[2] = Matrix::zeros(2, 2);
        tensors[3] = Matrix::from_rows(&[[50.0], [0.0]]).unwrap();
        let params = crate::classifier::ClassifierParams::new(p.architecture(), 3, 2, 2, tensors).unwrap();
        let model = FrozenClassifier::from_parts(model.embeddings().clone(), params, 0).unwrap();
        let program = AdversarialProgram::new(random_theta(5, 2, 8), R2dlConfig::default());
        let loss = r2dl_loss(&program, &model, &LabelMap::identity(2), &[(&[0, 1][..], 0)]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn hand_built_single_sample_loss() {
        // d = 1, hidden = 1: logits = (w2 · tanh(w1 · mean + b1) + b2)
        let params = crate::classifier::ClassifierParams::new(
            Architecture::BagMlp,
            1,
            1,
            2,
            vec![
                Matrix::from_rows(&[[2.0]]).unwrap(),
                Matrix::from_rows(&[[0.0]]).unwrap(),
                Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(),
                Matrix::from_rows(&[[0.0], [0.0]]).unwrap(),
            ],
        )
        .unwrap();
        let table = Matrix::from_rows(&[[1.0, -0.5]]).unwrap();
        let model = FrozenClassifier::from_parts(crate::classifier::EmbeddingTable::new(table), params, 0).unwrap();
        // target token 0 ↦ 0.5·e0 + 1·e1 = 0.0; token 1 ↦ 1·e0 = 1.0
        let theta = Matrix::from_rows(&[[0.5, 1.0], [1.0, 0.0]]).unwrap();
        let program = AdversarialProgram::new(theta, R2dlConfig::default());
        let loss = r2dl_loss(&program, &model, &LabelMap::identity(2), &[(&[0, 1][..], 1)]).unwrap();
        let hidden = (2.0f64 * 0.5).tanh();
        let (z0, z1) = (hidden, -hidden);
        let p1 = z1.exp() / (z0.exp() + z1.exp());
        assert!((loss + p1.ln()).abs() < 1e-15);
    }

    /// Central-difference oracle for r2dl_loss over θ entries.
    fn fd_entry(program: &AdversarialProgram, model: &FrozenClassifier, h: &LabelMap, batch: &[Sample<'_>], i: usize, j: usize) -> f64 {
        let step = 1e-6;
        let shifted = |delta: f64| {
            let mut t = program.theta().clone();
            t.set(i, j, t.get(i, j) + delta);
            r2dl_loss(&AdversarialProgram::new(t, R2dlConfig::default()), model, h, batch).unwrap()
        };
        (shifted(step) - shifted(-step)) / (2.0 * step)
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..6u64 {
            let arch = if trial % 2 == 0 { Architecture::BagMlp } else { Architecture::Birnn };
            let model = random_model(arch, 4, 3, 9, 3, 40 + trial);
            let h = LabelMap::new(vec![0, 1, 1], 2).unwrap();
            let program = AdversarialProgram::new(random_theta(9, 4, 50 + trial), R2dlConfig::default());
            let seqs: Vec<Vec<usize>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(0..3)).collect()).collect();
            let batch: Vec<Sample<'_>> = seqs.iter().enumerate().map(|(k, s)| (s.as_slice(), k % 2)).collect();
            let g = grad_theta(&program, &model, &h, &batch).unwrap();
            // token 3 never occurs
            assert!(g.column(3).iter().all(|&v| v == 0.0));
            for _ in 0..20 {
                let (i, j) = (rng.gen_range(0..9), rng.gen_range(0..4));
                let fd = fd_entry(&program, &model, &h, &batch, i, j);
                let an = g.get(i, j);
                assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3), "({i},{j}) {an} vs {fd}");
            }
        }
    }

    #[test]
    fn duplicating_the_batch_leaves_the_mean_gradient() {
        let model = random_model(Architecture::BagMlp, 4, 3, 6, 2, 60);
        let h = LabelMap::identity(2);
        let program = AdversarialProgram::new(random_theta(6, 3, 61), R2dlConfig::default());
        let s0 = [0usize, 1, 2];
        let s1 = [2usize, 2];
        let batch: Vec<Sample<'_>> = vec![(&s0, 0), (&s1, 1)];
        let doubled: Vec<Sample<'_>> = batch.iter().chain(batch.iter()).copied().collect();
        let g1 = grad_theta(&program, &model, &h, &batch).unwrap();
        let g2 = grad_theta(&program, &model, &h, &doubled).unwrap();
        assert!(g1.sub(&g2).unwrap().frobenius_norm() <= 1e-15 * g1.frobenius_norm().max(1.0));
    }

    fn tiny_dataset(n: usize, seed: u64) -> SequenceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..n).map(|_| (0..4).map(|_| rng.gen_range(0..3)).collect()).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        SequenceDataset::new(
            seqs,
            labels,
            Vocab::new(vec!["a".into(), "b".into(), "c".into()]).unwrap(),
            vec!["x".into(), "y".into()],
            Tokenization::Char,
        )
        .unwrap()
    }

    #[test]
    fn zero_outer_iterations_rejected() {
        let model = random_model(Architecture::BagMlp, 4, 3, 10, 2, 70);
        let ds = tiny_dataset(8, 1);
        let cfg = R2dlConfig {
            outer_iterations: 0,
            ..R2dlConfig::default()
        };
        let err = r2dl_train(&model, &LabelMap::identity(2), &ds, &ds, &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_respects_sparsity() {
        let model = random_model(Architecture::BagMlp, 4, 3, 10, 2, 71);
        let ds = tiny_dataset(20, 2);
        let mut cfg = R2dlConfig {
            outer_iterations: 15,
            batch_size: 6,
            step_size: StepSchedule::ExponentialDecay { alpha: 0.5, gamma: 0.95 },
            ..R2dlConfig::default()
        };
        cfg.ksvd.max_atoms = 3;
        cfg.ksvd.epsilon = 1e-3;
        let a = r2dl_train(&model, &LabelMap::identity(2), &ds, &ds, &cfg).unwrap();
        let b = r2dl_train(&model, &LabelMap::identity(2), &ds, &ds, &cfg).unwrap();
        assert_eq!(a.program, b.program);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.projections.len(), 15);
        for stage in &a.projections {
            for (&s, &r) in stage.support_sizes.iter().zip(&stage.residual_l1) {
                assert!(s <= 3);
                assert!(r <= 1e-3 + 1e-12 || s == 3, "support {s} residual {r}");
            }
        }
        assert!(a.program.support_sizes().iter().all(|&s| s <= 3));
        let best = a.trace.iter().map(|r| r.valid_accuracy).fold(0.0, f64::max);
        assert_eq!(a.best_valid_accuracy, best);
        let first_best = a.trace.iter().find(|r| r.valid_accuracy == best).unwrap().iteration;
        assert_eq!(a.best_iteration, first_best);
    }

    #[test]
    fn evaluate_counts_and_invariances() {
        let model = random_model(Architecture::BagMlp, 4, 3, 10, 2, 72);
        let ds = tiny_dataset(30, 3);
        let program = AdversarialProgram::new(random_theta(10, 3, 73), R2dlConfig::default());
        let h = LabelMap::identity(2);
        let ev = evaluate(&program, &model, &h, &ds).unwrap();
        assert_eq!(ev.confusion.iter().flatten().sum::<usize>(), 30);

        // swapping target ids in the map and the labels leaves accuracy unchanged
        let swapped_labels: Vec<usize> = ds.labels().iter().map(|&l| 1 - l).collect();
        let swapped = SequenceDataset::new(
            ds.sequences().to_vec(),
            swapped_labels,
            ds.vocab().clone(),
            vec!["y".into(), "x".into()],
            Tokenization::Char,
        )
        .unwrap();
        let ev2 = evaluate(&program, &model, &LabelMap::new(vec![1, 0], 2).unwrap(), &swapped).unwrap();
        assert_eq!(ev.accuracy, ev2.accuracy);

        // a single sample predicted correctly
        let pred = predict(&program, &model, &h, ds.sequences()[0].as_slice()).unwrap();
        let one = SequenceDataset::new(vec![ds.sequences()[0].clone()], vec![pred], ds.vocab().clone(), ds.class_names().to_vec(), Tokenization::Char).unwrap();
        assert_eq!(evaluate(&program, &model, &h, &one).unwrap().accuracy, 1.0);

        let empty = ds.subset(&[]);
        assert!(evaluate(&program, &model, &h, &empty).is_err());
    }

    #[test]
    fn program_checkpoint_round_trip() {
        let mut cfg = R2dlConfig::default();
        cfg.seed = 5;
        let ck = ProgramCheckpoint {
            program: AdversarialProgram::new(random_theta(6, 3, 80), cfg.clone()),
            target_vocab: vec!["A".into(), "C".into(), "D".into()],
            class_names: vec!["x".into(), "y".into()],
            label_map: LabelMap::new(vec![1, 0], 2).unwrap(),
            trace: vec![TraceRow {
                iteration: 1,
                loss: 0.1 + 0.2,
                valid_accuracy: 0.5,
                mean_support: 2.0,
            }],
        };
        assert_eq!(ProgramCheckpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);

        let with_dict = ProgramCheckpoint {
            program: AdversarialProgram::with_dictionary(random_theta(6, 3, 81), random_theta(4, 6, 82), cfg).unwrap(),
            ..ck
        };
        assert_eq!(ProgramCheckpoint::from_json(&with_dict.to_json().unwrap()).unwrap(), with_dict);
        assert_eq!(trace_csv(&with_dict.trace), "iteration,loss,valid_accuracy,mean_support\n1,0.30000000000000004,0.5,2\n");
    }
}
