use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use r2dl_core::classifier::{accuracy, train_source};
use r2dl_core::data::{self, Split, SequenceDataset, LabelRule};
use r2dl_core::reprogram::{evaluate, r2dl_train, trace_csv, ProgramCheckpoint, StepSchedule};
use r2dl_core::{FrozenClassifier, Vocab};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::{Command, Common, Invalid, R2dlOverrides, SplitName};

pub const SOURCE_CHECKPOINT: &str = "source_model.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const PROGRAM: &str = "program.json";
pub const TRACE: &str = "trace.csv";
pub const SUMMARY: &str = "summary.json";
pub const EVAL: &str = "eval.json";
pub const SWEEP_DATA: &str = "sweep_data.csv";
pub const SWEEP_KSVD: &str = "sweep_ksvd.csv";

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainSource { common } => {
            let (cfg, out) = prepare(&common, &R2dlOverrides::default())?;
            cmd_train_source(&cfg, &out)
        }
        Command::Reprogram {
            common,
            source_checkpoint,
            overrides,
        } => {
            let (cfg, out) = prepare(&common, &overrides)?;
            let ckpt = source_checkpoint.unwrap_or_else(|| out.join(SOURCE_CHECKPOINT));
            cmd_reprogram(&cfg, &ckpt, &out)
        }
        Command::Eval {
            common,
            program,
            source_checkpoint,
            dataset,
            split,
        } => {
            let (cfg, out) = prepare(&common, &R2dlOverrides::default())?;
            cmd_eval(&cfg, &program, &source_checkpoint, dataset.as_deref(), split, &out)
        }
        Command::SweepData {
            common,
            source_checkpoint,
            sizes,
            overrides,
        } => {
            let (mut cfg, out) = prepare(&common, &overrides)?;
            if let Some(sizes) = sizes {
                cfg.sweep_data.sizes = sizes;
                cfg.validate()?;
            }
            cmd_sweep_data(&cfg, source_checkpoint.as_deref(), &out)
        }
        Command::SweepKsvd {
            common,
            source_checkpoint,
            sweeps,
            overrides,
        } => {
            let (mut cfg, out) = prepare(&common, &overrides)?;
            if let Some(sweeps) = sweeps {
                cfg.sweep_ksvd.sweeps = sweeps;
                cfg.validate()?;
            }
            cmd_sweep_ksvd(&cfg, source_checkpoint.as_deref(), &out)
        }
    }
}

/// Loads the config, applies flag overrides and creates the output directory.
pub fn prepare(common: &Common, overrides: &R2dlOverrides) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.r2dl.seed = cfg.seed;
    if let Some(t1) = overrides.outer_iterations {
        cfg.r2dl.outer_iterations = t1;
    }
    if let Some(t2) = overrides.ksvd_iterations {
        cfg.r2dl.ksvd.sweeps = t2;
    }
    if let Some(eps) = overrides.epsilon {
        cfg.r2dl.ksvd.epsilon = eps;
    }
    if let Some(alpha) = overrides.alpha {
        cfg.r2dl.step_size = StepSchedule::Constant { alpha };
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok((cfg, common.out.clone()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<FrozenClassifier> {
    if !path.exists() {
        return Err(Invalid(format!("source checkpoint {} does not exist", path.display())).into());
    }
    FrozenClassifier::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train_frozen_source(cfg: &ExperimentConfig, source: &SequenceDataset) -> Result<(FrozenClassifier, Split)> {
    let split = data::split(source, &cfg.source_split)?;
    let (model, _) = train_source(&split.train, &split.valid, &cfg.classifier, cfg.seed)?;
    Ok((model, split))
}

fn source_model(cfg: &ExperimentConfig, ckpt: Option<&Path>, source: &SequenceDataset) -> Result<FrozenClassifier> {
    match ckpt {
        Some(path) => load_checkpoint(path),
        None => Ok(train_frozen_source(cfg, source)?.0),
    }
}

fn target_split(cfg: &ExperimentConfig, target: &SequenceDataset) -> Result<Split> {
    let split = data::split(target, &cfg.target_split)?;
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(Invalid(format!("target split {:?} leaves an empty partition", split.report.counts)).into());
    }
    Ok(split)
}

pub fn cmd_train_source(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (source, _) = cfg.datasets()?;
    let split = data::split(&source, &cfg.source_split)?;
    let (model, report) = train_source(&split.train, &split.valid, &cfg.classifier, cfg.seed)?;
    let test_accuracy = if split.test.is_empty() {
        None
    } else {
        Some(accuracy(&model, &split.test)?)
    };
    let ckpt = out.join(SOURCE_CHECKPOINT);
    model.save(&ckpt)?;
    let [mt, mv, ms] = split.report.majority_class_accuracy;
    let doc = json!({
        "seed": cfg.seed,
        "architecture": cfg.classifier.architecture,
        "class_names": source.class_names(),
        "vocab_size": model.vocab_size(),
        "split_counts": split.report.counts,
        "train_accuracy": report.train_accuracy,
        "valid_accuracy": report.valid_accuracy,
        "test_accuracy": test_accuracy,
        "majority_class_accuracy": {"train": mt, "valid": mv, "test": ms},
        "epoch_losses": report.epoch_losses,
        "fingerprint": model.fingerprint(),
    });
    write_json(&out.join(TRAIN_REPORT), &doc)?;
    println!(
        "source model: train {:.4}  valid {:.4}  test {}  (majority {:.4})",
        report.train_accuracy,
        report.valid_accuracy,
        test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        mt
    );
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn cmd_reprogram(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let before = model.fingerprint();
    let (_, target) = cfg.datasets()?;
    let split = target_split(cfg, &target)?;
    let h = cfg.label_map(model.num_classes(), target.num_classes())?;

    let result = r2dl_train(&model, &h, &split.train, &split.valid, &cfg.r2dl)?;
    let test = evaluate(&result.program, &model, &h, &split.test)?;
    if model.fingerprint() != before {
        bail!("source model changed during reprogramming");
    }

    let checkpoint = ProgramCheckpoint {
        program: result.program.clone(),
        target_vocab: target.vocab().tokens().to_vec(),
        class_names: target.class_names().to_vec(),
        label_map: h,
        trace: result.trace.clone(),
    };
    checkpoint.save(&out.join(PROGRAM))?;
    write_text(&out.join(TRACE), &trace_csv(&result.trace))?;
    let sizes = result.program.support_sizes();
    let doc = json!({
        "test_accuracy": test.accuracy,
        "best_valid_accuracy": result.best_valid_accuracy,
        "best_iteration": result.best_iteration,
        "outer_iterations": cfg.r2dl.outer_iterations,
        "ksvd_iterations": cfg.r2dl.ksvd.sweeps,
        "epsilon": cfg.r2dl.ksvd.epsilon,
        "max_atoms": cfg.r2dl.ksvd.max_atoms,
        "seed": cfg.seed,
        "support_sizes": sizes,
        "dictionary_modified": result.dictionary_modified,
        "confusion": test.confusion,
        "source_fingerprint": before,
    });
    write_json(&out.join(SUMMARY), &doc)?;
    println!(
        "reprogrammed: test {:.4}  best valid {:.4} at iteration {}",
        test.accuracy, result.best_valid_accuracy, result.best_iteration
    );
    if result.dictionary_modified {
        println!("note: the dictionary was updated, so the model saw a modified embedding table");
    }
    Ok(())
}

fn load_eval_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<SequenceDataset> {
    if !path.exists() {
        return Err(Invalid(format!("dataset {} does not exist", path.display())).into());
    }
    let fasta = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("fa" | "fasta" | "faa")
    );
    let tok = cfg.target_tokenization();
    let ds = if fasta {
        data::load_fasta(path, &LabelRule::default(), tok)
    } else {
        data::load_csv(path, "sequence", "label", tok)
    };
    ds.with_context(|| format!("loading {}", path.display()))
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    program_path: &Path,
    ckpt: &Path,
    dataset: Option<&Path>,
    split: SplitName,
    out: &Path,
) -> Result<()> {
    if !program_path.exists() {
        return Err(Invalid(format!("program {} does not exist", program_path.display())).into());
    }
    let checkpoint = ProgramCheckpoint::load(program_path).with_context(|| format!("loading {}", program_path.display()))?;
    let model = load_checkpoint(ckpt)?;
    let ds = match dataset {
        Some(path) => load_eval_dataset(cfg, path)?,
        None => {
            let (_, target) = cfg.datasets()?;
            let s = target_split(cfg, &target)?;
            match split {
                SplitName::Train => s.train,
                SplitName::Valid => s.valid,
                SplitName::Test => s.test,
            }
        }
    };
    let vocab = Vocab::new(checkpoint.target_vocab.clone())?;
    let ds = ds.remap(&vocab, &checkpoint.class_names)?;
    let program = checkpoint.program.pad_target_vocab(ds.vocab().len() - vocab.len());
    let ev = evaluate(&program, &model, &checkpoint.label_map, &ds)?;
    let doc = json!({
        "accuracy": ev.accuracy,
        "samples": ev.samples,
        "class_names": checkpoint.class_names,
        "confusion": ev.confusion,
    });
    write_json(&out.join(EVAL), &doc)?;
    println!("accuracy {:.4} on {} samples", ev.accuracy, ev.samples);
    for (name, row) in checkpoint.class_names.iter().zip(&ev.confusion) {
        println!("  {name:>12}: {row:?}");
    }
    Ok(())
}

/// One row of the restricted-data sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataRow {
    pub n: usize,
    pub r2dl_acc: f64,
    pub scratch_acc: f64,
}

pub fn sweep_data(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<Vec<DataRow>> {
    let (source, target) = cfg.datasets()?;
    let model = source_model(cfg, ckpt, &source)?;
    let split = target_split(cfg, &target)?;
    let h = cfg.label_map(model.num_classes(), target.num_classes())?;
    let mut rows = Vec::new();
    for &n in &cfg.sweep_data.sizes {
        if n > split.train.len() {
            return Err(Invalid(format!("sweep size {n} exceeds the {} training samples", split.train.len())).into());
        }
        let subset = data::subsample(&split.train, n, cfg.seed)?;
        let mut r2dl = cfg.r2dl.clone();
        if let Some(epochs) = cfg.sweep_data.epochs {
            r2dl.outer_iterations = epochs * n.div_ceil(r2dl.batch_size);
        }
        let result = r2dl_train(&model, &h, &subset, &split.valid, &r2dl)?;
        let r2dl_acc = evaluate(&result.program, &model, &h, &split.test)?.accuracy;
        let (scratch, _) = train_source(&subset, &split.valid, &cfg.classifier, cfg.seed)?;
        let scratch_acc = accuracy(&scratch, &split.test)?;
        rows.push(DataRow { n, r2dl_acc, scratch_acc });
    }
    Ok(rows)
}

pub fn cmd_sweep_data(cfg: &ExperimentConfig, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let rows = sweep_data(cfg, ckpt)?;
    let mut csv = String::from("n,r2dl_acc,scratch_acc\n");
    println!("{:>8} {:>10} {:>12}", "n", "r2dl", "scratch");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.n, r.r2dl_acc, r.scratch_acc);
        println!("{:>8} {:>10.4} {:>12.4}", r.n, r.r2dl_acc, r.scratch_acc);
    }
    write_text(&out.join(SWEEP_DATA), &csv)
}

/// One row of the k-SVD sweep-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsvdRow {
    pub ksvd_iterations: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Frobenius coding error at the end of the last projection stage.
    pub final_coding_error: f64,
    /// Coding error after each sweep of the last projection stage.
    pub error_trace: Vec<f64>,
}

pub fn sweep_ksvd(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<Vec<KsvdRow>> {
    let (source, target) = cfg.datasets()?;
    let model = source_model(cfg, ckpt, &source)?;
    let split = target_split(cfg, &target)?;
    let h = cfg.label_map(model.num_classes(), target.num_classes())?;
    let mut rows = Vec::new();
    for &sweeps in &cfg.sweep_ksvd.sweeps {
        let mut r2dl = cfg.r2dl.clone();
        r2dl.ksvd.sweeps = sweeps;
        let result = r2dl_train(&model, &h, &split.train, &split.valid, &r2dl)?;
        let train_accuracy = evaluate(&result.program, &model, &h, &split.train)?.accuracy;
        let test_accuracy = evaluate(&result.program, &model, &h, &split.test)?.accuracy;
        let error_trace = result.projections.last().map(|p| p.error_trace.clone()).unwrap_or_default();
        rows.push(KsvdRow {
            ksvd_iterations: sweeps,
            train_accuracy,
            test_accuracy,
            final_coding_error: error_trace.last().copied().unwrap_or(0.0),
            error_trace,
        });
    }
    Ok(rows)
}

pub fn cmd_sweep_ksvd(cfg: &ExperimentConfig, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let rows = sweep_ksvd(cfg, ckpt)?;
    let mut csv = String::from("ksvd_iterations,train_accuracy,test_accuracy,final_coding_error\n");
    println!("{:>6} {:>10} {:>10} {:>14}", "T2", "train", "test", "coding error");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.ksvd_iterations, r.train_accuracy, r.test_accuracy, r.final_coding_error);
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>14.3e}",
            r.ksvd_iterations, r.train_accuracy, r.test_accuracy, r.final_coding_error
        );
    }
    write_text(&out.join(SWEEP_KSVD), &csv)
}
