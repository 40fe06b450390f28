//! Sequence datasets: loading, tokenization, splitting, restricted-data
//! subsampling and the synthetic source/target tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token appended to a vocabulary to absorb symbols never seen in training.
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of the distinct observed tokens, sorted lexicographically.
    pub fn from_observed<'a>(observed: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = observed.into_iter().map(str::to_owned).collect();
        tokens.sort();
        tokens.dedup();
        Self::new(tokens).expect("deduplicated")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_index(&self) -> Option<usize> {
        self.index_of(UNK_TOKEN)
    }

    /// Returns the vocabulary with [`UNK_TOKEN`] appended if it is missing.
    pub fn with_unk(&self) -> Vocab {
        if self.unk_index().is_some() {
            return self.clone();
        }
        let mut tokens = self.tokens.clone();
        tokens.push(UNK_TOKEN.to_owned());
        Vocab::new(tokens).expect("unk is new")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    /// One token per character, case-sensitive.
    #[default]
    Char,
    /// Lowercased, whitespace-separated words.
    Word,
}

impl Tokenization {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Tokenization::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            Tokenization::Word => text.split_whitespace().map(str::to_lowercase).collect(),
        }
    }

    pub fn join(self, tokens: &[&str]) -> String {
        match self {
            Tokenization::Char => tokens.concat(),
            Tokenization::Word => tokens.join(" "),
        }
    }
}

/// Tokenized sequences with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    sequences: Vec<Vec<usize>>,
    labels: Vec<usize>,
    vocab: Vocab,
    class_names: Vec<String>,
    tokenization: Tokenization,
}

impl SequenceDataset {
    pub fn new(
        sequences: Vec<Vec<usize>>,
        labels: Vec<usize>,
        vocab: Vocab,
        class_names: Vec<String>,
        tokenization: Tokenization,
    ) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        for seq in &sequences {
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab.len()) {
                return Err(Error::Index { index: t, len: vocab.len() });
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Index { index: l, len: class_names.len() });
        }
        Ok(Self {
            sequences,
            labels,
            vocab,
            class_names,
            tokenization,
        })
    }

    /// Builds a dataset from `(line, text, label)` rows: vocabulary from the
    /// observed tokens (sorted), classes in order of first appearance.
    pub fn from_rows(rows: &[(usize, String, String)], tokenization: Tokenization) -> Result<Self> {
        let tokenized: Vec<Vec<String>> = rows.iter().map(|(_, text, _)| tokenization.split(text)).collect();
        for ((line, _, _), toks) in rows.iter().zip(&tokenized) {
            if toks.is_empty() {
                return Err(Error::Row {
                    line: *line,
                    message: "empty sequence".into(),
                });
            }
        }
        let vocab = Vocab::from_observed(tokenized.iter().flatten().map(String::as_str));
        let mut class_names: Vec<String> = Vec::new();
        let mut labels = Vec::with_capacity(rows.len());
        for (_, _, label) in rows {
            let idx = match class_names.iter().position(|c| c == label) {
                Some(i) => i,
                None => {
                    class_names.push(label.clone());
                    class_names.len() - 1
                }
            };
            labels.push(idx);
        }
        let sequences = tokenized
            .iter()
            .map(|toks| toks.iter().map(|t| vocab.index_of(t).expect("observed")).collect())
            .collect();
        Self::new(sequences, labels, vocab, class_names, tokenization)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    pub fn get(&self, i: usize) -> (&[usize], usize) {
        (&self.sequences[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], usize)> + '_ {
        self.sequences.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// Samples at `indices`, in that order, sharing vocabulary and classes.
    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        SequenceDataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            vocab: self.vocab.clone(),
            class_names: self.class_names.clone(),
            tokenization: self.tokenization,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class (0 when empty).
    pub fn majority_class_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        *self.class_counts().iter().max().unwrap_or(&0) as f64 / self.len() as f64
    }

    pub fn text(&self, i: usize) -> String {
        let toks: Vec<&str> = self.sequences[i]
            .iter()
            .map(|&t| self.vocab.token(t).expect("validated"))
            .collect();
        self.tokenization.join(&toks)
    }

    /// Re-expresses the dataset against another vocabulary and class list.
    /// Tokens absent from `vocab` map to [`UNK_TOKEN`], which is appended to
    /// the returned dataset's vocabulary when needed.
    pub fn remap(&self, vocab: &Vocab, class_names: &[String]) -> Result<SequenceDataset> {
        let with_unk = vocab.with_unk();
        let mut used_unk = false;
        let sequences = self
            .sequences
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|&t| {
                        let tok = self.vocab.token(t).expect("validated");
                        vocab.index_of(tok).unwrap_or_else(|| {
                            used_unk = true;
                            with_unk.unk_index().expect("present")
                        })
                    })
                    .collect()
            })
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                let name = &self.class_names[l];
                class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Format(format!("unknown class {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = if used_unk { with_unk } else { vocab.clone() };
        SequenceDataset::new(sequences, labels, vocab, class_names.to_vec(), self.tokenization)
    }
}

pub fn load_csv(
    path: &Path,
    sequence_column: &str,
    label_column: &str,
    tokenization: Tokenization,
) -> Result<SequenceDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name:?}", path.display())))
    };
    let seq_idx = find(sequence_column)?;
    let label_idx = find(label_column)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            record.get(i).map(str::to_owned).ok_or_else(|| Error::Row {
                line,
                message: "missing field".into(),
            })
        };
        rows.push((line, field(seq_idx)?, field(label_idx)?));
    }
    SequenceDataset::from_rows(&rows, tokenization)
}

/// Writes the canonical two-column (`sequence,label`) CSV form.
pub fn save_csv(dataset: &SequenceDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["sequence", "label"])?;
    for i in 0..dataset.len() {
        writer.write_record([dataset.text(i).as_str(), dataset.class_names[dataset.labels[i]].as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Where the label sits in a FASTA header: the `field`-th piece after
/// splitting the header (without `>`) on `delimiter`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub delimiter: char,
    pub field: usize,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self { delimiter: '|', field: 1 }
    }
}

pub fn load_fasta(path: &Path, rule: &LabelRule, tokenization: Tokenization) -> Result<SequenceDataset> {
    parse_fasta(&fs::read_to_string(path)?, rule, tokenization)
}

pub fn parse_fasta(content: &str, rule: &LabelRule, tokenization: Tokenization) -> Result<SequenceDataset> {
    let mut rows: Vec<(usize, String, String)> = Vec::new();
    for (k, raw) in content.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let label = header
                .split(rule.delimiter)
                .nth(rule.field)
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Row {
                    line: line_no,
                    message: format!("header {header:?} has no label field {}", rule.field),
                })?;
            rows.push((line_no, String::new(), label.to_owned()));
        } else {
            match rows.last_mut() {
                Some((_, seq, _)) => {
                    if tokenization == Tokenization::Word && !seq.is_empty() {
                        seq.push(' ');
                    }
                    seq.push_str(line);
                }
                None => {
                    return Err(Error::Row {
                        line: line_no,
                        message: "sequence data before the first header".into(),
                    })
                }
            }
        }
    }
    SequenceDataset::from_rows(&rows, tokenization)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    /// (train, valid, test) fractions summing to 1.
    Fractions([f64; 3]),
    /// Absolute (train, valid, test) counts; samples beyond their sum are
    /// left out.
    Counts([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            sizes: SplitSizes::Fractions([0.8, 0.1, 0.1]),
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Concrete (train, valid, test) counts for `n` samples.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        match self.sizes {
            SplitSizes::Fractions(f) => {
                if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
                }
                let train = ((f[0] * n as f64).floor() as usize).min(n);
                let valid = ((f[1] * n as f64).floor() as usize).min(n - train);
                Ok([train, valid, n - train - valid])
            }
            SplitSizes::Counts(c) => {
                let total: usize = c.iter().sum();
                if total > n {
                    return Err(Error::config(format!(
                        "split counts {c:?} need {total} samples, dataset has {n}"
                    )));
                }
                Ok(c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub counts: [usize; 3],
    /// Majority-class accuracy of train, valid and test.
    pub majority_class_accuracy: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: SequenceDataset,
    pub valid: SequenceDataset,
    pub test: SequenceDataset,
    pub indices: [Vec<usize>; 3],
    pub report: SplitReport,
}

/// Seeded shuffle, then consecutive train / valid / test blocks.
pub fn split(dataset: &SequenceDataset, spec: &SplitSpec) -> Result<Split> {
    let counts = spec.counts(dataset.len())?;
    let mut perm: Vec<usize> = (0..dataset.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train_idx = perm[..counts[0]].to_vec();
    let valid_idx = perm[counts[0]..counts[0] + counts[1]].to_vec();
    let test_idx = perm[counts[0] + counts[1]..counts[0] + counts[1] + counts[2]].to_vec();
    let train = dataset.subset(&train_idx);
    let valid = dataset.subset(&valid_idx);
    let test = dataset.subset(&test_idx);
    let report = SplitReport {
        counts,
        majority_class_accuracy: [
            train.majority_class_accuracy(),
            valid.majority_class_accuracy(),
            test.majority_class_accuracy(),
        ],
    };
    Ok(Split {
        train,
        valid,
        test,
        indices: [train_idx, valid_idx, test_idx],
        report,
    })
}

/// Indices of a seeded uniform subsample of size `n`, in original order.
/// For a fixed seed the selections are nested in `n`.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::config(format!("cannot subsample {n} of {len} samples")));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = perm[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn subsample(dataset: &SequenceDataset, n: usize, seed: u64) -> Result<SequenceDataset> {
    Ok(dataset.subset(&subsample_indices(dataset.len(), n, seed)?))
}

/// Sizes and shapes for the synthetic source/target tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub source_size: usize,
    pub target_size: usize,
    /// Inclusive length range; source lengths are forced odd.
    pub source_len: (usize, usize),
    pub target_len: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source_size: 4000,
            target_size: 6000,
            source_len: (5, 15),
            target_len: (10, 14),
        }
    }
}

pub const SYNTH_SOURCE_VOCAB: usize = 200;
pub const SYNTH_TARGET_ALPHABET: [char; 7] = ['A', 'C', 'D', 'G', 'K', 'L', 'R'];
pub const SYNTH_MOTIF: [char; 3] = ['K', 'L', 'R'];
/// Background probability of each motif residue.
const MOTIF_RESIDUE_RATE: f64 = 0.03;

/// Generates the desk-scale source and target tasks.
///
/// Source: words `w000..w199`; the label is 1 when words from the first half
/// of the vocabulary outnumber words from the second half. Target: strings
/// over a 7-letter alphabet; the label is 1 when the motif `KLR` occurs.
/// Motif residues are rare in the background. Classes alternate starting
/// with 0, so both tasks are balanced within one sample.
pub fn synth_tasks(seed: u64, cfg: &SynthConfig) -> Result<(SequenceDataset, SequenceDataset)> {
    if cfg.source_size == 0 || cfg.target_size == 0 {
        return Err(Error::config("synthetic task sizes must be positive"));
    }
    for (lo, hi) in [cfg.source_len, cfg.target_len] {
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid length range ({lo}, {hi})")));
        }
    }
    if cfg.target_len.0 < SYNTH_MOTIF.len() {
        return Err(Error::config("target sequences must fit the motif"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((synth_source(&mut rng, cfg)?, synth_target(&mut rng, cfg)?))
}

fn synth_source(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SequenceDataset> {
    let half = SYNTH_SOURCE_VOCAB / 2;
    let (lo, hi) = cfg.source_len;
    let mut sequences = Vec::with_capacity(cfg.source_size);
    let mut labels = Vec::with_capacity(cfg.source_size);
    for i in 0..cfg.source_size {
        let label = i % 2;
        let mut len = rng.gen_range(lo..=hi);
        if len % 2 == 0 {
            len = if len < hi { len + 1 } else { len - 1 };
        }
        let len = len.max(1);
        let seq = loop {
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..SYNTH_SOURCE_VOCAB)).collect();
            let positive = seq.iter().filter(|&&t| t < half).count();
            if usize::from(2 * positive > len) == label {
                break seq;
            }
        };
        sequences.push(seq);
        labels.push(label);
    }
    let vocab = Vocab::new((0..SYNTH_SOURCE_VOCAB).map(|i| format!("w{i:03}")).collect())?;
    SequenceDataset::new(
        sequences,
        labels,
        vocab,
        vec!["negative".into(), "positive".into()],
        Tokenization::Word,
    )
}

fn synth_target(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SequenceDataset> {
    let alphabet = &SYNTH_TARGET_ALPHABET;
    let motif: Vec<usize> = SYNTH_MOTIF
        .iter()
        .map(|m| alphabet.iter().position(|a| a == m).expect("motif in alphabet"))
        .collect();
    let background_rate = (1.0 - MOTIF_RESIDUE_RATE * motif.len() as f64) / (alphabet.len() - motif.len()) as f64;
    let weights: Vec<f64> = (0..alphabet.len())
        .map(|t| if motif.contains(&t) { MOTIF_RESIDUE_RATE } else { background_rate })
        .collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    let contains_motif = |s: &[usize]| s.windows(motif.len()).any(|w| w == motif.as_slice());

    let (lo, hi) = cfg.target_len;
    let mut sequences = Vec::with_capacity(cfg.target_size);
    let mut labels = Vec::with_capacity(cfg.target_size);
    for i in 0..cfg.target_size {
        let label = i % 2;
        let len = rng.gen_range(lo..=hi);
        let seq = if label == 1 {
            let mut s: Vec<usize> = (0..len - motif.len()).map(|_| rng.sample(&dist)).collect();
            let at = rng.gen_range(0..=s.len());
            s.splice(at..at, motif.iter().copied());
            s
        } else {
            loop {
                let s: Vec<usize> = (0..len).map(|_| rng.sample(&dist)).collect();
                if !contains_motif(&s) {
                    break s;
                }
            }
        };
        debug_assert_eq!(usize::from(contains_motif(&seq)), label);
        sequences.push(seq);
        labels.push(label);
    }
    let vocab = Vocab::new(alphabet.iter().map(|c| c.to_string()).collect())?;
    SequenceDataset::new(
        sequences,
        labels,
        vocab,
        vec!["absent".into(), "present".into()],
        Tokenization::Char,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn small_synth() -> SynthConfig {
        SynthConfig {
            source_size: 101,
            target_size: 57,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn csv_vocab_and_labels() {
        let f = write_tmp("seq,label\nACDK,toxic\nGG,nontoxic\nGG,nontoxic\n", ".csv");
        let ds = load_csv(f.path(), "seq", "label", Tokenization::Char).unwrap();
        assert_eq!(ds.vocab().tokens(), &["A", "C", "D", "G", "K"]);
        assert_eq!(ds.class_names(), &["toxic", "nontoxic"]);
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(ds.len(), 3, "duplicates are kept");
        assert_eq!(ds.sequences()[0], vec![0, 1, 2, 4]);
    }

    #[test]
    fn csv_errors() {
        let f = write_tmp("seq,label\nACDK,toxic\n", ".csv");
        assert!(matches!(load_csv(f.path(), "sequence", "label", Tokenization::Char), Err(Error::Format(_))));
        let f = write_tmp("seq,label\nACDK,toxic\n,nontoxic\n", ".csv");
        match load_csv(f.path(), "seq", "label", Tokenization::Char) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let (source, target) = synth_tasks(3, &small_synth()).unwrap();
        for ds in [source, target] {
            let out = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
            save_csv(&ds, out.path()).unwrap();
            let back = load_csv(out.path(), "sequence", "label", ds.tokenization()).unwrap();
            // the source vocabulary may contain words never drawn
            let back = back.remap(ds.vocab(), ds.class_names()).unwrap();
            assert_eq!(back, ds);
        }
        let f = write_tmp("sequence,label\nKAC,x\nDD,y\nKAC,x\n", ".csv");
        let ds = load_csv(f.path(), "sequence", "label", Tokenization::Char).unwrap();
        let out = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        save_csv(&ds, out.path()).unwrap();
        assert_eq!(load_csv(out.path(), "sequence", "label", Tokenization::Char).unwrap(), ds);
    }

    #[test]
    fn fasta_records() {
        let ds = parse_fasta(">s1|toxic\nACD\n", &LabelRule::default(), Tokenization::Char).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.class_names(), &["toxic"]);

        let ds = parse_fasta(">s1|toxic\nAC\nDK\n>s2|non\nGG\n", &LabelRule::default(), Tokenization::Char).unwrap();
        assert_eq!(ds.text(0), "ACDK");
        assert_eq!(ds.text(1), "GG");

        let err = parse_fasta(">s1\nACD\n", &LabelRule::default(), Tokenization::Char);
        assert!(matches!(err, Err(Error::Row { line: 1, .. })));
    }

    #[test]
    fn fasta_matches_csv() {
        let fasta = ">a|toxic\nACDK\n>b|nontoxic\nG\nG\n>c|toxic\nKKA\n";
        let csv = write_tmp("sequence,label\nACDK,toxic\nGG,nontoxic\nKKA,toxic\n", ".csv");
        let from_fasta = parse_fasta(fasta, &LabelRule::default(), Tokenization::Char).unwrap();
        let from_csv = load_csv(csv.path(), "sequence", "label", Tokenization::Char).unwrap();
        assert_eq!(from_fasta, from_csv);
    }

    #[test]
    fn word_tokenization_lowercases() {
        assert_eq!(Tokenization::Word.split("Good  MOVIE"), vec!["good", "movie"]);
        assert_eq!(Tokenization::Char.split("aB"), vec!["a", "B"]);
    }

    #[test]
    fn remap_uses_unk() {
        let f = write_tmp("sequence,label\nAZ,x\n", ".csv");
        let ds = load_csv(f.path(), "sequence", "label", Tokenization::Char).unwrap();
        let vocab = Vocab::new(vec!["A".into(), "C".into()]).unwrap();
        let mapped = ds.remap(&vocab, &["y".into(), "x".into()]).unwrap();
        assert_eq!(mapped.vocab().len(), 3);
        assert_eq!(mapped.sequences()[0], vec![0, 2]);
        assert_eq!(mapped.labels(), &[1]);
        assert!(ds.remap(&vocab, &["y".into()]).is_err());
    }

    #[test]
    fn dataset_rejects_bad_indices() {
        let vocab = Vocab::new(vec!["a".into()]).unwrap();
        let err = SequenceDataset::new(vec![vec![1]], vec![0], vocab.clone(), vec!["c".into()], Tokenization::Char);
        assert!(matches!(err, Err(Error::Index { .. })));
        let err = SequenceDataset::new(vec![vec![0]], vec![1], vocab, vec!["c".into()], Tokenization::Char);
        assert!(matches!(err, Err(Error::Index { .. })));
    }

    #[test]
    fn split_table_counts() {
        let (_, target) = synth_tasks(1, &SynthConfig {
            source_size: 1,
            target_size: 10192,
            ..SynthConfig::default()
        })
        .unwrap();
        let spec = SplitSpec {
            sizes: SplitSizes::Counts([8153, 1019, 1020]),
            seed: 9,
        };
        let s = split(&target, &spec).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8153, 1019, 1020));
        let too_many = SplitSpec {
            sizes: SplitSizes::Counts([8153, 1019, 1021]),
            seed: 9,
        };
        assert!(matches!(split(&target, &too_many), Err(Error::Config(_))));
    }

    #[test]
    fn split_all_train_and_determinism() {
        let (source, _) = synth_tasks(2, &small_synth()).unwrap();
        let spec = SplitSpec {
            sizes: SplitSizes::Fractions([1.0, 0.0, 0.0]),
            seed: 4,
        };
        let s = split(&source, &spec).unwrap();
        assert_eq!(s.train.len(), source.len());
        assert!(s.valid.is_empty() && s.test.is_empty());

        let spec = SplitSpec::default();
        assert_eq!(split(&source, &spec).unwrap().indices, split(&source, &spec).unwrap().indices);
        let r = split(&source, &spec).unwrap().report;
        assert!(r.majority_class_accuracy.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn subsample_grid_and_identity() {
        let (_, target) = synth_tasks(5, &SynthConfig {
            source_size: 1,
            target_size: 8153,
            ..SynthConfig::default()
        })
        .unwrap();
        for n in [5000, 6000, 7000, 8153] {
            assert_eq!(subsample(&target, n, 1).unwrap().len(), n);
        }
        assert_eq!(subsample(&target, 8153, 1).unwrap(), target);
        assert!(matches!(subsample(&target, 8154, 1), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_tasks_shape() {
        let (source, target) = synth_tasks(7, &small_synth()).unwrap();
        assert_eq!(target.vocab().len(), 7);
        assert_eq!(source.vocab().len(), SYNTH_SOURCE_VOCAB);
        for ds in [&source, &target] {
            let c = ds.class_counts();
            assert!(c[0].abs_diff(c[1]) <= 1);
        }
        for (seq, label) in source.iter() {
            assert_eq!(seq.len() % 2, 1);
            let pos = seq.iter().filter(|&&t| t < 100).count();
            assert_eq!(usize::from(2 * pos > seq.len()), label);
        }
        let motif = [4usize, 5, 6];
        for (seq, label) in target.iter() {
            assert_eq!(usize::from(seq.windows(3).any(|w| w == motif)), label);
        }
        assert_eq!(synth_tasks(7, &small_synth()).unwrap().1, target);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn split_is_disjoint_and_covering(
                n in 1usize..300,
                a in 0.0f64..1.0,
                b in 0.0f64..1.0,
                seed in any::<u64>(),
            ) {
                let train = a;
                let valid = (1.0 - a) * b;
                let test = 1.0 - train - valid;
                let seqs = (0..n).map(|i| vec![i % 3]).collect();
                let labels = (0..n).map(|i| i % 2).collect();
                let vocab = Vocab::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
                let ds = SequenceDataset::new(seqs, labels, vocab, vec!["x".into(), "y".into()], Tokenization::Char).unwrap();
                let spec = SplitSpec { sizes: SplitSizes::Fractions([train, valid, test]), seed };
                let s = split(&ds, &spec).unwrap();
                let mut all: Vec<usize> = s.indices.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn subsample_is_nested(len in 1usize..500, seed in any::<u64>(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
                let n1 = ((len as f64) * x.min(y)) as usize;
                let n2 = ((len as f64) * x.max(y)) as usize;
                let small = subsample_indices(len, n1, seed).unwrap();
                let large = subsample_indices(len, n2, seed).unwrap();
                prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
            }
        }
    }
}
