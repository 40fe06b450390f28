//! Deterministic inputs shared by the benchmarks.

use r2dl_core::{Architecture, ClassifierParams, Dictionary, EmbeddingTable, FrozenClassifier, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).expect("finite")
}

/// Random dictionary with unit-norm atoms.
pub fn random_dictionary(dim: usize, atoms: usize, rng: &mut ChaCha8Rng) -> Dictionary {
    Dictionary::normalized(&random_matrix(dim, atoms, rng)).expect("non-zero columns").0
}

/// Frozen bag-of-embeddings classifier with random weights.
pub fn random_classifier(d: usize, hidden: usize, vocab: usize, classes: usize, rng: &mut ChaCha8Rng) -> FrozenClassifier {
    let tensors = vec![
        random_matrix(hidden, d, rng),
        random_matrix(hidden, 1, rng),
        random_matrix(classes, hidden, rng),
        random_matrix(classes, 1, rng),
    ];
    let params = ClassifierParams::new(Architecture::BagMlp, d, hidden, classes, tensors).expect("shapes");
    FrozenClassifier::from_parts(EmbeddingTable::new(random_matrix(d, vocab, rng)), params, 0).expect("shapes")
}
