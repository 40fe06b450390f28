//! Sparse-dictionary reprogramming of frozen sequence classifiers.
//!
//! A classifier trained on a source token vocabulary is reused, unchanged,
//! on a target task with a different vocabulary. Each target token is
//! embedded as a sparse combination of source embeddings, found by
//! alternating k-SVD coding with gradient steps through the frozen model.

pub mod classifier;
pub mod data;
pub mod error;
pub mod numerics;
pub mod reprogram;
pub mod sparse_coding;

pub use classifier::{train_source, Architecture, ClassifierParams, EmbeddingTable, FrozenClassifier, TrainConfig, TrainReport};
pub use data::{SequenceDataset, Split, SplitSpec, SynthConfig, Tokenization, Vocab};
pub use error::{Error, Result};
pub use numerics::{matmul, softmax, thin_svd, Matrix, SvdResult};
pub use reprogram::{
    evaluate, r2dl_train, AdversarialProgram, Evaluation, LabelMap, ProgramCheckpoint, ProjectionMode, R2dlConfig, R2dlOutput, StepSchedule,
};
pub use sparse_coding::{batch_encode, ksvd_dictionary_update, ksvd_run, omp_encode, Dictionary, KsvdConfig, ResidualNorm, SparseCode, UnusedAtomPolicy};
