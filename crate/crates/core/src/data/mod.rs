//! Synthetic corpora, preprocessing and persistence.

pub mod container;
pub mod corpus;
pub mod manifest;
pub mod pipeline;

pub use corpus::{generate_synthetic_corpus, load_corpus, save_corpus, Corpus, CorpusStyle, Dimension, GeneratorConfig, Session};
pub use pipeline::{
    aggregate_features, binarise, build_windows, fuse_annotations, prepare_trace, segment_windows, window_count,
    BinariseConfig, Binarised, PreprocessConfig, ThresholdMode, Window, WindowLabel,
};
