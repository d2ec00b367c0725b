//! Desk-scale sentence embeddings from a frozen transformer encoder plus
//! small trainable adapters, with triplet/contrastive training and
//! retrieval-based evaluation.
//!
//! Everything is f64 on the CPU and deterministic under a fixed seed: data
//! generation, parameter init, batching, and evaluation order. The crate is
//! organized bottom-up:
//!
//! - [`tensor`]: dense tensors and the reverse-mode gradient tape
//! - [`encoder`]: hashing tokenizer and the transformer encoder
//! - [`adapters`]: bottleneck and side-network adapters over a frozen base
//! - [`objectives`]: triplet margin and in-batch contrastive losses
//! - [`data`]: corpora, triplet construction, splits, JSONL persistence
//! - [`trainer`]: Adam loop over adapter (or full) parameters
//! - [`evaluation`]: ranked-retrieval scoring and run comparison
//! - [`checkpoint`]: single-file parameter containers

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use adapters::{
    build_adapter, count_parameters, inject, AdapterConfig, AdapterError, AdapterKind,
    AdapterParameters, BottleneckConfig, Insertion, KAdapterConfig, Nonlinearity,
};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::{
    build_citation_triplets, build_pair_triplets, document_text, generate_synthetic_corpus,
    load_documents, load_pairs, load_triplets, save_documents, save_pairs, save_triplets, split,
    CorpusProfile, DataError, Document, PairTripletBuild, Provenance, SentencePair, Triplet,
    TripletDataset,
};
pub use objectives::{
    contrastive_loss, contrastive_loss_traced, triplet_margin_loss, triplet_margin_loss_traced,
    LossConfig, LossError, TripletBatch,
};
pub use evaluation::{
    average_precision, compare, evaluate, triplets_to_tasks, Comparison, ComparisonRow,
    EvalError, EvalReport, PoolProtocol, RetrievalTask, TaskBuild, TextEmbedder,
    DEFAULT_DISTRACTORS,
};

pub use encoder::{
    tokenize, BaseParameters, Encoder, EncoderConfig, EncoderError, LayerAdapter, Pooling,
    SentenceEmbedding,
};
pub use tensor::{finite_difference_check, Tape, Tensor, TensorError, Var};
pub use trainer::{
    optimizer_step, train, AdamState, DomainRegistry, LossKind, TrainConfig, TrainError,
    TrainMode, TrainReport,
};
