//! Contextual code summarization at desk scale.
//!
//! The pipeline turns Java-like methods into short natural-language
//! summaries using both the method's own tokens and its class-level
//! context:
//!
//! 1. [`preprocess`] normalizes identifiers, code, and summaries into
//!    subtoken sequences and builds vocabularies.
//! 2. [`sbt`] flattens ASTs into structure-based traversal sequences.
//! 3. [`uml`] scans project sources into a multi-relational class graph
//!    (realization / generalization / dependency / association).
//! 4. [`model`] encodes code tokens and SBT tokens with GRUs, class names
//!    with a semantic embedding, and the class graph with a
//!    multi-relational graph attention network, then decodes summaries
//!    with a two-level attention mechanism.
//! 5. [`train`] runs teacher-forced AdamW training, checkpointing, and
//!    greedy decoding.
//! 6. [`metrics`] scores predictions with BLEU, ROUGE-L, METEOR, and
//!    CIDEr.
//!
//! Everything runs on [`tensor`], a small reverse-mode autodiff tape,
//! so gradients can be verified against finite differences end to end.

pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod sbt;
pub mod tensor;
pub mod train;
pub mod uml;
