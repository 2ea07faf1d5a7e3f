//! Document-level neural machine translation with a contextual associated
//! memory network on top of a from-scratch Transformer.
//!
//! The crate is organised around a small tape-based autodiff core:
//!
//! - [`tensor`] — dense tensors, the op tape, reverse-mode gradients
//! - [`text`] — corpora with document boundaries, BPE subwords, batching
//! - [`transformer`] — embeddings, encoder and decoder stacks
//! - [`memory`] — context encoding, inter-sentence attention, merging, gating
//! - [`model`] — the assembled translation model and its parameter store
//! - [`training`] — loss, Adam with the inverse-sqrt schedule, checkpoints
//! - [`inference`] — greedy and beam decoding over documents
//! - [`evaluation`] — BLEU plus consistency, disambiguation and coherence
//! - [`config`] — the plain-text run configuration format

pub mod config;
pub mod evaluation;
pub mod inference;
pub mod memory;
pub mod model;
pub mod rnn;
pub mod tensor;
pub mod text;
pub mod training;
pub mod transformer;
