//! Training language models with in-batch memories.
//!
//! A small causal transformer is trained so that the next-token distribution
//! mixes vocabulary logits with similarity scores against context-target
//! pairs drawn from the same training batch. The crate covers the whole
//! pipeline at desk scale: a reverse-mode autodiff tensor core, the model,
//! memory construction, data batching (random / consecutive / BM25-packed),
//! the training objective, an external datastore with exact kNN search,
//! memory-augmented evaluation, and the experiment harness behind the CLI.

pub mod batching;
pub mod corpus;
pub mod datastore;
pub mod harness;
pub mod inference;
pub mod memory;
pub mod model;
pub mod objective;
pub mod synth;
pub mod tensor;
