//! Desk-scale laboratory for fine-tuning a small byte-level language model
//! with low-rank adapters, labeling headlines with forward returns, and
//! evaluating the results.

pub mod checkpoint;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod corpus;
pub mod labels;
pub mod training;
pub mod eval;
pub mod retry;
pub mod instructions;
