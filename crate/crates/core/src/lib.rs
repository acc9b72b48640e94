//! Label-free knowledge distillation for entity matching: select a small,
//! informative set of candidate tuples, have teacher models label them, and
//! turn the labels into training files for a student model.

pub mod distillation;
pub mod evaluation;
pub mod ingest;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod seed;
pub mod selection;
pub mod synth;
pub mod teaching;
