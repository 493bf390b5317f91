//! Building blocks for adapting a small causal language model to a
//! low-resource language: bilingual corpus mixing, language-separated
//! sequence packing, a byte-level BPE tokenizer, a desk-scale transformer
//! with LoRA adapters, continual pre-training / instruction tuning / DPO
//! objectives, translated dataset builders, and a few-shot evaluation
//! harness.

pub mod corpus;
pub mod databuild;
pub mod evalharness;
pub mod model;
pub mod packer;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
