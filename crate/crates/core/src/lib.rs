//! A small decoder-only language-model stack: FP64 reverse-mode autograd,
//! a rotary pre-norm transformer, tiled attention, byte-level BPE with
//! vocabulary extension, a document filtering and mixing pipeline, and a
//! token-budget trainer with evaluation helpers.

pub mod data;
pub mod flash;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod train;
