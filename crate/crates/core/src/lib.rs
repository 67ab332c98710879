//! Multi-choice reading comprehension, trained either as a softmax over
//! option encodings or as independent yes/no classification per option.

pub mod allreduce;
pub mod autodiff;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod heads;
pub mod hpo;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
