pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod finetune;
pub mod model;
pub mod peft;
pub mod quantize;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{TransformerConfig, TransformerModel};
pub use peft::PeftSet;
pub use quantize::QuantizedMatrix;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
