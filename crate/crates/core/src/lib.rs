pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod training;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{Batch, EncoderModel, ModelConfig};
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
pub use tokenizer::{EncodedSequence, Vocabulary};
