//! Dense and switch (mixture-of-experts) transformer encoders for binary
//! text classification, with a small tape-based autodiff engine, training,
//! evaluation and attribution utilities.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use data::{Example, LabeledDataset, Split, TokenizerConfig, Vocabulary};
pub use error::{Error, Result};
pub use model::{Batch, EncoderModel, ForwardCtx, ModelConfig, Pooling, Variant};
pub use nn::{ParamId, ParamStore};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainOutcome};

/// Hex SHA-256 of `bytes`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
