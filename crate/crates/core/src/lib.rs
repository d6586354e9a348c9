//! Self-distilled deep hashing at desk scale.
//!
//! An MLP encoder with a tanh hash layer is trained on two augmented views
//! per sample: a weakly transformed teacher view and a strongly transformed
//! student view. The objective combines
//!
//! * a hash-proxy cross entropy on teacher codes ([`losses::hp_loss`]),
//! * a cosine self-distillation term pulling student codes towards the
//!   detached teacher codes ([`losses::sdh_loss`]),
//! * a Gaussian-likelihood BCE quantization penalty on teacher codes and on
//!   the proxies ([`losses::bceq_loss`]).
//!
//! Trained codes are sign-quantized into packed [`codes::BinaryCode`]s and
//! searched exhaustively by Hamming distance ([`retrieval`]).
//!
//! With the default `parallel` feature, per-sample gradients, encoding and
//! per-query evaluation run on rayon; reductions are always performed in a
//! fixed order so results do not depend on the thread count.

pub mod augment;
pub mod codes;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod par;
pub mod retrieval;
pub mod trainer;

pub use codes::{cosine, hamming, hamming_from_cosine, quantize, BinaryCode, HashCode};
pub use error::{Error, Result};
pub use losses::{LossBundle, LossWeights, ProxyBank};
pub use model::{EncoderConfig, HashModel};
pub use retrieval::{build_index, evaluate, EvalReport, RetrievalIndex};
pub use trainer::{Sample, TrainConfig, Trainer};
