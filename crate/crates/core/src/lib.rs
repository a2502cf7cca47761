//! Difference-aware two-face explanation model.
//!
//! Two face inputs and a text prompt are fused into a prefix for a small
//! decoder-only language model that explains whether the faces match.

pub mod autograd;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{AttnMask, GradCheckOptions, GradCheckReport, Graph, Var};
pub use data::{CorpusStats, Dataset, Label, PairRecord, Tier};
pub use encoder::{EncoderKind, EncoderSpec, FaceAttr};
pub use error::{Error, Result};
pub use harness::{AblationMatrix, AblationRow, LmSize, RunConfig};
pub use mapper::{ClipMode, FusionConfig, ModelDims, PrefixBundle};
pub use metrics::MetricReport;
pub use model::{Example, ModelConfig, VerLM};
pub use params::{Group, VerLMParams};
pub use tensor::Tensor;
pub use text::{TokenSeq, Vocab};
pub use train::{LossConfig, Stage, Strategy, TrainConfig};
