//! Multimodal machine translation with probing tasks for visual grounding.

pub mod autodiff;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod probing;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autodiff::{Tape, Var};
pub use corpus::ParallelExample;
pub use error::{Error, Result};
pub use features::{FeatureRegime, PatchFeatures, SyntheticSpec};
pub use model::{EncodedPair, FusionMode, GateMode, ModelConfig, ModelParams};
pub use probing::{MaskCategory, MaskLexicon, MaskRecord, MaskedExample, ProbingTask};
pub use tensor::{Real, Tensor};
pub use vocab::Vocab;
