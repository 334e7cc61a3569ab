//! Prototype-based discriminative learning with a unified
//! classifier-weight/class-prototype parametrization.
//!
//! The crate trains a small feature extractor together with one matrix of
//! class prototypes that doubles as the classifier weight matrix. The
//! composite objective combines scaled-softmax cross-entropy, attraction of
//! features toward their own prototype, and repulsion from the nearest
//! rival prototype at both the sample and the class level. A geometry
//! module measures how well the resulting latent space is organized
//! (inter-class separation, intra-class compactness, and their ratio).
//!
//! See the `book/` guide at the repository root for a chapter-by-chapter
//! walkthrough; its code snippets compile as doc-tests of this crate.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{FeatureExtractor, MlpConfig};
pub use prototypes::PrototypeBank;
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{Method, TrainConfig};
