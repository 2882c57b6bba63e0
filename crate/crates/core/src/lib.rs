//! Multi-attribute classification head built on bilinear pooling.
//!
//! A frozen backbone activation map `alpha` (C×H×W) is projected by a 1×1
//! convolution to `beta` (K×H×W), the outer products of `alpha` and `beta` are
//! summed over all spatial locations into a C×K feature, and a linear layer maps
//! that feature to one score per attribute. The head is trained with pairwise
//! ranking losses and evaluated with ranking-based average precision and
//! frequency-weighted mean average precision.
//!
//! Module map:
//!
//! * [`data`] parses CUB-200-2011 style annotation files into a binary label
//!   matrix, attribute taxonomy and train/validation/test split.
//! * [`features`] stores backbone feature maps in the `FTNS` format.
//! * [`projection`] fits the PCA / FastICA initializer of the 1×1 projection.
//! * [`bilinear`] is the sum-of-outer-products pooling layer.
//! * [`model`] assembles the head and owns parameter accounting and checkpoints.
//! * [`losses`] holds the hinge and log-sum-exp pairwise ranking losses.
//! * [`optim`] and [`trainer`] run mini-batch training.
//! * [`metrics`] computes AVGPREC, non-interpolated AP and weighted MAP.

pub mod bilinear;
mod codec;
pub mod data;
pub mod exec;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use exec::Execution;
pub use tensor::Tensor3;

/// Union of the per-module errors, for callers that drive the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Projection(#[from] projection::ProjectionError),
    #[error(transparent)]
    Bilinear(#[from] bilinear::BilinearError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
