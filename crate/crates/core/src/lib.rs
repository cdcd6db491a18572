//! Train convolutional autoencoders and CNN classifiers on grayscale
//! micrographs, then look inside them: per-channel feature maps at a chosen
//! encoder depth, and input patterns synthesized by gradient ascent to
//! maximally excite individual filters.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{CheckpointError, Error, Result};
pub use layers::{Activation, Conv2d, Dense, GradResult, Layer, LayerKind, ParamGrads};
pub use model::{
    build_autoencoder, build_classifier, AutoencoderConfig, ClassifierConfig, ModelConfig,
    ModelKind, ModelSpec,
};
pub use tensor::{Element, Shape, Tensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
