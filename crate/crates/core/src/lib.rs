pub mod autograd;
pub mod curve;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Gradients, Mode, Tape};
pub use curve::CurvePoint;
pub use error::{Error, Result};
pub use tensor::{Activation, Conv2dSpec, Padding, Tensor};
