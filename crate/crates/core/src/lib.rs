//! Energy-based models built as exponential tilts of a normalizing-flow
//! backbone, `p(x) ∝ exp(f(x)) q(x)`, sampled in the flow's latent space where
//! the pulled-back target `p(z) ∝ exp(f(g(z))) N(z; 0, I)` is close to unimodal.

pub mod autodiff;
pub mod datasets;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod flow;
pub mod io;
pub mod nn;
pub mod optim;
pub mod samplers;
pub mod trainers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};
