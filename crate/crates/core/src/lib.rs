//! Anti-adversarial climbing for class activation maps.

pub mod atns;
pub mod attribution;
pub mod climb;
pub mod diagnostics;
pub mod eval;
pub mod classifier;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod pipeline;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, LossMode, Var};
pub use tensor::{Grid, Tensor};
