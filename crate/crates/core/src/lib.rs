//! Feature-level image-to-video domain adaptation.
//!
//! A frozen reference embedder trained on labeled stills supervises an
//! adapted embedder through feature matching, feature restoration under
//! synthetic degradation, an N-pair metric loss and a domain discriminator.
//! The discriminator's "still image" confidence then weights frames when
//! pooling a video into one descriptor.

pub mod ablation;
pub mod baselines;
pub mod data_io;
pub mod degrade;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod graph;
pub mod image;
mod kernels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Padding, Var};
pub use image::Image;
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
