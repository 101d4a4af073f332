pub mod autograd;
pub mod decompose;
pub mod connector;
pub mod editor;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod meme;
pub mod memi;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod selftest;
pub mod tensor;
pub mod types;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
