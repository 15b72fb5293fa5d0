pub mod attention;
pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod disparity;
pub mod error;
pub mod eval;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod stereo;

pub use error::{Error, Result};
