//! Sinusoidal coordinate networks (SIREN, uSIREN, SIREN3D).
//!
//! A network is a stack of per-pixel linear layers with a sine, ReLU or
//! identity activation, optionally interrupted by one bilinear upsampling
//! step. Forward evaluation and exact reverse-mode gradients are written
//! out by hand for exactly these layer types.

mod network;
mod spec;
mod upsample;

pub use network::{init_network, ForwardCache, Gradients, Layer, LayerQuantizers, Lattice, Network};
pub use spec::{param_count, ArchitectureSpec, LayerKind, Op, DEFAULT_OMEGA0};
pub use upsample::{upsample_bilinear, upsample_bilinear_backward};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SirenError {
    #[error("invalid layer string {0:?}: {1}")]
    InvalidLayerString(String, &'static str),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("grid {height}x{width} is not divisible by upsample factor {factor}")]
    UpsampleMismatch {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
