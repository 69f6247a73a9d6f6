//! Implicit pixel flow: an image and video codec that stores every frame as
//! the quantized weights of a small sinusoidal coordinate network.
//!
//! I-frames are networks mapping `(x, y)` to RGB. P-frames reuse the GoP's
//! I-frame network and only transmit a small flow network, whose output is
//! added to the input coordinates, plus an optional residual network added
//! in pixel space. Weights are stored with learned per-channel fixed-point
//! quantization, so decoding needs nothing but the bitstream and a forward
//! pass.
//!
//! Module map:
//! - [`media`]: frames, coordinate grids, PSNR and bits-per-pixel.
//! - [`siren`]: architectures, forward and exact reverse-mode evaluation.
//! - [`quant`]: learned per-channel quantizers and the rate term.
//! - [`trainer`]: rate-distortion loss, Adam and learning-rate schedules.
//! - [`vidflow`]: GoP encoding and decoding with implicit flow warping.
//! - [`bitstream`]: the `.ipf` file format.
//! - [`cli`]: the command-line front end.

pub mod bitstream;
pub mod cli;
pub mod media;
pub mod par;
pub mod quant;
pub mod siren;
pub mod trainer;
pub mod vidflow;

pub use bitstream::{BitstreamError, Document, FrameRecord, Header};
pub use media::{CoordGrid, ImageTensor, MediaError};
pub use quant::{ChannelQuantizer, QuantError, QuantizedTensor};
pub use siren::{ArchitectureSpec, LayerKind, Network, SirenError};
pub use trainer::{TrainConfig, TrainError};
pub use vidflow::{CodecConfig, ResidualMode, VidflowError};
