//! Algebraic latent action models on a synthetic two-view world.
//!
//! Pipeline: [`synthworld`] generates episodes, [`pretrain`] fits the
//! transition [`encoder`], [`quantizer`] and [`decoder`], [`probes`] measures
//! additivity and reversibility of the learned latents, and [`policy`]
//! transfers the frozen encoder into a flow-matching policy. [`harness`] owns
//! configuration, checkpoints, logs and plots.

pub mod decoder;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod probes;
pub mod quantizer;
pub mod rng;
pub mod policy;
pub mod synthworld;

pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{Encoder, EncoderConfig, Readout};
pub use error::{AlamError, Result};
pub use quantizer::{Codebook, QuantizerConfig};
pub use synthworld::{Dataset, Frame, GapRange, Trajectory, View, WorldConfig};
