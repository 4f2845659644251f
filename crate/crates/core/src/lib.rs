//! Uncertainty-aware multi-modal semantic communication.
//!
//! Two devices observe different views of a common source, encode them with
//! locally pre-trained networks and send the features over noisy links. The
//! server fuses per-modality subjective opinions, and any modality whose
//! uncertainty crosses a calibrated threshold is sent again.

pub mod channel;
pub mod error;
pub mod evidential;
pub mod harness;
pub mod infobounds;
pub mod nn;
pub mod par;
pub mod pretrain;
pub mod retx;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
