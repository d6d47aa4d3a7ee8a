//! Event-camera force regression.
//!
//! The pipeline turns asynchronous event streams into fixed-interval event
//! frames, feeds them to a small Vision Transformer regressor and trains it
//! against force labels. A deterministic gripper simulator provides labeled
//! recordings for end-to-end checks.
//!
//! - [`event`]: events, streams, CSV/`EVB1` files
//! - [`frame`]: event-to-frame accumulation, labeled datasets, `FRD1` files
//! - [`synth`]: synthetic gripper recordings
//! - [`autodiff`]: tensors and reverse-mode differentiation
//! - [`vit`]: the ViT regressor
//! - [`train`]: splitting, loss, Adam, training loop and metrics

pub mod autodiff;
pub mod event;
pub mod frame;
pub mod seed;
pub mod synth;
pub mod train;
pub mod vit;
