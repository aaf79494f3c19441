//! Batch-aware expert selection for Mixture-of-Experts inference.
//!
//! The crate bundles the pieces needed to study expert reduction during
//! batched decode without GPUs or real checkpoints:
//!
//! * [`router`]: softmax gating, top-k selection and router confidence.
//! * [`policy`]: latency- and accuracy-preserving expert retention with
//!   token remapping.
//! * [`sim`]: a seeded synthetic MoE transformer for divergence experiments.
//! * [`cost`]: a roofline latency model, calibration and expert saturation.
//! * [`analysis`]: activation-frequency statistics over routing traces.
//! * [`saturation`]: expected active experts under random routing.
//! * [`trace`], [`workload`]: routing trace records and synthetic traces.
//! * [`config`], [`harness`], [`ablation`]: run configuration and the
//!   experiment drivers behind the `batchmoe` command line tool.

pub mod ablation;
pub mod analysis;
pub mod config;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod policy;
pub mod router;
pub mod saturation;
pub mod sim;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
pub use model::{MoeModelSpec, Phase};
