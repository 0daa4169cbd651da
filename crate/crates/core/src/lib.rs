//! Behavioral simulator for convolutional neural network inference on
//! MAAP (Multiply-Accumulate-Activate-Pool) spintronic hardware.
//!
//! The crate models one MAAP set as a saturating ReLU fused with a
//! winner-take-all max-pool, adds per-device process-variation noise with
//! redundancy averaging, quantizes stored weights and ADC readouts to `B`
//! bits, and prices each classified image with a closed-form energy and
//! latency model.
//!
//! Modules:
//! - [`device`]: MAAP transfer function, device sampling, redundant reads.
//! - [`quantization`]: uniform `B`-bit quantizer for SRAM and ADC.
//! - [`network`]: MAAP-CNN dataflow, op counting, range fitting.
//! - [`trainer`]: full-precision SGD reference trainer.
//! - [`energy`]: per-image energy and latency accounting.
//! - [`dataio`]: IDX loaders, weight files, dataset subsetting.
//! - [`experiments`]: Monte-Carlo sweeps and stream seeding.

pub mod dataio;
pub mod device;
pub mod energy;
mod error;
pub mod experiments;
pub mod network;
pub mod quantization;
pub mod trainer;

pub use error::{Error, Result};
