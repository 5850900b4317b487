//! Simulator and offline toolchain for a tiled, zero-weight-skipping CNN
//! inference accelerator.
//!
//! The crate is organised the way data flows through the system:
//!
//! * [`numerics`]: 8-bit sign+magnitude values and requantization.
//! * [`layout`]: 4x4 tiles, tiled tensors, stripes and bank assignment.
//! * [`netmodel`]: network manifests, pruning, quantization, image ingestion.
//! * [`packer`]: offline (offset, weight) packing of nonzero weights.
//! * [`driver`]: the host side; stripe planning and instruction compilation.
//! * [`engine`]: functional execution and the cycle model.
//! * [`oracle`]: naive reference layers used as ground truth.
//! * [`metrics`]: throughput, efficiency and CSV reports.

pub mod driver;
pub mod engine;
pub mod layout;
pub mod metrics;
pub mod netmodel;
pub mod numerics;
pub mod oracle;
pub mod packer;
pub mod synth;

pub use numerics::{Acc, LayerQuant, QVal};
