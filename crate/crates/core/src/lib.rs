//! Change detection on co-registered bi-temporal image pairs with a
//! triplet-encoder U-shaped network.
//!
//! The network encodes the two acquisitions with a weight-shared trunk and
//! their absolute difference with an independent trunk, fuses the three
//! streams at every level with cross attention ([`mbsscca`]), and decodes
//! the fused pyramid with spatial and channel attention ([`decoder`]).

pub mod attention;
pub mod backbone;
pub mod complexity;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod mbsscca;
pub mod metrics;
pub mod model;
pub mod params;
pub mod render;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
pub use model::{build_variant, ChangeDetector};
