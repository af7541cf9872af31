//! Parameter and multiply-accumulate counting.
//!
//! Convolution, transpose-convolution and linear layers are counted in
//! multiply-accumulate pairs; pooling, normalization, activations and
//! attention weighting are counted at one operation per element touched.

use serde::Serialize;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Shape4;
use crate::model::ChangeDetector;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub macs: u64,
    pub elementwise: u64,
}

impl FlopTally {
    pub fn macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn elementwise(&mut self, n: u64) {
        self.elementwise += n;
    }

    pub fn total(&self) -> u64 {
        self.macs + self.elementwise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
    pub elementwise: u64,
    /// `(channels, height, width)` of each input image.
    pub input_shape: (usize, usize, usize),
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Learnable scalars, batch-norm scale and shift included.
pub fn count_params(model: &ChangeDetector) -> u64 {
    model.params().num_trainable() as u64
}

/// Operations for one forward pass on a single image pair of
/// `(channels, height, width)`.
pub fn estimate_flops(
    model: &ChangeDetector,
    input_shape: (usize, usize, usize),
) -> Result<FlopTally> {
    let (c, h, w) = input_shape;
    if c != 3 {
        return Err(Error::shape(format!("expected 3-channel input, got {c}")));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(format!(
            "input {h}x{w} is not a multiple of 16"
        )));
    }
    let mut tally = FlopTally::default();
    let input: Shape4 = [1, c, h, w];
    let levels = model.encoder().flops(input, &mut tally);
    model.decoder().flops(levels[4], &mut tally);
    Ok(tally)
}

pub fn complexity_report(
    model: &ChangeDetector,
    input_shape: (usize, usize, usize),
) -> Result<ComplexityReport> {
    let tally = estimate_flops(model, input_shape)?;
    Ok(ComplexityReport {
        params: count_params(model),
        flops: tally.total(),
        macs: tally.macs,
        elementwise: tally.elementwise,
        input_shape,
    })
}

/// Convenience: build `config` and report its complexity at its input size.
pub fn complexity_of(config: ModelConfig) -> Result<ComplexityReport> {
    let model = crate::model::build_variant(config, 0)?;
    let (h, w) = config.input_size;
    complexity_report(&model, (3, h, w))
}
