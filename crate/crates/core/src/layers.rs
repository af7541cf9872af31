//! Convolution, transpose-convolution and batch-norm layers on top of
//! candle tensors, plus the small validation helpers every block uses.

use candle_core::{DType, Tensor, Var, D};

use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::params::ParamInit;

pub(crate) const BN_EPSILON: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// `(batch, channels, height, width)`.
pub type Shape4 = [usize; 4];

pub(crate) fn dims4(x: &Tensor) -> Result<Shape4> {
    let (b, c, h, w) = x
        .dims4()
        .map_err(|_| Error::shape(format!("expected a rank-4 feature map, got {:?}", x.dims())))?;
    Ok([b, c, h, w])
}

/// Fails when any element is NaN or infinite.
pub(crate) fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    // x - x is zero exactly when x is finite
    let probe = x
        .sub(x)?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if probe == 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let [_, c, _, _] = dims4(x)?;
    if c != expected {
        return Err(Error::shape(format!(
            "{what} expects {expected} input channels, got {c}"
        )));
    }
    Ok(())
}

/// Square 2-D convolution with stride 1 and "same" padding.
pub struct Conv2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = in_channels * kernel * kernel;
        let weight = init.he_normal(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
        )?;
        let bias = init.zeros(&format!("{name}.bias"), &[out_channels])?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.kernel / 2, 1, 1, 1)?;
        let b = self
            .bias
            .as_tensor()
            .reshape((1, self.out_channels, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn flops(&self, [b, _, h, w]: Shape4, tally: &mut FlopTally) -> Shape4 {
        let out = [b, self.out_channels, h, w];
        tally.macs(numel(out) * (self.kernel * self.kernel * self.in_channels) as u64);
        out
    }
}

/// 2×2 transpose convolution with stride 2 (doubles the spatial size).
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    out_channels: usize,
}

impl ConvTranspose2d {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let weight = init.he_normal(
            &format!("{name}.weight"),
            &[in_channels, out_channels, 2, 2],
            in_channels,
        )?;
        let bias = init.zeros(&format!("{name}.bias"), &[out_channels])?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure_channels(x, self.in_channels, "transpose convolution")?;
        let y = x.conv_transpose2d(self.weight.as_tensor(), 0, 0, 2, 1)?;
        let b = self
            .bias
            .as_tensor()
            .reshape((1, self.out_channels, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn flops(&self, [b, _, h, w]: Shape4, tally: &mut FlopTally) -> Shape4 {
        // each output pixel receives exactly one kernel tap per input channel
        let out = [b, self.out_channels, 2 * h, 2 * w];
        tally.macs(numel(out) * self.in_channels as u64);
        out
    }
}

/// Batch normalization over `(batch, height, width)` per channel.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates with momentum 0.1; evaluation mode uses the running
/// estimates only.
pub struct BatchNorm {
    scale: Var,
    shift: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize) -> Result<Self> {
        let scale = init.ones(&format!("{name}.scale"), &[channels])?;
        let shift = init.zeros(&format!("{name}.shift"), &[channels])?;
        let dev = init.device().clone();
        let dtype = init.dtype();
        let running_mean = init.buffer(
            &format!("{name}.mean"),
            Tensor::zeros(channels, dtype, &dev)?,
        )?;
        let running_var =
            init.buffer(&format!("{name}.var"), Tensor::ones(channels, dtype, &dev)?)?;
        Ok(Self {
            scale,
            shift,
            running_mean,
            running_var,
            channels,
        })
    }

    pub fn scale(&self) -> &Var {
        &self.scale
    }

    pub fn shift(&self) -> &Var {
        &self.shift
    }

    pub fn running_mean(&self) -> &Var {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Var {
        &self.running_var
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        ensure_channels(x, self.channels, "batch norm")?;
        let c = self.channels;
        let (mean, var) = if train {
            let [b, _, h, w] = dims4(x)?;
            let n = b * h * w;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            self.update_running(&mean, &var, n)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = (var + BN_EPSILON)?.sqrt()?.recip()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let scale = self.scale.as_tensor().reshape((1, c, 1, 1))?;
        let shift = self.shift.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, n: usize) -> Result<()> {
        let mean = mean.detach().flatten_all()?;
        // running variance tracks the unbiased estimate
        let correction = if n > 1 {
            n as f64 / (n - 1) as f64
        } else {
            1.0
        };
        let var = (var.detach().flatten_all()? * correction)?;
        let m = BN_MOMENTUM;
        let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
        let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var * m)?)?;
        self.running_mean.set(&new_mean.detach())?;
        self.running_var.set(&new_var.detach())?;
        Ok(())
    }

    pub fn flops(&self, shape: Shape4, tally: &mut FlopTally) -> Shape4 {
        tally.elementwise(numel(shape));
        shape
    }
}

pub(crate) fn numel(shape: Shape4) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

/// Spatial max over all positions, `(b, c, h, w) -> (b, c)`.
pub(crate) fn spatial_max(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max(D::Minus1)?)
}

/// Spatial mean over all positions, `(b, c, h, w) -> (b, c)`.
pub(crate) fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn finite_probe_detects_nan_and_inf() {
        let dev = Device::Cpu;
        let ok = Tensor::new(&[1f32, -3.0, 1e30], &dev).unwrap();
        assert!(ensure_finite(&ok, "x").is_ok());
        let nan = Tensor::new(&[1f32, f32::NAN], &dev).unwrap();
        assert!(ensure_finite(&nan, "x").is_err());
        let inf = Tensor::new(&[f32::NEG_INFINITY, 0.0], &dev).unwrap();
        assert!(ensure_finite(&inf, "x").is_err());
    }

    #[test]
    fn transpose_conv_doubles_spatial_size() {
        let mut init = ParamInit::new(1, DType::F32, &Device::Cpu);
        let up = ConvTranspose2d::new(&mut init, "up", 8, 8).unwrap();
        let x = Tensor::ones((1, 8, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[1, 8, 8, 10]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut init = ParamInit::new(1, DType::F64, &Device::Cpu);
        let bn = BatchNorm::new(&mut init, "bn", 1).unwrap();
        // batch of values {1, 3}: mean 2, unbiased variance 2
        let x = Tensor::new(&[1f64, 3.0], &Device::Cpu)
            .unwrap()
            .reshape((2, 1, 1, 1))
            .unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let y: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
        let m: Vec<f64> = bn.running_mean().as_tensor().to_vec1().unwrap();
        let v: Vec<f64> = bn.running_var().as_tensor().to_vec1().unwrap();
        assert!((m[0] - 0.2).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
