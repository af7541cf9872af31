//! Spatial (SAM) and channel (CAM) attention blocks.

use candle_core::{Tensor, Var};

use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::layers::{
    dims4, ensure_channels, ensure_finite, numel, sigmoid, spatial_max, spatial_mean, Shape4,
};
use crate::params::ParamInit;

/// Spatial weight plane `(batch, 1, h, w)` with values in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct AttentionMap(Tensor);

/// Per-channel weights `(batch, c, 1, 1)` with values in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct AttentionVector(Tensor);

impl AttentionMap {
    pub(crate) fn from_tensor(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl AttentionVector {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Spatial attention: `σ(Conv7x7([avg_c(x), max_c(x)]))`.
///
/// The two pooled descriptors are stacked in (average, maximum) order.
pub struct SpatialAttention {
    weight: Var,
    bias: Var,
}

impl SpatialAttention {
    pub fn new(init: &mut ParamInit, name: &str) -> Result<Self> {
        let weight = init.he_normal(&format!("{name}.conv7.weight"), &[1, 2, 7, 7], 2 * 49)?;
        let bias = init.zeros(&format!("{name}.conv7.bias"), &[1])?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn map(&self, x: &Tensor) -> Result<AttentionMap> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let pooled = Tensor::cat(&[&avg, &max], 1)?;
        let logits = pooled
            .conv2d(self.weight.as_tensor(), 3, 1, 1, 1)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, 1, 1, 1))?)?;
        Ok(AttentionMap(sigmoid(&logits)?))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.map(x)?;
        Ok(x.broadcast_mul(map.tensor())?)
    }

    /// Cost of producing the map only.
    pub fn map_flops(&self, [b, c, h, w]: Shape4, tally: &mut FlopTally) {
        let plane = numel([b, 1, h, w]);
        // channel avg + max, 7x7 conv over two planes, sigmoid
        tally.elementwise(2 * numel([b, c, h, w]));
        tally.macs(plane * 2 * 49);
        tally.elementwise(plane);
    }

    pub fn flops(&self, shape: Shape4, tally: &mut FlopTally) -> Shape4 {
        self.map_flops(shape, tally);
        tally.elementwise(numel(shape));
        shape
    }
}

/// Channel attention: `σ(MLP(avgpool(x)) + MLP(maxpool(x)))` with a shared
/// bias-free MLP `c → hidden → c` and ReLU in between.
pub struct ChannelAttention {
    w1: Var,
    w2: Var,
    channels: usize,
    hidden: usize,
}

/// Hidden width of the shared MLP: `c / 16`, never below one unit.
pub fn cam_hidden_width(channels: usize) -> usize {
    (channels / 16).max(1)
}

impl ChannelAttention {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize) -> Result<Self> {
        Self::with_hidden(init, name, channels, cam_hidden_width(channels))
    }

    pub fn with_hidden(
        init: &mut ParamInit,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w1 = init.he_normal(&format!("{name}.mlp.w1"), &[hidden, channels], channels)?;
        let w2 = init.he_normal(&format!("{name}.mlp.w2"), &[channels, hidden], hidden)?;
        Ok(Self {
            w1,
            w2,
            channels,
            hidden,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn w1(&self) -> &Var {
        &self.w1
    }

    pub fn w2(&self) -> &Var {
        &self.w2
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        let h = v.matmul(&self.w1.as_tensor().t()?)?.relu()?;
        Ok(h.matmul(&self.w2.as_tensor().t()?)?)
    }

    pub fn vector(&self, x: &Tensor) -> Result<AttentionVector> {
        ensure_channels(x, self.channels, "channel attention")?;
        let [b, c, _, _] = dims4(x)?;
        let avg = self.mlp(&spatial_mean(x)?)?;
        let max = self.mlp(&spatial_max(x)?)?;
        let w = sigmoid(&(avg + max)?)?.reshape((b, c, 1, 1))?;
        Ok(AttentionVector(w))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let v = self.vector(x)?;
        Ok(x.broadcast_mul(v.tensor())?)
    }

    pub fn flops(&self, [b, c, h, w]: Shape4, tally: &mut FlopTally) -> Shape4 {
        let x = numel([b, c, h, w]);
        // two spatial pools, two MLP passes, sigmoid, broadcast product
        tally.elementwise(2 * x);
        tally.macs(2 * b as u64 * 2 * (self.channels * self.hidden) as u64);
        tally.elementwise(b as u64 * c as u64 + x);
        [b, c, h, w]
    }
}

/// Spatial attention map of `x`.
pub fn sam_map(x: &Tensor, sam: &SpatialAttention) -> Result<AttentionMap> {
    let [_, c, _, _] = dims4(x)?;
    if c == 0 {
        return Err(Error::shape("spatial attention needs at least one channel"));
    }
    ensure_finite(x, "spatial attention input")?;
    sam.map(x)
}

/// `sam_map(x) · x`, broadcast over channels.
pub fn sam_apply(x: &Tensor, sam: &SpatialAttention) -> Result<Tensor> {
    let map = sam_map(x, sam)?;
    Ok(x.broadcast_mul(map.tensor())?)
}

/// Channel attention vector of `x`.
pub fn cam_vector(x: &Tensor, cam: &ChannelAttention) -> Result<AttentionVector> {
    ensure_finite(x, "channel attention input")?;
    cam.vector(x)
}

/// `cam_vector(x) · x`, broadcast over space.
pub fn cam_apply(x: &Tensor, cam: &ChannelAttention) -> Result<Tensor> {
    let v = cam_vector(x, cam)?;
    Ok(x.broadcast_mul(v.tensor())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    fn zero_sam() -> SpatialAttention {
        let mut init = ParamInit::new(3, DType::F64, &Device::Cpu);
        let sam = SpatialAttention::new(&mut init, "sam").unwrap();
        sam.weight.set(&sam.weight.zeros_like().unwrap()).unwrap();
        sam
    }

    #[test]
    fn zero_sam_is_one_half() {
        let sam = zero_sam();
        let x = Tensor::randn(0f64, 1., (2, 5, 4, 3), &Device::Cpu).unwrap();
        let m = sam_map(&x, &sam).unwrap();
        assert_eq!(m.tensor().dims(), &[2, 1, 4, 3]);
        assert!(vals(m.tensor()).iter().all(|&v| v == 0.5));
        let y = sam_apply(&x, &sam).unwrap();
        let half: Vec<f64> = vals(&x).iter().map(|v| 0.5 * v).collect();
        assert_eq!(vals(&y), half);
    }

    #[test]
    fn sam_bias_one_on_zero_input() {
        let sam = zero_sam();
        sam.bias
            .set(&Tensor::new(&[1f64], &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let m = vals(sam_map(&x, &sam).unwrap().tensor());
        let expected = 1.0 / (1.0 + (-1f64).exp());
        assert!(m.iter().all(|v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.7311).abs() < 1e-4);
        assert!(vals(&sam_apply(&x, &sam).unwrap())
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_sam_apply() {
        let sam = zero_sam();
        let x = Tensor::new(&[4f64], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 1, 1))
            .unwrap();
        assert_eq!(vals(&sam_apply(&x, &sam).unwrap()), vec![2.0]);
    }

    #[test]
    fn zero_cam_is_one_half() {
        let mut init = ParamInit::new(3, DType::F64, &Device::Cpu);
        let cam = ChannelAttention::new(&mut init, "cam", 32).unwrap();
        assert_eq!(cam.hidden(), 2);
        cam.w1.set(&cam.w1.zeros_like().unwrap()).unwrap();
        let x = Tensor::randn(0f64, 1., (1, 32, 3, 3), &Device::Cpu).unwrap();
        let v = cam_vector(&x, &cam).unwrap();
        assert_eq!(v.tensor().dims(), &[1, 32, 1, 1]);
        assert!(vals(v.tensor()).iter().all(|&v| v == 0.5));
        let wrong = Tensor::zeros((1, 31, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cam_vector(&wrong, &cam), Err(Error::Shape(_))));
    }

    #[test]
    fn cam_identity_mlp_hand_values() {
        // ReLU(v) - ReLU(-v) = v, so w1 = [I; -I], w2 = [I, -I] gives MLP(v) = v
        let mut init = ParamInit::new(3, DType::F64, &Device::Cpu);
        let cam = ChannelAttention::with_hidden(&mut init, "cam", 2, 4).unwrap();
        let dev = Device::Cpu;
        let w1 = Tensor::new(&[[1f64, 0.], [0., 1.], [-1., 0.], [0., -1.]], &dev).unwrap();
        let w2 = Tensor::new(&[[1f64, 0., -1., 0.], [0., 1., 0., -1.]], &dev).unwrap();
        cam.w1.set(&w1).unwrap();
        cam.w2.set(&w2).unwrap();
        let x = Tensor::new(&[3f64, -1.0], &dev)
            .unwrap()
            .reshape((1, 2, 1, 1))
            .unwrap();
        let v = vals(cam_vector(&x, &cam).unwrap().tensor());
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((v[0] - s(6.0)).abs() < 1e-15 && (v[1] - s(-2.0)).abs() < 1e-15);
        let y = vals(&cam_apply(&x, &cam).unwrap());
        assert!((y[0] - 2.9926).abs() < 1e-4, "{}", y[0]);
        assert!((y[1] + 0.1192).abs() < 1e-4, "{}", y[1]);
    }

    #[test]
    fn spatially_constant_input_pools_to_itself() {
        let mut init = ParamInit::new(9, DType::F64, &Device::Cpu);
        let cam = ChannelAttention::with_hidden(&mut init, "cam", 3, 2).unwrap();
        let c = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let x = c
            .reshape((1, 3, 1, 1))
            .unwrap()
            .broadcast_as((1, 3, 4, 4))
            .unwrap()
            .contiguous()
            .unwrap();
        let v = vals(cam_vector(&x, &cam).unwrap().tensor());
        let mlp = cam.mlp(&c.reshape((1, 3)).unwrap()).unwrap();
        let expected = vals(&sigmoid(&(mlp * 2.0).unwrap()).unwrap());
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
