//! Multi-branch spatial-spectral cross attention: fuses the T1, difference
//! and T2 features of one encoder level into a single `C`-channel map.
//!
//! ```text
//! F   = CAM([l1, ld, l2]) · [l1, ld, l2]                    (3C channels)
//! Wp  = SAM_pair(ReLU(Conv1x1(|l1 - l2|)))
//! Wd  = SAM_diff(ReLU(Conv1x1(ld)))
//! out = ReLU(BN(Conv1x1_{3C→C}(((Wp + Wd) / 2) · F)))
//! ```

use candle_core::Tensor;

use crate::attention::{AttentionMap, ChannelAttention, SpatialAttention};
use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::layers::{dims4, ensure_finite, ensure_same_shape, numel, BatchNorm, Conv2d, Shape4};
use crate::params::ParamInit;

pub struct Mbsscca {
    level: usize,
    channels: usize,
    cam: ChannelAttention,
    conv_pair: Conv2d,
    conv_diff: Conv2d,
    sam_pair: SpatialAttention,
    sam_diff: SpatialAttention,
    reduce: Conv2d,
    bn: BatchNorm,
}

impl Mbsscca {
    /// Block for encoder level `level` (1..=5) with `channels` per branch.
    /// Tensors are registered under `mbsscca{level}.*`.
    pub fn new(init: &mut ParamInit, level: usize, channels: usize) -> Result<Self> {
        let name = format!("mbsscca{level}");
        Ok(Self {
            level,
            channels,
            cam: ChannelAttention::new(init, &format!("{name}.cam"), 3 * channels)?,
            conv_pair: Conv2d::new(init, &format!("{name}.conv_pair"), channels, channels, 1)?,
            conv_diff: Conv2d::new(init, &format!("{name}.conv_diff"), channels, channels, 1)?,
            sam_pair: SpatialAttention::new(init, &format!("{name}.sam_pair"))?,
            sam_diff: SpatialAttention::new(init, &format!("{name}.sam_diff"))?,
            reduce: Conv2d::new(init, &format!("{name}.reduce"), 3 * channels, channels, 1)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), channels)?,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cam(&self) -> &ChannelAttention {
        &self.cam
    }

    pub fn conv_pair(&self) -> &Conv2d {
        &self.conv_pair
    }

    pub fn conv_diff(&self) -> &Conv2d {
        &self.conv_diff
    }

    pub fn sam_pair(&self) -> &SpatialAttention {
        &self.sam_pair
    }

    pub fn sam_diff(&self) -> &SpatialAttention {
        &self.sam_diff
    }

    pub fn reduce(&self) -> &Conv2d {
        &self.reduce
    }

    pub fn bn(&self) -> &BatchNorm {
        &self.bn
    }

    fn check(&self, l1: &Tensor, ld: &Tensor, l2: &Tensor) -> Result<()> {
        ensure_same_shape(l1, ld, "MBSSCA branches T1/TD")?;
        ensure_same_shape(l1, l2, "MBSSCA branches T1/T2")?;
        let [_, c, _, _] = dims4(l1)?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "MBSSCA level {} expects {} channels per branch, got {c}",
                self.level, self.channels
            )));
        }
        Ok(())
    }

    /// Channel-attended concatenation `[l1, ld, l2]`, `3C` channels.
    pub fn channel_fusion(&self, l1: &Tensor, ld: &Tensor, l2: &Tensor) -> Result<Tensor> {
        self.check(l1, ld, l2)?;
        let cat = Tensor::cat(&[l1, ld, l2], 1)?;
        self.cam.apply(&cat)
    }

    /// Spatial weights from the absolute T1/T2 feature difference.
    pub fn spatial_weight_pair(&self, l1: &Tensor, l2: &Tensor) -> Result<AttentionMap> {
        ensure_same_shape(l1, l2, "MBSSCA branches T1/T2")?;
        let diff = l1.sub(l2)?.abs()?;
        self.sam_pair.map(&self.conv_pair.forward(&diff)?.relu()?)
    }

    /// Spatial weights from the difference-branch feature.
    pub fn spatial_weight_diff(&self, ld: &Tensor) -> Result<AttentionMap> {
        self.sam_diff.map(&self.conv_diff.forward(ld)?.relu()?)
    }

    /// Mean of the pair and difference spatial weights.
    pub fn spatial_weight(&self, l1: &Tensor, ld: &Tensor, l2: &Tensor) -> Result<AttentionMap> {
        let wp = self.spatial_weight_pair(l1, l2)?;
        let wd = self.spatial_weight_diff(ld)?;
        Ok(AttentionMap::from_tensor(
            ((wp.into_tensor() + wd.into_tensor())? * 0.5)?,
        ))
    }

    pub fn forward_t(&self, l1: &Tensor, ld: &Tensor, l2: &Tensor, train: bool) -> Result<Tensor> {
        let fused = self.channel_fusion(l1, ld, l2)?;
        let w = self.spatial_weight(l1, ld, l2)?;
        let weighted = fused.broadcast_mul(w.tensor())?;
        let y = self.reduce.forward(&weighted)?;
        Ok(self.bn.forward_t(&y, train)?.relu()?)
    }

    pub fn flops(&self, [b, c, h, w]: Shape4, tally: &mut FlopTally) -> Shape4 {
        let wide = [b, 3 * c, h, w];
        self.cam.flops(wide, tally);
        // |l1 - l2|
        tally.elementwise(2 * numel([b, c, h, w]));
        for (conv, sam) in [
            (&self.conv_pair, &self.sam_pair),
            (&self.conv_diff, &self.sam_diff),
        ] {
            let s = conv.flops([b, c, h, w], tally);
            tally.elementwise(numel(s));
            sam.map_flops(s, tally);
        }
        // averaging the maps, weighting the fused features
        tally.elementwise(2 * numel([b, 1, h, w]) + numel(wide));
        let out = self.reduce.flops(wide, tally);
        let out = self.bn.flops(out, tally);
        tally.elementwise(numel(out));
        out
    }
}

/// Validating entry point for one MBSSCA fusion step.
pub fn mbsscca_forward(
    l1: &Tensor,
    ld: &Tensor,
    l2: &Tensor,
    block: &Mbsscca,
    train: bool,
) -> Result<Tensor> {
    for (t, what) in [(l1, "T1 feature"), (ld, "TD feature"), (l2, "T2 feature")] {
        ensure_finite(t, what)?;
    }
    block.forward_t(l1, ld, l2, train)
}
