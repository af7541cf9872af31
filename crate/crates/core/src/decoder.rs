//! Symmetric decoder: five convolution modules, each followed by spatial
//! attention; four 2×2 transpose-convolution upsamplers, each followed by a
//! skip concatenation and channel attention; a 1×1 head with sigmoid.
//!
//! Stage `m` concatenates the skip from encoder level `p = 5 - m`.

use candle_core::Tensor;

use crate::attention::{ChannelAttention, SpatialAttention};
use crate::backbone::ConvModule;
use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::layers::{dims4, ensure_finite, numel, sigmoid, Conv2d, ConvTranspose2d, Shape4};
use crate::params::ParamInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderPlan {
    pub module_out_channels: [usize; 5],
    pub blocks_per_module: [usize; 5],
}

impl DecoderPlan {
    pub const FULL: DecoderPlan = DecoderPlan {
        module_out_channels: [512, 512, 256, 128, 64],
        blocks_per_module: [3, 3, 3, 2, 2],
    };

    pub fn scaled(divisor: usize) -> DecoderPlan {
        let mut plan = Self::FULL;
        for c in &mut plan.module_out_channels {
            *c = (*c / divisor.max(1)).max(1);
        }
        plan
    }
}

/// Sigmoid change probabilities `(batch, 1, h, w)`, values in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct ProbabilityMap(Tensor);

impl ProbabilityMap {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self(sigmoid(logits)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Attention applications counted during one decoder pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    pub sam_applications: usize,
    pub cam_applications: usize,
}

pub struct Decoder {
    plan: DecoderPlan,
    skip_channels: [usize; 4],
    modules: Vec<ConvModule>,
    sams: Option<Vec<SpatialAttention>>,
    ups: Vec<ConvTranspose2d>,
    cams: Option<Vec<ChannelAttention>>,
    head: Conv2d,
}

impl Decoder {
    /// `level_channels` are the encoder widths of levels 1..=5.
    pub fn new(
        init: &mut ParamInit,
        plan: DecoderPlan,
        level_channels: [usize; 5],
        use_attention: bool,
    ) -> Result<Self> {
        let skip_channels = [
            level_channels[0],
            level_channels[1],
            level_channels[2],
            level_channels[3],
        ];
        let mut modules = Vec::with_capacity(5);
        let mut ups = Vec::with_capacity(4);
        let mut sams = Vec::with_capacity(5);
        let mut cams = Vec::with_capacity(4);
        let mut cin = level_channels[4];
        for m in 1..=5 {
            let cout = plan.module_out_channels[m - 1];
            modules.push(ConvModule::new(
                init,
                &format!("decoder.module{m}"),
                cin,
                cout,
                plan.blocks_per_module[m - 1],
            )?);
            if use_attention {
                sams.push(SpatialAttention::new(init, &format!("decoder.sam{m}"))?);
            }
            if m <= 4 {
                ups.push(ConvTranspose2d::new(
                    init,
                    &format!("decoder.up{m}"),
                    cout,
                    cout,
                )?);
                let concat = cout + skip_channels[4 - m];
                if use_attention {
                    cams.push(ChannelAttention::new(
                        init,
                        &format!("decoder.cam{m}"),
                        concat,
                    )?);
                }
                cin = concat;
            } else {
                cin = cout;
            }
        }
        let head = Conv2d::new(init, "decoder.head", cin, 1, 1)?;
        Ok(Self {
            plan,
            skip_channels,
            modules,
            sams: use_attention.then_some(sams),
            ups,
            cams: use_attention.then_some(cams),
            head,
        })
    }

    pub fn plan(&self) -> DecoderPlan {
        self.plan
    }

    pub fn uses_attention(&self) -> bool {
        self.sams.is_some()
    }

    /// Upsampler of stage `m` in `1..=4`.
    pub fn upsampler(&self, m: usize) -> &ConvTranspose2d {
        &self.ups[m - 1]
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Returns head logits; apply a sigmoid for probabilities.
    pub fn forward_t(
        &self,
        bottom: &Tensor,
        skips: &[Tensor],
        train: bool,
    ) -> Result<(Tensor, DecodeTrace)> {
        if skips.len() != 4 {
            return Err(Error::invalid(format!(
                "decoder needs 4 skip features, got {}",
                skips.len()
            )));
        }
        let mut trace = DecodeTrace::default();
        let mut x = bottom.clone();
        for m in 1..=5 {
            x = self.modules[m - 1].forward_t(&x, train)?;
            if let Some(sams) = &self.sams {
                x = sams[m - 1].apply(&x)?;
                trace.sam_applications += 1;
            }
            if m <= 4 {
                x = self.ups[m - 1].forward(&x)?;
                x = concat_skip(&x, &skips[4 - m])?;
                if let Some(cams) = &self.cams {
                    x = cams[m - 1].apply(&x)?;
                    trace.cam_applications += 1;
                }
            }
        }
        Ok((self.head.forward(&x)?, trace))
    }

    pub fn flops(&self, bottom: Shape4, tally: &mut FlopTally) -> Shape4 {
        let mut shape = bottom;
        for m in 1..=5 {
            shape = self.modules[m - 1].flops(shape, tally);
            if let Some(sams) = &self.sams {
                shape = sams[m - 1].flops(shape, tally);
            }
            if m <= 4 {
                shape = self.ups[m - 1].flops(shape, tally);
                shape[1] += self.skip_channels[4 - m];
                if let Some(cams) = &self.cams {
                    shape = cams[m - 1].flops(shape, tally);
                }
            }
        }
        let out = self.head.flops(shape, tally);
        tally.elementwise(numel(out));
        out
    }
}

fn concat_skip(x: &Tensor, skip: &Tensor) -> Result<Tensor> {
    let [bx, _, hx, wx] = dims4(x)?;
    let [bs, _, hs, ws] = dims4(skip)?;
    if (bx, hx, wx) != (bs, hs, ws) {
        return Err(Error::invalid(format!(
            "cannot concatenate decoder feature {:?} with skip {:?}",
            x.dims(),
            skip.dims()
        )));
    }
    Ok(Tensor::cat(&[x, skip], 1)?)
}

/// Doubles the spatial size with the stage-`m` transpose convolution.
pub fn transpose_upsample(x: &Tensor, stage: usize, decoder: &Decoder) -> Result<Tensor> {
    if !(1..=4).contains(&stage) {
        return Err(Error::invalid(format!(
            "upsampling stage {stage} outside 1..=4"
        )));
    }
    decoder.upsampler(stage).forward(x)
}

/// Channel concatenation `(x, skip)` for decoder stage `m` (skip level `5 - m`).
pub fn skip_concat(x: &Tensor, skip: &Tensor, stage: usize) -> Result<Tensor> {
    if !(1..=4).contains(&stage) {
        return Err(Error::invalid(format!(
            "concatenation stage {stage} outside 1..=4"
        )));
    }
    concat_skip(x, skip)
}

/// Decodes encoder features into a change probability map.
pub fn decode(
    bottom: &Tensor,
    skips: &[Tensor],
    decoder: &Decoder,
    train: bool,
) -> Result<ProbabilityMap> {
    ensure_finite(bottom, "decoder input")?;
    let (logits, _) = decoder.forward_t(bottom, skips, train)?;
    ProbabilityMap::from_logits(&logits)
}
