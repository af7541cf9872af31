//! Encoders: the three-branch (T1 / difference / T2) encoder with per-level
//! fusion, plus the single- and two-branch ablation encoders.

use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{max_pool, Trunk, TrunkPlan};
use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::layers::{dims4, ensure_finite, ensure_same_shape, numel, BatchNorm, Conv2d, Shape4};
use crate::mbsscca::Mbsscca;
use crate::params::ParamInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    /// One trunk on the differential image.
    Single,
    /// Weight-shared T1/T2 trunks fused by feature difference.
    Siamese,
    /// Weight-shared T1/T2 trunks plus an independent difference trunk.
    Triplet,
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Branches::Single),
            "siamese" => Ok(Branches::Siamese),
            "triplet" => Ok(Branches::Triplet),
            other => Err(Error::config(format!("unknown branch layout `{other}`"))),
        }
    }
}

impl std::fmt::Display for Branches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branches::Single => "single",
            Branches::Siamese => "siamese",
            Branches::Triplet => "triplet",
        })
    }
}

/// Architecture switches covering the full ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branches: Branches,
    pub use_mbsscca: bool,
    pub use_decoder_attention: bool,
    /// Training/evaluation tile size `(height, width)`, both divisible by 16.
    pub input_size: (usize, usize),
    /// Initialize the shared T1/T2 trunk from a pretrained weight file.
    pub pretrained_t1t2: bool,
    /// Divides every channel width; 1 is the full-size network.
    pub width_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::t_unet((256, 256))
    }
}

impl ModelConfig {
    /// The complete network: three branches, MBSSCA fusion, decoder attention.
    pub fn t_unet(input_size: (usize, usize)) -> Self {
        Self {
            branches: Branches::Triplet,
            use_mbsscca: true,
            use_decoder_attention: true,
            input_size,
            pretrained_t1t2: false,
            width_divisor: 1,
        }
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }

    /// The eight ablation rows, in table order, with their row labels.
    pub fn ablation_grid(input_size: (usize, usize)) -> Vec<(&'static str, ModelConfig)> {
        let row = |branches, use_mbsscca, use_decoder_attention| ModelConfig {
            branches,
            use_mbsscca,
            use_decoder_attention,
            ..Self::t_unet(input_size)
        };
        vec![
            ("Single/1", row(Branches::Single, false, false)),
            ("Single/2", row(Branches::Single, false, true)),
            ("Siamese/3", row(Branches::Siamese, false, false)),
            ("Siamese/4", row(Branches::Siamese, false, true)),
            ("Ours/5", row(Branches::Triplet, false, false)),
            ("Ours/6", row(Branches::Triplet, true, false)),
            ("Ours/7", row(Branches::Triplet, false, true)),
            ("Ours/T-UNet", row(Branches::Triplet, true, true)),
        ]
    }

    pub fn trunk_plan(&self) -> TrunkPlan {
        TrunkPlan::scaled(self.width_divisor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_mbsscca && self.branches != Branches::Triplet {
            return Err(Error::config("MBSSCA fusion requires the triplet encoder"));
        }
        if self.pretrained_t1t2 && self.branches == Branches::Single {
            return Err(Error::config(
                "the single-branch variant has no T1/T2 trunk to pretrain",
            ));
        }
        if self.width_divisor == 0 {
            return Err(Error::config("width divisor must be at least 1"));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} is not a positive multiple of 16"
            )));
        }
        Ok(())
    }
}

/// Four skip features (levels 1..=4) and the bottom feature (level 5).
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub bottom: Tensor,
}

/// Intermediate tensors recorded by [`Encoder::forward_traced`].
#[derive(Debug, Default, Clone)]
pub struct EncoderTrace {
    /// Input fed to the difference-branch module at each level.
    pub td_inputs: Vec<Tensor>,
    /// Fused output at each level.
    pub fused: Vec<Tensor>,
}

/// Elementwise `|i1 - i2|`.
pub fn differential_image(i1: &Tensor, i2: &Tensor) -> Result<Tensor> {
    ensure_same_shape(i1, i2, "differential image")?;
    ensure_finite(i1, "first image")?;
    ensure_finite(i2, "second image")?;
    Ok(i1.sub(i2)?.abs()?)
}

/// Attention-free fusion: `ReLU(BN(Conv1x1_{3C→C}([l1, ld, l2])))`.
pub struct PlainFusion {
    reduce: Conv2d,
    bn: BatchNorm,
}

impl PlainFusion {
    fn new(init: &mut ParamInit, level: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(
                init,
                &format!("fuse{level}.reduce"),
                3 * channels,
                channels,
                1,
            )?,
            bn: BatchNorm::new(init, &format!("fuse{level}.bn"), channels)?,
        })
    }

    fn forward_t(&self, l1: &Tensor, ld: &Tensor, l2: &Tensor, train: bool) -> Result<Tensor> {
        let cat = Tensor::cat(&[l1, ld, l2], 1)?;
        Ok(self
            .bn
            .forward_t(&self.reduce.forward(&cat)?, train)?
            .relu()?)
    }

    fn flops(&self, [b, c, h, w]: Shape4, tally: &mut FlopTally) -> Shape4 {
        let out = self.reduce.flops([b, 3 * c, h, w], tally);
        let out = self.bn.flops(out, tally);
        tally.elementwise(numel(out));
        out
    }
}

pub enum Fusion {
    Mbsscca(Vec<Mbsscca>),
    Plain(Vec<PlainFusion>),
}

impl Fusion {
    fn forward_t(
        &self,
        p: usize,
        l1: &Tensor,
        ld: &Tensor,
        l2: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        match self {
            Fusion::Mbsscca(blocks) => blocks[p - 1].forward_t(l1, ld, l2, train),
            Fusion::Plain(blocks) => blocks[p - 1].forward_t(l1, ld, l2, train),
        }
    }
}

pub enum Encoder {
    Single {
        trunk: Trunk,
    },
    Siamese {
        t1: Arc<Trunk>,
        t2: Arc<Trunk>,
    },
    Triplet {
        t1: Arc<Trunk>,
        t2: Arc<Trunk>,
        td: Trunk,
        fusion: Fusion,
    },
}

impl Encoder {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.trunk_plan();
        Ok(match cfg.branches {
            Branches::Single => Encoder::Single {
                trunk: Trunk::new(init, "td", 3, plan)?,
            },
            Branches::Siamese => {
                let shared = Arc::new(Trunk::new(init, "t1t2", 3, plan)?);
                Encoder::Siamese {
                    t1: Arc::clone(&shared),
                    t2: shared,
                }
            }
            Branches::Triplet => {
                let shared = Arc::new(Trunk::new(init, "t1t2", 3, plan)?);
                let td = Trunk::new(init, "td", 3, plan)?;
                let fusion = if cfg.use_mbsscca {
                    Fusion::Mbsscca(
                        (1..=5)
                            .map(|p| Mbsscca::new(init, p, plan.module_channels[p - 1]))
                            .collect::<Result<_>>()?,
                    )
                } else {
                    Fusion::Plain(
                        (1..=5)
                            .map(|p| PlainFusion::new(init, p, plan.module_channels[p - 1]))
                            .collect::<Result<_>>()?,
                    )
                };
                Encoder::Triplet {
                    t1: Arc::clone(&shared),
                    t2: shared,
                    td,
                    fusion,
                }
            }
        })
    }

    /// Channel widths of the five output levels.
    pub fn level_channels(&self) -> [usize; 5] {
        self.any_trunk().plan().module_channels
    }

    fn any_trunk(&self) -> &Trunk {
        match self {
            Encoder::Single { trunk } => trunk,
            Encoder::Siamese { t1, .. } | Encoder::Triplet { t1, .. } => t1,
        }
    }

    /// The shared T1/T2 trunk, when the layout has one.
    pub fn shared_trunk(&self) -> Option<&Arc<Trunk>> {
        match self {
            Encoder::Single { .. } => None,
            Encoder::Siamese { t1, .. } | Encoder::Triplet { t1, .. } => Some(t1),
        }
    }

    /// True when the T1 and T2 branches are one and the same trunk object.
    pub fn branches_share_weights(&self) -> bool {
        match self {
            Encoder::Single { .. } => true,
            Encoder::Siamese { t1, t2 } | Encoder::Triplet { t1, t2, .. } => Arc::ptr_eq(t1, t2),
        }
    }

    pub fn mbsscca_blocks(&self) -> &[Mbsscca] {
        match self {
            Encoder::Triplet {
                fusion: Fusion::Mbsscca(blocks),
                ..
            } => blocks,
            _ => &[],
        }
    }

    pub fn forward_t(&self, x1: &Tensor, x2: &Tensor, train: bool) -> Result<EncoderOutput> {
        self.run(x1, x2, train, None)
    }

    pub fn forward_traced(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        train: bool,
    ) -> Result<(EncoderOutput, EncoderTrace)> {
        let mut trace = EncoderTrace::default();
        let out = self.run(x1, x2, train, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        train: bool,
        mut trace: Option<&mut EncoderTrace>,
    ) -> Result<EncoderOutput> {
        let levels = match self {
            Encoder::Single { trunk } => {
                let d = x1.sub(x2)?.abs()?;
                trunk.forward_levels(&d, train)?
            }
            Encoder::Siamese { t1, t2 } => {
                let a = t1.forward_levels(x1, train)?;
                let b = t2.forward_levels(x2, train)?;
                a.iter()
                    .zip(&b)
                    .map(|(a, b)| Ok(a.sub(b)?.abs()?))
                    .collect::<Result<Vec<_>>>()?
            }
            Encoder::Triplet { t1, t2, td, fusion } => {
                let mut a = x1.clone();
                let mut b = x2.clone();
                let mut d = x1.sub(x2)?.abs()?;
                let mut fused_levels = Vec::with_capacity(5);
                for p in 1..=5 {
                    if p > 1 {
                        a = max_pool(&a)?;
                        b = max_pool(&b)?;
                        // the difference branch continues from the fused feature
                        d = max_pool(fused_levels.last().expect("previous level"))?;
                    }
                    if let Some(t) = trace.as_deref_mut() {
                        t.td_inputs.push(d.clone());
                    }
                    a = t1.module(p).forward_t(&a, train)?;
                    b = t2.module(p).forward_t(&b, train)?;
                    let ld = td.module(p).forward_t(&d, train)?;
                    let fused = fusion.forward_t(p, &a, &ld, &b, train)?;
                    fused_levels.push(fused);
                }
                fused_levels
            }
        };
        if let Some(t) = trace {
            t.fused = levels.clone();
        }
        let mut levels = levels;
        let bottom = levels.pop().expect("five levels");
        Ok(EncoderOutput {
            skips: levels,
            bottom,
        })
    }

    pub fn flops(&self, [b, _, h, w]: Shape4, tally: &mut FlopTally) -> Vec<Shape4> {
        let trunk = self.any_trunk();
        let channels = trunk.plan().module_channels;
        let passes = match self {
            Encoder::Single { .. } => 1,
            Encoder::Siamese { .. } => 2,
            Encoder::Triplet { .. } => 3,
        };
        // |x1 - x2| on the raw input
        if !matches!(self, Encoder::Siamese { .. }) {
            tally.elementwise(2 * numel([b, 3, h, w]));
        }
        let mut shapes = Vec::with_capacity(5);
        let mut shape = [b, 3, h, w];
        for p in 1..=5 {
            if p > 1 {
                tally.elementwise(passes * numel(shape));
                shape = [b, shape[1], shape[2] / 2, shape[3] / 2];
            }
            let mut out = shape;
            for _ in 0..passes {
                out = trunk.module(p).flops(shape, tally);
            }
            match self {
                Encoder::Siamese { .. } => tally.elementwise(2 * numel(out)),
                Encoder::Triplet { fusion, .. } => {
                    out = match fusion {
                        Fusion::Mbsscca(blocks) => blocks[p - 1].flops(out, tally),
                        Fusion::Plain(blocks) => blocks[p - 1].flops(out, tally),
                    };
                }
                Encoder::Single { .. } => {}
            }
            debug_assert_eq!(out[1], channels[p - 1]);
            shapes.push(out);
            shape = out;
        }
        shapes
    }
}

/// Runs the three-branch encoder on a normalized image pair.
pub fn triplet_encode(
    x1: &Tensor,
    x2: &Tensor,
    encoder: &Encoder,
    train: bool,
) -> Result<EncoderOutput> {
    check_pair(x1, x2)?;
    encoder.forward_t(x1, x2, train)
}

pub(crate) fn check_pair(x1: &Tensor, x2: &Tensor) -> Result<()> {
    ensure_same_shape(x1, x2, "image pair")?;
    let [_, c, h, w] = dims4(x1)?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3-channel images, got {c}")));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(format!(
            "image size {h}x{w} is not a multiple of 16; tile the images first"
        )));
    }
    ensure_finite(x1, "first image")?;
    ensure_finite(x2, "second image")?;
    Ok(())
}
