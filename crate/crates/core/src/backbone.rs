//! VGG-16 convolutional trunk (the thirteen 3×3 convolution blocks ahead of
//! `pool5`), shared by every encoder branch and mirrored by the decoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::complexity::FlopTally;
use crate::error::{Error, Result};
use crate::layers::{dims4, ensure_channels, ensure_finite, numel, BatchNorm, Conv2d, Shape4};
use crate::params::{ParamInit, ParamStore};

/// Channel widths and block counts of the five convolutional modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkPlan {
    pub module_channels: [usize; 5],
    pub blocks_per_module: [usize; 5],
}

impl TrunkPlan {
    pub const VGG16: TrunkPlan = TrunkPlan {
        module_channels: [64, 128, 256, 512, 512],
        blocks_per_module: [2, 2, 3, 3, 3],
    };

    /// VGG-16 with every width divided by `divisor` (at least one channel).
    pub fn scaled(divisor: usize) -> TrunkPlan {
        let mut plan = Self::VGG16;
        for c in &mut plan.module_channels {
            *c = (*c / divisor.max(1)).max(1);
        }
        plan
    }

    /// Number of 2×2 pooling stages between modules.
    pub const fn pool_stages(&self) -> usize {
        4
    }
}

/// Conv 3×3 (padding 1) → batch norm → ReLU.
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, &format!("{name}.conv"), in_channels, out_channels, 3)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn bn(&self) -> &BatchNorm {
        &self.bn
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(self.bn.forward_t(&y, train)?.relu()?)
    }

    pub fn flops(&self, shape: Shape4, tally: &mut FlopTally) -> Shape4 {
        let out = self.conv.flops(shape, tally);
        let out = self.bn.flops(out, tally);
        tally.elementwise(numel(out));
        out
    }
}

/// `ReLU(BN(Conv3x3(x)))` with input validation.
pub fn conv_block_forward(x: &Tensor, block: &ConvBlock, train: bool) -> Result<Tensor> {
    let [_, _, h, w] = dims4(x)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("feature map has an empty spatial extent"));
    }
    ensure_channels(x, block.in_channels(), "convolution block")?;
    ensure_finite(x, "convolution block input")?;
    block.forward_t(x, train)
}

/// 2×2 max pooling with stride 2; both spatial dims must be even.
pub fn max_pool(x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = dims4(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x.max_pool2d(2)?)
}

/// A run of convolution blocks at one resolution.
pub struct ConvModule {
    blocks: Vec<ConvBlock>,
}

impl ConvModule {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        blocks: usize,
    ) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|q| {
                let cin = if q == 0 { in_channels } else { out_channels };
                ConvBlock::new(init, &format!("{name}.block{}", q + 1), cin, out_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(ConvBlock::out_channels).unwrap_or(0)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward_t(&x, train)?;
        }
        Ok(x)
    }

    pub fn flops(&self, mut shape: Shape4, tally: &mut FlopTally) -> Shape4 {
        for block in &self.blocks {
            shape = block.flops(shape, tally);
        }
        shape
    }
}

/// Five convolutional modules; callers insert pooling between them.
pub struct Trunk {
    prefix: String,
    plan: TrunkPlan,
    modules: Vec<ConvModule>,
}

impl Trunk {
    pub fn new(
        init: &mut ParamInit,
        prefix: &str,
        in_channels: usize,
        plan: TrunkPlan,
    ) -> Result<Self> {
        let mut cin = in_channels;
        let mut modules = Vec::with_capacity(5);
        for p in 0..5 {
            let cout = plan.module_channels[p];
            let name = if prefix.is_empty() {
                format!("module{}", p + 1)
            } else {
                format!("{prefix}.module{}", p + 1)
            };
            modules.push(ConvModule::new(
                init,
                &name,
                cin,
                cout,
                plan.blocks_per_module[p],
            )?);
            cin = cout;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            plan,
            modules,
        })
    }

    pub fn plan(&self) -> TrunkPlan {
        self.plan
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Module `p` in `1..=5`.
    pub fn module(&self, p: usize) -> &ConvModule {
        &self.modules[p - 1]
    }

    pub fn modules(&self) -> &[ConvModule] {
        &self.modules
    }

    /// Level features `l_1 .. l_5` (before pooling), pooling between modules.
    pub fn forward_levels(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(5);
        let mut x = x.clone();
        for (p, module) in self.modules.iter().enumerate() {
            if p > 0 {
                x = max_pool(&x)?;
            }
            x = module.forward_t(&x, train)?;
            levels.push(x.clone());
        }
        Ok(levels)
    }

    /// Loads weights keyed `module{p}.block{q}.conv.weight` (and `.bias`,
    /// `.bn.scale`, `.bn.shift`, `.bn.mean`, `.bn.var`) into this trunk.
    /// Missing batch-norm entries keep their identity initialization.
    pub fn load_weights(&self, store: &ParamStore, source: &HashMap<String, Tensor>) -> Result<()> {
        for (p, module) in self.modules.iter().enumerate() {
            for (q, _) in module.blocks.iter().enumerate() {
                let key = format!("module{}.block{}", p + 1, q + 1);
                let full = if self.prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{}.{key}", self.prefix)
                };
                for (suffix, required) in [
                    ("conv.weight", true),
                    ("conv.bias", true),
                    ("bn.scale", false),
                    ("bn.shift", false),
                    ("bn.mean", false),
                    ("bn.var", false),
                ] {
                    let src_name = format!("{key}.{suffix}");
                    match source.get(&src_name) {
                        Some(t) => {
                            store
                                .set(&format!("{full}.{suffix}"), t)
                                .map_err(|e| match e {
                                    Error::Load { reason, .. } => Error::Load {
                                        name: src_name.clone(),
                                        reason,
                                    },
                                    other => other,
                                })?
                        }
                        None if required => {
                            return Err(Error::Load {
                                name: src_name,
                                reason: "missing from weight source".into(),
                            })
                        }
                        None => {}
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a trunk weight archive (safetensors) from a local path.
pub fn read_weight_source(path: &Path) -> Result<HashMap<String, Tensor>> {
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Load {
        name: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Builds a standalone RGB trunk and its parameter store. With a weight
/// source the tensors are loaded (and shape-checked); otherwise they keep
/// the seeded He initialization.
pub fn build_trunk(
    seed: u64,
    dtype: DType,
    device: &Device,
    plan: TrunkPlan,
    pretrained: Option<&HashMap<String, Tensor>>,
) -> Result<(Trunk, ParamStore)> {
    let mut init = ParamInit::new(seed, dtype, device);
    let trunk = Trunk::new(&mut init, "", 3, plan)?;
    let store = init.finish();
    if let Some(source) = pretrained {
        trunk.load_weights(&store, source)?;
    }
    Ok((trunk, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_1x1(init: &mut ParamInit) -> ConvBlock {
        ConvBlock::new(init, "b", 1, 1).unwrap()
    }

    fn set_identity(block: &ConvBlock) {
        let dev = Device::Cpu;
        let mut k = vec![0f64; 9];
        k[4] = 1.0;
        block
            .conv
            .weight()
            .set(&Tensor::from_vec(k, (1, 1, 3, 3), &dev).unwrap())
            .unwrap();
        // BN as identity up to epsilon: var = 1 - eps
        block
            .bn
            .running_var()
            .set(&Tensor::new(&[1.0 - crate::layers::BN_EPSILON], &dev).unwrap())
            .unwrap();
    }

    #[test]
    fn identity_block_on_single_pixel_is_relu() {
        let mut init = ParamInit::new(0, DType::F64, &Device::Cpu);
        let block = block_1x1(&mut init);
        set_identity(&block);
        for (x, expected) in [(-2.0f64, 0.0f64), (2.0, 2.0)] {
            let t = Tensor::new(&[x], &Device::Cpu)
                .unwrap()
                .reshape((1, 1, 1, 1))
                .unwrap();
            let y: f64 = conv_block_forward(&t, &block, false)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[0];
            assert!((y - expected).abs() < 1e-12, "{x} -> {y}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut init = ParamInit::new(0, DType::F32, &Device::Cpu);
        let block = ConvBlock::new(&mut init, "b", 3, 8).unwrap();
        block
            .conv
            .weight()
            .set(&block.conv.weight().zeros_like().unwrap())
            .unwrap();
        let x = Tensor::randn(0f32, 1., (2, 3, 5, 5), &Device::Cpu).unwrap();
        let y = conv_block_forward(&x, &block, false).unwrap();
        assert_eq!(y.dims(), &[2, 8, 5, 5]);
        assert_eq!(
            y.abs()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn channel_mismatch_and_nan_rejected() {
        let mut init = ParamInit::new(0, DType::F32, &Device::Cpu);
        let block = ConvBlock::new(&mut init, "b", 3, 4).unwrap();
        let x = Tensor::zeros((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            conv_block_forward(&x, &block, false),
            Err(Error::Shape(_))
        ));
        let x = Tensor::new(&[f32::NAN; 48], &Device::Cpu)
            .unwrap()
            .reshape((1, 3, 4, 4))
            .unwrap();
        assert!(matches!(
            conv_block_forward(&x, &block, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn max_pool_window_and_odd_dims() {
        let x = Tensor::new(&[1f32, 3.0, 2.0, 0.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        let y = max_pool(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(y, vec![3.0]);
        let c = Tensor::full(7f32, (1, 2, 4, 6), &Device::Cpu).unwrap();
        let y = max_pool(&c).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 3]);
        assert!(y
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|&v| v == 7.0));
        let odd = Tensor::zeros((1, 1, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(max_pool(&odd), Err(Error::Validation(_))));
    }

    #[test]
    fn trunk_is_seed_deterministic_and_shapes_follow_plan() {
        let build =
            || build_trunk(0, DType::F32, &Device::Cpu, TrunkPlan::scaled(16), None).unwrap();
        let (a, sa) = build();
        let (_, sb) = build();
        for ((na, va), (nb, vb)) in sa.all().zip(sb.all()) {
            assert_eq!(na, nb);
            let da = va.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let db = vb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(da, db, "{na}");
        }
        let x = Tensor::randn(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let levels = a.forward_levels(&x, false).unwrap();
        let dims: Vec<_> = levels.iter().map(|l| l.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 4, 32, 32],
                vec![1, 8, 16, 16],
                vec![1, 16, 8, 8],
                vec![1, 32, 4, 4],
                vec![1, 32, 2, 2]
            ]
        );
        let again = a.forward_levels(&x, false).unwrap();
        assert_eq!(
            levels[4].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again[4].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn weight_source_shape_mismatch_names_tensor() {
        let plan = TrunkPlan::scaled(16);
        let mut source = HashMap::new();
        for p in 0..5 {
            let cin = if p == 0 {
                3
            } else {
                plan.module_channels[p - 1]
            };
            let cout = plan.module_channels[p];
            for q in 0..plan.blocks_per_module[p] {
                let i = if q == 0 { cin } else { cout };
                let key = format!("module{}.block{}", p + 1, q + 1);
                source.insert(
                    format!("{key}.conv.weight"),
                    Tensor::ones((cout, i, 3, 3), DType::F32, &Device::Cpu).unwrap(),
                );
                source.insert(
                    format!("{key}.conv.bias"),
                    Tensor::ones(cout, DType::F32, &Device::Cpu).unwrap(),
                );
            }
        }
        let (_, store) = build_trunk(0, DType::F32, &Device::Cpu, plan, Some(&source)).unwrap();
        let w = store.get("module3.block2.conv.weight").unwrap().clone();
        assert_eq!(w.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0], 1.0);

        source.insert(
            "module2.block1.conv.weight".into(),
            Tensor::ones((8, 5, 3, 3), DType::F32, &Device::Cpu).unwrap(),
        );
        match build_trunk(0, DType::F32, &Device::Cpu, plan, Some(&source)) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "module2.block1.conv.weight"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("mismatch accepted"),
        }
    }

    #[test]
    fn full_trunk_conv_count_matches_closed_form() {
        // 13 conv layers of VGG16, weights 9·in·out plus out biases
        let layers = [
            (3, 64),
            (64, 64),
            (64, 128),
            (128, 128),
            (128, 256),
            (256, 256),
            (256, 256),
            (256, 512),
            (512, 512),
            (512, 512),
            (512, 512),
            (512, 512),
            (512, 512),
        ];
        let oracle: usize = layers.iter().map(|&(i, o)| 9 * i * o + o).sum();
        assert_eq!(oracle, 14_714_688);
        let (_, store) = build_trunk(0, DType::F32, &Device::Cpu, TrunkPlan::VGG16, None).unwrap();
        let conv: usize = store
            .trainable()
            .filter(|(n, _)| n.contains(".conv."))
            .map(|(_, v)| v.elem_count())
            .sum();
        assert_eq!(conv, oracle);
        // BN adds scale and shift per channel
        assert_eq!(
            store.num_trainable(),
            oracle + 2 * layers.iter().map(|l| l.1).sum::<usize>()
        );
    }
}
