//! The assembled change detector: encoder variant + decoder + parameters.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};

use crate::decoder::{DecodeTrace, Decoder, DecoderPlan, ProbabilityMap};
use crate::encoder::{check_pair, Encoder, EncoderOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamStore};

pub struct ChangeDetector {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    store: ParamStore,
}

impl ChangeDetector {
    /// Builds and seeds a model for `config`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed, dtype, device);
        let encoder = Encoder::new(&mut init, &config)?;
        let decoder = Decoder::new(
            &mut init,
            DecoderPlan::scaled(config.width_divisor),
            encoder.level_channels(),
            config.use_decoder_attention,
        )?;
        Ok(Self {
            config,
            encoder,
            decoder,
            store: init.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Loads ImageNet-style trunk weights into the shared T1/T2 trunk.
    pub fn load_pretrained_t1t2(&self, source: &HashMap<String, Tensor>) -> Result<()> {
        let trunk = self
            .encoder
            .shared_trunk()
            .ok_or_else(|| Error::config("this variant has no shared T1/T2 trunk"))?;
        trunk.load_weights(&self.store, source)
    }

    pub fn encode(&self, x1: &Tensor, x2: &Tensor, train: bool) -> Result<EncoderOutput> {
        check_pair(x1, x2)?;
        self.encoder.forward_t(x1, x2, train)
    }

    /// Pre-sigmoid change scores `(batch, 1, h, w)`.
    pub fn forward_logits(&self, x1: &Tensor, x2: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_traced(x1, x2, train)?.0)
    }

    pub fn forward_traced(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        train: bool,
    ) -> Result<(Tensor, DecodeTrace)> {
        let x1 = x1.to_dtype(self.dtype())?;
        let x2 = x2.to_dtype(self.dtype())?;
        let enc = self.encode(&x1, &x2, train)?;
        self.decoder.forward_t(&enc.bottom, &enc.skips, train)
    }

    /// Evaluation-mode change probabilities.
    pub fn predict_proba(&self, x1: &Tensor, x2: &Tensor) -> Result<ProbabilityMap> {
        let logits = self.forward_logits(x1, x2, false)?;
        ProbabilityMap::from_logits(&logits.detach())
    }
}

/// Builds one ablation variant (seeded, `f32`, CPU).
pub fn build_variant(config: ModelConfig, seed: u64) -> Result<ChangeDetector> {
    ChangeDetector::new(config, seed, DType::F32, &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variant_without_attention_produces_full_map() {
        let grid = ModelConfig::ablation_grid((64, 64));
        let cfg = grid[0].1.with_width_divisor(16);
        let model = build_variant(cfg, 0).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = model.predict_proba(&x, &y).unwrap();
        assert_eq!(p.tensor().dims(), &[1, 1, 64, 64]);
    }

    #[test]
    fn pretrained_load_rejected_for_single_branch() {
        let grid = ModelConfig::ablation_grid((32, 32));
        let model = build_variant(grid[0].1.with_width_divisor(16), 0).unwrap();
        assert!(matches!(
            model.load_pretrained_t1t2(&HashMap::new()),
            Err(Error::Config(_))
        ));
    }
}
