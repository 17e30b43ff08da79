//! Multitask EM-attention network: conv encoder → residual EMAU block →
//! (pixel segmentation head, image classification head).
//!
//! Both heads read the same post-EMAU feature map, so the encoder and the
//! EMAU convs are shared between the two tasks.

use crate::emau::{self, Bases, EmauConfig, EmauVars};
use crate::error::{Error, Result};
use crate::tensor::{Fill, Tape, Tensor, UpsampleMode, Var};

use super::layers::{Binding, Conv, ConvBnRelu, Linear, ParamStore};
use super::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct SolarNetConfig {
    pub in_channels: usize,
    /// Output width of each encoder stage; every stage halves the
    /// resolution, so the total stride is 2^len.
    pub encoder_widths: Vec<usize>,
    pub emau: EmauConfig,
    pub seed: u64,
}

impl SolarNetConfig {
    /// Laptop-scale default: stride 4, 32 feature channels, K = 64, T = 3.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![16, 32],
            emau: EmauConfig {
                k: 64,
                t: 3,
                ..EmauConfig::default()
            },
            seed: 0,
        }
    }

    /// Full-scale hyperparameters (K = 1024, T = 10) on a stride-8 conv encoder.
    /// A ResNet-101 backbone would replace `encoder` here, feeding its
    /// stride-8 feature map into the EM block unchanged.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![64, 256, 512],
            emau: EmauConfig {
                k: 1024,
                t: 10,
                ..EmauConfig::default()
            },
            seed: 0,
        }
    }

    /// Minimal network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![4, 4],
            emau: EmauConfig {
                k: 3,
                t: 3,
                ..EmauConfig::default()
            },
            seed: 0,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(
                "encoder_widths must be non-empty and positive".into(),
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if !matches!(self.stride(), 4 | 8 | 16) {
            log::warn!("encoder stride {} outside {{4, 8, 16}}", self.stride());
        }
        self.emau.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EmauBlock {
    pub conv_in: Conv,
    pub conv_out: Conv,
}

#[derive(Debug, Clone)]
pub struct SolarNet {
    pub config: SolarNetConfig,
    pub store: ParamStore,
    /// Two conv-BN-ReLU layers per stage; the first has stride 2.
    pub encoder: Vec<ConvBnRelu>,
    pub emau: EmauBlock,
    pub seg_head: Conv,
    pub cls_head: Linear,
    pub bases: Bases,
}

pub struct SolarNetOutput {
    /// [B×2×H×W]
    pub seg_logits: Var,
    /// [B×2]
    pub cls_logits: Var,
    /// Batch mean of the final EM bases.
    pub mu_t: Bases,
}

impl SolarNet {
    pub fn new(config: SolarNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            let s = seed.wrapping_add(100 * i as u64);
            encoder.push(ConvBnRelu::new(
                &mut store,
                &format!("encoder.{i}.down"),
                cin,
                w,
                2,
                s,
            )?);
            encoder.push(ConvBnRelu::new(
                &mut store,
                &format!("encoder.{i}.refine"),
                w,
                w,
                1,
                s + 1,
            )?);
            cin = w;
        }
        let c = cin;
        let emau = EmauBlock {
            conv_in: Conv::new(&mut store, "emau.conv_in", c, c, 1, 1, true, seed + 1000)?,
            conv_out: Conv::new(&mut store, "emau.conv_out", c, c, 1, 1, false, seed + 1001)?,
        };
        let head_w = Tensor::create(&[2, c, 1, 1], Fill::Normal { std: 0.01 }, seed + 1002)?;
        let seg_head = Conv::with_weight(&mut store, "seg_head", head_w, true, 1)?;
        let cls_head = Linear::new(&mut store, "cls_head", c, 2, 0.01, seed + 1003)?;
        let bases = emau::kaiming_init_bases(config.emau.k, c, config.emau.seed)?;
        Ok(Self {
            config,
            store,
            encoder,
            emau,
            seg_head,
            cls_head,
            bases,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.bases.c()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        images: Var,
        mode: Mode,
    ) -> Result<SolarNetOutput> {
        let shape = tape.value(images).shape().to_vec();
        let [_, _, h, w] = *shape.as_slice() else {
            return Err(Error::shape(
                "solarnet_forward",
                format!("expected B×C×H×W, got {shape:?}"),
            ));
        };
        let s = self.config.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "solarnet_forward",
                format!("{h}×{w} not divisible by encoder stride {s}"),
            ));
        }
        let mut x = images;
        for layer in &mut self.encoder {
            x = layer.forward(tape, binding, x, mode)?;
        }
        let vars = EmauVars {
            conv_in_weight: binding.var(self.emau.conv_in.weight),
            conv_in_bias: binding.var(self.emau.conv_in.bias.expect("conv_in has a bias")),
            conv_out_weight: binding.var(self.emau.conv_out.weight),
        };
        let em = emau::emau_forward_var(tape, x, &self.bases, &self.config.emau, vars)?;
        let features = em.y;

        let mut seg = self.seg_head.forward(tape, binding, features)?;
        for _ in 0..self.config.encoder_widths.len() {
            seg = tape.upsample2x(seg, UpsampleMode::Bilinear)?;
        }
        let pooled = tape.global_avg_pool(features)?;
        let cls = self.cls_head.forward(tape, binding, pooled)?;
        Ok(SolarNetOutput {
            seg_logits: seg,
            cls_logits: cls,
            mu_t: em.mu_t,
        })
    }

    /// Moving-average update of the bases from a training batch.
    pub fn update_bases(&mut self, mu_t: &Bases) -> Result<()> {
        self.bases = emau::update_bases_moving_average(
            &self.bases,
            mu_t,
            self.config.emau.alpha,
            self.config.emau.normalize_bases,
        )?;
        Ok(())
    }
}

/// Single-image forward on [3×H×W]; returns (seg [2×H×W], cls [2], μ_T).
/// In train mode batch-norm statistics are updated but the bases are not.
pub fn solarnet_forward(
    model: &mut SolarNet,
    image: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor, Bases)> {
    let shape = image.shape().to_vec();
    let [c, h, w] = *shape.as_slice() else {
        return Err(Error::shape("solarnet_forward", "expected C×H×W"));
    };
    let mut tape = Tape::new();
    let binding = model.store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone().reshape(&[1, c, h, w])?);
    let out = model.forward(&mut tape, &binding, x, mode)?;
    let seg = tape.value(out.seg_logits).clone().reshape(&[2, h, w])?;
    let cls = tape.value(out.cls_logits).clone().reshape(&[2])?;
    Ok((seg, cls, out.mu_t))
}
