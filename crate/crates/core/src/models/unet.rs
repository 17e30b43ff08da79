//! UNet baseline: four contracting blocks (two 3×3 conv-BN-ReLU, then 2×2
//! max pool), four expansive blocks (bilinear upsample, skip concatenation,
//! two 3×3 conv-BN-ReLU) and a final 1×1 conv to two logits. 17 convs total.

use crate::error::{Error, Result};
use crate::tensor::{Fill, Tape, Tensor, UpsampleMode, Var};

use super::layers::{Binding, Conv, ConvBnRelu, ParamStore};
use super::Mode;

pub const UNET_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Width of the first block; block `l` has `base_width · 2^l` channels.
    /// 64 reproduces the 64-128-256-512 layout.
    pub base_width: usize,
    pub seed: u64,
}

impl UNetConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            base_width: 64,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            base_width: 4,
            seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            base_width: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("unet widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub store: ParamStore,
    pub down: Vec<UpBlock>,
    pub up: Vec<UpBlock>,
    pub head: Conv,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let width = |l: usize| config.base_width << l;
        let seed = config.seed;
        let mut down = Vec::with_capacity(UNET_DEPTH);
        let mut cin = config.in_channels;
        for l in 0..UNET_DEPTH {
            let s = seed.wrapping_add(10 * l as u64);
            down.push(UpBlock {
                first: ConvBnRelu::new(&mut store, &format!("down.{l}.0"), cin, width(l), 1, s)?,
                second: ConvBnRelu::new(
                    &mut store,
                    &format!("down.{l}.1"),
                    width(l),
                    width(l),
                    1,
                    s + 1,
                )?,
            });
            cin = width(l);
        }
        // expansive path mirrors the contracting one, deepest level first
        let mut up = Vec::with_capacity(UNET_DEPTH);
        for (i, l) in (0..UNET_DEPTH).rev().enumerate() {
            let s = seed.wrapping_add(100 + 10 * i as u64);
            let concat = cin + width(l);
            up.push(UpBlock {
                first: ConvBnRelu::new(&mut store, &format!("up.{i}.0"), concat, width(l), 1, s)?,
                second: ConvBnRelu::new(
                    &mut store,
                    &format!("up.{i}.1"),
                    width(l),
                    width(l),
                    1,
                    s + 1,
                )?,
            });
            cin = width(l);
        }
        // small head init so an untrained model starts near uniform logits
        let head_w = Tensor::create(&[2, cin, 1, 1], Fill::Normal { std: 0.01 }, seed + 1000)?;
        let head = Conv::with_weight(&mut store, "head", head_w, true, 1)?;
        Ok(Self {
            config,
            store,
            down,
            up,
            head,
        })
    }

    /// Every 3×3 conv plus the final 1×1.
    pub fn conv_layer_count(&self) -> usize {
        2 * self.down.len() + 2 * self.up.len() + 1
    }

    pub fn input_multiple() -> usize {
        1 << UNET_DEPTH
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        let [_, _, h, w] = *shape.as_slice() else {
            return Err(Error::shape(
                "unet_forward",
                format!("expected B×C×H×W, got {shape:?}"),
            ));
        };
        let m = Self::input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "unet_forward",
                format!("{h}×{w} not divisible by {m}"),
            ));
        }
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        let mut x = images;
        for block in &mut self.down {
            x = block.first.forward(tape, binding, x, mode)?;
            x = block.second.forward(tape, binding, x, mode)?;
            skips.push(x);
            x = tape.maxpool2x(x)?;
        }
        for block in &mut self.up {
            let skip = skips.pop().expect("one skip per level");
            let up = tape.upsample2x(x, UpsampleMode::Bilinear)?;
            let cat = tape.concat_channels(up, skip)?;
            x = block.first.forward(tape, binding, cat, mode)?;
            x = block.second.forward(tape, binding, x, mode)?;
        }
        self.head.forward(tape, binding, x)
    }
}
