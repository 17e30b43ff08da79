//! Fixed-seed inputs shared by the criterion benches in `benches/`.

use solarnet_core::emau::{kaiming_init_bases, Bases, EmauConfig, EmauParams};
use solarnet_core::{Fill, Tensor};

/// Feature channels used by the EMAU benches.
pub const EMAU_CHANNELS: usize = 32;

/// One EMAU call: a [C×64×(n/64)] feature map plus bases and 1×1 conv weights.
pub struct EmauInput {
    pub x: Tensor,
    pub bases: Bases,
    pub cfg: EmauConfig,
    pub params: EmauParams,
}

/// `n` must be a multiple of 64.
pub fn emau_input(n: usize, k: usize, t: usize) -> EmauInput {
    assert!(n.is_multiple_of(64), "n = {n} is not a multiple of 64");
    let c = EMAU_CHANNELS;
    let cfg = EmauConfig {
        k,
        t,
        ..EmauConfig::default()
    };
    EmauInput {
        x: uniform(&[c, 64, n / 64], 1),
        bases: kaiming_init_bases(k, c, 2).expect("bases"),
        cfg,
        params: EmauParams::init(c, 3).expect("params"),
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::create(shape, Fill::Uniform { lo: -1.0, hi: 1.0 }, seed).expect("tensor")
}

/// Input and 3×3 weights for a batched convolution.
pub fn conv_input(batch: usize, cin: usize, cout: usize, side: usize) -> (Tensor, Tensor) {
    (
        uniform(&[batch, cin, side, side], 4),
        Tensor::create(&[cout, cin, 3, 3], Fill::Kaiming { fan_in: cin * 9 }, 5).expect("weights"),
    )
}
