//! Network definitions: the multitask EM-attention model and the UNet
//! baseline, plus the binary checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod solarnet;
pub mod unet;

use std::collections::BTreeMap;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use layers::{BatchNorm, Binding, Conv, ConvBnRelu, Linear, Param, ParamId, ParamStore};
pub use solarnet::{solarnet_forward, SolarNet, SolarNetConfig, SolarNetOutput};
pub use unet::{UNet, UNetConfig, UNET_DEPTH};

use crate::emau::{Bases, EmauConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    SolarNet(SolarNetConfig),
    UNet(UNetConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::SolarNet(c) => c.validate(),
            ModelConfig::UNet(c) => c.validate(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::SolarNet(_) => "solarnet",
            ModelConfig::UNet(_) => "unet",
        }
    }

    /// Flat key=value pairs, stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("model".to_string(), self.kind().to_string())];
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match self {
            ModelConfig::SolarNet(c) => {
                put("in_channels", c.in_channels.to_string());
                let widths: Vec<String> = c.encoder_widths.iter().map(|w| w.to_string()).collect();
                put("encoder_widths", widths.join(","));
                put("em_k", c.emau.k.to_string());
                put("em_t", c.emau.t.to_string());
                put("alpha", c.emau.alpha.to_string());
                put("normalize_bases", c.emau.normalize_bases.to_string());
                put("em_seed", c.emau.seed.to_string());
                put("seed", c.seed.to_string());
            }
            ModelConfig::UNet(c) => {
                put("in_channels", c.in_channels.to_string());
                put("base_width", c.base_width.to_string());
                put("seed", c.seed.to_string());
            }
        }
        out
    }

    pub fn to_echo(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without '=': {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("config echo missing {k}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for {key}: {v}")))
        }
        match get("model")? {
            "solarnet" => {
                let widths = get("encoder_widths")?
                    .split(',')
                    .map(|w| num("encoder_widths", w.trim()))
                    .collect::<Result<Vec<usize>>>()?;
                Ok(ModelConfig::SolarNet(SolarNetConfig {
                    in_channels: num("in_channels", get("in_channels")?)?,
                    encoder_widths: widths,
                    emau: EmauConfig {
                        k: num("em_k", get("em_k")?)?,
                        t: num("em_t", get("em_t")?)?,
                        alpha: num("alpha", get("alpha")?)?,
                        normalize_bases: num("normalize_bases", get("normalize_bases")?)?,
                        seed: num("em_seed", get("em_seed")?)?,
                    },
                    seed: num("seed", get("seed")?)?,
                }))
            }
            "unet" => Ok(ModelConfig::UNet(UNetConfig {
                in_channels: num("in_channels", get("in_channels")?)?,
                base_width: num("base_width", get("base_width")?)?,
                seed: num("seed", get("seed")?)?,
            })),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }
}

/// Forward outputs shared by both architectures.
pub struct ModelOutput {
    /// [B×2×H×W]
    pub seg_logits: Var,
    /// [B×2]; absent for the segmentation-only baseline.
    pub cls_logits: Option<Var>,
    pub mu_t: Option<Bases>,
}

#[derive(Debug, Clone)]
pub enum Model {
    SolarNet(SolarNet),
    UNet(UNet),
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(match config {
            ModelConfig::SolarNet(c) => Model::SolarNet(SolarNet::new(c)?),
            ModelConfig::UNet(c) => Model::UNet(UNet::new(c)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::SolarNet(m) => ModelConfig::SolarNet(m.config.clone()),
            Model::UNet(m) => ModelConfig::UNet(m.config.clone()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::SolarNet(_) => "solarnet",
            Model::UNet(_) => "unet",
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::SolarNet(m) => &m.store,
            Model::UNet(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::SolarNet(m) => &mut m.store,
            Model::UNet(m) => &mut m.store,
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        match self {
            Model::SolarNet(m) => m.config.stride(),
            Model::UNet(_) => UNet::input_multiple(),
        }
    }

    pub fn has_cls_head(&self) -> bool {
        matches!(self, Model::SolarNet(_))
    }

    pub fn bases(&self) -> Option<&Bases> {
        match self {
            Model::SolarNet(m) => Some(&m.bases),
            Model::UNet(_) => None,
        }
    }

    pub fn bases_mut(&mut self) -> Option<&mut Bases> {
        match self {
            Model::SolarNet(m) => Some(&mut m.bases),
            Model::UNet(_) => None,
        }
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        match self {
            Model::SolarNet(m) => m.encoder.iter().map(|l| &l.bn).collect(),
            Model::UNet(m) => m
                .down
                .iter()
                .chain(&m.up)
                .flat_map(|b| [&b.first.bn, &b.second.bn])
                .collect(),
        }
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Model::SolarNet(m) => m.encoder.iter_mut().map(|l| &mut l.bn).collect(),
            Model::UNet(m) => m
                .down
                .iter_mut()
                .chain(m.up.iter_mut())
                .flat_map(|b| [&mut b.first.bn, &mut b.second.bn])
                .collect(),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        images: Var,
        mode: Mode,
    ) -> Result<ModelOutput> {
        match self {
            Model::SolarNet(m) => {
                let out = m.forward(tape, binding, images, mode)?;
                Ok(ModelOutput {
                    seg_logits: out.seg_logits,
                    cls_logits: Some(out.cls_logits),
                    mu_t: Some(out.mu_t),
                })
            }
            Model::UNet(m) => Ok(ModelOutput {
                seg_logits: m.forward(tape, binding, images, mode)?,
                cls_logits: None,
                mu_t: None,
            }),
        }
    }

    /// Eval-mode inference on a [B×3×H×W] batch; returns (seg logits, cls logits).
    pub fn predict(&mut self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let binding = self.store().bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &binding, x, Mode::Eval)?;
        let seg = tape.value(out.seg_logits).clone();
        let cls = out.cls_logits.map(|c| tape.value(c).clone());
        Ok((seg, cls))
    }

    pub fn update_bases(&mut self, mu_t: &Bases) -> Result<()> {
        match self {
            Model::SolarNet(m) => m.update_bases(mu_t),
            Model::UNet(_) => Ok(()),
        }
    }
}

/// Single-image UNet forward: [3×H×W] -> [2×H×W].
pub fn unet_forward(model: &mut UNet, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    let [c, h, w] = *shape.as_slice() else {
        return Err(Error::shape("unet_forward", "expected C×H×W"));
    };
    let mut tape = Tape::new();
    let binding = model.store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone().reshape(&[1, c, h, w])?);
    let y = model.forward(&mut tape, &binding, x, Mode::Eval)?;
    tape.value(y).clone().reshape(&[2, h, w])
}

/// 1 if any pixel of the binary mask is positive.
pub fn derive_image_label(mask: &[u8]) -> usize {
    usize::from(mask.iter().any(|&v| v != 0))
}
