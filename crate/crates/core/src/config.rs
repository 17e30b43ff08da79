//! Flat `key = value` run configuration. Lines starting with `#` are
//! comments; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::emau::EmauConfig;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, SolarNetConfig, UNetConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
    Tiny,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (desk|paper|tiny)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SolarNet,
    UNet,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "solarnet" => Ok(ModelKind::SolarNet),
            "unet" => Ok(ModelKind::UNet),
            _ => Err(Error::Config(format!(
                "unknown model '{s}' (solarnet|unet)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SolarNet => "solarnet",
            ModelKind::UNet => "unet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelKind,
    pub train: TrainConfig,
    pub emau: EmauConfig,
    pub encoder_widths: Vec<usize>,
    pub unet_base_width: usize,
    /// Training tiles are cut at stride = tile.
    pub tile: usize,
    pub test_fraction: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (train, sn, un) = match preset {
            Preset::Desk => (
                TrainConfig::desk(),
                SolarNetConfig::desk(),
                UNetConfig::desk(),
            ),
            Preset::Paper => (
                TrainConfig::paper(),
                SolarNetConfig::paper(),
                UNetConfig::paper(),
            ),
            Preset::Tiny => (
                TrainConfig {
                    max_iterations: 20,
                    batch_size: 2,
                    checkpoint_every: 10,
                    eval_every: 10,
                    ..TrainConfig::desk()
                },
                SolarNetConfig::tiny(),
                UNetConfig::tiny(),
            ),
        };
        Self {
            preset,
            model: ModelKind::SolarNet,
            emau: EmauConfig {
                alpha: train.alpha,
                ..sn.emau.clone()
            },
            train,
            encoder_widths: sn.encoder_widths,
            unet_base_width: un.base_width,
            tile: if preset == Preset::Tiny { 32 } else { 64 },
            test_fraction: 0.2,
            data: None,
            out: None,
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {
                let p = Preset::parse(value)?;
                if p != self.preset {
                    return Err(Error::Config(format!(
                        "preset '{value}' must be chosen before other keys (current: {})",
                        self.preset.name()
                    )));
                }
            }
            "model" => self.model = ModelKind::parse(value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "max_iterations" => t.max_iterations = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "alpha" => {
                t.alpha = num(key, value)?;
                self.emau.alpha = t.alpha;
            }
            "seed" => t.seed = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "eval_every" => t.eval_every = num(key, value)?,
            "class_weighting" => t.class_weighting = num(key, value)?,
            "augment" => t.augment = num(key, value)?,
            "em_k" => self.emau.k = num(key, value)?,
            "em_t" => self.emau.t = num(key, value)?,
            "normalize_bases" => self.emau.normalize_bases = num(key, value)?,
            "encoder_widths" => {
                self.encoder_widths = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "unet_base_width" => self.unet_base_width = num(key, value)?,
            "tile" => self.tile = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of `self`. A leading `preset = …`
    /// line selects the base preset.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Builds a config from an optional preset name and file body. The
    /// file's own `preset` key wins when no preset is given explicitly.
    pub fn from_sources(preset: Option<Preset>, text: Option<&str>) -> Result<Self> {
        let file_preset = text
            .and_then(|t| {
                t.lines()
                    .filter_map(|l| l.split_once('='))
                    .find(|(k, _)| k.trim() == "preset")
                    .map(|(_, v)| v.trim().to_string())
            })
            .map(|v| Preset::parse(&v))
            .transpose()?;
        if let (Some(a), Some(b)) = (preset, file_preset) {
            if a != b {
                return Err(Error::Config(format!(
                    "--preset {} conflicts with file preset {}",
                    a.name(),
                    b.name()
                )));
            }
        }
        let mut cfg = Self::preset(preset.or(file_preset).unwrap_or(Preset::Desk));
        if let Some(t) = text {
            cfg.apply_text(t)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sources(preset, Some(&text))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config().validate()?;
        if self.tile == 0 {
            return Err(Error::Config("tile must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        let m = match self.model {
            ModelKind::SolarNet => 1 << self.encoder_widths.len(),
            ModelKind::UNet => 1 << crate::models::UNET_DEPTH,
        };
        if !self.tile.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "tile {} is not a multiple of {m}",
                self.tile
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let seed = self.train.seed;
        match self.model {
            ModelKind::SolarNet => {
                let base = match self.preset {
                    Preset::Desk => SolarNetConfig::desk(),
                    Preset::Paper => SolarNetConfig::paper(),
                    Preset::Tiny => SolarNetConfig::tiny(),
                };
                ModelConfig::SolarNet(SolarNetConfig {
                    encoder_widths: self.encoder_widths.clone(),
                    emau: EmauConfig {
                        seed: seed.wrapping_add(17),
                        ..self.emau.clone()
                    },
                    seed,
                    ..base
                })
            }
            ModelKind::UNet => ModelConfig::UNet(UNetConfig {
                base_width: self.unet_base_width,
                seed,
                ..UNetConfig::desk()
            }),
        }
    }

    /// Every key with its resolved value, in a form [`RunConfig::apply_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let widths: Vec<String> = self.encoder_widths.iter().map(usize::to_string).collect();
        let mut lines = vec![
            format!("preset = {}", self.preset.name()),
            format!("model = {}", self.model.name()),
            format!("learning_rate = {}", t.learning_rate),
            format!("max_iterations = {}", t.max_iterations),
            format!("lambda = {}", t.lambda),
            format!("batch_size = {}", t.batch_size),
            format!("alpha = {}", t.alpha),
            format!("seed = {}", t.seed),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("eval_every = {}", t.eval_every),
            format!("class_weighting = {}", t.class_weighting),
            format!("augment = {}", t.augment),
            format!("em_k = {}", self.emau.k),
            format!("em_t = {}", self.emau.t),
            format!("normalize_bases = {}", self.emau.normalize_bases),
            format!("encoder_widths = {}", widths.join(",")),
            format!("unet_base_width = {}", self.unet_base_width),
            format!("tile = {}", self.tile),
            format!("test_fraction = {}", self.test_fraction),
        ];
        if let Some(d) = &self.data {
            lines.push(format!("data = {}", d.display()));
        }
        if let Some(o) = &self.out {
            lines.push(format!("out = {}", o.display()));
        }
        lines.join("\n") + "\n"
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = RunConfig::preset(Preset::Desk);
        assert_eq!(c.train.max_iterations, 2000);
        assert_eq!(c.emau.k, 64);
        assert_eq!(c.train.learning_rate, 1e-3);
        c.validate().unwrap();
    }

    #[test]
    fn full_scale_preset_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(c.train.max_iterations, 20000);
        assert_eq!((c.emau.k, c.emau.t), (1024, 10));
        assert_eq!(c.train.learning_rate, 1e-3);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_sources(None, Some("learning_rat = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(RunConfig::from_sources(None, Some("just text")).is_err());
        assert!(RunConfig::from_sources(None, Some("lambda = x")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let src = "# comment\nmodel = unet\nlambda = 0.25\nencoder_widths = 8, 16\nseed = 9\n";
        let c = RunConfig::from_sources(None, Some(src)).unwrap();
        assert_eq!(c.model, ModelKind::UNet);
        assert_eq!(c.encoder_widths, [8, 16]);
        let back = RunConfig::from_sources(None, Some(&c.to_text())).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_from_file_and_conflict() {
        let c = RunConfig::from_sources(None, Some("preset = tiny\n")).unwrap();
        assert_eq!(c.preset, Preset::Tiny);
        assert!(RunConfig::from_sources(Some(Preset::Paper), Some("preset = tiny")).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = RunConfig::preset(Preset::Desk);
        c.tile = 30;
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset(Preset::Desk);
        c.set("lambda", "2").unwrap();
        assert!(c.validate().is_err());
    }
}
