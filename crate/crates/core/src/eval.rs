//! Confusion-matrix metrics, dataset evaluation and mask rendering.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::data::image::{write_pnm, Image};
use crate::data::tiling::{extract_window, tile_origins};
use crate::data::{image_to_tensor, stitch_logits, SampleTile};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds per-pixel counts for two {0,1} masks.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "confusion_update",
                format!("{} predicted vs {} true pixels", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p > 1 || t > 1 {
                return Err(Error::Metric(format!("non-binary mask value {}", p.max(t))));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// TP / (TP + FP + FN) for `class`; 1 when the class is absent from
    /// both prediction and truth.
    pub fn iou(&self, class: usize) -> f64 {
        let other = 1 - class;
        let tp = self.counts[class][class];
        let fn_ = self.counts[class][other];
        let fp = self.counts[other][class];
        let denom = tp + fp + fn_;
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Metric("mIoU of an empty confusion matrix".into()));
        }
        Ok(0.5 * (self.iou(0) + self.iou(1)))
    }

    pub fn pixel_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric(
                "accuracy of an empty confusion matrix".into(),
            ));
        }
        Ok((self.counts[0][0] + self.counts[1][1]) as f64 / total as f64)
    }
}

pub fn confusion_update(cm: &mut ConfusionMatrix, pred: &[u8], truth: &[u8]) -> Result<()> {
    cm.update(pred, truth)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

/// Per-pixel argmax of [2×H×W] logits; ties go to background.
pub fn argmax_mask(seg: &Tensor) -> Result<Vec<u8>> {
    let [2, h, w] = *seg.shape() else {
        return Err(Error::shape(
            "argmax_mask",
            format!("expected 2×H×W, got {:?}", seg.shape()),
        ));
    };
    let (bg, fg) = seg.data().split_at(h * w);
    Ok(bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilerConfig {
    pub tile: usize,
    pub stride: usize,
}

impl TilerConfig {
    pub fn new(tile: usize, stride: usize) -> Result<Self> {
        if tile == 0 || stride == 0 || stride > tile {
            return Err(Error::Config(format!(
                "need 0 < stride <= tile, got tile {tile} stride {stride}"
            )));
        }
        Ok(Self { tile, stride })
    }
}

/// Tiles an arbitrary-size RGB raster, runs the model on every window in
/// eval mode and stitches the [2×H×W] logits back.
pub fn predict_raster(model: &mut Model, image: &Image, tiler: TilerConfig) -> Result<Tensor> {
    let m = model.input_multiple();
    if !tiler.tile.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "tile {} must be a multiple of the model's input multiple {m}",
            tiler.tile
        )));
    }
    let t = tiler.tile;
    let mut parts = Vec::new();
    for origin in tile_origins(image.height, image.width, t, tiler.stride) {
        let window = extract_window(image, origin, t);
        let x = image_to_tensor(&window).reshape(&[1, 3, t, t])?;
        let (seg, _) = model.predict(&x)?;
        parts.push((seg.reshape(&[2, t, t])?, origin));
    }
    stitch_logits(&parts, image.dims())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub miou: f64,
    pub pixel_acc: f64,
    pub images: usize,
    pub pixels: u64,
}

pub const RESULTS_HEADER: &str = "model,dataset,miou,pixel_acc,images,pixels";

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.model, self.dataset, self.miou, self.pixel_acc, self.images, self.pixels
        )
    }
}

/// Aggregates one dataset-level confusion matrix across `samples`.
pub fn evaluate_confusion(
    model: &mut Model,
    samples: &[SampleTile],
    tiler: TilerConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let seg = predict_raster(model, &s.image, tiler)?;
        cm.update(&argmax_mask(&seg)?, &s.mask.data)?;
    }
    Ok(cm)
}

pub fn evaluate_model(
    model: &mut Model,
    samples: &[SampleTile],
    tiler: TilerConfig,
    model_name: &str,
    dataset_name: &str,
) -> Result<EvalRow> {
    let cm = evaluate_confusion(model, samples, tiler)?;
    Ok(EvalRow {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        miou: cm.miou()?,
        pixel_acc: cm.pixel_acc()?,
        images: samples.len(),
        pixels: cm.total(),
    })
}

/// Appends `row`, writing the header first if the file is new or empty.
pub fn append_results_csv(path: &Path, row: &EvalRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut text = String::new();
    if fresh {
        writeln!(text, "{RESULTS_HEADER}").expect("string write");
    }
    writeln!(text, "{}", row.csv_line()).expect("string write");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Argmax mask as a {0,255} grayscale image.
pub fn mask_image(seg: &Tensor) -> Result<Image> {
    let [_, h, w] = *seg.shape() else {
        return Err(Error::shape("write_mask", "expected 2×H×W"));
    };
    let data = argmax_mask(seg)?.into_iter().map(|v| v * 255).collect();
    Image::new(w, h, 1, data)
}

pub fn write_mask(seg: &Tensor, path: &Path) -> Result<()> {
    write_pnm(&mask_image(seg)?, path)
}

pub const OVERLAY_COLOR: [u8; 3] = [0, 90, 255];
pub const OVERLAY_ALPHA: f64 = 0.4;

/// Blends the overlay color at 40% over positive pixels of a {0,1} or
/// {0,255} mask; background pixels are copied unchanged.
pub fn overlay(image: &Image, mask: &Image) -> Result<Image> {
    if image.dims() != mask.dims() || image.channels != 3 || mask.channels != 1 {
        return Err(Error::shape(
            "overlay",
            "need an RGB image and a mask of equal size",
        ));
    }
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
        if m != 0 {
            for (v, c) in px.iter_mut().zip(OVERLAY_COLOR) {
                let blended = (1.0 - OVERLAY_ALPHA) * f64::from(*v) + OVERLAY_ALPHA * f64::from(c);
                *v = blended.round() as u8;
            }
        }
    }
    Ok(out)
}

pub fn write_overlay(image: &Image, seg: &Tensor, path: &Path) -> Result<()> {
    write_pnm(&overlay(image, &mask_image(seg)?)?, path)
}
