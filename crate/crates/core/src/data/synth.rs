//! Seeded synthetic solar-farm tiles: value-noise terrain with an optional
//! rotated grid of dark panel rows, plus the exact farm-footprint mask.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::write_pair;
use super::image::Image;
use super::SampleTile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Tile side in pixels, at least 64.
    pub size: usize,
    pub seed: u64,
    /// 0 = high-contrast panels on clean terrain; 1 = low contrast, grainy,
    /// with dark unstriped distractors.
    pub difficulty: f64,
    pub farm_probability: f64,
}

impl SynthConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            seed,
            difficulty: 0.3,
            farm_probability: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::Config(format!(
                "synthetic tile size {} < 64",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config("difficulty must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.farm_probability) {
            return Err(Error::Config("farm probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub const MIN_FARM_FRACTION: f64 = 0.01;
pub const MAX_FARM_FRACTION: f64 = 0.6;

const SAND: [f64; 3] = [196.0, 174.0, 128.0];
const ROCK: [f64; 3] = [124.0, 112.0, 98.0];
const WATER: [f64; 3] = [52.0, 88.0, 120.0];
const SCRUB: [f64; 3] = [132.0, 140.0, 96.0];
const PANEL: [f64; 3] = [38.0, 50.0, 82.0];

/// Smooth random field in [0, 1] on a lattice with the given cell size.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Vec<f64> {
    let n = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 / cell;
        let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f64 / cell;
            let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
            let bot = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn octaves(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let mut total = vec![0.0; size * size];
    for (cell, amp) in [(s / 4.0, 0.5), (s / 8.0, 0.3), (s / 16.0, 0.2)] {
        for (t, v) in total.iter_mut().zip(value_noise(rng, size, cell.max(2.0))) {
            *t += amp * v;
        }
    }
    total
}

fn terrain(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.random_range(0..4) {
        0 => SAND,
        1 => ROCK,
        2 => WATER,
        _ => SCRUB,
    }
}

/// Rotated rectangular farm footprint filled with panel rows.
#[derive(Debug, Clone)]
struct Farm {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    sin: f64,
    cos: f64,
    period: f64,
    panel: f64,
    column: f64,
}

impl Farm {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let period = (s / rng.random_range(9.0..14.0)).round().max(4.0);
        Self {
            cy: s * rng.random_range(0.25..0.75),
            cx: s * rng.random_range(0.25..0.75),
            half_h: s * rng.random_range(0.1..0.4),
            half_w: s * rng.random_range(0.1..0.4),
            sin: theta.sin(),
            cos: theta.cos(),
            period,
            panel: period - (period / 4.0).round().max(1.0),
            column: (s / 4.0).round(),
        }
    }

    fn fallback(size: usize) -> Self {
        let s = size as f64;
        Self {
            cy: s / 2.0,
            cx: s / 2.0,
            half_h: s / 5.0,
            half_w: s / 5.0,
            sin: 0.0,
            cos: 1.0,
            period: (s / 12.0).round().max(4.0),
            panel: (s / 12.0).round().max(4.0) - 1.0,
            column: (s / 4.0).round(),
        }
    }

    /// Position of the center of pixel (y, x) in farm-local coordinates
    /// (along rows, across rows), if it lies inside the footprint.
    fn local(&self, y: usize, x: usize) -> Option<(f64, f64)> {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let v = self.cos * dy - self.sin * dx + self.half_h;
        let u = self.sin * dy + self.cos * dx + self.half_w;
        (v >= 0.0 && u >= 0.0 && v < 2.0 * self.half_h && u < 2.0 * self.half_w).then_some((u, v))
    }

    /// Panel row index at pixel (y, x) if a panel is drawn there; `None` for
    /// row gaps, service lanes and everything outside the footprint.
    fn panel_row(&self, y: usize, x: usize) -> Option<i64> {
        let (u, v) = self.local(y, x)?;
        // one-pixel service lane between panel blocks
        if u.rem_euclid(self.column) < 1.0 {
            return None;
        }
        (v.rem_euclid(self.period) < self.panel).then(|| (v / self.period).floor() as i64)
    }

    fn fraction(&self, size: usize) -> f64 {
        let n = (0..size)
            .flat_map(|y| (0..size).map(move |x| (y, x)))
            .filter(|&(y, x)| self.local(y, x).is_some())
            .count();
        n as f64 / (size * size) as f64
    }
}

/// Tile `index` of the corpus defined by `cfg`; a pure function of
/// (cfg, index).
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> SampleTile {
    let size = cfg.size;
    let d = cfg.difficulty;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let (a, b) = (terrain(&mut rng), terrain(&mut rng));
    let blend = value_noise(&mut rng, size, size as f64 / 2.0);
    let texture = octaves(&mut rng, size);
    let grain = 4.0 + 12.0 * d;

    let has_farm = rng.random_bool(cfg.farm_probability);
    let farm = has_farm.then(|| {
        (0..64)
            .map(|_| Farm::random(&mut rng, size))
            .find(|f| (MIN_FARM_FRACTION..=MAX_FARM_FRACTION).contains(&f.fraction(size)))
            .unwrap_or_else(|| Farm::fallback(size))
    });
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-8.0..8.0));
    let distractors: Vec<(usize, usize, usize, usize)> = (0..(3.0 * d).round() as usize)
        .map(|_| {
            let h = rng.random_range(size / 10..size / 4);
            let w = rng.random_range(size / 10..size / 4);
            (
                rng.random_range(0..size - h),
                rng.random_range(0..size - w),
                h,
                w,
            )
        })
        .collect();

    let mut image = Image::filled(size, size, 3, 0);
    let mut mask = Image::filled(size, size, 1, 0);
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let t = blend[p];
            let mix = t * t * (3.0 - 2.0 * t);
            let shade = 0.7 + 0.6 * texture[p];
            let mut rgb: [f64; 3] =
                std::array::from_fn(|c| (a[c] * (1.0 - mix) + b[c] * mix) * shade);
            if distractors
                .iter()
                .any(|&(r, c, h, w)| (r..r + h).contains(&y) && (c..c + w).contains(&x))
            {
                for (v, dark) in rgb.iter_mut().zip([60.0, 60.0, 64.0]) {
                    *v = 0.5 * *v + 0.5 * dark;
                }
            }
            if let Some(f) = &farm {
                if f.local(y, x).is_some() {
                    mask.data[p] = 1;
                }
                if let Some(row) = f.panel_row(y, x) {
                    let row_shade = if row % 2 == 0 { 1.0 } else { 0.92 };
                    for c in 0..3 {
                        let panel = (PANEL[c] + tint[c]) * row_shade;
                        rgb[c] = panel * (1.0 - 0.4 * d) + rgb[c] * 0.4 * d;
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let noisy = v + rng.random_range(-grain..grain);
                image.data[p * 3 + c] = noisy.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    SampleTile::new(image, mask, format!("synth_{index:05}"), (0, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub stem: String,
    pub label: usize,
    pub positive_pixel_fraction: f64,
}

/// Writes `n` tiles under `out` (images/, masks/, manifest.csv).
pub fn synth_generate(out: &Path, n: usize, cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config(
            "number of synthetic tiles must be positive".into(),
        ));
    }
    let mut records = Vec::with_capacity(n);
    let mut csv = String::from("stem,label,positive_pixel_fraction\n");
    for i in 0..n {
        let s = synth_sample(cfg, i);
        write_pair(out, &s.source_id, &s.image, &s.mask)?;
        let frac = s.mask.count_nonzero() as f64 / s.mask.data.len() as f64;
        writeln!(csv, "{},{},{frac:.6}", s.source_id, s.label).expect("string write");
        records.push(SynthRecord {
            stem: s.source_id,
            label: s.label,
            positive_pixel_fraction: frac,
        });
    }
    let path = out.join("manifest.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_index() {
        let cfg = SynthConfig::new(64, 7);
        assert_eq!(synth_sample(&cfg, 3), synth_sample(&cfg, 3));
        assert_ne!(synth_sample(&cfg, 3).image, synth_sample(&cfg, 4).image);
        assert_ne!(
            synth_sample(&cfg, 3).image,
            synth_sample(&SynthConfig::new(64, 8), 3).image
        );
    }

    #[test]
    fn positive_rate_and_mask_fraction() {
        let cfg = SynthConfig::new(64, 1);
        let n = 1000;
        let mut positives = 0;
        for i in 0..n {
            let s = synth_sample(&cfg, i);
            if s.label == 1 {
                positives += 1;
                let f = s.mask.count_nonzero() as f64 / s.mask.data.len() as f64;
                assert!(
                    (MIN_FARM_FRACTION..=MAX_FARM_FRACTION).contains(&f),
                    "tile {i}: {f}"
                );
            } else {
                assert_eq!(s.mask.count_nonzero(), 0);
            }
        }
        // 3σ binomial band around 0.7
        let sigma = (n as f64 * 0.7 * 0.3).sqrt();
        assert!(
            (positives as f64 - 700.0).abs() <= 3.0 * sigma,
            "{positives}"
        );
    }

    #[test]
    fn corpus_on_disk_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::new(64, 2);
        let ra = synth_generate(a.path(), 5, &cfg).unwrap();
        synth_generate(b.path(), 5, &cfg).unwrap();
        for rel in [
            "manifest.csv",
            "images/synth_00002.ppm",
            "masks/synth_00004.pgm",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
        let manifest = std::fs::read_to_string(a.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 6);
        assert!(manifest.starts_with("stem,label,positive_pixel_fraction\n"));
        assert_eq!(ra.len(), 5);
    }

    #[test]
    fn rejects_small_tiles_and_empty_corpora() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(dir.path(), 3, &SynthConfig::new(32, 0)).is_err());
        assert!(synth_generate(dir.path(), 0, &SynthConfig::new(64, 0)).is_err());
    }
}
