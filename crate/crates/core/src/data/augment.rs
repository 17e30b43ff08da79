//! Geometric augmentations. Images are resampled bilinearly, masks by
//! nearest neighbour, and both read past the border by reflection.

use rand::Rng;

use super::image::{reflect_index, Image};
use super::SampleTile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Crop,
    Scale,
    Rotate,
    FlipH,
    FlipV,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Crop,
        AugmentOp::Scale,
        AugmentOp::Rotate,
        AugmentOp::FlipH,
        AugmentOp::FlipV,
    ];

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

/// Smallest crop side as a fraction of the input side.
pub const MIN_CROP_FRACTION: f64 = 0.6;

/// Applies `op` with parameters drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(sample: &SampleTile, op: AugmentOp, rng: &mut R) -> SampleTile {
    let (h, w) = sample.image.dims();
    match op {
        AugmentOp::Crop => {
            let ch = crop_side(h, rng);
            let cw = crop_side(w, rng);
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            crop_resize(sample, (y0, x0), (ch, cw))
        }
        AugmentOp::Scale => scale(sample, rng.random_range(0.8..1.2)),
        AugmentOp::Rotate => rotate(sample, rng.random_range(-180.0..180.0)),
        AugmentOp::FlipH => flip_h(sample),
        AugmentOp::FlipV => flip_v(sample),
    }
}

fn crop_side<R: Rng + ?Sized>(len: usize, rng: &mut R) -> usize {
    let f = rng.random_range(MIN_CROP_FRACTION..=1.0);
    ((len as f64 * f).round() as usize).clamp(1, len)
}

fn remap(img: &Image, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (sy, sx) = f(y, x);
            out.pixel_mut(y, x).copy_from_slice(img.pixel(sy, sx));
        }
    }
    out
}

fn rebuild(sample: &SampleTile, image: Image, mask: Image) -> SampleTile {
    SampleTile::new(image, mask, sample.source_id.clone(), sample.origin)
}

pub fn flip_h(sample: &SampleTile) -> SampleTile {
    let w = sample.image.width;
    let f = |y, x| (y, w - 1 - x);
    rebuild(sample, remap(&sample.image, f), remap(&sample.mask, f))
}

pub fn flip_v(sample: &SampleTile) -> SampleTile {
    let h = sample.image.height;
    let f = |y, x| (h - 1 - y, x);
    rebuild(sample, remap(&sample.image, f), remap(&sample.mask, f))
}

/// Resamples with `map(y, x) -> (v, u)` giving the source position of output
/// pixel (y, x) in pixel-index coordinates.
fn warp(sample: &SampleTile, map: impl Fn(f64, f64) -> (f64, f64)) -> SampleTile {
    let img = &sample.image;
    let (h, w) = img.dims();
    let mut image = Image::filled(w, h, img.channels, 0);
    let mut mask = Image::filled(w, h, 1, 0);
    let mut acc = vec![0.0; img.channels];
    for y in 0..h {
        for x in 0..w {
            let (v, u) = map(y as f64, x as f64);
            let (v0, u0) = (v.floor(), u.floor());
            let (fy, fx) = (v - v0, u - u0);
            acc.fill(0.0);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let sy = reflect_index(v0 as isize + dy, h);
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let sx = reflect_index(u0 as isize + dx, w);
                    for (a, &p) in acc.iter_mut().zip(img.pixel(sy, sx)) {
                        *a += wy * wx * f64::from(p);
                    }
                }
            }
            for (o, a) in image.pixel_mut(y, x).iter_mut().zip(&acc) {
                *o = a.round().clamp(0.0, 255.0) as u8;
            }
            let my = reflect_index(v.round() as isize, h);
            let mx = reflect_index(u.round() as isize, w);
            mask.pixel_mut(y, x)[0] = sample.mask.pixel(my, mx)[0];
        }
    }
    rebuild(sample, image, mask)
}

/// Crops the (ch × cw) window at `origin` and resizes it back to the input
/// size.
pub fn crop_resize(
    sample: &SampleTile,
    origin: (usize, usize),
    size: (usize, usize),
) -> SampleTile {
    let (h, w) = sample.image.dims();
    let sy = size.0 as f64 / h as f64;
    let sx = size.1 as f64 / w as f64;
    let (y0, x0) = (origin.0 as f64, origin.1 as f64);
    warp(sample, |y, x| {
        (y0 + (y + 0.5) * sy - 0.5, x0 + (x + 0.5) * sx - 0.5)
    })
}

/// Zooms by `s` about the image center.
pub fn scale(sample: &SampleTile, s: f64) -> SampleTile {
    let (cy, cx) = center(&sample.image);
    warp(sample, |y, x| (cy + (y - cy) / s, cx + (x - cx) / s))
}

/// Rotates counter-clockwise by `degrees` about the image center.
pub fn rotate(sample: &SampleTile, degrees: f64) -> SampleTile {
    let (cy, cx) = center(&sample.image);
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(sample, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        // inverse rotation, with y pointing down
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

fn center(img: &Image) -> (f64, f64) {
    (
        (img.height as f64 - 1.0) / 2.0,
        (img.width as f64 - 1.0) / 2.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SampleTile {
        synth_sample(&SynthConfig::new(64, 3), 1)
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        assert_eq!(flip_h(&flip_h(&s)), s);
        assert_eq!(flip_v(&flip_v(&s)), s);
        assert_ne!(flip_h(&s).image, s.image);
    }

    #[test]
    fn unit_scale_is_identity() {
        let s = sample();
        let t = scale(&s, 1.0);
        let worst = s
            .image
            .data
            .iter()
            .zip(&t.image.data)
            .map(|(a, b)| a.abs_diff(*b))
            .max();
        assert!(worst.unwrap() <= 1);
        assert_eq!(t.mask, s.mask);
    }

    fn central_half(img: &Image) -> Vec<u8> {
        let (h, w) = img.dims();
        let mut out = Vec::new();
        for y in h / 4..h / 4 + h / 2 {
            for x in w / 4..w / 4 + w / 2 {
                out.extend_from_slice(img.pixel(y, x));
            }
        }
        out
    }

    /// Band-limited image with a solid blob mask; interpolation slack is
    /// only meaningful on content that is smooth at the pixel scale.
    fn smooth_sample(size: usize) -> SampleTile {
        let mut image = Image::filled(size, size, 3, 0);
        let mut mask = Image::filled(size, size, 1, 0);
        let c = (size as f64 - 1.0) / 2.0;
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                for ch in 0..3 {
                    let v = 128.0
                        + 50.0 * (fy / 7.0 + ch as f64).sin() * (fx / 9.0).cos()
                        + 30.0 * ((fx + fy) / 11.0).sin();
                    image.pixel_mut(y, x)[ch] = v.round() as u8;
                }
                let r2 = (fy - c + 3.0).powi(2) + (fx - c - 2.0).powi(2);
                mask.pixel_mut(y, x)[0] = u8::from(r2 < (size as f64 / 5.0).powi(2));
            }
        }
        SampleTile::new(image, mask, "smooth".into(), (0, 0))
    }

    #[test]
    fn rotation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = smooth_sample(64);
        for _ in 0..8 {
            let theta: f64 = rng.random_range(-180.0..180.0);
            let back = rotate(&rotate(&s, theta), -theta);
            let (a, b) = (central_half(&s.image), central_half(&back.image));
            let mae = a
                .iter()
                .zip(&b)
                .map(|(x, y)| f64::from(x.abs_diff(*y)))
                .sum::<f64>()
                / a.len() as f64;
            assert!(mae <= 2.0, "θ={theta}: mean abs error {mae} levels");

            let (ma, mb) = (central_half(&s.mask), central_half(&back.mask));
            let inter = ma
                .iter()
                .zip(&mb)
                .filter(|(x, y)| **x == 1 && **y == 1)
                .count();
            let union = ma
                .iter()
                .zip(&mb)
                .filter(|(x, y)| **x == 1 || **y == 1)
                .count();
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.95, "θ={theta}: mask IoU {iou}");
        }
    }

    #[test]
    fn masks_stay_binary_and_labels_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..10 {
            let s = synth_sample(&SynthConfig::new(64, 2), i);
            for op in AugmentOp::ALL {
                let t = augment(&s, op, &mut rng);
                assert!(t.mask.is_binary());
                assert_eq!(t.image.channels, 3);
                assert_eq!(t.image.dims(), s.image.dims());
                assert_eq!(t.label, usize::from(t.mask.count_nonzero() > 0));
            }
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let s = sample();
        assert_eq!(crop_resize(&s, (0, 0), (64, 64)), s);
        let half = crop_resize(&s, (0, 0), (32, 32));
        assert_eq!(
            half.mask.pixel(1, 1),
            s.mask.pixel(0, 0).to_vec().as_slice()
        );
    }
}
