use super::image::{reflect_index, Image};
use super::SampleTile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window start positions along one axis: 0, stride, 2·stride, … until the
/// extent is covered. The last window may overhang and gets padded.
pub fn window_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let n = if len <= tile {
        1
    } else {
        (len - tile).div_ceil(stride) + 1
    };
    (0..n).map(|i| i * stride).collect()
}

/// Raster-scan origins (row, col) of every window.
pub fn tile_origins(
    height: usize,
    width: usize,
    tile: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let cols = window_starts(width, tile, stride);
    window_starts(height, tile, stride)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect()
}

/// Cuts a tile×tile window at `origin`, reflecting anything past the edges.
pub fn extract_window(img: &Image, origin: (usize, usize), tile: usize) -> Image {
    let ch = img.channels;
    let mut out = Image::filled(tile, tile, ch, 0);
    for y in 0..tile {
        let sy = reflect_index((origin.0 + y) as isize, img.height);
        for x in 0..tile {
            let sx = reflect_index((origin.1 + x) as isize, img.width);
            out.pixel_mut(y, x).copy_from_slice(img.pixel(sy, sx));
        }
    }
    out
}

/// Splits an image (and optional mask) into windows. Without a mask each
/// tile carries an all-background mask.
pub fn tile_image(
    image: &Image,
    mask: Option<&Image>,
    tile: usize,
    stride: usize,
    source_id: &str,
) -> Result<Vec<SampleTile>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Config("tile and stride must be positive".into()));
    }
    if let Some(m) = mask {
        if m.dims() != image.dims() {
            return Err(Error::shape("tile_image", "mask and image dims differ"));
        }
    }
    Ok(tile_origins(image.height, image.width, tile, stride)
        .into_iter()
        .map(|origin| {
            let img = extract_window(image, origin, tile);
            let m = mask.map_or_else(
                || Image::filled(tile, tile, 1, 0),
                |m| extract_window(m, origin, tile),
            );
            SampleTile::new(img, m, source_id.to_string(), origin)
        })
        .collect())
}

/// Reassembles [C×t×t] tile logits into [C×H×W], averaging overlaps and
/// dropping padded margins.
pub fn stitch_logits(tiles: &[(Tensor, (usize, usize))], out_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = out_hw;
    let Some((first, _)) = tiles.first() else {
        return Err(Error::Stitch("no tiles".into()));
    };
    let c = first.shape()[0];
    let mut sum = vec![0.0; c * h * w];
    let mut count = vec![0u32; h * w];
    for (t, (r0, c0)) in tiles {
        let [tc, th, tw] = *t.shape() else {
            return Err(Error::Stitch(format!(
                "tile shape {:?} is not C×H×W",
                t.shape()
            )));
        };
        if tc != c {
            return Err(Error::Stitch("tiles disagree on channel count".into()));
        }
        for y in 0..th {
            let oy = r0 + y;
            if oy >= h {
                break;
            }
            for x in 0..tw {
                let ox = c0 + x;
                if ox >= w {
                    break;
                }
                count[oy * w + ox] += 1;
                for k in 0..c {
                    sum[(k * h + oy) * w + ox] += t.data()[(k * th + y) * tw + x];
                }
            }
        }
    }
    if let Some(p) = count.iter().position(|&n| n == 0) {
        return Err(Error::Stitch(format!(
            "pixel ({}, {}) not covered",
            p / w,
            p % w
        )));
    }
    for k in 0..c {
        for (s, &n) in sum[k * h * w..(k + 1) * h * w].iter_mut().zip(&count) {
            *s /= f64::from(n);
        }
    }
    Tensor::new(vec![c, h, w], sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn gradient_image(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i * 31 % 251) as u8).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn tile_counts() {
        assert_eq!(
            tile_image(&gradient_image(512, 512), None, 512, 512, "a")
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            tile_image(&gradient_image(1024, 1024), None, 512, 512, "a")
                .unwrap()
                .len(),
            4
        );
        assert_eq!(
            tile_origins(700, 700, 512, 512),
            [(0, 0), (0, 512), (512, 0), (512, 512)]
        );
        assert_eq!(window_starts(1536, 512, 256), [0, 256, 512, 768, 1024]);
    }

    #[test]
    fn reflected_padding_round_trip() {
        let img = gradient_image(70, 70);
        let tiles = tile_image(&img, None, 51, 51, "a").unwrap();
        assert_eq!(tiles.len(), 4);
        // the overhanging window mirrors about the last row
        let t = &tiles[2];
        assert_eq!(t.origin, (51, 0));
        assert_eq!(t.image.pixel(18, 0), img.pixel(69, 0));
        assert_eq!(t.image.pixel(19, 0), img.pixel(68, 0));

        // stitch the per-channel intensities back
        let logits: Vec<(Tensor, (usize, usize))> = tiles
            .iter()
            .map(|t| {
                let data = (0..3)
                    .flat_map(|c| {
                        t.image
                            .data
                            .iter()
                            .skip(c)
                            .step_by(3)
                            .map(|&v| f64::from(v))
                    })
                    .collect();
                (Tensor::new(vec![3, 51, 51], data).unwrap(), t.origin)
            })
            .collect();
        let back = stitch_logits(&logits, (70, 70)).unwrap();
        for y in 0..70 {
            for x in 0..70 {
                for c in 0..3 {
                    assert_eq!(back.at(&[c, y, x]), f64::from(img.pixel(y, x)[c]));
                }
            }
        }
    }

    #[test]
    fn stitch_single_and_overlap() {
        let t = Tensor::create(&[2, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0 }, 1).unwrap();
        assert_eq!(stitch_logits(&[(t.clone(), (0, 0))], (4, 4)).unwrap(), t);
        let wide = stitch_logits(&[(t.clone(), (0, 0)), (t.clone(), (0, 2))], (4, 6)).unwrap();
        // overlap columns 2..4 average t[.., 2..4] with t[.., 0..2]
        assert_eq!(wide.at(&[1, 3, 0]), t.at(&[1, 3, 0]));
        let expected = 0.5 * (t.at(&[0, 1, 3]) + t.at(&[0, 1, 1]));
        assert!((wide.at(&[0, 1, 3]) - expected).abs() < 1e-15);
    }

    #[test]
    fn coverage_gap_is_an_error() {
        let t = Tensor::zeros(&[2, 4, 4]);
        let err = stitch_logits(&[(t, (0, 0))], (4, 5)).unwrap_err();
        assert!(matches!(err, Error::Stitch(_)));
    }
}
