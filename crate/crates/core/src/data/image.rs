//! 8-bit rasters and binary PNM (P5/P6) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit raster, row-major H×W×channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::InvalidShape {
                shape: vec![height, width, channels],
                reason: "image needs positive dims and 1 or 3 channels".into(),
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidShape {
                shape: vec![height, width, channels],
                reason: format!("{} bytes supplied", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// True when every value is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

const MEAN: f64 = 0.5;
const STD: f64 = 0.25;

/// RGB image -> normalized [3×H×W] tensor, (v/255 − 0.5) / 0.25.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let (h, w) = img.dims();
    let mut out = vec![0.0; img.channels * h * w];
    for (p, px) in img.data.chunks(img.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * h * w + p] = (f64::from(v) / 255.0 - MEAN) / STD;
        }
    }
    Tensor::new(vec![img.channels, h, w], out).expect("dims match")
}

fn is_space(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Parses a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("PNM: {m}"));
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(&b) if is_space(b) => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if !bytes.get(pos).copied().is_some_and(is_space) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    let n = width * height * channels;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("truncated pixel data"))?
        .to_vec();
    Image::new(width, height, channels, data).map_err(|e| bad(&e.to_string()))
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_pnm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pnm(img))
        .map_err(|e| Error::io(path, e))
}

/// Mirror index into [0, n) without repeating the edge sample
/// (… 2 1 | 0 1 2 … n−1 | n−2 …).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let rgb = Image::new(3, 2, 3, (0..18).collect()).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&rgb)).unwrap(), rgb);
        let gray = Image::new(2, 2, 1, vec![0, 255, 7, 9]).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&gray)).unwrap(), gray);
    }

    #[test]
    fn pnm_header_comments() {
        let mut bytes = b"P5 # comment\n2 # w\n1\n255\n".to_vec();
        bytes.extend([4, 5]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(
            (img.width, img.height, img.data.clone()),
            (2, 1, vec![4, 5])
        );
    }

    #[test]
    fn pnm_errors() {
        assert!(matches!(
            decode_pnm(b"P3\n1 1\n255\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_pnm(b"P5\n2 2\n255\n\x01"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_pnm(b"P5\n1 1\n65535\n\x00\x00"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn reflection() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn normalization() {
        let img = Image::new(1, 1, 3, vec![0, 255, 128]).unwrap();
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data()[0], -2.0);
        assert_eq!(t.data()[1], 2.0);
    }
}
