//! Binary PGM (P5) and PPM (P6) images, plus PNG with the `png` feature.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Scalar, Tensor};

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || data.len() != width * height * channels || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image {width}×{height}×{channels} does not match {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 3, data)
    }

    /// Gray images are replicated to three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v; 3]).collect(),
            ..*self
        }
    }

    /// Any nonzero gray value becomes 1.
    pub fn to_binary_mask(&self) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Input("masks must be single-channel".into()));
        }
        Ok(self.data.iter().map(|&v| u8::from(v != 0)).collect())
    }

    /// `1×C×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[1, c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            F::from_f64(f64::from(self.data[p * c + ch]) / 255.0)
        })
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut r = PnmReader { bytes, pos: 0 };
        let channels = match r.token()? {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(Error::Input(format!(
                    "unsupported image magic `{}` (binary P5/P6 only)",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = r.number()?;
        let height = r.number()?;
        let maxval = r.number()?;
        if !(1..=255).contains(&maxval) {
            return Err(Error::Input(format!("unsupported maxval {maxval} (8-bit only)")));
        }
        // exactly one whitespace byte separates the header from the raster
        r.pos += 1;
        let need = width * height * channels;
        let raster = bytes.get(r.pos..r.pos + need).ok_or_else(|| {
            Error::Input(format!(
                "image raster truncated: expected {need} bytes, found {}",
                bytes.len().saturating_sub(r.pos)
            ))
        })?;
        let data = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|&v| ((u32::from(v.min(maxval as u8)) * 255 + maxval as u32 / 2) / maxval as u32) as u8)
                .collect()
        };
        Self::new(width, height, channels, data)
    }
}

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmReader<'a> {
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Input("image header truncated".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::Input(format!("bad image header field `{}`", String::from_utf8_lossy(t))))
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a PGM/PPM file, or a PNG when built with the `png` feature.
pub fn load_image(path: &Path) -> Result<Image> {
    if is_png(path) {
        return load_png(path);
    }
    let bytes = std::fs::read(path).map_err(|e| image_err(path, e))?;
    Image::decode_pnm(&bytes).map_err(|e| image_err(path, e))
}

/// Writes atomically; the format follows the extension (`.png` needs the
/// `png` feature, anything else is written as PGM/PPM).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = if is_png(path) { encode_png(img, path)? } else { img.encode_pnm() };
    write_atomic(path, &bytes).map_err(|e| image_err(path, e))
}

#[cfg(feature = "png")]
fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Image::rgb(w, h, img.into_rgb8().into_raw())
    } else {
        Image::gray(w, h, img.into_luma8().into_raw())
    }
}

#[cfg(not(feature = "png"))]
fn load_png(path: &Path) -> Result<Image> {
    Err(image_err(path, "PNG support requires the `png` feature"))
}

#[cfg(feature = "png")]
fn encode_png(img: &Image, path: &Path) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.data, img.width as u32, img.height as u32, color)
        .map_err(|e| image_err(path, e))?;
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn encode_png(_img: &Image, path: &Path) -> Result<Vec<u8>> {
    Err(image_err(path, "PNG support requires the `png` feature"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let g = Image::gray(3, 2, vec![0, 1, 2, 3, 4, 255]).unwrap();
        assert_eq!(Image::decode_pnm(&g.encode_pnm()).unwrap(), g);
        let c = Image::rgb(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(Image::decode_pnm(&c.encode_pnm()).unwrap(), c);
    }

    #[test]
    fn header_comments_and_maxval() {
        let mut bytes = b"P5 # gray\n2 1\n# max\n1\n".to_vec();
        bytes.extend([0, 1]);
        let img = Image::decode_pnm(&bytes).unwrap();
        assert_eq!(img.data, [0, 255]);
        assert_eq!(img.to_binary_mask().unwrap(), [0, 1]);
    }

    #[test]
    fn bad_files_rejected() {
        assert!(Image::decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(Image::decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Image::decode_pnm(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let c = Image::rgb(2, 1, vec![0, 51, 255, 255, 0, 0]).unwrap();
        let t = c.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.0, 1.0, 0.0]);
    }
}
