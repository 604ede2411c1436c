//! Grayscale conversion, 128×128 standardisation and model-input normalisation.

use std::path::Path;

use crate::error::{Error, Result};

/// Side length of every model input.
pub const SIDE: usize = 128;

/// Single-channel 8-bit image, row-major, white = 255 background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-size image".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "zero-size image");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "zero-size image");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn load(path: &Path) -> Result<Self> {
        to_grayscale(&RasterImage::load(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Decoded raster with 1, 3 or 4 interleaved 8-bit channels.
#[derive(Clone, Debug)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn load(path: &Path) -> Result<Self> {
        let unreadable = |reason: String| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| unreadable(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| unreadable(e.to_string()))?
            .decode()
            .map_err(|e| unreadable(e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, data) = match img {
            image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
            image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
            image::DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
            image::DynamicImage::ImageLumaA8(b) => (4, image::DynamicImage::ImageLumaA8(b).to_rgba8().into_raw()),
            other if other.color().has_alpha() => (4, other.to_rgba8().into_raw()),
            other if other.color().has_color() => (3, other.to_rgb8().into_raw()),
            other => (1, other.to_luma8().into_raw()),
        };
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

fn luminance(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Rec.601 luminance; alpha is composited over white first.
pub fn to_grayscale(img: &RasterImage) -> Result<GrayImage> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidImage("zero-size image".into()));
    }
    let n = img.width * img.height;
    if img.data.len() != n * img.channels {
        return Err(Error::InvalidImage("buffer does not match dimensions".into()));
    }
    let pixels = match img.channels {
        1 => img.data.clone(),
        3 => img
            .data
            .chunks_exact(3)
            .map(|p| luminance(p[0], p[1], p[2]).round().clamp(0.0, 255.0) as u8)
            .collect(),
        4 => img
            .data
            .chunks_exact(4)
            .map(|p| {
                let a = p[3] as f64 / 255.0;
                let y = luminance(p[0], p[1], p[2]);
                (a * y + (1.0 - a) * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect(),
        c => return Err(Error::InvalidImage(format!("unsupported channel count {c}"))),
    };
    GrayImage::new(img.width, img.height, pixels)
}

/// Bilinear resize with half-pixel centres (align_corners = false).
pub fn resize_bilinear(img: &GrayImage, new_width: usize, new_height: usize) -> GrayImage {
    let sx = img.width as f64 / new_width as f64;
    let sy = img.height as f64 / new_height as f64;
    let axis = |out: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    GrayImage::from_fn(new_width, new_height, |x, y| {
        let (x0, x1, fx) = axis(x, sx, img.width);
        let (y0, y1, fy) = axis(y, sy, img.height);
        let p = |xx, yy| img.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}

/// Places `img` on a white `SIDE`×`SIDE` canvas, extra padding going bottom/right.
fn pad_to_side(img: &GrayImage) -> GrayImage {
    let top = (SIDE - img.height) / 2;
    let left = (SIDE - img.width) / 2;
    let mut out = GrayImage::filled(SIDE, SIDE, 255);
    for y in 0..img.height {
        let src = &img.pixels[y * img.width..(y + 1) * img.width];
        let start = (y + top) * SIDE + left;
        out.pixels[start..start + img.width].copy_from_slice(src);
    }
    out
}

/// Produces a 128×128 image: pad small inputs, shrink larger ones keeping aspect.
pub fn standardize(img: &GrayImage) -> GrayImage {
    if img.width <= SIDE && img.height <= SIDE {
        return pad_to_side(img);
    }
    let (w, h) = if img.height >= img.width {
        let w = (img.width as f64 * SIDE as f64 / img.height as f64).round() as usize;
        (w.clamp(1, SIDE), SIDE)
    } else {
        let h = (img.height as f64 * SIDE as f64 / img.width as f64).round() as usize;
        (SIDE, h.clamp(1, SIDE))
    };
    pad_to_side(&resize_bilinear(img, w, h))
}

/// A 3×128×128 channel-major array with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    values: Vec<f32>,
}

impl ModelInput {
    pub const LEN: usize = 3 * SIDE * SIDE;

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.values[c * SIDE * SIDE..(c + 1) * SIDE * SIDE]
    }
}

/// Scales to [0, 1] and replicates into three identical channels.
pub fn normalize_and_expand(img: &GrayImage) -> Result<ModelInput> {
    if img.width != SIDE || img.height != SIDE {
        return Err(Error::InvalidImage(format!(
            "expected {SIDE}x{SIDE}, got {}x{}",
            img.width, img.height
        )));
    }
    let plane: Vec<f32> = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let mut values = Vec::with_capacity(ModelInput::LEN);
    for _ in 0..3 {
        values.extend_from_slice(&plane);
    }
    Ok(ModelInput { values })
}

/// Load, grayscale, standardise and normalise one image file.
pub fn preprocess(path: &Path) -> Result<ModelInput> {
    let raster = RasterImage::load(path)?;
    normalize_and_expand(&standardize(&to_grayscale(&raster)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(width: usize, height: usize, px: [u8; 3]) -> RasterImage {
        RasterImage {
            width,
            height,
            channels: 3,
            data: px.repeat(width * height),
        }
    }

    #[test]
    fn grayscale_examples() {
        assert_eq!(to_grayscale(&rgb(1, 1, [255, 255, 255])).unwrap().pixels(), &[255]);
        // 0.299 * 255 = 76.245
        assert_eq!(to_grayscale(&rgb(1, 1, [255, 0, 0])).unwrap().pixels(), &[76]);
        let gray = RasterImage {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![1, 2, 3, 4],
        };
        assert_eq!(to_grayscale(&gray).unwrap().pixels(), &[1, 2, 3, 4]);
        let empty = RasterImage {
            width: 0,
            height: 3,
            channels: 1,
            data: vec![],
        };
        assert!(to_grayscale(&empty).is_err());
        let transparent = RasterImage {
            width: 1,
            height: 1,
            channels: 4,
            data: vec![0, 0, 0, 0],
        };
        assert_eq!(to_grayscale(&transparent).unwrap().pixels(), &[255]);
    }

    #[test]
    fn padding_places_content_symmetrically() {
        // 100 rows x 80 cols of ink
        let img = GrayImage::filled(80, 100, 0);
        let out = standardize(&img);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let inside = (14..114).contains(&y) && (24..104).contains(&x);
                assert_eq!(out.get(x, y), if inside { 0 } else { 255 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn odd_padding_goes_bottom_right() {
        let out = standardize(&GrayImage::filled(1, 1, 0));
        assert_eq!(out.get(63, 63), 0);
        assert_eq!(out.pixels().iter().filter(|&&p| p == 0).count(), 1);
    }

    #[test]
    fn full_size_is_identity() {
        let img = GrayImage::from_fn(SIDE, SIDE, |x, y| ((x * 7 + y * 13) % 256) as u8);
        assert_eq!(standardize(&img), img);
    }

    #[test]
    fn normalization_examples() {
        let mut img = GrayImage::filled(SIDE, SIDE, 255);
        img.set(0, 0, 0);
        img.set(1, 0, 128);
        let m = normalize_and_expand(&img).unwrap();
        for c in 0..3 {
            assert_eq!(m.channel(c)[0], 0.0);
            assert_eq!(m.channel(c)[1], 128.0 / 255.0);
            assert_eq!(m.channel(c)[2], 1.0);
        }
        assert!(normalize_and_expand(&GrayImage::filled(4, 4, 0)).is_err());
    }
}
