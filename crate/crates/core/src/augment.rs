//! The five stochastic transforms and the 30%-per-transform pipeline.
//!
//! Everything runs on integer [0, 255] images before normalisation. Each
//! transform draws from an explicit [`RandomSource`], so a fixed seed yields
//! bit-identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub apply_probability: f64,
    pub rotation_degrees: f64,
    pub blur_radius: f64,
    pub noise_std_fraction: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub elastic_pad: usize,
    pub skew_magnitude_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            apply_probability: 0.30,
            rotation_degrees: 5.0,
            blur_radius: 0.5,
            noise_std_fraction: 0.40,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            elastic_pad: 10,
            skew_magnitude_fraction: 0.10,
        }
    }
}

impl AugmentConfig {
    /// Every magnitude set to zero; each transform becomes an identity.
    pub fn zero_magnitude() -> Self {
        Self {
            apply_probability: 1.0,
            rotation_degrees: 0.0,
            blur_radius: 0.0,
            noise_std_fraction: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
            elastic_pad: 10,
            skew_magnitude_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidConfig(format!(
                "apply_probability must lie in [0, 1], got {}",
                self.apply_probability
            )));
        }
        let magnitudes = [
            ("rotation_degrees", self.rotation_degrees),
            ("blur_radius", self.blur_radius),
            ("noise_std_fraction", self.noise_std_fraction),
            ("elastic_alpha", self.elastic_alpha),
            ("elastic_sigma", self.elastic_sigma),
            ("skew_magnitude_fraction", self.skew_magnitude_fraction),
        ];
        for (name, v) in magnitudes {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Seeded generator threaded explicitly through every transform.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in [lo, hi); collapses to `lo` when the bounds coincide.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Names in pipeline order.
pub const TRANSFORMS: [&str; 5] = ["elastic", "rotate", "blur", "noise", "skew"];

/// Reflects an out-of-range index back into `[0, len)` without repeating the edge.
fn mirror_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Normalised 1-D Gaussian kernel truncated at three standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable convolution of a float field with mirror boundaries.
fn convolve_separable(field: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        let row = &field[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[mirror_index(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[mirror_index(y as isize + k as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample with coordinates clamped to the image.
fn sample_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| img.get(xx, yy) as f64;
    let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
    let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
    top + (bottom - top) * fy
}

fn require_size(img: &GrayImage, min: usize, what: &str) -> Result<()> {
    if img.width() < min || img.height() < min {
        return Err(Error::InvalidImage(format!(
            "{what} needs at least {min}x{min}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Smooth random displacement: mirror pad, Gaussian-filtered uniform noise, remap, crop.
pub fn elastic_deform(img: &GrayImage, rng: &mut RandomSource, cfg: &AugmentConfig) -> Result<GrayImage> {
    require_size(img, 3, "elastic deformation")?;
    let pad = cfg.elastic_pad;
    let (pw, ph) = (img.width() + 2 * pad, img.height() + 2 * pad);
    let padded = GrayImage::from_fn(pw, ph, |x, y| {
        img.get(
            mirror_index(x as isize - pad as isize, img.width()),
            mirror_index(y as isize - pad as isize, img.height()),
        )
    });
    let mut field = || -> Vec<f64> { (0..pw * ph).map(|_| rng.uniform(-1.0, 1.0)).collect() };
    let raw_dx = field();
    let raw_dy = field();
    let kernel = gaussian_kernel(cfg.elastic_sigma);
    let dx = convolve_separable(&raw_dx, pw, ph, &kernel);
    let dy = convolve_separable(&raw_dy, pw, ph, &kernel);
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (px, py) = (x + pad, y + pad);
        let i = py * pw + px;
        let sx = px as f64 + cfg.elastic_alpha * dx[i];
        let sy = py as f64 + cfg.elastic_alpha * dy[i];
        to_u8(sample_clamped(&padded, sx, sy))
    }))
}

/// Rotation about the image centre with nearest-neighbour sampling and white fill.
pub fn random_rotate(img: &GrayImage, rng: &mut RandomSource, cfg: &AugmentConfig) -> GrayImage {
    let deg = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees);
    rotate(img, deg)
}

/// Deterministic rotation by `degrees` (counter-clockwise in image coordinates).
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // Inverse map: rotate the output coordinate back by -θ.
        let sx = (c * dx - s * dy + cx).round();
        let sy = (s * dx + c * dy + cy).round();
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            255
        } else {
            img.get(sx as usize, sy as usize)
        }
    })
}

/// Gaussian blur with σ = `blur_radius`, kernel truncated at 3σ.
pub fn gaussian_blur(img: &GrayImage, cfg: &AugmentConfig) -> GrayImage {
    if cfg.blur_radius <= 0.0 {
        return img.clone();
    }
    let field: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let out = convolve_separable(&field, img.width(), img.height(), &gaussian_kernel(cfg.blur_radius));
    GrayImage::new(img.width(), img.height(), out.into_iter().map(to_u8).collect()).expect("same shape")
}

/// Additive N(0, (fraction·255)²) noise, clipped and rounded.
pub fn gaussian_noise(img: &GrayImage, rng: &mut RandomSource, cfg: &AugmentConfig) -> GrayImage {
    if cfg.noise_std_fraction <= 0.0 {
        return img.clone();
    }
    let noise = noise_field(rng, img.pixels().len(), cfg.noise_std_fraction * 255.0);
    let pixels = img
        .pixels()
        .iter()
        .zip(noise)
        .map(|(&p, n)| to_u8(p as f64 + n))
        .collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("same shape")
}

/// The raw (unclipped) noise values `gaussian_noise` adds.
pub fn noise_field(rng: &mut RandomSource, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.standard_normal()).collect()
}

/// Planar projective map `(x, y) -> ((h0 x + h1 y + h2) / w, (h3 x + h4 y + h5) / w)`
/// with `w = h6 x + h7 y + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 8]);

impl Homography {
    /// Solves the 8×8 system taking each `src[i]` to `dst[i]`.
    pub fn from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        for col in 0..8 {
            let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            for row in 0..8 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut h = [0.0; 8];
        for i in 0..8 {
            h[i] = a[i][8] / a[i][i];
        }
        Some(Self(h))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + 1.0;
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }
}

/// Random four-corner perspective warp, re-centred on the warped quad, white fill.
pub fn perspective_skew(img: &GrayImage, rng: &mut RandomSource, cfg: &AugmentConfig) -> Result<GrayImage> {
    require_size(img, 8, "perspective skew")?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (mx, my) = (cfg.skew_magnitude_fraction * w, cfg.skew_magnitude_fraction * h);
    let src = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    let mut dst = src;
    for corner in dst.iter_mut() {
        corner.0 += rng.uniform(-mx, mx);
        corner.1 += rng.uniform(-my, my);
    }
    if cfg.skew_magnitude_fraction == 0.0 {
        return Ok(img.clone());
    }
    let inverse =
        Homography::from_points(&dst, &src).ok_or_else(|| Error::InvalidImage("degenerate perspective warp".into()))?;
    // Centre crop: shift so the warped quad's bounding box centre lands on the image centre.
    let (min_x, max_x) = dst
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = dst
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let off_x = (min_x + max_x) / 2.0 - (w - 1.0) / 2.0;
    let off_y = (min_y + max_y) / 2.0 - (h - 1.0) / 2.0;
    const TOL: f64 = 1e-6;
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = inverse.apply(x as f64 + off_x, y as f64 + off_y);
        if sx < -TOL || sy < -TOL || sx > w - 1.0 + TOL || sy > h - 1.0 + TOL {
            255
        } else {
            to_u8(sample_clamped(img, sx, sy))
        }
    }))
}

/// Result of one pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: GrayImage,
    /// Which of [`TRANSFORMS`] fired, in order.
    pub applied: [bool; 5],
}

impl Augmented {
    pub fn applied_names(&self) -> Vec<&'static str> {
        TRANSFORMS
            .iter()
            .zip(self.applied)
            .filter_map(|(n, a)| a.then_some(*n))
            .collect()
    }
}

/// Draws the five apply/skip decisions first, then runs the selected transforms in order.
pub fn augment_pipeline(img: &GrayImage, rng: &mut RandomSource, cfg: &AugmentConfig) -> Result<Augmented> {
    let applied: [bool; 5] = std::array::from_fn(|_| rng.unit() < cfg.apply_probability);
    let mut out = img.clone();
    if applied[0] {
        out = elastic_deform(&out, rng, cfg)?;
    }
    if applied[1] {
        out = random_rotate(&out, rng, cfg);
    }
    if applied[2] {
        out = gaussian_blur(&out, cfg);
    }
    if applied[3] {
        out = gaussian_noise(&out, rng, cfg);
    }
    if applied[4] {
        out = perspective_skew(&out, rng, cfg)?;
    }
    Ok(Augmented { image: out, applied })
}
