//! Parametric pseudo-glyph corpus for tests and demos.
//!
//! Each letter gets a base stroke shape (one of seven) and zero to three
//! diacritic dots above or below; the positional form adds joining strokes to
//! the left edge (B), the right edge (E), both (M) or neither (I). Samples vary
//! in canvas size, offset, scale, stroke width and slant, and are cropped to
//! their ink with a small margin.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IoContext, Result};
use crate::imaging::GrayImage;
use crate::labels::{LetterClass, Pair, PositionClass};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub letters: Vec<LetterClass>,
    pub samples_per_pair: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Four letters (two joining, two non-joining) giving 12 pairs.
    pub fn small(samples_per_pair: usize, seed: u64) -> Self {
        let letters = ["Alef", "Baa", "Jeem", "Dal"]
            .iter()
            .map(|n| LetterClass::from_name(n).expect("known letter"))
            .collect();
        Self {
            letters,
            samples_per_pair,
            seed,
        }
    }

    /// Pairs in label order; non-joining letters only have E and I forms.
    pub fn pairs(&self) -> Vec<Pair> {
        let mut letters = self.letters.clone();
        letters.sort();
        letters.dedup();
        letters
            .into_iter()
            .flat_map(|l| {
                PositionClass::ALL
                    .into_iter()
                    .filter(move |p| l.is_connecting() || matches!(p, PositionClass::End | PositionClass::Isolated))
                    .map(move |p| (l, p))
            })
            .collect()
    }
}

struct Canvas {
    w: usize,
    h: usize,
    ink: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            ink: vec![0.0; w * h],
        }
    }

    /// Anti-aliased thick segment.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        let (x0, x1) = (a.0.min(b.0) - radius - 1.0, a.0.max(b.0) + radius + 1.0);
        let (y0, y1) = (a.1.min(b.1) - radius - 1.0, a.1.max(b.1) + radius + 1.0);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in (y0.floor().max(0.0) as usize)..=(y1.ceil().min(self.h as f64 - 1.0).max(0.0) as usize) {
            for x in (x0.floor().max(0.0) as usize)..=(x1.ceil().min(self.w as f64 - 1.0).max(0.0) as usize) {
                let (px, py) = (x as f64, y as f64);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut self.ink[y * self.w + x];
                *v = v.max(cover);
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], radius: f64) {
        for w in pts.windows(2) {
            self.segment(w[0], w[1], radius);
        }
    }

    fn dot(&mut self, c: (f64, f64), radius: f64) {
        self.segment(c, c, radius);
    }

    /// Crops to the inked bounding box grown by `margin`, like a segmented letter scan.
    fn into_image(self, margin: usize) -> GrayImage {
        let inked = |x: usize, y: usize| self.ink[y * self.w + x] > 0.05;
        let (mut x0, mut y0, mut x1, mut y1) = (self.w, self.h, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if inked(x, y) {
                    (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                }
            }
        }
        if x0 > x1 {
            (x0, y0, x1, y1) = (0, 0, self.w - 1, self.h - 1);
        }
        let (x0, y0) = (x0.saturating_sub(margin), y0.saturating_sub(margin));
        let (x1, y1) = ((x1 + margin).min(self.w - 1), (y1 + margin).min(self.h - 1));
        GrayImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| {
            (255.0 * (1.0 - self.ink[(y + y0) * self.w + x + x0])).round() as u8
        })
    }
}

/// Renders one sample; the same `(pair, rng state)` always gives the same image.
pub fn render_glyph(letter: LetterClass, position: PositionClass, rng: &mut ChaCha8Rng) -> GrayImage {
    let w = rng.random_range(72..=152usize);
    let h = rng.random_range(72..=152usize);
    let mut c = Canvas::new(w, h);
    let s = 0.45 * w.min(h) as f64 * rng.random_range(0.85..1.1);
    let cx = w as f64 / 2.0 + rng.random_range(-0.06..0.06) * w as f64;
    let base = h as f64 * 0.62 + rng.random_range(-0.05..0.05) * h as f64;
    let r = rng.random_range(3.0..5.0) * (w.min(h) as f64 / 96.0);
    let slant = rng.random_range(-0.15..0.15);
    let pt = |u: f64, v: f64| (cx + s * (u + slant * v), base - s * v);

    let idx = letter.index();
    let n = 24;
    let shape: Vec<(f64, f64)> = match idx % 7 {
        // vertical bar
        0 => vec![pt(0.0, 0.0), pt(0.0, 1.0)],
        // open bowl
        1 => (0..=n)
            .map(|i| {
                let t = PI * i as f64 / n as f64;
                pt(0.5 * t.cos(), 0.3 - 0.3 * t.sin())
            })
            .collect(),
        // hook: horizontal stroke with a descending curl
        2 => {
            let mut v = vec![pt(0.45, 0.45), pt(-0.2, 0.45)];
            v.extend((0..=n).map(|i| {
                let t = 1.5 * PI * i as f64 / n as f64;
                pt(-0.2 + 0.3 * t.sin(), 0.15 + 0.3 * t.cos())
            }));
            v
        }
        // closed loop
        3 => (0..=n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                pt(0.25 * t.cos(), 0.3 + 0.25 * t.sin())
            })
            .collect(),
        // angle
        4 => vec![pt(-0.3, 0.6), pt(0.2, 0.0), pt(-0.35, 0.0)],
        // wave
        5 => (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                pt(-0.45 + 0.9 * t, 0.15 + 0.12 * (3.0 * PI * t).sin())
            })
            .collect(),
        // teeth
        _ => vec![
            pt(-0.4, 0.3),
            pt(-0.4, 0.0),
            pt(0.0, 0.0),
            pt(0.0, 0.3),
            pt(0.0, 0.0),
            pt(0.4, 0.0),
            pt(0.4, 0.3),
        ],
    };
    c.polyline(&shape, r);

    let dots = (idx / 7) % 4;
    let above = idx.is_multiple_of(2);
    for k in 0..dots {
        let u = (k as f64 - (dots as f64 - 1.0) / 2.0) * 0.22;
        let v = if above { 1.15 } else { -0.35 };
        c.dot(pt(u, v), r * 1.6);
    }

    let left = matches!(position, PositionClass::Beginning | PositionClass::Middle);
    let right = matches!(position, PositionClass::End | PositionClass::Middle);
    let (lo, hi) = shape
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let y = base;
    if left {
        c.segment((0.0, y), (lo, y), r);
    }
    if right {
        c.segment((hi, y), (w as f64 - 1.0, y), r);
    }
    let margin = rng.random_range(2..=8usize);
    c.into_image(margin)
}

/// Writes `<root>/<Letter>/<code>/s<NNN>.png` for every pair and returns the count.
pub fn write_corpus(root: &Path, cfg: &SyntheticConfig) -> Result<usize> {
    let mut written = 0;
    for (letter, position) in cfg.pairs() {
        let dir = root.join(letter.name()).join(position.code().to_string());
        fs::create_dir_all(&dir).at(&dir)?;
        let pair_seed = cfg.seed ^ ((letter.index() as u64) << 8 | position.index() as u64).wrapping_mul(0x9E37_79B9);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        for i in 0..cfg.samples_per_pair {
            render_glyph(letter, position, &mut rng).save_png(&dir.join(format!("s{i:03}.png")))?;
            written += 1;
        }
    }
    Ok(written)
}
