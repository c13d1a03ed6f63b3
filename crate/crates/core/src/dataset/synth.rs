//! Seeded procedural corpus: overlay, natural-text and no-text images.
//!
//! Overlay text is axis-aligned, uniformly scaled and left-aligned at a fixed
//! margin. Natural text sits inside a rendered carrier object, perspective
//! warped and alpha blended. Every image gets a `.tokens` sidecar with the
//! ground-truth OCR boxes.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use image::{ImageEncoder, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    io_err, sidecar_path, write_sidecar, Category, DatasetError, ImageSample, Manifest,
    SidecarToken, Split,
};

/// Glyph cell edge in pixels at scale 1.
pub const GLYPH_SIZE: u32 = 8;

const WORDS: &[&str] = &[
    "SALE", "50% OFF", "BUY NOW", "NEW", "OPEN", "EXIT", "CAFE", "HOTEL", "NEWS", "LIVE", "FREE",
    "STOP", "TODAY", "SHOP", "MENU", "BAR", "PARK", "CLICK", "WIN", "HD", "NETFLIX", "TAXI",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayStyle {
    pub font_scale: u32,
    /// Draw a solid caption band behind the overlay lines.
    pub solid_fill: bool,
    /// Distance in pixels from the left edge (and from the top or bottom edge).
    pub margin: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            font_scale: 1,
            solid_fill: false,
            margin: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaturalStyle {
    /// Corner jitter of the perspective warp, as a fraction of the text height.
    pub warp: f64,
    /// Opacity of the text blended onto its carrier.
    pub alpha: f64,
}

impl Default for NaturalStyle {
    fn default() -> Self {
        NaturalStyle {
            warp: 0.35,
            alpha: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Train images per category.
    pub count_per_category: usize,
    /// Eval images per category, generated with disjoint ids.
    #[serde(default)]
    pub eval_count_per_category: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    #[serde(default)]
    pub overlay_style: OverlayStyle,
    #[serde(default)]
    pub natural_style: NaturalStyle,
}

fn default_image_size() -> (u32, u32) {
    (128, 128)
}

impl SyntheticSpec {
    pub fn new(seed: u64, count_per_category: usize) -> Self {
        SyntheticSpec {
            seed,
            count_per_category,
            eval_count_per_category: 0,
            image_size: default_image_size(),
            overlay_style: OverlayStyle::default(),
            natural_style: NaturalStyle::default(),
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.into()));
        let (w, h) = self.image_size;
        if self.count_per_category == 0 {
            return bad("count_per_category must be at least 1");
        }
        if w < 48 || h < 48 {
            return bad("image_size must be at least 48x48");
        }
        let s = self.overlay_style.font_scale;
        if s == 0 {
            return bad("overlay font_scale must be at least 1");
        }
        let m = self.overlay_style.margin;
        if 2 * m + GLYPH_SIZE * s > w || 2 * m + 3 * (GLYPH_SIZE + 2) * s > h {
            return bad("overlay margin and font_scale leave no room for text");
        }
        let ns = &self.natural_style;
        if !(0.0..=1.0).contains(&ns.warp) {
            return bad("natural warp must lie in [0, 1]");
        }
        if !(ns.alpha > 0.0 && ns.alpha <= 1.0) {
            return bad("natural alpha must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Renders `text` with the built-in 8x8 font. Returns (width, height, mask).
pub fn render_text_line(text: &str, scale: u32) -> (u32, u32, Vec<bool>) {
    let n = text.chars().count() as u32;
    let w = n * GLYPH_SIZE * scale;
    let h = GLYPH_SIZE * scale;
    let mut mask = vec![false; (w * h) as usize];
    for (ci, ch) in text.chars().enumerate() {
        let code = if (ch as u32) < 128 { ch as usize } else { '?' as usize };
        let glyph = BASIC_LEGACY[code];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH_SIZE {
                if bits >> col & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let x = ci as u32 * GLYPH_SIZE * scale + col * scale + dx;
                            let y = row as u32 * scale + dy;
                            mask[(y * w + x) as usize] = true;
                        }
                    }
                }
            }
        }
    }
    (w, h, mask)
}

struct Canvas {
    w: u32,
    h: u32,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: u32, y: u32, color: [f64; 3], alpha: f64) {
        if x < self.w && y < self.h {
            let p = &mut self.px[(y * self.w + x) as usize];
            for c in 0..3 {
                p[c] = alpha * color[c] + (1.0 - alpha) * p[c];
            }
        }
    }

    fn fill_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, color: [f64; 3], alpha: f64) {
        for y in y0..(y0 + h).min(self.h) {
            for x in x0..(x0 + w).min(self.w) {
                self.blend(x, y, color, alpha);
            }
        }
    }

    fn to_png(&self) -> Result<Vec<u8>, image::ImageError> {
        let mut img = RgbImage::new(self.w, self.h);
        for (i, p) in self.px.iter().enumerate() {
            let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(i as u32 % self.w, i as u32 / self.w, image::Rgb(q));
        }
        let mut out = Cursor::new(Vec::new());
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            img.as_raw(),
            self.w,
            self.h,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out.into_inner())
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Value noise over a coarse grid plus a few translucent shapes.
fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Canvas {
    const GRID: usize = 6;
    let base = random_color(rng, 0.2, 0.8);
    let noise: Vec<[f64; 3]> = (0..GRID * GRID)
        .map(|_| random_color(rng, -0.2, 0.2))
        .collect();
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let gy = y as f64 / h as f64 * (GRID - 1) as f64;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        let y1 = (y0 + 1).min(GRID - 1);
        for x in 0..w {
            let gx = x as f64 / w as f64 * (GRID - 1) as f64;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let x1 = (x0 + 1).min(GRID - 1);
            let mut p = base;
            for c in 0..3 {
                let top = noise[y0 * GRID + x0][c] * (1.0 - fx) + noise[y0 * GRID + x1][c] * fx;
                let bot = noise[y1 * GRID + x0][c] * (1.0 - fx) + noise[y1 * GRID + x1][c] * fx;
                p[c] += top * (1.0 - fy) + bot * fy;
            }
            px.push(p);
        }
    }
    let mut canvas = Canvas { w, h, px };
    for _ in 0..rng.gen_range(2..=4) {
        let color = random_color(rng, 0.0, 1.0);
        let alpha = rng.gen_range(0.3..0.7);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(4.0..w as f64 / 4.0);
        let ry = rng.gen_range(4.0..h as f64 / 4.0);
        let ellipse = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    canvas.blend(x, y, color, alpha);
                }
            }
        }
    }
    canvas
}

/// Words joined by spaces, cut to at most `max_chars`.
fn phrase(rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    let mut text = String::new();
    for _ in 0..rng.gen_range(1..=2) {
        let word = WORDS[rng.gen_range(0..WORDS.len())];
        let candidate = if text.is_empty() {
            word.to_string()
        } else {
            format!("{text} {word}")
        };
        if candidate.chars().count() > max_chars {
            break;
        }
        text = candidate;
    }
    if text.is_empty() {
        text = WORDS[rng.gen_range(0..WORDS.len())]
            .chars()
            .take(max_chars.max(1))
            .collect();
    }
    text
}

fn draw_overlay(
    rng: &mut ChaCha8Rng,
    canvas: &mut Canvas,
    style: &OverlayStyle,
) -> Vec<SidecarToken> {
    const PALETTE: [[f64; 3]; 5] = [
        [1.0, 1.0, 1.0],
        [1.0, 0.9, 0.1],
        [0.05, 0.05, 0.05],
        [0.9, 0.1, 0.1],
        [0.1, 0.9, 0.9],
    ];
    let s = style.font_scale;
    let m = style.margin;
    let line_h = GLYPH_SIZE * s;
    let gap = 2 * s;
    let max_chars = ((canvas.w - 2 * m) / (GLYPH_SIZE * s)) as usize;
    let lines: Vec<String> = (0..rng.gen_range(1..=3))
        .map(|_| phrase(rng, max_chars))
        .collect();
    let block_h = lines.len() as u32 * line_h + (lines.len() as u32 - 1) * gap;
    let top = rng.gen_bool(0.5);
    let y0 = if top { m } else { canvas.h - m - block_h };
    let color = PALETTE[rng.gen_range(0..PALETTE.len())];
    if style.solid_fill {
        let band = if luminance(color) > 0.5 {
            [0.0, 0.0, 0.0]
        } else {
            [1.0, 1.0, 1.0]
        };
        let pad = gap.min(m);
        canvas.fill_rect(0, y0 - pad, canvas.w, block_h + 2 * pad, band, 0.85);
    }
    let mut tokens = Vec::with_capacity(lines.len());
    for (i, text) in lines.into_iter().enumerate() {
        let y = y0 + i as u32 * (line_h + gap);
        let (w, h, mask) = render_text_line(&text, s);
        for ty in 0..h {
            for tx in 0..w {
                if mask[(ty * w + tx) as usize] {
                    canvas.blend(m + tx, y + ty, color, 1.0);
                }
            }
        }
        tokens.push(SidecarToken {
            text,
            x: m,
            y,
            w,
            h,
        });
    }
    tokens
}

struct Region {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    color: [f64; 3],
}

/// A bordered carrier object (sign, screen, packaging).
fn draw_carrier(
    rng: &mut ChaCha8Rng,
    canvas: &mut Canvas,
    min_w: u32,
    min_h: u32,
) -> Region {
    let (cw, ch) = (canvas.w, canvas.h);
    let lo_w = min_w.max(cw * 35 / 100).min(cw - 4);
    let lo_h = min_h.max(ch * 30 / 100).min(ch - 4);
    let w = rng.gen_range(lo_w..=(cw * 70 / 100).max(lo_w));
    let h = rng.gen_range(lo_h..=(ch * 55 / 100).max(lo_h));
    let x = rng.gen_range(2..=cw - w - 2);
    let y = rng.gen_range(2..=ch - h - 2);
    let color = random_color(rng, 0.05, 0.95);
    let border = color.map(|c| c * 0.4);
    canvas.fill_rect(x, y, w, h, border, 1.0);
    canvas.fill_rect(x + 2, y + 2, w - 4, h - 4, color, 1.0);
    Region { x, y, w, h, color }
}

/// Projective map taking `from[i]` to `to[i]` for four point pairs.
fn homography(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in from.iter().zip(&to).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for k in col..9 {
            a[col][k] /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h[8] = 1.0;
    h
}

fn apply(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let d = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d)
}

fn draw_natural(
    rng: &mut ChaCha8Rng,
    canvas: &mut Canvas,
    style: &NaturalStyle,
) -> Vec<SidecarToken> {
    let max_chars = ((canvas.w * 60 / 100) / GLYPH_SIZE) as usize;
    let word = WORDS[rng.gen_range(0..WORDS.len())];
    let text: String = word.chars().take(max_chars.max(1)).collect();
    let n = text.chars().count() as u32;
    let scale = if n * GLYPH_SIZE * 2 + 24 <= canvas.w * 70 / 100 && rng.gen_bool(0.5) {
        2
    } else {
        1
    };
    let (pw, ph, mask) = render_text_line(&text, scale);
    let jitter = style.warp * ph as f64;
    let room = 2 * jitter.ceil() as u32 + 12;
    let region = draw_carrier(rng, canvas, pw + room, ph + room);
    let text_color = if luminance(region.color) > 0.5 {
        [0.05, 0.05, 0.05]
    } else {
        [0.95, 0.95, 0.95]
    };

    let cx = region.x as f64 + region.w as f64 / 2.0;
    let cy = region.y as f64 + region.h as f64 / 2.0;
    let (hw, hh) = (pw as f64 / 2.0, ph as f64 / 2.0);
    let mut j = || {
        if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        }
    };
    let quad = [
        (cx - hw + j(), cy - hh + j()),
        (cx + hw + j(), cy - hh + j()),
        (cx + hw + j(), cy + hh + j()),
        (cx - hw + j(), cy + hh + j()),
    ];
    let src = [(0.0, 0.0), (pw as f64, 0.0), (pw as f64, ph as f64), (0.0, ph as f64)];
    let to_src = homography(quad, src);

    let min_x = quad.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = quad.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = quad.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = quad.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x.floor().max(0.0) as u32).min(canvas.w - 1);
    let y0 = (min_y.floor().max(0.0) as u32).min(canvas.h - 1);
    let x1 = (max_x.ceil().max(0.0) as u32).clamp(x0 + 1, canvas.w);
    let y1 = (max_y.ceil().max(0.0) as u32).clamp(y0 + 1, canvas.h);
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = apply(&to_src, x as f64 + 0.5, y as f64 + 0.5);
            if u >= 0.0 && v >= 0.0 && u < pw as f64 && v < ph as f64 {
                let (ui, vi) = (u as u32, v as u32);
                if mask[(vi * pw + ui) as usize] {
                    canvas.blend(x, y, text_color, style.alpha);
                }
            }
        }
    }
    vec![SidecarToken {
        text,
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: Split, category: Category, index: usize) -> u64 {
    [split as u64, category as u64, index as u64]
        .iter()
        .fold(splitmix64(seed), |acc, &v| splitmix64(acc ^ v))
}

struct Job {
    split: Split,
    category: Category,
    index: usize,
}

/// Writes the corpus described by `spec` into `out_dir` and returns its manifest.
///
/// Order: train before eval, categories in enum order, then index. Image
/// bytes depend only on `spec`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut jobs = Vec::new();
    for (split, count) in [
        (Split::Train, spec.count_per_category),
        (Split::Eval, spec.eval_count_per_category),
    ] {
        for category in Category::ALL {
            for index in 0..count {
                jobs.push(Job {
                    split,
                    category,
                    index,
                });
            }
        }
    }
    let samples: Result<Vec<ImageSample>, DatasetError> = jobs
        .par_iter()
        .map(|job| generate_one(spec, job, out_dir))
        .collect();
    Ok(Manifest::new(samples?))
}

fn generate_one(spec: &SyntheticSpec, job: &Job, out_dir: &Path) -> Result<ImageSample, DatasetError> {
    let (w, h) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, job.split, job.category, job.index));
    let mut canvas = background(&mut rng, w, h);
    let tokens = match job.category {
        Category::Overlay => draw_overlay(&mut rng, &mut canvas, &spec.overlay_style),
        Category::Natural => draw_natural(&mut rng, &mut canvas, &spec.natural_style),
        Category::None => {
            if rng.gen_bool(0.5) {
                draw_carrier(&mut rng, &mut canvas, 24, 16);
            }
            Vec::new()
        }
    };
    let id = format!("{}_{}_{:04}", job.split, job.category, job.index);
    let image_path = out_dir.join(format!("{id}.png"));
    let png = canvas.to_png().map_err(|e| DatasetError::Encode {
        path: image_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&image_path, png).map_err(io_err(&image_path))?;
    write_sidecar(&sidecar_path(&image_path), &tokens)?;
    Ok(ImageSample {
        id,
        image_path,
        category: job.category,
        split: job.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_maps_corners() {
        let from = [(10.0, 12.0), (50.0, 9.0), (52.0, 30.0), (8.0, 28.0)];
        let to = [(0.0, 0.0), (40.0, 0.0), (40.0, 16.0), (0.0, 16.0)];
        let h = homography(from, to);
        for (f, t) in from.iter().zip(&to) {
            let (u, v) = apply(&h, f.0, f.1);
            assert!((u - t.0).abs() < 1e-9 && (v - t.1).abs() < 1e-9);
        }
    }

    #[test]
    fn render_text_dimensions() {
        let (w, h, mask) = render_text_line("AB", 2);
        assert_eq!((w, h), (32, 16));
        assert!(mask.iter().any(|&b| b));
        let (_, _, blank) = render_text_line(" ", 1);
        assert!(blank.iter().all(|&b| !b));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SyntheticSpec::new(1, 0);
        assert!(spec.validate().is_err());
        spec.count_per_category = 1;
        assert!(spec.validate().is_ok());
        spec.natural_style.alpha = 0.0;
        assert!(spec.validate().is_err());
        spec.natural_style.alpha = 0.5;
        spec.overlay_style.margin = 60;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_file_defaults() {
        let spec: SyntheticSpec = serde_json::from_str(r#"{"seed":3,"count_per_category":2}"#).unwrap();
        assert_eq!(spec, SyntheticSpec::new(3, 2));
        assert!(serde_json::from_str::<SyntheticSpec>(r#"{"seed":3,"count_per_category":2,"colour":1}"#).is_err());
    }

    #[test]
    fn sample_seeds_differ() {
        let a = sample_seed(7, Split::Train, Category::Overlay, 0);
        let b = sample_seed(7, Split::Train, Category::Overlay, 1);
        let c = sample_seed(7, Split::Eval, Category::Overlay, 0);
        assert!(a != b && a != c && b != c);
    }
}
