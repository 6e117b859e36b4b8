//! Irregular stroke masks, operator masks and mask-ratio buckets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::DynamicImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decode, decode_bytes, Image};
use crate::error::{Error, Result};

/// Binary `H×W` map, 1 marks a missing pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![1; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Argument(format!("{} mask bits for {height}x{width}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Argument("mask bits must be 0 or 1".into()));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, hole: bool) {
        self.bits[row * self.width + col] = hole as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Mask values as `f32` (1.0 = hole).
    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Nearest-neighbour resampling, which keeps the mask binary.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Mask> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(format!("mask size {out_h}x{out_w} must be positive")));
        }
        if (out_h, out_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let mut out = Mask::zeros(out_h, out_w);
        for r in 0..out_h {
            let sr = ((r as f64 + 0.5) * self.height as f64 / out_h as f64) as usize;
            for c in 0..out_w {
                let sc = ((c as f64 + 0.5) * self.width as f64 / out_w as f64) as usize;
                out.bits[r * out_w + c] = self.bits[sr.min(self.height - 1) * self.width + sc.min(self.width - 1)];
            }
        }
        Ok(out)
    }
}

/// Fraction of hole pixels.
pub fn mask_ratio(m: &Mask) -> f64 {
    if m.bits.is_empty() {
        return 0.0;
    }
    m.count() as f64 / m.bits.len() as f64
}

/// Mask-ratio bucket with half-open ranges `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    B0_20,
    B20_40,
    B40_60,
    Other,
}

impl Bucket {
    /// Reporting order.
    pub const RANGED: [Bucket; 3] = [Bucket::B0_20, Bucket::B20_40, Bucket::B40_60];

    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            Bucket::B0_20 => Some((0.0, 0.2)),
            Bucket::B20_40 => Some((0.2, 0.4)),
            Bucket::B40_60 => Some((0.4, 0.6)),
            Bucket::Other => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::B0_20 => "0-20%",
            Bucket::B20_40 => "20-40%",
            Bucket::B40_60 => "40-60%",
            Bucket::Other => "other",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_end_matches('%') {
            "0-20" => Ok(Bucket::B0_20),
            "20-40" => Ok(Bucket::B20_40),
            "40-60" => Ok(Bucket::B40_60),
            other => Err(Error::Argument(format!("unknown bucket {other:?} (use 0-20, 20-40 or 40-60)"))),
        }
    }
}

pub fn bucket(ratio: f64) -> Result<Bucket> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0,1]")));
    }
    Ok(Bucket::RANGED
        .into_iter()
        .find(|b| b.bounds().is_some_and(|(lo, hi)| ratio > lo && ratio <= hi))
        .unwrap_or(Bucket::Other))
}

/// Parameters of the random stroke generator. Lengths and widths are in
/// pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub max_vertices: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub min_length: f64,
    pub max_length: f64,
    pub bucket: Option<Bucket>,
    pub max_attempts: usize,
}

impl MaskSpec {
    /// Stroke sizes proportional to `side`.
    pub fn for_side(side: usize) -> Self {
        let s = side as f64;
        MaskSpec {
            min_strokes: 1,
            max_strokes: 6,
            max_vertices: 8,
            min_width: (s / 32.0).max(1.0),
            max_width: (s / 10.0).max(2.0),
            min_length: s / 16.0,
            max_length: s / 4.0,
            bucket: None,
            max_attempts: 200,
        }
    }

    pub fn with_bucket(mut self, b: Option<Bucket>) -> Self {
        self.bucket = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("mask spec: {m}")));
        if self.min_strokes > self.max_strokes {
            return bad("min_strokes > max_strokes");
        }
        if self.max_vertices == 0 {
            return bad("max_vertices must be positive");
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width) {
            return bad("width range must be positive and ordered");
        }
        if !(self.min_length >= 0.0 && self.min_length <= self.max_length) {
            return bad("length range must be nonnegative and ordered");
        }
        if self.bucket == Some(Bucket::Other) {
            return bad("target bucket must be a ranged bucket");
        }
        if self.bucket.is_some() && (self.max_attempts == 0 || self.max_strokes == 0) {
            return bad("a target bucket needs strokes and attempts");
        }
        Ok(())
    }
}

fn draw_segment(m: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = (m.height as f64, m.width as f64);
    let r0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let r1 = (a.1.max(b.1) + radius).ceil().min(h - 1.0).max(0.0) as usize;
    let c0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let c1 = (a.0.max(b.0) + radius).ceil().min(w - 1.0).max(0.0) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= radius * radius {
                m.bits[r * m.width + c] = 1;
            }
        }
    }
}

fn draw_stroke<R: Rng + ?Sized>(rng: &mut R, spec: &MaskSpec, m: &mut Mask) {
    let side = m.width.max(m.height) as f64;
    let mut p = (rng.random_range(0.0..m.width as f64), rng.random_range(0.0..m.height as f64));
    let vertices = rng.random_range(1..=spec.max_vertices);
    let radius = rng.random_range(spec.min_width..=spec.max_width) / 2.0;
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..vertices {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(spec.min_length..=spec.max_length);
        let q = (
            (p.0 + len * angle.cos()).clamp(-0.1 * side, 1.1 * side),
            (p.1 + len * angle.sin()).clamp(-0.1 * side, 1.1 * side),
        );
        draw_segment(m, p, q, radius);
        p = q;
    }
}

/// Draws random thick polylines on a `side×side` canvas. With a target
/// bucket, strokes are added until the ratio clears the bucket's lower
/// bound and the canvas is redrawn if it overshoots the upper bound.
pub fn generate_irregular_mask<R: Rng + ?Sized>(rng: &mut R, spec: &MaskSpec, side: usize) -> Result<Mask> {
    spec.validate()?;
    if side == 0 {
        return Err(Error::Argument("mask side must be positive".into()));
    }
    let Some((lo, hi)) = spec.bucket.and_then(Bucket::bounds) else {
        let mut m = Mask::zeros(side, side);
        for _ in 0..rng.random_range(spec.min_strokes..=spec.max_strokes) {
            draw_stroke(rng, spec, &mut m);
        }
        return Ok(m);
    };
    let stroke_cap = spec.max_strokes.max(1) * 16;
    for _ in 0..spec.max_attempts {
        let mut m = Mask::zeros(side, side);
        let mut strokes = 0;
        while mask_ratio(&m) <= lo && strokes < stroke_cap {
            draw_stroke(rng, spec, &mut m);
            strokes += 1;
        }
        let r = mask_ratio(&m);
        if r > lo && r <= hi {
            return Ok(m);
        }
    }
    Err(Error::Generation(format!(
        "no mask in ({lo}, {hi}] after {} attempts at side {side}",
        spec.max_attempts
    )))
}

/// `I ⊙ (1 − M)`: hole pixels become 0.
pub fn apply_mask(img: &Image, m: &Mask) -> Result<Image> {
    check_shapes(img, m)?;
    let c = img.channels();
    let pixels = img
        .pixels()
        .chunks(c)
        .zip(&m.bits)
        .flat_map(|(px, &b)| px.iter().map(move |&v| if b == 1 { 0.0 } else { v }))
        .collect();
    Image::new(img.height(), img.width(), c, pixels)
}

/// `input ⊙ (1 − M) + raw ⊙ M`: known pixels pass through untouched.
pub fn composite_output(raw: &Image, input: &Image, m: &Mask) -> Result<Image> {
    check_shapes(input, m)?;
    if (raw.height(), raw.width(), raw.channels()) != (input.height(), input.width(), input.channels()) {
        return Err(Error::Argument(format!(
            "raw {}x{}x{} vs input {}x{}x{}",
            raw.height(),
            raw.width(),
            raw.channels(),
            input.height(),
            input.width(),
            input.channels()
        )));
    }
    let c = input.channels();
    let pixels = input
        .pixels()
        .chunks(c)
        .zip(raw.pixels().chunks(c))
        .zip(&m.bits)
        .flat_map(|((i, r), &b)| if b == 1 { r.to_vec() } else { i.to_vec() })
        .collect();
    Image::new(input.height(), input.width(), c, pixels)
}

fn check_shapes(img: &Image, m: &Mask) -> Result<()> {
    if (img.height(), img.width()) != (m.height, m.width) {
        return Err(Error::Argument(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            m.height,
            m.width
        )));
    }
    Ok(())
}

fn mask_from_dynamic(img: DynamicImage, context: &str) -> Result<Mask> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| (v > 127) as u8).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| (v > 32767) as u8).collect(),
        other => {
            return Err(Error::format(
                context,
                format!("mask must be single-channel, found {:?}", other.color()),
            ))
        }
    };
    Mask::from_bits(h, w, bits)
}

/// Loads an operator mask: single-channel PNG, values above 127 are holes.
pub fn load_segmentation_mask(path: &Path) -> Result<Mask> {
    mask_from_dynamic(decode(path)?, &path.display().to_string())
}

pub fn load_segmentation_mask_bytes(bytes: &[u8], context: &str) -> Result<Mask> {
    mask_from_dynamic(decode_bytes(bytes, context)?, context)
}

/// Single-channel PNG, 255 for holes and 0 elsewhere.
pub fn encode_mask_png(m: &Mask) -> Result<Vec<u8>> {
    let raw = m.bits.iter().map(|&b| b * 255).collect();
    let buf = image::GrayImage::from_raw(m.width as u32, m.height as u32, raw).expect("buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format("png encoder", e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_mask_png(m: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask_png(m)?).map_err(|e| Error::io(path, e))
}
