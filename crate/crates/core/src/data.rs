//! Images, landmark sets and corpus enumeration.

use std::fs;
use std::path::{Path, PathBuf};

use facefill_autodiff::Tensor;
use image::{DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of facial landmarks per face.
pub const NUM_LANDMARKS: usize = 68;

/// Row-major `H×W×C` intensities in `[0,1]`, `C ∈ {1,3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!("image size {height}x{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::format("image", format!("{channels} channels (expected 1 or 3)")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    /// Same image with three channels; grey values are replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image { channels: 3, pixels, ..*self }
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.iter().map(|&v| v as f64).collect();
        }
        self.pixels
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// `C×H×W` copy of the pixels.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = v;
            }
        }
        out
    }

    /// Builds an image from `C×H×W` values, clamping into `[0,1]`.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != channels * height * width {
            return Err(Error::Argument(format!("{} values for {channels}x{height}x{width}", chw.len())));
        }
        if let Some(v) = chw.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value {v}")));
        }
        let plane = height * width;
        let mut pixels = vec![0.0; chw.len()];
        for i in 0..plane {
            for ch in 0..channels {
                pixels[i * channels + ch] = chw[ch * plane + i].clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, channels, pixels)
    }
}

/// Stacks images into an `[N,C,H,W]` tensor. All images must share a shape.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Argument("empty image batch".into()));
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::Argument(format!(
                "batch mixes {h}x{w}x{c} with {}x{}x{}",
                img.height, img.width, img.channels
            )));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Splits an `[N,C,H,W]` tensor back into images.
pub fn unbatch_tensor(t: &Tensor<f32>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    (0..n)
        .map(|i| Image::from_chw(c, h, w, &t.data()[i * c * h * w..(i + 1) * c * h * w]))
        .collect()
}

/// 68 ordered points; `x` is the column and `y` the row, origin top-left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::format(
                "landmarks",
                format!("expected {NUM_LANDMARKS} points, found {}", points.len()),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format("landmarks", "non-finite coordinate"));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    /// Interleaved `x0 y0 x1 y1 …`.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f32]) -> Result<Self> {
        Self::new(values.chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> LandmarkSet {
        LandmarkSet { points: self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect() }
    }

    /// Number of points outside `[0,width) × [0,height)`.
    pub fn out_of_bounds(&self, width: usize, height: usize) -> usize {
        self.points
            .iter()
            .filter(|p| !(p[0] >= 0.0 && p[0] < width as f32 && p[1] >= 0.0 && p[1] < height as f32))
            .count()
    }

    /// One `"x y"` line per point.
    pub fn to_text(&self) -> String {
        self.points.iter().map(|p| format!("{} {}\n", p[0], p[1])).collect()
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<f32>()
                    .map_err(|e| Error::format(context, format!("line {}: {s:?}: {e}", lineno + 1)))
            };
            if vals.len() != 2 {
                return Err(Error::format(
                    context,
                    format!("line {}: expected 2 values, found {}", lineno + 1, vals.len()),
                ));
            }
            points.push([parse(vals[0])?, parse(vals[1])?]);
        }
        Self::new(points).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(context, detail),
            other => other,
        })
    }
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LandmarkSet::parse(&text, &path.display().to_string())
}

pub fn save_landmarks(lms: &LandmarkSet, path: &Path) -> Result<()> {
    fs::write(path, lms.to_text()).map_err(|e| Error::io(path, e))
}

pub(crate) fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub(crate) fn decode_bytes(bytes: &[u8], context: &str) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::format(context, e.to_string()))
}

/// Converts a decoded image, rejecting alpha channels.
pub fn from_dynamic(img: DynamicImage, context: &str) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, pixels): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        other => {
            return Err(Error::format(
                context,
                format!("unsupported pixel layout {:?} (expected grey or RGB)", other.color()),
            ))
        }
    };
    Image::new(h, w, channels, pixels)
}

/// Decodes a PNG or JPEG file into `[0,1]` intensities.
pub fn load_image(path: &Path) -> Result<Image> {
    from_dynamic(decode(path)?, &path.display().to_string())
}

pub fn load_image_bytes(bytes: &[u8], context: &str) -> Result<Image> {
    from_dynamic(decode_bytes(bytes, context)?, context)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG encoding.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.pixels.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = if img.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("buffer size"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format("png encoder", e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!("target size {out_h}x{out_w} must be positive")));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(out_h, img.height), taps(out_w, img.width));
    let c = img.channels;
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                pixels.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, c, pixels)
}

/// Resizes to `side×side` and scales the landmarks by the same factors.
pub fn resize_to_training(
    img: &Image,
    landmarks: Option<&LandmarkSet>,
    side: usize,
) -> Result<(Image, Option<LandmarkSet>)> {
    if side == 0 {
        return Err(Error::Argument("training side must be positive".into()));
    }
    let sx = side as f32 / img.width as f32;
    let sy = side as f32 / img.height as f32;
    let out = resize(img, side, side)?;
    Ok((out, landmarks.map(|l| l.scaled(sx, sy))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Images left out because they had no landmark file (train split only).
    pub dropped: usize,
}

/// Name of the optional tab-separated sidecar listing image/landmark pairs.
pub const MANIFEST_FILE: &str = "manifest.tsv";

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn find_landmarks(root: &Path, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?;
    let mut name = stem.to_os_string();
    name.push(".txt");
    [image.with_file_name(&name), root.join("landmarks").join(&name)].into_iter().find(|p| p.is_file())
}

fn read_sidecar(root: &Path, path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let image = cols.next().map(str::trim).unwrap_or_default();
        if image.is_empty() {
            return Err(Error::format(MANIFEST_FILE, format!("line {}: missing image path", i + 1)));
        }
        let landmarks = cols.next().map(str::trim).filter(|s| !s.is_empty()).map(|s| root.join(s));
        entries.push(ManifestEntry { image: root.join(image), landmarks });
    }
    Ok(entries)
}

/// Enumerates `root`.
///
/// A `manifest.tsv` sidecar (`image<TAB>landmarks` per line, paths relative
/// to `root`) takes precedence. Otherwise images are taken from `root` and
/// `root/images`, and each is paired with `<stem>.txt` next to it or under
/// `root/landmarks`. The train split keeps only entries with landmarks.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let sidecar = root.join(MANIFEST_FILE);
    let candidates = if sidecar.is_file() {
        read_sidecar(root, &sidecar)?
    } else {
        let mut images = list_images(root)?;
        if root.join("images").is_dir() {
            images.extend(list_images(&root.join("images"))?);
        }
        images
            .into_iter()
            .map(|image| ManifestEntry { landmarks: find_landmarks(root, &image), image })
            .collect()
    };
    let total = candidates.len();
    let entries: Vec<ManifestEntry> = match split {
        Split::Train => candidates.into_iter().filter(|e| e.landmarks.is_some()).collect(),
        Split::Eval => candidates,
    };
    let dropped = total - entries.len();
    if dropped > 0 {
        log::info!("{}: dropped {dropped} images without landmarks", root.display());
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no usable images under {}", root.display())));
    }
    Ok(DatasetManifest { entries, split, dropped })
}

/// A loaded, resized training sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub landmarks: Option<LandmarkSet>,
}

/// Loads an entry as RGB at `side×side`. Out-of-bounds landmarks are kept
/// but logged.
pub fn load_sample(entry: &ManifestEntry, side: usize) -> Result<Sample> {
    let img = load_image(&entry.image)?.to_rgb();
    let lms = entry.landmarks.as_deref().map(load_landmarks).transpose()?;
    if let Some(l) = &lms {
        let outside = l.out_of_bounds(img.width(), img.height());
        if outside > 0 {
            log::warn!("{}: {outside} landmarks outside the image", entry.image.display());
        }
    }
    let (image, landmarks) = resize_to_training(&img, lms.as_ref(), side)?;
    Ok(Sample { image, landmarks })
}

pub mod synth {
    //! Procedural cartoon faces with exact landmark positions, for tests and
    //! demos where no annotated corpus is at hand.

    use std::f32::consts::PI;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{Image, LandmarkSet};

    struct Ellipse {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
    }

    impl Ellipse {
        fn at(&self, t: f32) -> [f32; 2] {
            [self.cx + self.rx * t.cos(), self.cy + self.ry * t.sin()]
        }

        /// Signed coverage with a soft edge about one pixel wide.
        fn cover(&self, x: f32, y: f32) -> f32 {
            let dx = (x - self.cx) / self.rx;
            let dy = (y - self.cy) / self.ry;
            let r = (dx * dx + dy * dy).sqrt();
            let edge = 1.0 / self.rx.min(self.ry).max(1.0);
            (((1.0 - r) / edge) + 0.5).clamp(0.0, 1.0)
        }
    }

    fn arc(e: &Ellipse, from: f32, to: f32, n: usize) -> Vec<[f32; 2]> {
        (0..n).map(|i| e.at(from + (to - from) * i as f32 / (n - 1) as f32)).collect()
    }

    fn ring(e: &Ellipse, n: usize, start: f32) -> Vec<[f32; 2]> {
        (0..n).map(|i| e.at(start + 2.0 * PI * i as f32 / n as f32)).collect()
    }

    fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
    }

    /// A `side×side` RGB face and its 68 landmarks, fully determined by `seed`.
    pub fn face(seed: u64, side: usize) -> (Image, LandmarkSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = side as f32;
        let mut j = |lo: f32, hi: f32| rng.random_range(lo..hi);

        let cx = s * (0.5 + j(-0.04, 0.04));
        let cy = s * (0.52 + j(-0.04, 0.04));
        let scale = j(0.9, 1.08);
        let face = Ellipse { cx, cy, rx: s * 0.3 * scale, ry: s * 0.38 * scale };
        let eye_dy = face.ry * j(-0.3, -0.2);
        let eye_dx = face.rx * j(0.36, 0.44);
        let eye_r = face.rx * j(0.14, 0.18);
        let eyes = [-1.0, 1.0].map(|side| Ellipse {
            cx: cx + side * eye_dx,
            cy: cy + eye_dy,
            rx: eye_r,
            ry: eye_r * 0.55,
        });
        let brows = eyes.each_ref().map(|e| Ellipse { cx: e.cx, cy: e.cy - e.ry * 2.6, rx: e.rx * 1.3, ry: e.ry * 0.9 });
        let mouth = Ellipse { cx, cy: cy + face.ry * j(0.42, 0.52), rx: face.rx * j(0.32, 0.42), ry: face.ry * j(0.08, 0.13) };
        let inner = Ellipse { rx: mouth.rx * 0.7, ry: mouth.ry * 0.45, ..mouth };
        let nose_len = face.ry * 0.3;

        let bg_top = [j(0.1, 0.5), j(0.2, 0.6), j(0.4, 0.8)];
        let bg_bot = [j(0.1, 0.4), j(0.1, 0.4), j(0.2, 0.5)];
        let skin = [j(0.6, 0.95), j(0.45, 0.75), j(0.35, 0.6)];
        let eye_col = [j(0.05, 0.25), j(0.05, 0.25), j(0.1, 0.35)];
        let lip = [j(0.6, 0.85), j(0.15, 0.35), j(0.2, 0.4)];

        let mut pixels = Vec::with_capacity(side * side * 3);
        for row in 0..side {
            for col in 0..side {
                let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
                let mut c = mix(bg_top, bg_bot, y / s);
                let shade = 1.0 - 0.25 * ((x - cx) / face.rx).powi(2).min(1.0);
                c = mix(c, skin.map(|v| v * shade), face.cover(x, y));
                for e in &brows {
                    let upper = (y < e.cy) as u8 as f32;
                    c = mix(c, eye_col, e.cover(x, y) * upper * 0.8);
                }
                for e in &eyes {
                    c = mix(c, [0.95, 0.95, 0.95], e.cover(x, y));
                    let pupil = Ellipse { rx: e.ry * 0.8, ry: e.ry * 0.8, ..*e };
                    c = mix(c, eye_col, pupil.cover(x, y));
                }
                let nose = Ellipse { cx, cy: cy + nose_len * 0.8, rx: face.rx * 0.12, ry: nose_len * 0.35 };
                c = mix(c, skin.map(|v| v * 0.75), nose.cover(x, y));
                c = mix(c, lip, mouth.cover(x, y));
                c = mix(c, lip.map(|v| v * 0.4), inner.cover(x, y));
                pixels.extend(c.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        let image = Image::new(side, side, 3, pixels).expect("valid synthetic image");

        let mut pts = Vec::with_capacity(68);
        // jaw, brows, nose bridge, nostrils, eyes, outer and inner lips
        pts.extend(arc(&face, PI * 1.05, PI * -0.05, 17));
        for b in &brows {
            pts.extend(arc(b, PI * 1.15, PI * 1.85, 5));
        }
        pts.extend((0..4).map(|i| [cx, cy + eye_dy + nose_len * (0.2 + 0.3 * i as f32)]));
        let base = cy + nose_len * 1.05;
        pts.extend((0..5).map(|i| [cx + face.rx * 0.12 * (i as f32 - 2.0), base + (i as f32 - 2.0).abs() * -1.5]));
        for e in &eyes {
            pts.extend(ring(e, 6, PI));
        }
        pts.extend(ring(&mouth, 12, PI));
        pts.extend(ring(&inner, 8, PI));
        let landmarks = LandmarkSet::new(pts).expect("68 synthetic landmarks");
        (image, landmarks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(img: DynamicImage) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn load_scales_8bit_extremes() {
        let white = png_bytes(DynamicImage::ImageLuma8(image::GrayImage::from_pixel(4, 3, image::Luma([255]))));
        let img = load_image_bytes(&white, "white").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (3, 4, 1));
        assert!(img.pixels().iter().all(|&v| v == 1.0));
        let black = png_bytes(DynamicImage::ImageRgb8(image::RgbImage::new(2, 2)));
        assert!(load_image_bytes(&black, "black").unwrap().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_scales_16bit() {
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_pixel(2, 2, image::Luma([32768u16]));
        let img = load_image_bytes(&png_bytes(DynamicImage::ImageLuma16(buf)), "16bit").unwrap();
        let expected = 32768.0f32 / 65535.0;
        assert!(img.pixels().iter().all(|&v| v == expected));
        assert!((img.pixels()[0] - 0.50001).abs() < 1e-5);
    }

    #[test]
    fn alpha_is_rejected() {
        let rgba = png_bytes(DynamicImage::ImageRgba8(image::RgbaImage::new(2, 2)));
        assert!(matches!(load_image_bytes(&rgba, "rgba"), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image(Path::new("/nonexistent/x.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let src = DynamicImage::ImageRgb8(image::RgbImage::from_raw(7, 5, raw.clone()).unwrap());
        let p = dir.path().join("a.png");
        fs::write(&p, png_bytes(src)).unwrap();
        let img = load_image(&p).unwrap();
        let q = dir.path().join("b.png");
        save_png(&img, &q).unwrap();
        assert_eq!(load_image(&q).unwrap(), img);
        assert_eq!(decode(&q).unwrap().into_rgb8().into_raw(), raw);
    }

    #[test]
    fn resize_identity_and_constant() {
        let (img, _) = synth::face(1, 32);
        let (same, _) = resize_to_training(&img, None, 32).unwrap();
        assert_eq!(same, img);
        let c = Image::filled(512, 512, 3, 0.7).unwrap();
        let (small, _) = resize_to_training(&c, None, 256).unwrap();
        assert_eq!(small.height(), 256);
        assert!(small.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(resize_to_training(&c, None, 0).is_err());
    }

    #[test]
    fn resize_interpolates_columns() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize(&img, 4, 4).unwrap();
        for row in 0..4 {
            let cols: Vec<f32> = (0..4).map(|c| out.get(row, c, 0)).collect();
            assert_eq!(cols, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn resize_scales_landmarks() {
        let img = Image::filled(100, 200, 1, 0.5).unwrap();
        let lms = LandmarkSet::new(vec![[100.0, 50.0]; 68]).unwrap();
        let (_, l) = resize_to_training(&img, Some(&lms), 50).unwrap();
        assert_eq!(l.unwrap().points()[0], [25.0, 25.0]);
    }

    #[test]
    fn landmark_files() {
        let zeros = "0 0\n".repeat(68);
        let l = LandmarkSet::parse(&zeros, "t").unwrap();
        assert!(l.points().iter().all(|p| *p == [0.0, 0.0]));
        let short = "0 0\n".repeat(67);
        let err = LandmarkSet::parse(&short, "t").unwrap_err().to_string();
        assert!(err.contains("expected 68") && err.contains("found 67"), "{err}");
        let mut exact = "128.5 64.25\n".to_string();
        exact.push_str(&"1 1\n".repeat(67));
        assert_eq!(LandmarkSet::parse(&exact, "t").unwrap().points()[0], [128.5, 64.25]);
        assert!(LandmarkSet::parse("a b\n", "t").is_err());
    }

    #[test]
    fn landmark_text_roundtrip() {
        let (_, l) = synth::face(3, 64);
        assert_eq!(LandmarkSet::parse(&l.to_text(), "t").unwrap(), l);
    }

    fn corpus(n_images: usize, n_landmarks: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n_images {
            let (img, lms) = synth::face(i as u64, 16);
            save_png(&img, &dir.path().join(format!("f{i}.png"))).unwrap();
            if i < n_landmarks {
                save_landmarks(&lms, &dir.path().join(format!("f{i}.txt"))).unwrap();
            }
        }
        dir
    }

    #[test]
    fn scan_pairs_and_drops() {
        let full = corpus(3, 3);
        assert_eq!(scan_dataset(full.path(), Split::Train).unwrap().entries.len(), 3);
        let partial = corpus(3, 2);
        let train = scan_dataset(partial.path(), Split::Train).unwrap();
        assert_eq!((train.entries.len(), train.dropped), (2, 1));
        assert!(train.entries.iter().all(|e| e.landmarks.is_some()));
        let eval = scan_dataset(partial.path(), Split::Eval).unwrap();
        assert_eq!((eval.entries.len(), eval.dropped), (3, 0));
    }

    #[test]
    fn scan_landmarks_subdir_and_sidecar() {
        let dir = corpus(2, 0);
        fs::create_dir(dir.path().join("landmarks")).unwrap();
        let (_, lms) = synth::face(0, 16);
        save_landmarks(&lms, &dir.path().join("landmarks/f1.txt")).unwrap();
        let m = scan_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert!(m.entries[0].image.ends_with("f1.png"));

        fs::write(dir.path().join(MANIFEST_FILE), "f0.png\tlandmarks/f1.txt\nf1.png\n").unwrap();
        let m = scan_dataset(dir.path(), Split::Eval).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert!(m.entries[0].landmarks.as_ref().unwrap().ends_with("landmarks/f1.txt"));
        assert!(m.entries[1].landmarks.is_none());
    }

    #[test]
    fn scan_empty_is_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path(), Split::Eval), Err(Error::Dataset(_))));
    }

    #[test]
    fn chw_roundtrip_and_batch() {
        let (img, _) = synth::face(5, 12);
        let back = Image::from_chw(3, 12, 12, &img.to_chw()).unwrap();
        assert_eq!(back, img);
        let t = batch_tensor(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 12, 12]);
        assert_eq!(unbatch_tensor(&t).unwrap()[1], img);
    }

    #[test]
    fn synthetic_faces_are_deterministic_and_in_bounds() {
        let (a, la) = synth::face(9, 64);
        let (b, lb) = synth::face(9, 64);
        assert_eq!((a, la.clone()), (b, lb));
        assert_eq!(la.out_of_bounds(64, 64), 0);
        assert_ne!(synth::face(10, 64).1, la);
    }
}
