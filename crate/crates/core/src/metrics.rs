//! PSNR, SSIM and FID, and corpus evaluation bucketed by mask ratio.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::embedder::ConvEmbedder;
use crate::error::{Error, Result};
use crate::masking::{bucket, generate_irregular_mask, mask_ratio, Bucket, Mask, MaskSpec};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}×{}×{} vs {}×{}×{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over every full window position.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; WIN]) -> Vec<f64> {
    let ow = w - WIN + 1;
    let oh = h - WIN + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..WIN).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..WIN).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM on luma, 11×11 Gaussian window (σ = 1.5) over valid
/// positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < WIN || w < WIN {
        return Err(Error::Argument(format!("SSIM needs at least {WIN}×{WIN} pixels, image is {h}×{w}")));
    }
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(total / n as f64)
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    let d = feats.first().map(Vec::len).unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::Argument("FID needs nonempty feature sets".into()));
    }
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Dependency("feature vectors have inconsistent lengths".into()));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Dependency("non-finite feature values".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
        cov = centered.transpose() * &centered / (n - 1) as f64;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Dependency("feature sets have different widths".into()));
    }
    let diff = (&mu_a - &mu_b).norm_squared();
    // Tr((Σa Σb)^½) = Tr((√Σa Σb √Σa)^½), which keeps the argument symmetric.
    // The pair is ordered canonically so swapping the sets is bit-exact.
    let swap = cov_a.iter().zip(cov_b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(Ordering::Greater);
    let (first, second) = if swap { (&cov_b, &cov_a) } else { (&cov_a, &cov_b) };
    let ra = sym_sqrt(first);
    let inner = &ra * second * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fid(set_a: &[Image], set_b: &[Image], embedder: &ConvEmbedder) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Argument("FID needs nonempty image sets".into()));
    }
    let embed = |s: &[Image]| s.iter().map(|i| embedder.embed(i)).collect::<Result<Vec<_>>>();
    fid_from_features(&embed(set_a)?, &embed(set_b)?)
}

/// Anything that fills the holes of a masked image; the result is already
/// composited and has the size of `image`.
pub trait Inpainter {
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image>;
}

/// Returns the ground truth unchanged; the identity reference for metric
/// plumbing.
pub struct OracleInpainter;

impl Inpainter for OracleInpainter {
    fn inpaint(&self, image: &Image, _mask: &Mask) -> Result<Image> {
        Ok(image.clone())
    }
}

/// Where evaluation masks come from.
pub enum MaskSource {
    /// One seeded mask per sample and requested bucket.
    Generated { seed: u64, buckets: Vec<Bucket> },
    /// One given mask per sample, bucketed by its ratio.
    Given(Vec<Mask>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Rows in 0-20, 20-40, 40-60 order; buckets without samples are absent.
    pub rows: Vec<BucketRow>,
    /// Sample counts for every bucket, including empty ones and `other`.
    pub counts: BTreeMap<String, usize>,
    pub evaluated: usize,
    pub mask_seed: Option<u64>,
    pub embedder_id: String,
}

impl MetricReport {
    pub fn row(&self, b: Bucket) -> Option<&BucketRow> {
        self.rows.iter().find(|r| r.bucket == b.label())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>9} {:>7} {:>10}", "Mask Ratio", "N", "PSNR", "SSIM", "FID");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>6} {:>9.3} {:>7.4} {:>10.4}", r.bucket, r.count, r.psnr, r.ssim, r.fid);
        }
        let other = self.counts.get(Bucket::Other.label()).copied().unwrap_or(0);
        let _ = writeln!(s, "evaluated {} (outside 0-60%: {other})", self.evaluated);
        if let Some(seed) = self.mask_seed {
            let _ = writeln!(s, "mask seed {seed}");
        }
        let _ = writeln!(s, "embedder {}", self.embedder_id);
        s
    }
}

#[derive(Default)]
struct Acc {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    outputs: Vec<Image>,
    truths: Vec<Image>,
}

/// Inpaints every image under its masks and aggregates metrics per bucket.
/// Images and masks must already be at the model's working size.
pub fn evaluate_corpus(model: &dyn Inpainter, images: &[Image], masks: &MaskSource, embedder: &ConvEmbedder) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut accs: BTreeMap<Bucket, Acc> = BTreeMap::new();
    let mut cases: Vec<(usize, Mask, Bucket)> = Vec::new();
    let mask_seed = match masks {
        MaskSource::Generated { seed, buckets } => {
            for (i, img) in images.iter().enumerate() {
                if img.height() != img.width() {
                    return Err(Error::Argument(format!("image {i} is not square")));
                }
                for (k, &b) in buckets.iter().enumerate() {
                    if b == Bucket::Other {
                        return Err(Error::Argument("cannot generate masks for the catch-all bucket".into()));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 20) ^ ((k as u64) << 8));
                    let spec = MaskSpec::for_side(img.height()).with_bucket(Some(b));
                    cases.push((i, generate_irregular_mask(&mut rng, &spec, img.height())?, b));
                }
            }
            Some(*seed)
        }
        MaskSource::Given(ms) => {
            if ms.len() != images.len() {
                return Err(Error::Argument(format!("{} masks for {} images", ms.len(), images.len())));
            }
            for (i, m) in ms.iter().enumerate() {
                cases.push((i, m.clone(), bucket(mask_ratio(m))?));
            }
            None
        }
    };
    let evaluated = cases.len();
    for (i, m, b) in cases {
        let truth = &images[i];
        let out = model.inpaint(truth, &m)?;
        let acc = accs.entry(b).or_default();
        acc.psnr.push(psnr(&out, truth)?);
        acc.ssim.push(ssim(&out, truth)?);
        if b != Bucket::Other {
            acc.outputs.push(out);
            acc.truths.push(truth.clone());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = Vec::new();
    let mut counts = BTreeMap::new();
    for b in Bucket::RANGED.into_iter().chain([Bucket::Other]) {
        let n = accs.get(&b).map(|a| a.psnr.len()).unwrap_or(0);
        counts.insert(b.label().to_string(), n);
        if b == Bucket::Other || n == 0 {
            continue;
        }
        let a = &accs[&b];
        rows.push(BucketRow {
            bucket: b.label().into(),
            count: n,
            psnr: mean(&a.psnr),
            ssim: mean(&a.ssim),
            fid: fid(&a.outputs, &a.truths, embedder)?,
        });
    }
    Ok(MetricReport { rows, counts, evaluated, mask_seed, embedder_id: embedder.id() })
}
