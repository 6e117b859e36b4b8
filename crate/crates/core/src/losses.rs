//! Loss terms of the joint objective and their weighted total.

use facefill_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LandmarkSet;
use crate::embedder::ConvEmbedder;
use crate::error::{Error, Result};

/// Weights of the non-pixel terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perc: f64,
    pub style: f64,
    pub tv: f64,
    pub adv: f64,
    pub lmk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { perc: 0.1, style: 0.1, tv: 0.1, adv: 0.01, lmk: 0.00046 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { perc: 0.0, style: 0.0, tv: 0.0, adv: 0.0, lmk: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("perc", self.perc), ("style", self.style), ("tv", self.tv), ("adv", self.adv), ("lmk", self.lmk)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// `(component index, weight)` in summation order, pixel first.
    fn coefficients(&self) -> [f64; 6] {
        [1.0, self.perc, self.style, self.tv, self.adv, self.lmk]
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pixel: f64,
    pub perc: f64,
    pub style: f64,
    pub tv: f64,
    pub adv_g: f64,
    pub lmk: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("pixel", self.pixel),
            ("perc", self.perc),
            ("style", self.style),
            ("tv", self.tv),
            ("adv_g", self.adv_g),
            ("lmk", self.lmk),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub perc: f64,
    pub style: f64,
    pub tv: f64,
    pub adv_g: f64,
    pub lmk: f64,
    pub total: f64,
}

/// `pixel + λp·perc + λs·style + λtv·tv + λadv·adv_g + λlmk·lmk`, summed left
/// to right.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    let mut total = 0.0;
    for ((name, v), k) in c.named().into_iter().zip(w.coefficients()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
        total += k * v;
    }
    Ok(LossReport { pixel: c.pixel, perc: c.perc, style: c.style, tv: c.tv, adv_g: c.adv_g, lmk: c.lmk, total })
}

/// The same total as a graph node. `terms` are the six component nodes in
/// the order of [`LossComponents`].
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, terms: [Var; 6], w: &LossWeights) -> Result<Var> {
    let pairs: Vec<(Var, T)> = terms.iter().zip(w.coefficients()).map(|(&v, k)| (v, T::lit(k))).collect();
    Ok(g.weighted_sum(&pairs)?)
}

/// Squared landmark error: mean over all coordinates, or (with `sum`) the
/// per-sample sum of squares averaged over the batch.
pub fn landmark_loss_var<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, sum: bool) -> Result<Var> {
    if sum {
        let n = g.shape(pred).first().copied().unwrap_or(1).max(1);
        let s = g.sq_diff_sum(pred, gt)?;
        Ok(g.scale(s, T::lit(1.0 / n as f64)))
    } else {
        Ok(g.sq_diff_mean(pred, gt)?)
    }
}

pub fn landmark_loss(pred: &LandmarkSet, gt: &LandmarkSet, sum: bool) -> f64 {
    let mut g = Graph::<f64>::new();
    let to_t = |l: &LandmarkSet| Tensor::new(&[1, 136], l.flat().iter().map(|&v| v as f64).collect()).expect("136 values");
    let (p, t) = (g.constant(to_t(pred)), g.constant(to_t(gt)));
    let v = landmark_loss_var(&mut g, p, t, sum).expect("matching shapes");
    g.value(v).item()
}

/// Per-pixel weights: `w_hole` inside holes, 1 elsewhere, repeated over
/// `channels`. `mask` is `[n,1,h,w]`.
pub fn hole_weights<T: Real>(mask: &Tensor<T>, channels: usize, w_hole: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(Error::Argument(format!("mask tensor {:?} must have one channel", mask.shape())));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * channels * plane);
    for m in mask.data().chunks(plane) {
        for _ in 0..channels {
            out.extend(m.iter().map(|&v| if v > T::zero() { T::lit(w_hole) } else { T::one() }));
        }
    }
    Ok(Tensor::new(&[n, channels, h, w], out)?)
}

/// Weighted mean absolute error `Σ w|pred−gt| / Σ w`.
pub fn pixel_loss_var<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, mask: &Tensor<T>, w_hole: f64) -> Result<Var> {
    let channels = g.shape(pred).get(1).copied().unwrap_or(0);
    let weights = hole_weights(mask, channels, w_hole)?;
    Ok(g.abs_diff_mean(pred, gt, Some(weights))?)
}

/// `F Fᵀ / (C·H·W)` per sample, `[n,C,C]`.
pub fn gram<T: Real>(g: &mut Graph<T>, feat: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(feat).dims4()?;
    let f = g.reshape(feat, &[n, c, h * w])?;
    let prod = g.batch_matmul(f, f, false, true)?;
    Ok(g.scale(prod, T::lit(1.0 / (c * h * w) as f64)))
}

/// `(Σ_k mean|φk(pred)−φk(gt)|, Σ_k mean|G(φk(pred))−G(φk(gt))|)`.
pub fn perceptual_and_style_var<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, embedder: &ConvEmbedder) -> Result<(Var, Var)> {
    let fp = embedder.stage_features(g, pred)?;
    let fg = embedder.stage_features(g, gt)?;
    let mut perc = Vec::with_capacity(fp.len());
    let mut style = Vec::with_capacity(fp.len());
    for (&a, &b) in fp.iter().zip(&fg) {
        perc.push(g.abs_diff_mean(a, b, None)?);
        let (ga, gb) = (gram(g, a)?, gram(g, b)?);
        style.push(g.abs_diff_mean(ga, gb, None)?);
    }
    let ones = |v: &[Var]| v.iter().map(|&x| (x, T::one())).collect::<Vec<_>>();
    Ok((g.weighted_sum(&ones(&perc))?, g.weighted_sum(&ones(&style))?))
}

/// Mean absolute difference over horizontal and vertical neighbour pairs.
pub fn tv_loss_var<T: Real>(g: &mut Graph<T>, pred: Var) -> Result<Var> {
    Ok(g.total_variation(pred)?)
}

/// Least-squares generator loss `mean((fake−1)²)`.
pub fn adversarial_g_var<T: Real>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let ones = g.constant(Tensor::full(g.shape(fake), T::one()));
    Ok(g.sq_diff_mean(fake, ones)?)
}

/// Least-squares discriminator loss `mean((real−1)²) + mean(fake²)`.
pub fn adversarial_d_var<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let ones = g.constant(Tensor::full(g.shape(real), T::one()));
    let zeros = g.constant(Tensor::zeros(g.shape(fake)));
    let r = g.sq_diff_mean(real, ones)?;
    let f = g.sq_diff_mean(fake, zeros)?;
    Ok(g.add(r, f)?)
}

/// `(L_G, L_D)` for given score maps.
pub fn adversarial_losses(real: &Tensor<f64>, fake: &Tensor<f64>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let lg = adversarial_g_var(&mut g, f)?;
    let ld = adversarial_d_var(&mut g, r, f)?;
    Ok((g.value(lg).item(), g.value(ld).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use facefill_autodiff::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn landmark_loss_examples() {
        let (_, gt) = crate::data::synth::face(1, 64);
        assert_eq!(landmark_loss(&gt, &gt, false), 0.0);
        let shifted = LandmarkSet::from_flat(&gt.flat().iter().map(|v| v + 1.0).collect::<Vec<_>>()).unwrap();
        assert!((landmark_loss(&shifted, &gt, false) - 1.0).abs() < 1e-4);
        let mut one = gt.flat();
        one[7] += 2.0;
        let one = LandmarkSet::from_flat(&one).unwrap();
        assert!((landmark_loss(&one, &gt, false) - 4.0 / 136.0).abs() < 1e-9);
        assert!((landmark_loss(&one, &gt, true) - 4.0).abs() < 1e-9);
    }

    fn pixel(pred: Vec<f64>, gt: Vec<f64>, mask: Vec<f64>, w_hole: f64) -> f64 {
        let n = pred.len();
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 1, 1, n], pred));
        let q = g.constant(t(&[1, 1, 1, n], gt));
        let v = pixel_loss_var(&mut g, p, q, &t(&[1, 1, 1, n], mask), w_hole).unwrap();
        g.value(v).item()
    }

    #[test]
    fn pixel_loss_examples() {
        assert_eq!(pixel(vec![0.3; 10], vec![0.3; 10], vec![0.0; 10], 1.0), 0.0);
        assert!((pixel(vec![0.5; 10], vec![0.25; 10], vec![0.0; 10], 1.0) - 0.25).abs() < 1e-12);
        let mask: Vec<f64> = (0..10).map(|i| (i == 0) as u8 as f64).collect();
        let pred: Vec<f64> = mask.clone();
        assert!((pixel(pred, vec![0.0; 10], mask, 6.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gram_examples() {
        let mut g = Graph::new();
        let c: f64 = 0.7;
        let f = g.constant(Tensor::full(&[1, 1, 3, 5], c));
        let gm = gram(&mut g, f).unwrap();
        assert!((g.value(gm).item() - c * c).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| 2.0 * v));
        let (ga, gb) = (gram(&mut g, a).unwrap(), gram(&mut g, b).unwrap());
        for (u, v) in g.value(ga).data().iter().zip(g.value(gb).data()) {
            assert!((4.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn perceptual_zero_on_equal() {
        let e = ConvEmbedder::seeded(2);
        let (img, _) = crate::data::synth::face(2, 16);
        let x = Tensor::new(&[1, 3, 16, 16], img.to_chw().into_iter().map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x.clone()), g.constant(x));
        let (p, s) = perceptual_and_style_var(&mut g, a, b, &e).unwrap();
        assert_eq!((g.value(p).item(), g.value(s).item()), (0.0, 0.0));
    }

    #[test]
    fn tv_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 3, 4, 4], 0.3));
        let v = tv_loss_var(&mut g, c).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let x = g.constant(t(&[1, 1, 1, 2], vec![0.0, 1.0]));
        let v = tv_loss_var(&mut g, x).unwrap();
        assert_eq!(g.value(v).item(), 1.0);
        // rows [0,0] then [1,1]: two vertical pairs differ, two horizontal do not
        let step = g.constant(t(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]));
        let v = tv_loss_var(&mut g, step).unwrap();
        assert_eq!(g.value(v).item(), 0.5);
    }

    #[test]
    fn adversarial_examples() {
        let full = |v| Tensor::full(&[1, 1, 3, 3], v);
        assert_eq!(adversarial_losses(&full(0.2), &full(1.0)).unwrap().0, 0.0);
        assert_eq!(adversarial_losses(&full(1.0), &full(0.0)).unwrap().1, 0.0);
        let (lg, ld) = adversarial_losses(&full(0.5), &full(0.5)).unwrap();
        assert_eq!((lg, ld), (0.25, 0.5));
    }

    #[test]
    fn total_examples() {
        let ones = LossComponents { pixel: 1.0, perc: 1.0, style: 1.0, tv: 1.0, adv_g: 1.0, lmk: 1.0 };
        let r = total_loss(&ones, &LossWeights::default()).unwrap();
        assert!((r.total - 1.31046).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()).unwrap().total, 0.0);
        let c = LossComponents { pixel: 0.37, perc: 5.0, style: 2.0, tv: 1.0, adv_g: 3.0, lmk: 900.0 };
        assert_eq!(total_loss(&c, &LossWeights::zero()).unwrap().total, 0.37);
        let bad = LossComponents { style: f64::NAN, ..ones };
        let err = total_loss(&bad, &LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("style"), "{err}");
    }

    #[test]
    fn graph_total_matches_scalar_total() {
        let c = LossComponents { pixel: 0.3, perc: 1.7, style: 0.02, tv: 0.4, adv_g: 0.9, lmk: 123.0 };
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let vars = c.named().map(|(_, v)| g.constant(Tensor::scalar(v)));
        let tv = total_loss_var(&mut g, vars, &w).unwrap();
        assert_eq!(g.value(tv).item(), total_loss(&c, &w).unwrap().total);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tv: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_gradients_on_small_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95));
        let (p, q) = (r(&[1, 1, 4, 4]), r(&[1, 1, 4, 4]));
        let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let check = |f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>| {
            let rep = gradcheck::check(std::slice::from_ref(&p), 1e-6, gradcheck::all, |g, v| Ok(f(g, v[0])?)).unwrap();
            assert!(rep.passes(1e-4), "{rep:?}");
        };
        check(&|g, v| {
            let gt = g.constant(q.clone());
            pixel_loss_var(g, v, gt, &mask, 6.0)
        });
        check(&|g, v| tv_loss_var(g, v));
        check(&|g, v| adversarial_g_var(g, v));
        check(&|g, v| {
            let gt = g.constant(q.clone());
            adversarial_d_var(g, gt, v)
        });
        check(&|g, v| {
            let gt = g.constant(q.clone());
            landmark_loss_var(g, v, gt, false)
        });
        let e = ConvEmbedder::seeded(9);
        let (p3, q3) = (r(&[1, 3, 4, 4]), r(&[1, 3, 4, 4]));
        for which in 0..2 {
            let rep = gradcheck::check(std::slice::from_ref(&p3), 1e-6, gradcheck::all, |g, v| {
                let gt = g.constant(q3.clone());
                let (perc, style) = perceptual_and_style_var(g, v[0], gt, &e)?;
                Ok(if which == 0 { perc } else { style })
            })
            .unwrap();
            assert!(rep.passes(1e-4), "{which}: {rep:?}");
        }
    }
}
