use facefill_autodiff::{ConvGeom, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::LEAKY;
use super::{Ctx, Init, ParamStore, LEAKY_GAIN};
use crate::error::{Error, Result};

/// Patch discriminator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub base_channels: usize,
    /// Power iterations run when the spectral estimates are first built.
    pub init_power_iterations: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { base_channels: 64, init_power_iterations: 200 }
    }
}

const KERNEL: usize = 4;

/// `(cin, cout, stride)` for the five 4×4 stages.
pub fn disc_layers(cfg: &DiscConfig) -> Vec<(usize, usize, usize)> {
    let d = cfg.base_channels;
    vec![(3, d, 2), (d, 2 * d, 2), (2 * d, 4 * d, 2), (4 * d, 8 * d, 1), (8 * d, 1, 1)]
}

/// Spatial side of the score map for a `side×side` input.
pub fn discriminator_out_side(cfg: &DiscConfig, side: usize) -> Option<usize> {
    disc_layers(cfg).iter().try_fold(side, |s, &(_, _, stride)| ConvGeom::new(stride, 1, 1).out_size(s, KERNEL))
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Runs `iters` power iterations on every weight, updating the `u`/`v`
/// estimates in `buffers`.
pub fn refresh_spectral<T: Real>(cfg: &DiscConfig, params: &ParamStore<T>, buffers: &mut ParamStore<T>, iters: usize) -> Result<()> {
    for i in 1..=disc_layers(cfg).len() {
        let w = params.get(&format!("disc.conv{i}.weight")).ok_or_else(|| Error::MissingParam(format!("disc.conv{i}.weight")))?;
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let wd: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
        let (uname, vname) = (format!("disc.conv{i}.u"), format!("disc.conv{i}.v"));
        let mut u: Vec<f64> = buffers.get(&uname).ok_or(Error::MissingParam(uname.clone()))?.data().iter().map(|v| v.as_f64()).collect();
        let mut v = vec![0.0; cols];
        for _ in 0..iters {
            v.iter_mut().for_each(|x| *x = 0.0);
            for (r, &ur) in u.iter().enumerate() {
                for (vc, &wv) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                    *vc += ur * wv;
                }
            }
            unit(&mut v);
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            unit(&mut u);
        }
        if iters > 0 {
            buffers.insert(uname, Tensor::new(&[rows], u.iter().map(|&x| T::lit(x)).collect())?);
            buffers.insert(vname, Tensor::new(&[cols], v.iter().map(|&x| T::lit(x)).collect())?);
        }
    }
    Ok(())
}

/// `uᵀ W v` for stage `i` (1-based).
pub fn spectral_sigma<T: Real>(params: &ParamStore<T>, buffers: &ParamStore<T>, i: usize) -> Option<f64> {
    let w = params.get(&format!("disc.conv{i}.weight"))?;
    let u = buffers.get(&format!("disc.conv{i}.u"))?;
    let v = buffers.get(&format!("disc.conv{i}.v"))?;
    let cols = v.len();
    Some(
        u.data()
            .iter()
            .enumerate()
            .map(|(r, ur)| ur.as_f64() * w.data()[r * cols..(r + 1) * cols].iter().zip(v.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>())
            .sum(),
    )
}

/// Fresh weights and spectral buffers.
pub fn init_discriminator(cfg: &DiscConfig, seed: u64) -> Result<(ParamStore<f32>, ParamStore<f32>)> {
    if cfg.base_channels == 0 {
        return Err(Error::Config("discriminator base_channels must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for (i, &(cin, cout, _)) in disc_layers(cfg).iter().enumerate() {
        let fan_in = cin * KERNEL * KERNEL;
        let std = LEAKY_GAIN / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, KERNEL, KERNEL], |_| (std * rng.sample::<f64, _>(StandardNormal)) as f32);
        params.insert(format!("disc.conv{}.weight", i + 1), w);
        params.insert(format!("disc.conv{}.bias", i + 1), Tensor::zeros(&[cout]));
        let mut u: Vec<f64> = (0..cout).map(|_| rng.sample(StandardNormal)).collect();
        unit(&mut u);
        buffers.insert(format!("disc.conv{}.u", i + 1), Tensor::new(&[cout], u.iter().map(|&x| x as f32).collect())?);
        buffers.insert(format!("disc.conv{}.v", i + 1), Tensor::zeros(&[fan_in]));
    }
    refresh_spectral(cfg, &params, &mut buffers, cfg.init_power_iterations.max(1))?;
    Ok((params, buffers))
}

/// Score map `[n,1,h',w']` for images `x: [n,3,h,w]`. Each weight is divided
/// by its spectral estimate from `buffers`; the forward pass never updates
/// the estimates.
pub fn discriminator_forward<T: Real>(ctx: &mut Ctx<T>, cfg: &DiscConfig, buffers: &ParamStore<T>, x: Var) -> Result<Var> {
    let layers = disc_layers(cfg);
    let mut h = x;
    for (i, &(cin, cout, stride)) in layers.iter().enumerate() {
        let name = format!("disc.conv{}", i + 1);
        let w = ctx.param(&format!("{name}.weight"), &[cout, cin, KERNEL, KERNEL], Init::Kaiming { fan_in: cin * 16, gain: LEAKY_GAIN })?;
        let b = ctx.param(&format!("{name}.bias"), &[cout], Init::Const(0.0))?;
        let buf = |k: &str| buffers.get(&format!("{name}.{k}")).ok_or_else(|| Error::MissingParam(format!("{name}.{k}")));
        let (u, v) = (buf("u")?.data().to_vec(), buf("v")?.data().to_vec());
        let wn = ctx.g.spectral_normalize(w, &u, &v)?;
        h = ctx.g.conv2d(h, wn, Some(b), ConvGeom::new(stride, 1, 1))?;
        if i + 1 < layers.len() {
            h = ctx.g.activation(h, LEAKY);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn score_map_sides() {
        let cfg = DiscConfig::default();
        assert_eq!(discriminator_out_side(&cfg, 256), Some(30));
        assert_eq!(discriminator_out_side(&cfg, 128), Some(14));
        let small = DiscConfig { base_channels: 4, ..cfg };
        let (p, b) = init_discriminator(&small, 1).unwrap();
        let mut ctx = Ctx::new().with(&p, false);
        let x = ctx.g.constant(Tensor::full(&[2, 3, 64, 64], 0.5));
        let y = discriminator_forward(&mut ctx, &small, &b, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 1, 6, 6]);
    }

    #[test]
    fn normalized_weights_have_unit_norm() {
        let cfg = DiscConfig { base_channels: 8, ..Default::default() };
        let (p, b) = init_discriminator(&cfg, 2).unwrap();
        for i in 1..=5 {
            let w = p.get(&format!("disc.conv{i}.weight")).unwrap();
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let sigma = spectral_sigma(&p, &b, i).unwrap();
            let m = DMatrix::from_row_slice(rows, cols, &w.data().iter().map(|&v| v as f64 / sigma).collect::<Vec<_>>());
            let top = m.singular_values().max();
            assert!(top <= 1.0 + 1e-3, "stage {i}: {top}");
            assert!(top >= 1.0 - 1e-6, "stage {i}: {top}");
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = DiscConfig { base_channels: 4, ..Default::default() };
        let (p, b) = init_discriminator(&cfg, 3).unwrap();
        let run = || {
            let mut ctx = Ctx::new().with(&p, false);
            let x = ctx.g.constant(Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 7) as f32 / 7.0));
            let y = discriminator_forward(&mut ctx, &cfg, &b, x).unwrap();
            ctx.g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
