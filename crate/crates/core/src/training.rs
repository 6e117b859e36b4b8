//! Alternating discriminator/generator optimization, checkpointing and the
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use facefill_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_tensor, load_sample, DatasetManifest, Image, LandmarkSet, Sample};
use crate::embedder::ConvEmbedder;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_var, adversarial_g_var, landmark_loss_var, perceptual_and_style_var, pixel_loss_var, total_loss,
    total_loss_var, tv_loss_var, LossComponents, LossReport, LossWeights,
};
use crate::masking::{generate_irregular_mask, Bucket, Mask, MaskSpec};
use crate::network::{
    discriminator_forward, generator_forward, init_discriminator, init_generator, refresh_spectral, Ablation, Ctx,
    DiscConfig, GeneratorConfig, ParamStore, Rounding,
};

/// Flat training configuration; every key maps to one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_ratio: f64,
    pub decay_interval: u64,
    pub ablation: Ablation,
    pub input_side: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub dilation: usize,
    pub attention_enabled: bool,
    pub mask_channel: bool,
    pub landmark_alpha: f64,
    pub rasterize: Rounding,
    pub disc_channels: usize,
    /// Feed composited outputs (known pixels restored) to the discriminator.
    pub disc_on_composite: bool,
    pub w_hole: f64,
    pub lambda_perc: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
    pub lambda_adv: f64,
    pub lambda_lmk: f64,
    pub lmk_loss_sum: bool,
    pub mask_bucket: Option<Bucket>,
    pub embedder_seed: u64,
    pub embedder_weights: Option<PathBuf>,
    /// Save `step-XXXXXXXX.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            seed: 0,
            max_steps: 0,
            batch_size: 4,
            lr_g: 2.92e-4,
            lr_d: 2.92e-5,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            decay_ratio: 0.78,
            decay_interval: 50_000,
            ablation: Ablation::Full,
            input_side: 256,
            base_channels: 64,
            residual_blocks: 8,
            dilation: 2,
            attention_enabled: true,
            mask_channel: true,
            landmark_alpha: 0.5,
            rasterize: Rounding::Floor,
            disc_channels: 64,
            disc_on_composite: true,
            w_hole: 1.0,
            lambda_perc: w.perc,
            lambda_style: w.style,
            lambda_tv: w.tv,
            lambda_adv: w.adv,
            lambda_lmk: w.lmk,
            lmk_loss_sum: false,
            mask_bucket: None,
            embedder_seed: 0,
            embedder_weights: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.base_channels,
            residual_blocks: self.residual_blocks,
            dilation: self.dilation,
            attention_enabled: self.attention_enabled,
            mask_channel: self.mask_channel,
            input_side: self.input_side,
            landmark_alpha: self.landmark_alpha,
            rasterize: self.rasterize,
            ..Default::default()
        }
        .with_ablation(self.ablation)
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig { base_channels: self.disc_channels, ..Default::default() }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perc: self.lambda_perc,
            style: self.lambda_style,
            tv: self.lambda_tv,
            adv: self.lambda_adv,
            lmk: self.lambda_lmk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0 && self.lr_g.is_finite() && self.lr_d.is_finite()) {
            return bad(format!("learning rates must be finite and nonnegative (lr_g {}, lr_d {})", self.lr_g, self.lr_d));
        }
        if self.lr_d > self.lr_g {
            return bad(format!("lr_d {} exceeds lr_g {}", self.lr_d, self.lr_g));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            return bad(format!("decay_ratio {} must lie in (0, 1]", self.decay_ratio));
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.w_hole.is_finite() && self.w_hole > 0.0) {
            return bad(format!("w_hole {} must be positive", self.w_hole));
        }
        if self.disc_channels == 0 {
            return bad("disc_channels must be positive".into());
        }
        if crate::network::discriminator_out_side(&self.disc_config(), self.input_side).is_none() {
            return bad(format!("input_side {} is too small for the discriminator", self.input_side));
        }
        self.loss_weights().validate()?;
        self.generator_config().validate()
    }
}

/// `(lr_g, lr_d)` after step-wise decay.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> (f64, f64) {
    let k = (step / cfg.decay_interval.max(1)) as i32;
    let f = cfg.decay_ratio.powi(k);
    (cfg.lr_g * f, cfg.lr_d * f)
}

/// Adam moments for one parameter store; `t` counts applied updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(like: &ParamStore) -> Self {
        AdamState { t: 0, m: like.zeros_like(), v: like.zeros_like() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_update(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64, hp: AdamParams) -> Result<()> {
    params.check_compatible(grads)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let (c1, c2, eps, lr) = (c1 as f32, c2 as f32, hp.eps as f32, lr as f32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked compatible");
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam m {name}")))?;
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam v {name}")))?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m.get(name).expect("present"), state.v.get(name).expect("present"));
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub loss_d: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MASK_STREAM: u64 = 0x6D61_736B;
const ORDER_STREAM: u64 = 0x6F72_6472;

/// Generator, discriminator and optimizer state bound to a training set.
pub struct Trainer {
    pub cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscConfig,
    weights: LossWeights,
    embedder: ConvEmbedder,
    data: Vec<Sample>,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub disc_buffers: ParamStore,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh models. Every sample must already be at `input_side`.
    pub fn new(cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        let gen_cfg = cfg.generator_config();
        let disc_cfg = cfg.disc_config();
        let gen = init_generator(&gen_cfg, mix(cfg.seed, 1))?;
        let (disc, disc_buffers) = init_discriminator(&disc_cfg, mix(cfg.seed, 2))?;
        let ck = Checkpoint {
            generator: gen_cfg,
            discriminator: disc_cfg,
            train: cfg.clone(),
            step: 0,
            adam_g: AdamState::new(&gen),
            adam_d: AdamState::new(&disc),
            gen,
            disc,
            disc_buffers,
        };
        Self::from_checkpoint(ck, cfg, data)
    }

    /// Continues from `ck` with hyperparameters from `cfg`; the architecture
    /// in `cfg` must match the checkpoint.
    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if cfg.generator_config() != ck.generator || cfg.disc_config() != ck.discriminator {
            return Err(Error::Config("architecture in config differs from the checkpoint".into()));
        }
        let side = cfg.input_side;
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        for (i, s) in data.iter().enumerate() {
            if s.image.height() != side || s.image.width() != side || s.image.channels() != 3 {
                return Err(Error::Dataset(format!("sample {i} is not a {side}×{side} RGB image")));
            }
            if ck.generator.landmark_branch_enabled && s.landmarks.is_none() {
                return Err(Error::Dataset(format!("sample {i} has no landmark annotation")));
            }
        }
        let embedder = match &cfg.embedder_weights {
            Some(p) => ConvEmbedder::load(p)?,
            None => ConvEmbedder::seeded(cfg.embedder_seed),
        };
        Ok(Trainer {
            gen_cfg: ck.generator,
            disc_cfg: ck.discriminator,
            weights: cfg.loss_weights(),
            cfg,
            embedder,
            data,
            gen: ck.gen,
            disc: ck.disc,
            disc_buffers: ck.disc_buffers,
            adam_g: ck.adam_g,
            adam_d: ck.adam_d,
            step: ck.step,
        })
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.gen_cfg
    }

    pub fn samples(&self) -> &[Sample] {
        &self.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.gen_cfg.clone(),
            discriminator: self.disc_cfg.clone(),
            train: self.cfg.clone(),
            step: self.step,
            gen: self.gen.clone(),
            disc: self.disc.clone(),
            disc_buffers: self.disc_buffers.clone(),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
        }
    }

    /// Sample indices of the batch at `step`: consecutive slices of a
    /// per-epoch seeded permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let bs = self.cfg.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..bs)
            .map(|j| {
                let c = step * bs + j;
                let epoch = c / n;
                if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n as usize).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ ORDER_STREAM, epoch)));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled").1[(c % n) as usize]
            })
            .collect()
    }

    /// Training masks for `step`, drawn from a source seeded by the step.
    pub fn masks_for_step(&self, step: u64) -> Result<Vec<Mask>> {
        let side = self.gen_cfg.input_side;
        let spec = MaskSpec::for_side(side).with_bucket(self.cfg.mask_bucket);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ MASK_STREAM, step));
        (0..self.cfg.batch_size).map(|_| generate_irregular_mask(&mut rng, &spec, side)).collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (lr_g, lr_d) = lr_schedule(step, &self.cfg);
        let hp = AdamParams { beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: self.cfg.adam_eps };
        let side = self.gen_cfg.input_side;
        let idx = self.batch_indices(step);
        let masks = self.masks_for_step(step)?;
        let n = idx.len();

        let images: Vec<&Image> = idx.iter().map(|&i| &self.data[i].image).collect();
        let gt = batch_tensor(&images)?;
        let mask = Tensor::new(&[n, 1, side, side], masks.iter().flat_map(|m| m.as_f32()).collect())?;
        let mask3 = expand_channels(&mask, 3)?;
        let masked = gt.zip_map(&mask3, |x, m| x * (1.0 - m))?;
        let gt_points = if self.gen_cfg.landmark_branch_enabled {
            let flat: Vec<f32> = idx.iter().flat_map(|&i| self.data[i].landmarks.as_ref().expect("validated").flat()).collect();
            Some(Tensor::new(&[n, 136], flat)?)
        } else {
            None
        };

        refresh_spectral(&self.disc_cfg, &self.disc, &mut self.disc_buffers, 1)?;

        let gen = &self.gen;
        let mut ctx = Ctx::new().with(gen, true);
        let out = generator_forward(&mut ctx, &self.gen_cfg, masked.clone(), mask.clone())?;
        let raw = ctx.g.value(out.raw).clone();
        let fake = if self.cfg.disc_on_composite {
            raw.zip_map(&mask3, |r, m| r * m)?.zip_map(&masked, |a, b| a + b)?
        } else {
            raw
        };

        let (loss_d, d_grads) = {
            let mut dctx = Ctx::new().with(&self.disc, true);
            let real = dctx.g.constant(gt.clone());
            let fake = dctx.g.constant(fake);
            let sr = discriminator_forward(&mut dctx, &self.disc_cfg, &self.disc_buffers, real)?;
            let sf = discriminator_forward(&mut dctx, &self.disc_cfg, &self.disc_buffers, fake)?;
            let ld = adversarial_d_var(&mut dctx.g, sr, sf)?;
            let value = dctx.g.value(ld).item() as f64;
            let grads = dctx.g.backward(ld)?;
            (value, dctx.collect_grads(&grads, &self.disc))
        };
        let last_good = || format!("step {step}");
        if !loss_d.is_finite() {
            return Err(Error::TrainingAborted { step, reason: format!("discriminator loss {loss_d}"), last_good: last_good() });
        }
        adam_update(&mut self.disc, &d_grads, &mut self.adam_d, lr_d, hp)?;

        let mut ctx = ctx.with(&self.disc, false);
        let g = &mut ctx.g;
        let gt_var = g.constant(gt);
        let for_d = if self.cfg.disc_on_composite {
            let m = g.constant(mask3);
            let hole = g.mul(out.raw, m)?;
            let known = g.constant(masked);
            g.add(hole, known)?
        } else {
            out.raw
        };
        let pixel = pixel_loss_var(g, out.raw, gt_var, &mask, self.cfg.w_hole)?;
        let (perc, style) = perceptual_and_style_var(g, out.raw, gt_var, &self.embedder)?;
        let tv = tv_loss_var(g, out.raw)?;
        let lmk = match (out.points, gt_points) {
            (Some(p), Some(t)) => {
                let t = g.constant(t);
                landmark_loss_var(g, p, t, self.cfg.lmk_loss_sum)?
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };
        let sf = discriminator_forward(&mut ctx, &self.disc_cfg, &self.disc_buffers, for_d)?;
        let g = &mut ctx.g;
        let adv = adversarial_g_var(g, sf)?;
        let terms = [pixel, perc, style, tv, adv, lmk];
        let total = total_loss_var(g, terms, &self.weights)?;
        let v = |x| g.value(x).item() as f64;
        let comps = LossComponents { pixel: v(pixel), perc: v(perc), style: v(style), tv: v(tv), adv_g: v(adv), lmk: v(lmk) };
        let report = total_loss(&comps, &self.weights)
            .map_err(|e| Error::TrainingAborted { step, reason: e.to_string(), last_good: last_good() })?;
        let grads = ctx.g.backward(total)?;
        let g_grads = ctx.collect_grads(&grads, &self.gen);
        drop(ctx);
        adam_update(&mut self.gen, &g_grads, &mut self.adam_g, lr_g, hp)?;
        if let Some(name) = self.gen.first_non_finite().or(self.disc.first_non_finite()) {
            return Err(Error::TrainingAborted { step, reason: format!("parameter {name} became non-finite"), last_good: last_good() });
        }
        self.step += 1;
        Ok(StepLog { step, lr_g, lr_d, loss_d, losses: report })
    }
}

/// Repeats a one-channel `[n,1,h,w]` tensor over `c` channels.
pub(crate) fn expand_channels(t: &Tensor<f32>, c: usize) -> Result<Tensor<f32>> {
    let (n, _, h, w) = t.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * plane);
    for m in t.data().chunks(plane) {
        for _ in 0..c {
            out.extend_from_slice(m);
        }
    }
    Ok(Tensor::new(&[n, c, h, w], out)?)
}

/// Loads every manifest entry at the training resolution.
pub fn load_training_set(manifest: &DatasetManifest, side: usize) -> Result<Vec<Sample>> {
    manifest.entries.iter().map(|e| load_sample(e, side)).collect()
}

/// Where a run ended up.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub steps: u64,
}

/// Runs `trainer` up to `max_steps`, writing one JSON line per step to `log`,
/// periodic checkpoints and `final.ckpt` into `out_dir`.
pub fn train_loop(trainer: &mut Trainer, out_dir: &Path, log: &mut dyn Write) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut last_good: Option<PathBuf> = None;
    while trainer.step < trainer.cfg.max_steps {
        let entry = match trainer.train_step() {
            Ok(e) => e,
            Err(Error::TrainingAborted { step, reason, .. }) => {
                let last_good = last_good.map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
                return Err(Error::TrainingAborted { step, reason, last_good });
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(log, "{line}").map_err(|e| Error::io("metrics log", e))?;
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) {
            let p = out_dir.join(format!("step-{:08}.ckpt", trainer.step));
            trainer.checkpoint().save(&p)?;
            last_good = Some(p);
        }
    }
    let path = out_dir.join("final.ckpt");
    let checkpoint_id = trainer.checkpoint().save(&path)?;
    Ok(TrainOutcome { final_checkpoint: path, checkpoint_id, steps: trainer.step })
}

/// Synthetic training set of cartoon faces, for demos and smoke tests.
pub fn synthetic_samples(count: usize, side: usize, seed: u64) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let (image, lms) = crate::data::synth::face(mix(seed, i as u64), side);
            Sample { image, landmarks: Some(lms) }
        })
        .collect()
}

/// Landmarks of `samples` in order, for callers that need them apart.
pub fn sample_landmarks(samples: &[Sample]) -> Vec<Option<LandmarkSet>> {
    samples.iter().map(|s| s.landmarks.clone()).collect()
}
