use facefill_autodiff::{ConvGeom, Real, Tensor, Var};

use super::layers::{conv, dilated_residual, dims, gated_conv, short_long_attention, ConvSpec, LEAKY};
use super::{Ctx, GeneratorConfig, ParamStore};
use crate::data::{LandmarkSet, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::landmark::{landmark_head, rasterize_batch};

/// Encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Shared feature after residual blocks and attention, at `side/8`.
    pub f_share: Var,
    /// Full-resolution skip (stem output).
    pub skip_full: Var,
    /// Half-resolution skip (first downsampling output).
    pub skip_half: Var,
    /// Last downsampling output, before the residual blocks.
    pub pre_residual: Var,
}

/// Encodes `masked` (holes already zeroed, `[n,3,s,s]`) with the mask
/// `[n,1,s,s]` as an extra channel when configured.
pub fn encode<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, masked: Var, mask: Var) -> Result<Encoded> {
    cfg.validate()?;
    let [_, c, h, w] = dims(ctx, masked)?;
    if c != 3 || h != cfg.input_side || w != cfg.input_side {
        return Err(Error::Argument(format!(
            "generator expects [n,3,{s},{s}] input, got {:?}",
            ctx.g.shape(masked),
            s = cfg.input_side
        )));
    }
    let b = cfg.base_channels;
    let x = if cfg.mask_channel { ctx.g.concat(&[masked, mask], 1)? } else { masked };
    let cin = if cfg.mask_channel { 4 } else { 3 };
    let gated = cfg.gated_conv_enabled;
    let down = |cin, cout| ConvSpec::new(cin, cout, 3, ConvGeom::new(2, 1, 1)).act(LEAKY);

    let stem = conv(ctx, x, "enc.stem", ConvSpec::same(cin, b, 5).act(LEAKY))?;
    let d1 = gated_conv(ctx, stem, "enc.down1", down(b, 2 * b), gated)?;
    let d2 = gated_conv(ctx, d1, "enc.down2", down(2 * b, 4 * b), gated)?;
    let d3 = gated_conv(ctx, d2, "enc.down3", down(4 * b, 4 * b), gated)?;
    let mut f = d3;
    for i in 0..cfg.residual_blocks {
        f = dilated_residual(ctx, f, &format!("enc.res{i}"), 4 * b, cfg.dilation)?;
    }
    if cfg.attention_enabled {
        f = short_long_attention(ctx, f, d3, "enc.attn")?;
    }
    Ok(Encoded { f_share: f, skip_full: stem, skip_half: d1, pre_residual: d3 })
}

/// Upsamples `f_share` twice and applies the first fusion block, giving the
/// half-resolution feature that the landmark branch also reads.
pub fn decode_to_f1<T: Real>(ctx: &mut Ctx<T>, cfg: &GeneratorConfig, enc: &Encoded) -> Result<Var> {
    let b = cfg.base_channels;
    let gated = cfg.gated_conv_enabled;
    let u1 = gated_conv(ctx, enc.f_share, "dec.up1", ConvSpec::up(4 * b, 4 * b).act(LEAKY), gated)?;
    let u2 = gated_conv(ctx, u1, "dec.up2", ConvSpec::up(4 * b, 2 * b).act(LEAKY), gated)?;
    let cat = ctx.g.concat(&[enc.skip_half, u2], 1)?;
    conv(ctx, cat, "dec.fuse1", ConvSpec::same(4 * b, 2 * b, 3).act(LEAKY))
}

/// Second and third fusion blocks and the output convolution. `v` is the
/// `[n,68,s/2,s/2]` landmark map, required exactly when the landmark branch
/// is enabled.
pub fn decode_from_f1<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &GeneratorConfig,
    enc: &Encoded,
    f1: Var,
    v: Option<Var>,
) -> Result<Var> {
    let b = cfg.base_channels;
    let x = match (cfg.landmark_branch_enabled, v) {
        (true, Some(v)) => {
            let [n, _, hf, wf] = dims(ctx, f1)?;
            let want = [n, NUM_LANDMARKS, hf, wf];
            if ctx.g.shape(v) != want {
                return Err(Error::Argument(format!("landmark map {:?}, expected {want:?}", ctx.g.shape(v))));
            }
            let cat = ctx.g.concat(&[f1, v], 1)?;
            conv(ctx, cat, "dec.fuse2", ConvSpec::same(2 * b + NUM_LANDMARKS, 2 * b, 3).act(LEAKY))?
        }
        (false, None) => f1,
        (true, None) => return Err(Error::Argument("landmark map required".into())),
        (false, Some(_)) => return Err(Error::Argument("landmark branch is disabled".into())),
    };
    let u3 = gated_conv(ctx, x, "dec.up3", ConvSpec::up(2 * b, b).act(LEAKY), cfg.gated_conv_enabled)?;
    let cat = ctx.g.concat(&[enc.skip_full, u3], 1)?;
    let f3 = conv(ctx, cat, "dec.fuse3", ConvSpec::same(2 * b, b, 3).act(LEAKY))?;
    let out = conv(ctx, f3, "dec.out", ConvSpec::same(b, 3, 3))?;
    Ok(ctx.g.sigmoid(out))
}

/// Vars of one generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput {
    /// Raw `[n,3,s,s]` output in `[0,1]`.
    pub raw: Var,
    /// `[n,136]` interleaved landmark coordinates in input pixels.
    pub points: Option<Var>,
    pub f1: Var,
    pub encoded: Encoded,
    /// Landmark map fed to the second fusion block.
    pub landmark_map: Option<Var>,
}

impl GenOutput {
    pub fn landmarks<T: Real>(&self, ctx: &Ctx<T>) -> Result<Option<Vec<LandmarkSet>>> {
        let Some(p) = self.points else { return Ok(None) };
        let flat: Vec<f32> = ctx.g.value(p).data().iter().map(|v| v.as_f64() as f32).collect();
        flat.chunks(2 * NUM_LANDMARKS).map(LandmarkSet::from_flat).collect::<Result<_>>().map(Some)
    }
}

/// Full generator: encode, landmark branch, rasterize predicted points,
/// decode. `masked` and `mask` are `[n,3,s,s]` and `[n,1,s,s]`.
pub fn generator_forward<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &GeneratorConfig,
    masked: Tensor<T>,
    mask: Tensor<T>,
) -> Result<GenOutput> {
    let masked = ctx.g.constant(masked);
    let mask = ctx.g.constant(mask);
    let encoded = encode(ctx, cfg, masked, mask)?;
    let f1 = decode_to_f1(ctx, cfg, &encoded)?;
    let (points, landmark_map) = if cfg.landmark_branch_enabled {
        let points = landmark_head(ctx, cfg, encoded.f_share, f1)?;
        let map = rasterize_batch(ctx.g.value(points), cfg)?;
        (Some(points), Some(ctx.g.constant(map)))
    } else {
        (None, None)
    };
    let raw = decode_from_f1(ctx, cfg, &encoded, f1, landmark_map)?;
    Ok(GenOutput { raw, points, f1, encoded, landmark_map })
}

/// Fresh generator parameters for `cfg`, seeded.
pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    // Parameter shapes do not depend on the spatial size, so a minimal
    // input is enough to declare them all.
    let small = GeneratorConfig { input_side: 8, landmark_alpha: 0.5, ..cfg.clone() };
    let mut ctx = Ctx::<f32>::init(seed);
    let masked = Tensor::zeros(&[1, 3, 8, 8]);
    let mask = Tensor::zeros(&[1, 1, 8, 8]);
    generator_forward(&mut ctx, &small, masked, mask)?;
    Ok(ctx.into_fresh().expect("initialising context"))
}
