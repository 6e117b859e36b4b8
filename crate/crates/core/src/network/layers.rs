//! Building blocks: plain and gated convolutions, dilated residual blocks and
//! short-long attention.

use facefill_autodiff::{Activation, ConvGeom, Graph, Real, Var};

use super::{Ctx, Init, LEAKY_GAIN};
use crate::error::{Error, Result};

pub const LEAKY: Activation = Activation::LeakyRelu(0.2);

/// Shape and activation of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub geom: ConvGeom,
    pub act: Activation,
    pub transposed: bool,
    /// Multiplier on the default weight scale.
    pub init_scale: f64,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        ConvSpec { cin, cout, k, geom, act: Activation::Identity, transposed: false, init_scale: 1.0 }
    }

    /// `k×k`, stride 1, padding that keeps the spatial size.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self::new(cin, cout, k, ConvGeom::new(1, k / 2, 1))
    }

    pub fn act(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    /// 4×4 stride-2 transposed convolution doubling the spatial size.
    pub fn up(cin: usize, cout: usize) -> Self {
        ConvSpec { transposed: true, ..Self::new(cin, cout, 4, ConvGeom::new(2, 1, 1)) }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.init_scale = s;
        self
    }

    fn weight_shape(&self, cout: usize) -> [usize; 4] {
        if self.transposed {
            [self.cin, cout, self.k, self.k]
        } else {
            [cout, self.cin, self.k, self.k]
        }
    }

    fn fan_in(&self) -> usize {
        let f = self.cin * self.k * self.k;
        if self.transposed {
            f / (self.geom.stride * self.geom.stride).max(1)
        } else {
            f
        }
    }

    fn gain(&self) -> f64 {
        let g = match self.act {
            Activation::LeakyRelu(_) => LEAKY_GAIN,
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        };
        g * self.init_scale
    }
}

fn weight_and_bias<T: Real>(ctx: &mut Ctx<T>, name: &str, spec: &ConvSpec, gain: f64) -> Result<(Var, Var)> {
    let w = ctx.param(
        &format!("{name}.weight"),
        &spec.weight_shape(spec.cout),
        Init::Kaiming { fan_in: spec.fan_in(), gain },
    )?;
    let b = ctx.param(&format!("{name}.bias"), &[spec.cout], Init::Const(0.0))?;
    Ok((w, b))
}

fn run_conv<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
    Ok(if spec.transposed {
        g.conv_transpose2d(x, w, Some(b), spec.geom)?
    } else {
        g.conv2d(x, w, Some(b), spec.geom)?
    })
}

/// Gated convolution over explicit `[feature w, feature b, gate w, gate b]`.
pub fn gated_apply<T: Real>(g: &mut Graph<T>, x: Var, p: [Var; 4], spec: &ConvSpec) -> Result<Var> {
    let axis = if spec.transposed { 1 } else { 0 };
    let w = g.concat(&[p[0], p[2]], axis)?;
    let b = g.concat(&[p[1], p[3]], 0)?;
    let both = run_conv(g, x, w, b, spec)?;
    let f = g.narrow(both, 1, 0, spec.cout)?;
    let gate = g.narrow(both, 1, spec.cout, spec.cout)?;
    let f = g.activation(f, spec.act);
    let gate = g.sigmoid(gate);
    Ok(g.mul(f, gate)?)
}

fn check_channels<T: Real>(ctx: &Ctx<T>, x: Var, name: &str, cin: usize) -> Result<()> {
    let s = ctx.g.shape(x);
    if s.len() != 4 || s[1] != cin {
        return Err(Error::Argument(format!("{name}: expected {cin} input channels, got shape {s:?}")));
    }
    Ok(())
}

/// Convolution with bias, then the layer's activation.
pub fn conv<T: Real>(ctx: &mut Ctx<T>, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
    check_channels(ctx, x, name, spec.cin)?;
    let (w, b) = weight_and_bias(ctx, name, &spec, spec.gain())?;
    let y = run_conv(&mut ctx.g, x, w, b, &spec)?;
    Ok(ctx.g.activation(y, spec.act))
}

/// `φ(conv_f(x)) ⊙ σ(conv_g(x))` when `gated`, otherwise `φ(conv_f(x))`.
///
/// The feature branch lives under `{name}.feature`, the gate under
/// `{name}.gate`, so switching gating off removes exactly the gate arrays.
/// Both branches are evaluated as one convolution over stacked weights.
pub fn gated_conv<T: Real>(ctx: &mut Ctx<T>, x: Var, name: &str, spec: ConvSpec, gated: bool) -> Result<Var> {
    check_channels(ctx, x, name, spec.cin)?;
    let (wf, bf) = weight_and_bias(ctx, &format!("{name}.feature"), &spec, spec.gain())?;
    if !gated {
        let y = run_conv(&mut ctx.g, x, wf, bf, &spec)?;
        return Ok(ctx.g.activation(y, spec.act));
    }
    let (wg, bg) = weight_and_bias(ctx, &format!("{name}.gate"), &spec, 1.0)?;
    gated_apply(&mut ctx.g, x, [wf, bf, wg, bg], &spec)
}

/// `x + conv2(φ(conv1(x)))`, both 3×3 with the given dilation.
pub fn dilated_residual<T: Real>(ctx: &mut Ctx<T>, x: Var, name: &str, channels: usize, dilation: usize) -> Result<Var> {
    let geom = ConvGeom::new(1, dilation, dilation);
    let h = conv(ctx, x, &format!("{name}.conv1"), ConvSpec::new(channels, channels, 3, geom).act(LEAKY))?;
    let h = conv(ctx, h, &format!("{name}.conv2"), ConvSpec::new(channels, channels, 3, geom).scaled(0.1))?;
    Ok(ctx.g.add(x, h)?)
}

/// Row-stochastic `[n, hw, hw]` attention between spatial positions of `x`.
pub fn attention_weights<T: Real>(ctx: &mut Ctx<T>, x: Var, name: &str) -> Result<Var> {
    let [n, c, h, w] = dims(ctx, x)?;
    let ck = (c / 8).max(1);
    let pw = ConvSpec::new(c, ck, 1, ConvGeom::new(1, 0, 1));
    let q = conv(ctx, x, &format!("{name}.query"), pw)?;
    let k = conv(ctx, x, &format!("{name}.key"), pw)?;
    let q = ctx.g.reshape(q, &[n, ck, h * w])?;
    let k = ctx.g.reshape(k, &[n, ck, h * w])?;
    let logits = ctx.g.batch_matmul(q, k, true, false)?;
    Ok(ctx.g.softmax(logits)?)
}

/// Self-attention over `x` (short term) plus the same attention applied to
/// the earlier feature `e` (long term):
/// `x + γ_s·(V Aᵀ) + γ_l·(E Aᵀ)`, both `γ` starting at zero.
pub fn short_long_attention<T: Real>(ctx: &mut Ctx<T>, x: Var, e: Var, name: &str) -> Result<Var> {
    let [n, c, h, w] = dims(ctx, x)?;
    if ctx.g.shape(e) != ctx.g.shape(x) {
        return Err(Error::Argument(format!("{name}: long-term feature {:?} vs {:?}", ctx.g.shape(e), ctx.g.shape(x))));
    }
    let a = attention_weights(ctx, x, name)?;
    let v = conv(ctx, x, &format!("{name}.value"), ConvSpec::new(c, c, 1, ConvGeom::new(1, 0, 1)))?;
    let v = ctx.g.reshape(v, &[n, c, h * w])?;
    let ef = ctx.g.reshape(e, &[n, c, h * w])?;
    let short = ctx.g.batch_matmul(v, a, false, true)?;
    let long = ctx.g.batch_matmul(ef, a, false, true)?;
    let gs = ctx.param(&format!("{name}.gamma_short"), &[1], Init::Const(0.0))?;
    let gl = ctx.param(&format!("{name}.gamma_long"), &[1], Init::Const(0.0))?;
    let short = ctx.g.scale_by(short, gs)?;
    let long = ctx.g.scale_by(long, gl)?;
    let mix = ctx.g.add(short, long)?;
    let mix = ctx.g.reshape(mix, &[n, c, h, w])?;
    Ok(ctx.g.add(x, mix)?)
}

pub(crate) fn dims<T: Real>(ctx: &Ctx<T>, x: Var) -> Result<[usize; 4]> {
    let (n, c, h, w) = ctx.g.value(x).dims4()?;
    Ok([n, c, h, w])
}
