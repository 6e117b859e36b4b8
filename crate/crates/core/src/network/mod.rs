//! Generator, discriminator and the parameter plumbing they share.

mod discriminator;
mod generator;
pub mod gradcheck;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use facefill_autodiff::{Gradients, Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::{
    disc_layers, discriminator_forward, discriminator_out_side, init_discriminator, refresh_spectral,
    spectral_sigma, DiscConfig,
};
pub use generator::{
    decode_from_f1, decode_to_f1, encode, generator_forward, init_generator, Encoded, GenOutput,
};

/// How the `[.]` in the landmark rasterization is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Floor,
    Round,
}

fn default_true() -> bool {
    true
}

fn default_alpha() -> f64 {
    0.5
}

/// Generator shape and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub dilation: usize,
    #[serde(default = "default_true")]
    pub attention_enabled: bool,
    #[serde(default = "default_true")]
    pub gated_conv_enabled: bool,
    #[serde(default = "default_true")]
    pub landmark_branch_enabled: bool,
    /// Feed the mask as a fourth encoder channel.
    #[serde(default = "default_true")]
    pub mask_channel: bool,
    pub input_side: usize,
    #[serde(default = "default_alpha")]
    pub landmark_alpha: f64,
    #[serde(default)]
    pub rasterize: Rounding,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            residual_blocks: 8,
            dilation: 2,
            attention_enabled: true,
            gated_conv_enabled: true,
            landmark_branch_enabled: true,
            mask_channel: true,
            input_side: 256,
            landmark_alpha: 0.5,
            rasterize: Rounding::Floor,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(8) {
            return Err(Error::Config(format!("input_side {} must be a positive multiple of 8", self.input_side)));
        }
        if self.base_channels == 0 || self.dilation == 0 {
            return Err(Error::Config("base_channels and dilation must be positive".into()));
        }
        if !(self.landmark_alpha > 0.0 && self.landmark_alpha.is_finite()) {
            return Err(Error::Config(format!("landmark_alpha {} must be positive", self.landmark_alpha)));
        }
        if self.map_side() != self.input_side / 2 {
            return Err(Error::Config(format!(
                "landmark map side {} must match the fusion resolution {}",
                self.map_side(),
                self.input_side / 2
            )));
        }
        Ok(())
    }

    /// Side of the landmark map consumed by the second fusion block.
    pub fn map_side(&self) -> usize {
        (self.landmark_alpha * self.input_side as f64).round() as usize
    }

    pub fn encoder_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn p1_channels(&self) -> usize {
        32 * self.base_channels
    }

    /// Widths of the three landmark node vectors (node2, node3, node4).
    pub fn node_widths(&self) -> [usize; 3] {
        let b = self.base_channels;
        [4 * b, 8 * b, 16 * b]
    }

    pub fn landmark_dim(&self) -> usize {
        self.node_widths().iter().sum()
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        let (lmk, gated) = a.flags();
        self.landmark_branch_enabled = lmk;
        self.gated_conv_enabled = gated;
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        [Ablation::Baseline, Ablation::BaseLmk, Ablation::Full]
            .into_iter()
            .find(|a| a.flags() == (self.landmark_branch_enabled, self.gated_conv_enabled))
    }
}

/// The three model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// No landmark branch, vanilla convolutions.
    #[serde(rename = "baseline")]
    Baseline,
    /// Landmark branch, vanilla convolutions.
    #[serde(rename = "base+lmk")]
    BaseLmk,
    /// Landmark branch and gated convolutions.
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    /// `(landmark_branch_enabled, gated_conv_enabled)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Baseline => (false, false),
            Ablation::BaseLmk => (true, false),
            Ablation::Full => (true, true),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Baseline => "baseline",
            Ablation::BaseLmk => "base+lmk",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Ablation::Baseline),
            "base+lmk" => Ok(Ablation::BaseLmk),
            "full" | "ours" => Ok(Ablation::Full),
            other => Err(Error::Argument(format!("unknown ablation {other:?} (baseline, base+lmk, full)"))),
        }
    }
}

/// Named, shaped arrays in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Name of the first array holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// Checks that `other` holds exactly the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in self.iter() {
            let Some(o) = other.get(name) else {
                return Err(Error::MissingParam(name.to_string()));
            };
            if o.shape() != t.shape() {
                return Err(Error::ParamShape { name: name.into(), expected: t.shape().to_vec(), found: o.shape().to_vec() });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Initial value of a lazily created parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Gain for LeakyReLU(0.2).
pub const LEAKY_GAIN: f64 = 1.3867504905630728;

/// Graph plus the parameter sources visible to one forward pass.
///
/// Parameters are bound on first use. A context built with [`Ctx::init`]
/// creates missing parameters instead of failing, which is how fresh models
/// are initialised: the forward pass itself declares every shape.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    stores: Vec<(&'s ParamStore<T>, bool)>,
    bound: IndexMap<String, Var>,
    fresh: Option<(ParamStore<T>, ChaCha8Rng)>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new() -> Self {
        Ctx { g: Graph::new(), stores: Vec::new(), bound: IndexMap::new(), fresh: None }
    }

    pub fn init(seed: u64) -> Self {
        Ctx { fresh: Some((ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))), ..Self::new() }
    }

    /// Adds a parameter source; `track` selects whether gradients flow to it.
    pub fn with(mut self, store: &'s ParamStore<T>, track: bool) -> Self {
        self.stores.push((store, track));
        self
    }

    /// Binds parameter `name`, checking it has `shape`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let found = self.stores.iter().find_map(|(s, track)| s.get(name).map(|t| (t, *track)));
        let var = match (found, &mut self.fresh) {
            (Some((t, track)), _) => {
                if t.shape() != shape {
                    return Err(Error::ParamShape { name: name.into(), expected: shape.to_vec(), found: t.shape().to_vec() });
                }
                self.g.leaf(t.clone(), track)
            }
            (None, Some((store, rng))) => {
                let t = match init {
                    Init::Const(c) => Tensor::full(shape, T::lit(c)),
                    Init::Kaiming { fan_in, gain } => {
                        let std = gain / (fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
                    }
                };
                store.insert(name, t.clone());
                self.g.param(t)
            }
            (None, None) => return Err(Error::MissingParam(name.into())),
        };
        self.bound.insert(name.into(), var);
        Ok(var)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// The store built by an initialising context.
    pub fn into_fresh(self) -> Option<ParamStore<T>> {
        self.fresh.map(|(s, _)| s)
    }

    /// Gradients for every parameter of `like`, zero where no gradient
    /// reached the parameter.
    pub fn collect_grads(&self, grads: &Gradients<T>, like: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in like.iter() {
            let g = self.bound.get(name).and_then(|&v| grads.get(v)).cloned();
            out.insert(name, g.unwrap_or_else(|| Tensor::zeros(t.shape())));
        }
        out
    }
}

impl<T: Real> Default for Ctx<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig { input_side: 100, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(GeneratorConfig::default().map_side(), 128);
        assert_eq!(GeneratorConfig::default().node_widths(), [256, 512, 1024]);
    }

    #[test]
    fn ablation_flags_roundtrip() {
        for a in [Ablation::Baseline, Ablation::BaseLmk, Ablation::Full] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
            assert_eq!(GeneratorConfig::default().with_ablation(a).ablation(), Some(a));
        }
        assert!("other".parse::<Ablation>().is_err());
    }

    #[test]
    fn ctx_binds_once_and_checks_shapes() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros(&[2, 3]));
        let mut ctx = Ctx::new().with(&store, true);
        let v1 = ctx.param("a", &[2, 3], Init::Const(0.0)).unwrap();
        let v2 = ctx.param("a", &[2, 3], Init::Const(0.0)).unwrap();
        assert_eq!(v1, v2);
        let mut ctx = Ctx::new().with(&store, true);
        assert!(matches!(ctx.param("a", &[3, 2], Init::Const(0.0)), Err(Error::ParamShape { .. })));
        assert!(matches!(ctx.param("b", &[1], Init::Const(0.0)), Err(Error::MissingParam(_))));
    }

    #[test]
    fn init_ctx_is_seeded() {
        let make = |seed| {
            let mut ctx = Ctx::<f32>::init(seed);
            ctx.param("w", &[4, 4], Init::Kaiming { fan_in: 4, gain: 1.0 }).unwrap();
            ctx.param("g", &[1], Init::Const(0.0)).unwrap();
            ctx.into_fresh().unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
        assert_eq!(make(3).get("g").unwrap().data(), &[0.0]);
    }
}
