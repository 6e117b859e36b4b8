//! Convolutional feature extractor shared by the perceptual/style losses and
//! the FID metric.
//!
//! The default is a fixed, seeded random stack, which keeps tests and demos
//! self-contained. A pretrained extractor can be supplied as a weights file in
//! the checkpoint container format (group `embedder`, arrays
//! `stage{i}.weight` / `stage{i}.bias`, strides in the metadata). FID values
//! are only comparable with published numbers when such a canonical
//! extractor is used.

use std::path::Path;

use facefill_autodiff::{Activation, ConvGeom, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_container, write_container, Container};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::network::ParamStore;

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbedderMeta {
    kind: String,
    strides: Vec<usize>,
}

const GROUP: &str = "embedder";
const KIND: &str = "conv-embedder";

/// Stack of 3×3 ReLU convolutions; each stage is one feature level.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEmbedder {
    stages: Vec<Stage>,
}

impl ConvEmbedder {
    /// Three stages (16, 32, 64 channels; strides 1, 2, 2) with seeded
    /// He-normal weights.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = [(3, 16, 1), (16, 32, 2), (32, 64, 2)];
        let stages = plan
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| (std * rng.sample::<f64, _>(StandardNormal)) as f32);
                Stage { weight, bias: Tensor::zeros(&[cout]), stride }
            })
            .collect();
        ConvEmbedder { stages }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path).map_err(|e| Error::Dependency(format!("embedder weights {}: {e}", path.display())))?;
        let meta: EmbedderMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Dependency(format!("embedder metadata in {}: {e}", path.display())))?;
        if meta.kind != KIND {
            return Err(Error::Dependency(format!("{} holds {:?}, not embedder weights", path.display(), meta.kind)));
        }
        let group = c.groups.get(GROUP).ok_or_else(|| Error::Dependency(format!("{} has no {GROUP} group", path.display())))?;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &stride) in meta.strides.iter().enumerate() {
            let get = |k: &str| {
                group.get(&format!("stage{i}.{k}")).cloned().ok_or_else(|| Error::Dependency(format!("missing stage{i}.{k}")))
            };
            let (weight, bias) = (get("weight")?, get("bias")?);
            let s = weight.shape().to_vec();
            if s.len() != 4 || s[1] != cin || s[2] != s[3] || s[2] % 2 == 0 || bias.shape() != [s[0]] || stride == 0 {
                return Err(Error::Dependency(format!("stage{i} has shape {s:?}")));
            }
            cin = s[0];
            stages.push(Stage { weight, bias, stride });
        }
        if stages.is_empty() {
            return Err(Error::Dependency("embedder has no stages".into()));
        }
        Ok(ConvEmbedder { stages })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut group = ParamStore::new();
        for (i, s) in self.stages.iter().enumerate() {
            group.insert(format!("stage{i}.weight"), s.weight.clone());
            group.insert(format!("stage{i}.bias"), s.bias.clone());
        }
        let meta = EmbedderMeta { kind: KIND.into(), strides: self.stages.iter().map(|s| s.stride).collect() };
        let mut c = Container::new(serde_json::to_value(meta).expect("serializable"));
        c.groups.insert(GROUP.into(), group);
        write_container(path, &c).map(|_| ())
    }

    /// Short content hash identifying the weights.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stages {
            h.update((s.stride as u64).to_le_bytes());
            for v in s.weight.data().iter().chain(s.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..6])
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Width of [`ConvEmbedder::embed`] vectors.
    pub fn dim(&self) -> usize {
        self.stages.iter().map(|s| s.weight.shape()[0]).sum()
    }

    /// Per-stage feature maps of `x: [n,3,h,w]`, differentiable w.r.t. `x`.
    pub fn stage_features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = g.constant(s.weight.cast());
            let b = g.constant(s.bias.cast());
            let k = s.weight.shape()[2];
            let y = g
                .conv2d(h, w, Some(b), ConvGeom::new(s.stride, k / 2, 1))
                .map_err(|e| Error::Dependency(format!("embedder: {e}")))?;
            h = g.activation(y, Activation::Relu);
            out.push(h);
        }
        Ok(out)
    }

    /// Globally pooled stage features concatenated into one vector.
    pub fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let rgb = img.to_rgb();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 3, rgb.height(), rgb.width()], rgb.to_chw())?);
        let mut v = Vec::with_capacity(self.dim());
        for f in self.stage_features(&mut g, x)? {
            let pooled = g.global_avg_pool(f).map_err(|e| Error::Dependency(format!("embedder: {e}")))?;
            v.extend(g.value(pooled).data().iter().map(|&x| x as f64));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_is_deterministic() {
        assert_eq!(ConvEmbedder::seeded(1), ConvEmbedder::seeded(1));
        assert_ne!(ConvEmbedder::seeded(1).id(), ConvEmbedder::seeded(2).id());
        assert_eq!(ConvEmbedder::seeded(1).dim(), 112);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = ConvEmbedder::seeded(4);
        let p = dir.path().join("emb.ckpt");
        e.save(&p).unwrap();
        assert_eq!(ConvEmbedder::load(&p).unwrap(), e);
        assert!(matches!(ConvEmbedder::load(&dir.path().join("none")), Err(Error::Dependency(_))));
    }

    #[test]
    fn embedding_has_fixed_length() {
        let e = ConvEmbedder::seeded(5);
        let (img, _) = crate::data::synth::face(1, 32);
        let v = e.embed(&img).unwrap();
        assert_eq!(v.len(), e.dim());
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        let grey = Image::filled(16, 16, 1, 0.5).unwrap();
        assert_eq!(e.embed(&grey).unwrap().len(), 112);
    }
}
