//! Versioned, checksummed tensor container and the model checkpoint built on
//! it.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (tensor index, payload length, SHA-256 of the payload, free-form
//! metadata), then the payload of little-endian `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use facefill_autodiff::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{DiscConfig, GeneratorConfig, ParamStore};
use crate::training::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    payload_len: u64,
    sha256: String,
    meta: serde_json::Value,
}

/// Named groups of tensors plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub groups: IndexMap<String, ParamStore<f32>>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { groups: IndexMap::new(), meta }
    }
}

/// Serialized bytes and the payload digest (hex).
pub fn encode_container(c: &Container) -> (Vec<u8>, String) {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (group, store) in &c.groups {
        for (name, t) in store.iter() {
            tensors.push(Entry {
                group: group.clone(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: t.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sha256 = hex::encode(Sha256::digest(&payload));
    let header = Header { tensors, payload_len: payload.len() as u64, sha256: sha256.clone(), meta: c.meta.clone() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    (out, sha256)
}

/// Parses and verifies a container, returning it with its payload digest.
pub fn decode_container(bytes: &[u8], context: &str) -> Result<(Container, String)> {
    if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
        return Err(Error::format(context, "not a facefill checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREFIX..];
    if hlen > body.len() {
        return Err(Error::Integrity(format!("{context}: header truncated")));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Integrity(format!("{context}: unreadable header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() as u64 != header.payload_len {
        return Err(Error::Integrity(format!(
            "{context}: payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    let digest = hex::encode(Sha256::digest(payload));
    if digest != header.sha256 {
        return Err(Error::Integrity(format!("{context}: payload checksum mismatch")));
    }
    let mut c = Container::new(header.meta);
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize * 4;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len as usize {
            return Err(Error::Integrity(format!("{context}: tensor {}/{} out of range", e.group, e.name)));
        }
        let data = payload[start..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&e.shape, data)?;
        c.groups.entry(e.group).or_default().insert(e.name, t);
    }
    Ok((c, digest))
}

/// Writes atomically through a sibling temporary file.
pub fn write_container(path: &Path, c: &Container) -> Result<String> {
    let (bytes, digest) = encode_container(c);
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(digest)
}

pub fn read_container(path: &Path) -> Result<Container> {
    read_container_with_digest(path).map(|(c, _)| c)
}

pub fn read_container_with_digest(path: &Path) -> Result<(Container, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, &path.display().to_string())
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    step: u64,
    generator: GeneratorConfig,
    discriminator: DiscConfig,
    train: TrainConfig,
    adam_g_t: u64,
    adam_d_t: u64,
}

const KIND: &str = "facefill-model";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorConfig,
    pub discriminator: DiscConfig,
    pub train: TrainConfig,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub disc_buffers: ParamStore,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

impl Checkpoint {
    fn to_container(&self) -> Container {
        let meta = Meta {
            kind: KIND.into(),
            step: self.step,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            train: self.train.clone(),
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
        };
        let mut c = Container::new(serde_json::to_value(meta).expect("meta serializes"));
        for (name, store) in [
            ("gen", &self.gen),
            ("disc", &self.disc),
            ("disc_buf", &self.disc_buffers),
            ("adam_g_m", &self.adam_g.m),
            ("adam_g_v", &self.adam_g.v),
            ("adam_d_m", &self.adam_d.m),
            ("adam_d_v", &self.adam_d.v),
        ] {
            c.groups.insert(name.into(), store.clone());
        }
        c
    }

    /// Saves and returns the checkpoint id.
    pub fn save(&self, path: &Path) -> Result<String> {
        write_container(path, &self.to_container()).map(|d| short_id(&d))
    }

    pub fn load(path: &Path) -> Result<(Checkpoint, String)> {
        let (mut c, digest) = read_container_with_digest(path)?;
        let ctx = path.display().to_string();
        let meta = parse_meta(&c.meta, &ctx)?;
        let mut take = |g: &str| c.groups.shift_remove(g).ok_or_else(|| Error::Integrity(format!("{ctx}: missing group {g}")));
        let gen = take("gen")?;
        let disc = take("disc")?;
        let disc_buffers = take("disc_buf")?;
        let adam_g = AdamState { t: meta.adam_g_t, m: take("adam_g_m")?, v: take("adam_g_v")? };
        let adam_d = AdamState { t: meta.adam_d_t, m: take("adam_d_m")?, v: take("adam_d_v")? };
        let ck = Checkpoint {
            generator: meta.generator,
            discriminator: meta.discriminator,
            train: meta.train,
            step: meta.step,
            gen,
            disc,
            disc_buffers,
            adam_g,
            adam_d,
        };
        ck.validate()?;
        Ok((ck, short_id(&digest)))
    }

    /// Checks every stored array against the shapes the configs imply.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let expected_gen = crate::network::init_generator(&self.generator, 0)?;
        expected_gen.check_compatible(&self.gen)?;
        let (expected_disc, expected_buf) = crate::network::init_discriminator(
            &DiscConfig { init_power_iterations: 0, ..self.discriminator.clone() },
            0,
        )?;
        expected_disc.check_compatible(&self.disc)?;
        expected_buf.check_compatible(&self.disc_buffers)?;
        for (s, like) in [(&self.adam_g.m, &self.gen), (&self.adam_g.v, &self.gen), (&self.adam_d.m, &self.disc), (&self.adam_d.v, &self.disc)] {
            like.check_compatible(s)?;
        }
        Ok(())
    }
}

fn parse_meta(meta: &serde_json::Value, ctx: &str) -> Result<Meta> {
    let m: Meta = serde_json::from_value(meta.clone()).map_err(|e| Error::Integrity(format!("{ctx}: bad metadata: {e}")))?;
    if m.kind != KIND {
        return Err(Error::Integrity(format!("{ctx}: holds {:?}, not a model checkpoint", m.kind)));
    }
    Ok(m)
}

fn short_id(digest: &str) -> String {
    digest[..12].to_string()
}

/// Generator configuration and weights only, with the checkpoint id.
pub fn load_generator(path: &Path) -> Result<(GeneratorConfig, ParamStore, String)> {
    let (mut c, digest) = read_container_with_digest(path)?;
    let ctx = path.display().to_string();
    let meta = parse_meta(&c.meta, &ctx)?;
    let gen = c.groups.shift_remove("gen").ok_or_else(|| Error::Integrity(format!("{ctx}: missing group gen")))?;
    meta.generator.validate()?;
    crate::network::init_generator(&meta.generator, 0)?.check_compatible(&gen)?;
    Ok((meta.generator, gen, short_id(&digest)))
}
