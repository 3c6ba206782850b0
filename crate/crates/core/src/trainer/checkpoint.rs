//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LVM1"                    magic
//! u32                       format version
//! u64 + bytes               UTF-8 JSON header
//! u32                       block count
//! per block:
//!   u32 + bytes             UTF-8 name
//!   u32 + u64 × rank        shape
//!   f64 × product(shape)    values
//! ```
//!
//! Model parameters are stored under their own names; Adam moments under
//! `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

use super::{ClipMeta, LayeredVideoModel, ModelSpec, TrainConfig};

pub const MAGIC: &[u8; 4] = b"LVM1";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string: JSON numbers cannot carry a full `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&self.seed);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().expect("validated on load"));
        rng
    }

    fn validate(&self) -> Result<()> {
        if self.seed.len() != 32 {
            return Err(Error::Format(format!("rng seed has {} bytes, expected 32", self.seed.len())));
        }
        self.word_pos
            .parse::<u128>()
            .map_err(|_| Error::Format(format!("rng word position `{}` is not an integer", self.word_pos)))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: LayeredVideoModel,
    pub epoch: u64,
    pub step: u64,
    pub rng_state: RngState,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    spec: ModelSpec,
    meta: ClipMeta,
    epoch: u64,
    step: u64,
    rng_state: RngState,
    adam_config: AdamConfig,
    adam_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ckpt.config.clone(),
        spec: ckpt.model.spec.clone(),
        meta: ckpt.model.meta.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng_state: ckpt.rng_state.clone(),
        adam_config: ckpt.adam.config,
        adam_step: ckpt.adam.step_count,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, ckpt.format_version);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let params = &ckpt.model.params;
    put_u32(&mut out, (params.len() * 3) as u32);
    for (name, t) in params.iter() {
        put_block(&mut out, name, t);
    }
    for (name, t) in params.names().iter().zip(&ckpt.adam.first_moment) {
        put_block(&mut out, &format!("adam.m.{}", name), t);
    }
    for (name, t) in params.names().iter().zip(&ckpt.adam.second_moment) {
        put_block(&mut out, &format!("adam.v.{}", name), t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated file while reading {} at byte {}", what, self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Format(format!("{} length {} is too large", what, n)))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a layered video model (bad magic bytes)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let json_len = r.len("header")?;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?)?;
    header.rng_state.validate()?;

    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("block name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "block name")?)
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("block rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("block shape")?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("block too large".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.push((name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last block", bytes.len() - r.pos)));
    }

    let mut model = LayeredVideoModel::new(header.spec, header.meta, 0)?;
    let take_prefixed = |prefix: &str| -> Result<Vec<Tensor>> {
        model
            .params
            .names()
            .iter()
            .map(|name| {
                let key = format!("{}{}", prefix, name);
                blocks
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("missing block `{}`", key)))
            })
            .collect()
    };
    let first_moment = take_prefixed("adam.m.")?;
    let second_moment = take_prefixed("adam.v.")?;
    model.assign_params(blocks.iter().filter(|(n, _)| !n.starts_with("adam.")).map(|(n, t)| (n.as_str(), t)))?;
    for (i, (m, v)) in first_moment.iter().zip(&second_moment).enumerate() {
        let shape = model.params.tensors()[i].shape();
        if m.shape() != shape || v.shape() != shape {
            return Err(Error::Format(format!("Adam moments for `{}` have the wrong shape", model.params.names()[i])));
        }
    }
    let adam = AdamState { config: header.adam_config, first_moment, second_moment, step_count: header.adam_step };
    Ok(Checkpoint {
        format_version: version,
        config: header.config,
        model,
        epoch: header.epoch,
        step: header.step,
        rng_state: header.rng_state,
        adam,
    })
}

pub fn save_model(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    // Write-then-rename so an interrupted save never clobbers the previous checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}
