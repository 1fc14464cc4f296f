//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "RTCK"
//! version      u32
//! digest       32 bytes SHA-256 of the model config's canonical text
//! step         u64
//! seed         u64
//! count        u32      number of tensors
//! count times:
//!   name_len   u32
//!   name       utf-8
//!   rank       u32
//!   extents    rank x u64
//!   precision  u8       0 = f32, 1 = f64
//!   values     raw little-endian
//! ```
//!
//! Tensor names: `param.<name>`, `adam_m.<name>`, `adam_v.<name>`,
//! `centroid.l<L>.h<H>` and the scalar `centroid_decay.l<L>.h<H>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamMoments;
use super::state::TrainState;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig, Params};
use crate::routing::CentroidSet;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RTCK";
pub const FORMAT_VERSION: u32 = 1;

/// Canonical one-line description of a model architecture.
pub fn canonical_model_text(cfg: &ModelConfig) -> String {
    format!(
        "layers={};d_model={};heads={};ffn_mult={};vocab={};max_seq={};decay={:?};plan={}",
        cfg.layers, cfg.d_model, cfg.heads, cfg.ffn_mult, cfg.vocab, cfg.max_seq, cfg.decay, cfg.plan
    )
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(canonical_model_text(cfg).as_bytes()).into()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    out.push(T::PRECISION.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes a training state.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&config_digest(state.config()));
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.seed);

    let params = state.model.params.named();
    let m = state.moments.m.named();
    let v = state.moments.v.named();
    let count = params.len() * 3 + state.model.centroids.len() * 2;
    put_u32(&mut out, count as u32);
    for (prefix, list) in [("param", &params), ("adam_m", &m), ("adam_v", &v)] {
        for (name, t) in list.iter() {
            put_tensor(&mut out, &format!("{prefix}.{name}"), *t);
        }
    }
    for (&(l, h), c) in &state.model.centroids {
        put_tensor(&mut out, &format!("centroid.l{l}.h{h}"), c.mu());
        let decay = Tensor::new(vec![], vec![c.decay()]).expect("scalar");
        put_tensor(&mut out, &format!("centroid_decay.l{l}.h{h}"), &decay);
    }
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Model state is f64; single-precision entries are parsed but not accepted.
enum Stored {
    Single,
    Double(Tensor<f64>),
}

impl Stored {
    fn double(self, name: &str) -> Result<Tensor<f64>> {
        match self {
            Stored::Double(t) => Ok(t),
            Stored::Single => Err(Error::Checkpoint(format!("{name} is stored in single precision"))),
        }
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    let width = T::PRECISION.byte_width();
    let raw = r.take(len * width)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Parses a checkpoint, refusing it unless it was written for `cfg`.
pub fn decode(bytes: &[u8], cfg: &ModelConfig) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let digest = r.take(32)?;
    if digest != config_digest(cfg) {
        return Err(Error::Checkpoint(
            "config digest mismatch: checkpoint was written for a different model config".into(),
        ));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let tag = r.take(1)?[0];
        let stored = match Precision::from_tag(tag) {
            Some(Precision::Single) => {
                read_tensor::<f32>(&mut r, shape)?;
                Stored::Single
            }
            Some(Precision::Double) => Stored::Double(read_tensor(&mut r, shape)?),
            None => return Err(Error::Checkpoint(format!("unknown precision tag {tag} for {name}"))),
        };
        tensors.insert(name, stored);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }

    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
            .double(&name)?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };

    let mut model = LanguageModel::new(cfg.clone(), seed)?;
    let template = model.params.clone();
    let fill = |prefix: &str, dst: &mut Params, take: &mut dyn FnMut(String, &Tensor) -> Result<Tensor>| -> Result<()> {
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        for ((name, slot), like) in names.iter().zip(dst.tensors_mut()).zip(template.tensors()) {
            *slot = take(format!("{prefix}.{name}"), like)?;
        }
        Ok(())
    };
    let mut moments = AdamMoments::zeros_like(&template);
    fill("param", &mut model.params, &mut take)?;
    fill("adam_m", &mut moments.m, &mut take)?;
    fill("adam_v", &mut moments.v, &mut take)?;
    let keys: Vec<(usize, usize)> = model.centroids.keys().copied().collect();
    for (l, h) in keys {
        let like = model.centroids[&(l, h)].mu().clone();
        let mu = take(format!("centroid.l{l}.h{h}"), &like)?;
        let decay = take(format!("centroid_decay.l{l}.h{h}"), &Tensor::zeros(vec![]))?;
        model
            .centroids
            .insert((l, h), CentroidSet::from_raw(mu, decay.data()[0])?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        model,
        moments,
        step,
        seed,
    })
}

pub fn load(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    decode(&bytes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut cfg = ModelConfig::new(2, 8, 2, 8, 3, 2).unwrap();
        cfg.vocab = 12;
        let mut s = TrainState::new(cfg, 3).unwrap();
        s.step = 17;
        s.moments.m.w_out.data_mut()[0] = 0.25;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let back = decode(&encode(&s), s.config()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout() {
        let s = state();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"RTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(&bytes[8..40], &config_digest(s.config()));
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 17);
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let s = state();
        let mut other = s.config().clone();
        other.decay = 0.5;
        let err = decode(&encode(&s), &other).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"), "{err}");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let s = state();
        let bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 3], s.config()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, s.config()).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, s.config()).is_err());
    }
}
