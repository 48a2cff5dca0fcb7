//! Binary checkpoint container: a `MVPCKPT1` header line, a length-prefixed
//! JSON metadata block, then one record per tensor (name, dtype, shape,
//! little-endian f32 data, row-major).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{EncoderCheckpoint, PretrainKind};
use crate::numerics::{ParamSet, Tensor};
use crate::vit::EncoderConfig;

pub const MAGIC: &[u8] = b"MVPCKPT1\n";
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    kind: String,
    frozen: Vec<String>,
    meta: M,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, params: &ParamSet) -> Result<Vec<u8>> {
    let env = Envelope {
        kind: kind.to_string(),
        frozen: params.frozen_prefixes().cloned().collect(),
        meta,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + params.num_elements() * 4 + 64);
    out.extend_from_slice(MAGIC);
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend((t.ndim() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend((*d as u64).to_le_bytes());
        }
        out.extend(t.le_f32_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (needed {n} more)", self.pos)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_inner<M: DeserializeOwned>(bytes: &[u8], kind: &str) -> std::result::Result<(M, ParamSet), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err("missing MVPCKPT1 header".into());
    }
    let n = r.u64()? as usize;
    let env: Envelope<M> = serde_json::from_slice(r.take(n)?).map_err(|e| format!("metadata: {e}"))?;
    if env.kind != kind {
        return Err(format!("holds a {} checkpoint, expected {kind}", env.kind));
    }
    let count = r.u64()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(format!("tensor `{name}` has unknown dtype {dtype}"));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or("shape overflows")?;
        let raw = r.take(numel.checked_mul(4).ok_or("shape overflows")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        params.insert(name, t).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    for f in env.frozen {
        params.freeze(f);
    }
    Ok((env.meta, params))
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], kind: &str, path: &Path) -> Result<(M, ParamSet)> {
    decode_inner(bytes, kind).map_err(|e| Error::format(path, e))
}

pub fn write<M: Serialize>(path: &Path, kind: &str, meta: &M, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(kind, meta, params)?).map_err(|e| Error::io(path, e))
}

pub fn read<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, kind, path)
}

pub const ENCODER_KIND: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: EncoderConfig,
    pub kind: PretrainKind,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub fingerprint: String,
    pub loss_curve: Vec<(u64, f64)>,
}

impl EncoderCheckpoint {
    pub(crate) fn meta(&self) -> EncoderMeta {
        EncoderMeta {
            config: self.config.clone(),
            kind: self.kind,
            seed: self.seed,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            fingerprint: self.fingerprint(),
            loss_curve: self.loss_curve.clone(),
        }
    }

    pub(crate) fn from_meta(meta: EncoderMeta, params: ParamSet, path: &Path) -> Result<Self> {
        let ck = EncoderCheckpoint {
            config: meta.config,
            params,
            kind: meta.kind,
            seed: meta.seed,
            corpus_fingerprint: meta.corpus_fingerprint,
            loss_curve: meta.loss_curve,
        };
        if ck.fingerprint() != meta.fingerprint {
            return Err(Error::format(path, "tensor data does not match the recorded fingerprint"));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(ENCODER_KIND, &self.meta(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let path = Path::new("<memory>");
        let (meta, params) = decode(bytes, ENCODER_KIND, path)?;
        Self::from_meta(meta, params, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, ENCODER_KIND, &self.meta(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = read(path, ENCODER_KIND)?;
        Self::from_meta(meta, params, path)
    }
}
