//! Binary checkpoint container.
//!
//! ```text
//! "AVCK" | u32 version | u32 len | ViTConfig as JSON
//!        | u32 n | n × tensor                       model parameters
//!        | u8 optimizer kind | u64 step | u32 n | n × tensor
//!        | u64 seed | u64 stream | u128 word_pos    RNG position
//!        | u64 epoch
//!        | u32 CRC-32 of every preceding byte
//!
//! tensor = u32 name len | name (UTF-8) | u8 dtype | u32 rank | rank × u32 dim
//!        | little-endian payload
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::rng::RngSnapshot;
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;
use crate::vit::{ModelParams, ViTConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_NONE: u8 = 0;
const OPT_SGD: u8 = 1;
const OPT_ADAMW: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ViTConfig,
    pub params: ModelParams<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub rng: RngSnapshot,
    /// Completed epochs.
    pub epoch: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_table<T: Real>(out: &mut Vec<u8>, prefix: &str, params: &ModelParams<T>) {
    for (name, t) in params.named() {
        put_tensor(out, &format!("{prefix}{name}"), t);
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);

        put_u32(&mut out, self.params.named().len() as u32);
        put_table(&mut out, "", &self.params);

        match &self.optimizer {
            None => {
                out.push(OPT_NONE);
                put_u64(&mut out, 0);
                put_u32(&mut out, 0);
            }
            Some(OptimizerState::Sgd { momentum }) => {
                out.push(OPT_SGD);
                put_u64(&mut out, 0);
                put_u32(&mut out, momentum.named().len() as u32);
                put_table(&mut out, "momentum.", momentum);
            }
            Some(OptimizerState::AdamW { step, first, second }) => {
                out.push(OPT_ADAMW);
                put_u64(&mut out, *step);
                put_u32(&mut out, 2 * first.named().len() as u32);
                put_table(&mut out, "exp_avg.", first);
                put_table(&mut out, "exp_avg_sq.", second);
            }
        }

        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.epoch);
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path, None)
    }

    /// Loads and additionally requires every tensor to fit `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ViTConfig) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path, Some(expected))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&ViTConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path: path.to_path_buf() };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: r.path, offset: 0, expected: "AVCK" });
        }
        r.pos = 4;
        let version = r.u32("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { path: r.path, found: version, supported: CHECKPOINT_VERSION });
        }
        if bytes.len() < 12 {
            return Err(r.truncated("checksum trailer"));
        }
        // the trailer is not part of the parsed body
        r.bytes = &bytes[..bytes.len() - 4];

        let json_len = r.u32("config length")? as usize;
        let json_at = r.pos;
        let json = r.take(json_len, "config JSON")?;
        let config: ViTConfig = serde_json::from_slice(json).map_err(|e| Error::Malformed {
            path: r.path.clone(),
            offset: json_at as u64,
            what: format!("embedded model config: {e}"),
        })?;
        config.validate()?;
        let target = expected.unwrap_or(&config);

        let count = r.u32("tensor count")? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            named.push(r.tensor::<T>()?);
        }
        let params = ModelParams::from_named(target, named)?;

        let kind_at = r.pos;
        let kind = r.u8("optimizer kind")?;
        let step = r.u64("optimizer step")?;
        let count = r.u32("optimizer tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            table.push(r.tensor::<T>()?);
        }
        let optimizer = match kind {
            OPT_NONE if table.is_empty() => None,
            OPT_SGD => Some(OptimizerState::Sgd { momentum: take_prefixed(target, &mut table, "momentum.")? }),
            OPT_ADAMW => {
                let first = take_prefixed(target, &mut table, "exp_avg.")?;
                let second = take_prefixed(target, &mut table, "exp_avg_sq.")?;
                Some(OptimizerState::AdamW { step, first, second })
            }
            _ => {
                return Err(Error::Malformed {
                    path: r.path,
                    offset: kind_at as u64,
                    what: format!("unknown optimizer kind {kind}"),
                })
            }
        };
        if let Some((name, _)) = table.first() {
            return Err(Error::validation(format!("unexpected optimizer tensor `{name}`")));
        }

        let seed = r.u64("rng seed")?;
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let epoch = r.u64("epoch")?;
        if r.pos != r.bytes.len() {
            return Err(Error::Malformed {
                path: r.path,
                offset: r.pos as u64,
                what: format!("{} unexpected bytes before checksum", r.bytes.len() - r.pos),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { path: r.path, stored, computed });
        }
        Ok(Checkpoint {
            config: target.clone(),
            params,
            optimizer,
            rng: RngSnapshot { seed, stream, word_pos },
            epoch,
        })
    }
}

fn take_prefixed<T: Real>(config: &ViTConfig, table: &mut Vec<(String, Tensor<T>)>, prefix: &str) -> Result<ModelParams<T>> {
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (name, t) in table.drain(..) {
        match name.strip_prefix(prefix) {
            Some(stripped) => picked.push((stripped.to_string(), t)),
            None => rest.push((name, t)),
        }
    }
    *table = rest;
    ModelParams::from_named(config, picked)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn truncated(&self, what: &str) -> Error {
        Error::Truncated { path: self.path.clone(), offset: self.pos as u64, what: what.to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32("tensor name length")? as usize;
        let name_at = self.pos;
        let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed {
                path: self.path.clone(),
                offset: name_at as u64,
                what: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = self.pos;
        let tag = self.u8("dtype")?;
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            _ => {
                return Err(Error::Malformed {
                    path: self.path.clone(),
                    offset: dtype_at as u64,
                    what: format!("tensor `{name}` has dtype tag {tag}, expected {:?}", T::DTYPE),
                })
            }
        }
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Malformed {
                path: self.path.clone(),
                offset: dtype_at as u64 + 1,
                what: format!("tensor `{name}` has implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
        let size = T::DTYPE.size();
        let payload = self.take(numel.saturating_mul(size), &format!("payload of tensor `{name}`"))?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed {
            path: self.path.clone(),
            offset: dtype_at as u64,
            what: format!("tensor `{name}`: {e}"),
        })?;
        Ok((name, t))
    }
}
