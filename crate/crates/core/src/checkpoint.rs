//! Binary checkpoints: model configuration, parameters, optimiser moments,
//! step counter and generator position.
//!
//! Layout (little-endian): magic `DSCTCKPT`, format version `u32`, total
//! file length `u64`, JSON config (`u32` length + bytes), step `u64`, RNG
//! seed/stream/word position, optimiser flag and step, tensor count, then
//! per tensor its name (`u16` length + bytes), rank, dims (`u32`) and `f32`
//! data; a CRC-32 of everything before it closes the file.

use std::path::Path;

use dsct_tensor::{ParamStore, RngState, Tensor};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"DSCTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: u64,
    pub rng: RngState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.push(self.adam.is_some() as u8);
        out.extend_from_slice(&self.adam.as_ref().map_or(0, |a| a.step).to_le_bytes());
        let mut n = self.params.len();
        if self.adam.is_some() {
            n *= 3;
        }
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        if let Some(adam) = &self.adam {
            for (id, name, _) in self.params.iter() {
                put_tensor(&mut out, &format!("adam.m.{name}"), &adam.m[id.index()]);
                put_tensor(&mut out, &format!("adam.v.{name}"), &adam.v[id.index()]);
            }
        }
        let total = out.len() as u64 + 4;
        out[12..20].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 || &buf[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if buf.len() < 24 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let total = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes"));
        if total != buf.len() as u64 {
            return Err(Error::Integrity(format!(
                "checkpoint length {} does not match recorded length {total}",
                buf.len()
            )));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 20 };
        let json_len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
        config.validate()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let has_adam = r.take(1)?[0] == 1;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("unexpected bytes after the last tensor".into()));
        }
        let n_params = if has_adam { n / 3 } else { n };
        if has_adam && n % 3 != 0 {
            return Err(Error::Format("optimiser tensors do not mirror the parameters".into()));
        }
        let mut params = ParamStore::new();
        let mut rest = tensors.into_iter();
        for (name, t) in rest.by_ref().take(n_params) {
            params.add(name, t)?;
        }
        let adam = if has_adam {
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (_, name, p) in params.iter() {
                let (mn, mt) = rest.next().expect("count checked");
                let (vn, vt) = rest.next().expect("count checked");
                if mn != format!("adam.m.{name}") || vn != format!("adam.v.{name}") {
                    return Err(Error::Format(format!("optimiser state for {name} out of order")));
                }
                if mt.shape() != p.shape() || vt.shape() != p.shape() {
                    return Err(Error::Format(format!("optimiser state for {name} has the wrong shape")));
                }
                m.push(mt);
                v.push(vt);
            }
            Some(AdamState { m, v, step: adam_step })
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            adam,
            step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
