//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8  | magic `GRUCKPT1` |
//! | 4  | format version (`1`) |
//! | 1  | element precision in bits (`32` or `64`) |
//! | 3  | zero padding |
//! | 32 | SHA-256 of the model spec JSON |
//! | 8 x 5 | epoch, batch in epoch, step, optimizer updates, run seed |
//! | 4 + n | model spec JSON |
//! | 4 + n | training config JSON |
//! | 4  | tensor count |
//! | ... | directory: name length (u16), name, role (u8), rank (u8), extents (u64 each), data offset (u64), element count (u64) |
//! | ... | raw element data, offsets relative to the start of this section |
//!
//! Roles: 0 parameter, 1 optimizer accumulator, 2 batch-norm running mean,
//! 3 batch-norm running variance.

use std::path::Path;

use super::model::{Model, Param};
use super::spec::ModelSpec;
use super::trainer::{Counters, TrainConfig, Trainer};
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"GRUCKPT1";
pub const VERSION: u32 = 1;

const PARAM: u8 = 0;
const ACCUMULATOR: u8 = 1;
const BN_MEAN: u8 = 2;
const BN_VAR: u8 = 3;

struct Entry<'a, T> {
    name: String,
    role: u8,
    shape: Vec<usize>,
    data: &'a [T],
}

pub fn encode<T: Element>(trainer: &Trainer<T>) -> Vec<u8> {
    let model = &trainer.model;
    let spec = model.spec();
    let mut entries: Vec<Entry<'_, T>> = Vec::new();
    for p in model.params() {
        entries.push(Entry {
            name: p.name.clone(),
            role: PARAM,
            shape: p.value.shape().to_vec(),
            data: p.value.data(),
        });
    }
    for (p, acc) in model.params().iter().zip(&trainer.optimizer.acc) {
        entries.push(Entry {
            name: format!("opt.{}", p.name),
            role: ACCUMULATOR,
            shape: p.value.shape().to_vec(),
            data: acc,
        });
    }
    for (i, s) in model.bn_stats().iter().enumerate() {
        for (role, suffix, data) in [(BN_MEAN, "mean", &s.mean), (BN_VAR, "var", &s.var)] {
            entries.push(Entry {
                name: format!("bn{i}.{suffix}"),
                role,
                shape: vec![data.len()],
                data,
            });
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[T::BITS, 0, 0, 0]);
    out.extend_from_slice(&spec.hash());
    let c = trainer.counters;
    for v in [c.epoch, c.batch, c.step, trainer.optimizer.updates, trainer.seed] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for json in [
        serde_json::to_vec(spec).expect("spec serializes"),
        serde_json::to_vec(&trainer.config).expect("config serializes"),
    ] {
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.role);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        offset += (e.data.len() * T::BYTES) as u64;
    }
    for e in &entries {
        for &v in e.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("checkpoint truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn json<D: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<D> {
        let len = self.u32(what)? as usize;
        let at = self.pos as u64;
        let raw = self.take(len, what)?;
        serde_json::from_slice(raw).map_err(|e| Error::format(at, format!("{what}: {e}")))
    }
}

/// Header fields readable without knowing the element type.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub precision: u8,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub counters: Counters,
    pub seed: u64,
}

fn header(c: &mut Cursor<'_>) -> Result<(CheckpointInfo, u64)> {
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let precision = c.u8("precision")?;
    c.take(3, "padding")?;
    let hash: [u8; 32] = c.take(32, "spec hash")?.try_into().expect("32 bytes");
    let counters = Counters {
        epoch: c.u64("epoch")?,
        batch: c.u64("batch")?,
        step: c.u64("step")?,
    };
    let updates = c.u64("optimizer updates")?;
    let seed = c.u64("seed")?;
    let spec: ModelSpec = c.json("model spec")?;
    if spec.hash() != hash {
        return Err(Error::CheckpointMismatch("embedded spec does not match the stored hash".into()));
    }
    let config = c.json("training config")?;
    Ok((
        CheckpointInfo {
            precision,
            spec,
            config,
            counters,
            seed,
        },
        updates,
    ))
}

pub fn inspect(bytes: &[u8]) -> Result<CheckpointInfo> {
    header(&mut Cursor { bytes, pos: 0 }).map(|(info, _)| info)
}

/// Restores a trainer. With `expected` given, the stored spec hash must
/// match it.
pub fn decode<T: Element>(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<Trainer<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let (info, updates) = header(&mut c)?;
    if let Some(want) = expected {
        if want.hash() != info.spec.hash() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds model {} ({}), expected {} ({})",
                info.spec.name,
                &info.spec.hash_hex()[..12],
                want.name,
                &want.hash_hex()[..12]
            )));
        }
    }
    if info.precision != T::BITS {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint stores {}-bit elements, requested {}-bit",
            info.precision,
            T::BITS
        )));
    }
    let count = c.u32("tensor count")? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let role = c.u8("role")?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let offset = c.u64("offset")? as usize;
        let n = c.u64("element count")? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(Error::format(at, format!("tensor {name}: extents {shape:?} do not hold {n} elements")));
        }
        dir.push((name, role, shape, offset, n));
    }
    let data = &bytes[c.pos..];
    let mut params = Vec::new();
    let mut acc = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for (name, role, shape, offset, n) in dir {
        let end = offset
            .checked_add(n * T::BYTES)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::format((c.pos + offset) as u64, format!("tensor {name} runs past the end of the file")))?;
        let values: Vec<T> = data[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        match role {
            PARAM => params.push(Param {
                name,
                value: Tensor::from_vec(shape, values)?,
            }),
            ACCUMULATOR => acc.push(values),
            BN_MEAN => means.push(values),
            BN_VAR => vars.push(values),
            other => return Err(Error::format(c.pos as u64, format!("unknown tensor role {other}"))),
        }
    }
    if means.len() != vars.len() {
        return Err(Error::CheckpointMismatch("unpaired batch-norm statistics".into()));
    }
    let stats = means.into_iter().zip(vars).map(|(mean, var)| RunningStats { mean, var }).collect();
    let model = Model::from_parts(&info.spec, params, stats)?;
    if acc.len() != model.params().len() || acc.iter().zip(model.params()).any(|(a, p)| a.len() != p.value.len()) {
        return Err(Error::CheckpointMismatch("optimizer state does not match the parameters".into()));
    }
    let mut trainer = Trainer::new(model, info.config, info.seed)?;
    trainer.optimizer.acc = acc;
    trainer.optimizer.updates = updates;
    trainer.counters = info.counters;
    Ok(trainer)
}

pub fn save_checkpoint<T: Element>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(trainer)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>, expected: Option<&ModelSpec>) -> Result<Trainer<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}
