//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CCLU"  u32 version
//! u32 n, n bytes of JSON {"network": .., "train": ..}
//! u64 epoch, u64 step, u64 optimizer step count, u64 master seed
//! u32 tensor count, then per tensor:
//!     u32 n, n bytes of UTF-8 name, u32 rank, rank x u64 dims, f64 values
//! ```
//!
//! Tensors are model parameters (`param/<name>`), optimizer moments
//! (`adam.m/<name>`, `adam.v/<name>`) and running batch-norm statistics
//! (`bn.mean/<layer>`, `bn.var/<layer>`), in that order. The random state
//! is fully described by the master seed and the counters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::optim::AdamW;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CCLU";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState, train: &TrainConfig) -> Result<Vec<u8>> {
    let model = &state.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let header = serde_json::to_vec(&Header {
        network: model.config.clone(),
        train: train.clone(),
    })?;
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    for v in [state.epoch, state.step, state.optimizer.t, state.seed] {
        put_u64(&mut out, v);
    }
    let count = 3 * model.params.len() + 2 * model.running.len();
    put_u32(&mut out, count as u32);
    for p in &model.params {
        put_tensor(
            &mut out,
            &format!("param/{}", p.name),
            p.value.shape(),
            p.value.data(),
        );
    }
    for (p, m) in model.params.iter().zip(&state.optimizer.m) {
        put_tensor(&mut out, &format!("adam.m/{}", p.name), &[m.len()], m);
    }
    for (p, v) in model.params.iter().zip(&state.optimizer.v) {
        put_tensor(&mut out, &format!("adam.v/{}", p.name), &[v.len()], v);
    }
    for (name, r) in &model.running {
        put_tensor(
            &mut out,
            &format!("bn.mean/{name}"),
            &[r.mean.len()],
            &r.mean,
        );
    }
    for (name, r) in &model.running {
        put_tensor(&mut out, &format!("bn.var/{name}"), &[r.var.len()], &r.var);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 2 {
            return Err(Error::Format(format!("{name}: rank {rank} unsupported")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                usize::try_from(self.u64()?)
                    .map_err(|_| Error::Format(format!("{name}: dimension overflow")))?,
            );
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format(format!("{name}: dimension overflow")))?;
        let raw = self.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{name}: too large")))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, shape, values))
    }
}

/// Parses a checkpoint. Validation is complete before any state is built,
/// and a file that does not match the model its header describes is
/// rejected.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let n = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let (epoch, step, t, seed) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let count = r.u32()? as usize;

    let mut model = Model::new(header.network)
        .map_err(|e| Error::Format(format!("bad network config: {e}")))?;
    let expected = 3 * model.params.len() + 2 * model.running.len();
    if count != expected {
        return Err(Error::Format(format!(
            "expected {expected} tensors, found {count}"
        )));
    }
    let mut optimizer = AdamW::new(&model.params);
    let mut next = |want: String, shape: &[usize]| -> Result<Vec<f64>> {
        let (name, got, values) = r.tensor()?;
        if name != want || got != shape {
            return Err(Error::Format(format!(
                "expected tensor {want} {shape:?}, found {name} {got:?}"
            )));
        }
        Ok(values)
    };
    for p in &mut model.params {
        let values = next(format!("param/{}", p.name), p.value.shape())?;
        p.value = Tensor::new(p.value.shape().to_vec(), values)?;
    }
    for (p, m) in model.params.iter().zip(&mut optimizer.m) {
        *m = next(format!("adam.m/{}", p.name), &[m.len()])?;
    }
    for (p, v) in model.params.iter().zip(&mut optimizer.v) {
        *v = next(format!("adam.v/{}", p.name), &[v.len()])?;
    }
    for (name, stats) in &mut model.running {
        stats.mean = next(format!("bn.mean/{name}"), &[stats.mean.len()])?;
    }
    for (name, stats) in &mut model.running {
        stats.var = next(format!("bn.var/{name}"), &[stats.var.len()])?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    optimizer.t = t;
    Ok(Checkpoint {
        state: TrainState {
            model,
            optimizer,
            epoch,
            step,
            seed,
        },
        train: header.train,
    })
}

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save(path: &Path, state: &TrainState, train: &TrainConfig) -> Result<()> {
    let bytes = encode(state, train)?;
    let tmp = path.with_extension("ccl.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
