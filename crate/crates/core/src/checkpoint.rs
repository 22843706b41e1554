//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMADCKPT" | u32 version | u64 header length | header JSON
//!            | u64 value count | f64 values | sha256 of everything before
//! ```
//!
//! The header carries the full configuration and every non-parameter part
//! of the state, plus the name and shape of each parameter tensor. Values
//! follow in [`Params::visit`] order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::model::ModelParams;
use crate::nn::Params;
use crate::scoring::PotResult;
use crate::training::{EpochLoss, ModelState};

pub const MAGIC: &[u8; 8] = b"MMADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    config_hash: String,
    names: Vec<String>,
    modality: Vec<usize>,
    config: Config,
    norm: NormStats,
    topology: GraphTopology,
    threshold: PotResult,
    loss_trace: Vec<EpochLoss>,
    tensors: Vec<(String, Vec<usize>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut values = Vec::with_capacity(state.params.param_count());
    state.params.visit("", &mut |name, a| {
        tensors.push((name.to_string(), a.shape().to_vec()));
        values.extend(a.iter().copied());
    });
    let header = Header {
        tool_version: crate::VERSION.to_string(),
        config_hash: state.config.hash(),
        names: state.names.clone(),
        modality: state.modality.clone(),
        config: state.config.clone(),
        norm: state.norm.clone(),
        topology: state.topology.clone(),
        threshold: state.threshold,
        loss_trace: state.loss_trace.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * values.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = usize::try_from(r.u64()?).map_err(|_| corrupt("header too large"))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(format!("header: {e}")))?;
    let count = usize::try_from(r.u64()?).map_err(|_| corrupt("value count too large"))?;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| corrupt("value count too large"))?)?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    header.config.validate()?;

    let mut params = ModelParams::new(&header.config, header.names.len(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut expected = Vec::new();
    params.visit("", &mut |name, a| expected.push((name.to_string(), a.shape().to_vec())));
    if expected != header.tensors {
        return Err(corrupt("parameter layout does not match the embedded configuration"));
    }
    if params.param_count() != count {
        return Err(corrupt(format!(
            "{count} values for {} parameters",
            params.param_count()
        )));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    params.visit_mut(&mut |a| a.iter_mut().for_each(|x| *x = values.next().expect("count checked")));

    Ok(ModelState {
        names: header.names,
        modality: header.modality,
        config: header.config,
        norm: header.norm,
        params,
        topology: header.topology,
        threshold: header.threshold,
        loss_trace: header.loss_trace,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
