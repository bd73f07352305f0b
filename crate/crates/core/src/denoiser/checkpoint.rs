//! Binary checkpoint: `"XDLM"`, version, `N`, `d`, `L` (u32 LE), then every
//! parameter tensor in [`Params::NAMES`] order as f64 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::toy::{Params, ToyDenoiser};
use super::train::{HistoryEntry, TrainConfig};
use super::Denoiser;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XDLM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar JSON stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub train: TrainConfig,
    pub mask_id: usize,
    /// Characters of the vocabulary, in id order.
    pub chars: String,
    pub param_count: usize,
    pub history: Vec<HistoryEntry>,
    /// Training text, used as the reference when evaluating samples.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

impl CheckpointMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Self = serde_json::from_str(&text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "sidecar version {} is not supported (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        Ok(meta)
    }
}

pub fn encode_checkpoint<W: Write>(model: &ToyDenoiser, mut w: W) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        model.vocab_size() as u32,
        model.d_model() as u32,
        model.max_len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for tensor in model.params.tensors() {
        for x in tensor {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Decodes a checkpoint; the mask is the last vocabulary id.
pub fn decode_checkpoint<R: Read>(mut r: R) -> Result<ToyDenoiser> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut header = [0u32; 4];
    for v in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        *v = u32::from_le_bytes(b);
    }
    let [version, n, d, l] = header;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (n, d, l) = (n as usize, d as usize, l as usize);
    if n < 2 {
        return Err(bad(format!("vocabulary size {n} is too small")));
    }
    let mut params = Params::zeros(n, d, l);
    for (name, tensor) in Params::NAMES.iter().zip(params.tensors_mut()) {
        for x in tensor.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| bad(format!("truncated tensor {name}: {e}")))?;
            *x = f64::from_le_bytes(b);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    ToyDenoiser::from_params(n, n - 1, d, l, params)
}

pub fn write_checkpoint(path: &Path, model: &ToyDenoiser) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_checkpoint(model, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(BufReader::new(file))
}
