//! Checkpoint files: a parameter snapshot plus the full run description,
//! sufficient to rebuild the model and reproduce its outputs bit-exactly.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "RDPM" | version u32 | header-JSON length u32 | header JSON |
//! param count u32 | params f32 x count
//! ```
//!
//! The header JSON carries the training configuration (including the
//! schedule triple and optimizer settings implied by it), the model
//! architecture, and the epoch at which the snapshot was taken. It is
//! serialized with sorted keys, so equal checkpoints are equal byte-wise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::model::ModelConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RDPM";
const VERSION: u32 = 1;

/// A parameter snapshot with everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    /// Completed epochs at snapshot time.
    pub epoch: usize,
    pub params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    epoch: usize,
}

/// Writes `ckpt` to `path` in the binary layout above.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.config.validate()?;
    ckpt.model.validate()?;
    if ckpt.params.is_empty() {
        return Err(Error::invalid("refusing to save a checkpoint with no parameters"));
    }

    let header = Header {
        config: ckpt.config.clone(),
        model: ckpt.model,
        epoch: ckpt.epoch,
    };
    // Through a Value the object keys serialize sorted, independent of
    // struct declaration order.
    let header_value = serde_json::to_value(&header).expect("header serializes");
    let header_bytes = serde_json::to_vec(&header_value).expect("JSON value serializes");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header_bytes.len() as u32).to_le_bytes())?;
    write(&header_bytes)?;
    write(&(ckpt.params.len() as u32).to_le_bytes())?;
    let mut param_bytes = Vec::with_capacity(ckpt.params.len() * 4);
    for p in &ckpt.params {
        param_bytes.extend_from_slice(&p.to_le_bytes());
    }
    write(&param_bytes)?;
    out.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |message: String| Error::format(path, message);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    let version = read_u32(&mut input, path)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, want {VERSION}")));
    }
    let header_len = read_u32(&mut input, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(format!("bad header JSON: {e}")))?;
    header.config.validate().map_err(|e| bad(format!("bad stored config: {e}")))?;
    header.model.validate().map_err(|e| bad(format!("bad stored model config: {e}")))?;

    let count = read_u32(&mut input, path)? as usize;
    if count == 0 {
        return Err(bad("checkpoint holds no parameters".into()));
    }
    let mut param_bytes = vec![0u8; count * 4];
    input.read_exact(&mut param_bytes).map_err(|e| Error::io(path, e))?;
    let params: Vec<f32> = param_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut extra = [0u8; 1];
    match input.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after parameter array".into())),
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok(Checkpoint { config: header.config, model: header.model, epoch: header.epoch, params })
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}
