//! Binary dataset cache so built datasets reload bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RDDS" | version u32 | count u64 | channels u32 | height u32 |
//! width u32 | header-JSON length u32 | header-JSON bytes |
//! per patch: image f32 x (c*h*w) | bitpacked mask ceil(h*w/8) bytes |
//!            flags u8 (bit 0 contaminated, bit 1 eval split)
//! ```
//!
//! Mask bits are row-major, least-significant bit first; padding bits of
//! the final byte must be zero. The header JSON is free-form build
//! metadata (generation parameters, counts) stored with sorted keys, so a
//! rebuild with identical inputs produces an identical file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabeledPatch, Split};
use crate::core::ImageTensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RDDS";
const VERSION: u32 = 1;

/// Writes a dataset and its build metadata. All patches must share one
/// shape and satisfy [`LabeledPatch::validate`].
pub fn save_dataset(
    path: &Path,
    patches: &[LabeledPatch],
    header: &serde_json::Value,
) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::invalid("refusing to save an empty dataset"));
    }
    let shape = patches[0].image.shape();
    for (i, p) in patches.iter().enumerate() {
        if p.image.shape() != shape {
            return Err(Error::invalid(format!(
                "patch {i} has shape {:?}, expected {shape:?}",
                p.image.shape()
            )));
        }
        p.validate()?;
    }
    let (c, h, w) = shape;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));

    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(patches.len() as u64).to_le_bytes())?;
    write(&(c as u32).to_le_bytes())?;
    write(&(h as u32).to_le_bytes())?;
    write(&(w as u32).to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header).expect("JSON value serializes");
    write(&(header_bytes.len() as u32).to_le_bytes())?;
    write(&header_bytes)?;

    for p in patches {
        let mut image_bytes = Vec::with_capacity(p.image.len() * 4);
        for v in p.image.data() {
            image_bytes.extend_from_slice(&v.to_le_bytes());
        }
        write(&image_bytes)?;
        write(&pack_mask(&p.pixel_mask))?;
        let flags =
            u8::from(p.is_contaminated) | (u8::from(p.split == Split::Eval) << 1);
        write(&[flags])?;
    }
    out.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], returning the patches and
/// the build-metadata header.
pub fn load_dataset(path: &Path) -> Result<(Vec<LabeledPatch>, serde_json::Value)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |message: String| Error::format(path, message);

    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    let version = read_u32(&mut input, path)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, want {VERSION}")));
    }
    let count = read_u64(&mut input, path)? as usize;
    let c = read_u32(&mut input, path)? as usize;
    let h = read_u32(&mut input, path)? as usize;
    let w = read_u32(&mut input, path)? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(bad(format!("degenerate patch shape {c}x{h}x{w}")));
    }
    let header_len = read_u32(&mut input, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut input, &mut header_bytes, path)?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(format!("header is not valid JSON: {e}")))?;

    let mask_bytes = (h * w).div_ceil(8);
    let mut patches = Vec::with_capacity(count);
    for i in 0..count {
        let mut image_bytes = vec![0u8; c * h * w * 4];
        read_exact(&mut input, &mut image_bytes, path)?;
        let data: Vec<f32> = image_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let image = ImageTensor::from_data(c, h, w, data)?;

        let mut packed = vec![0u8; mask_bytes];
        read_exact(&mut input, &mut packed, path)?;
        let pixel_mask = unpack_mask(&packed, h * w)
            .ok_or_else(|| bad(format!("patch {i}: nonzero mask padding bits")))?;

        let mut flags = [0u8; 1];
        read_exact(&mut input, &mut flags, path)?;
        if flags[0] & !0b11 != 0 {
            return Err(bad(format!("patch {i}: unknown flag bits {:#04x}", flags[0])));
        }
        let is_contaminated = flags[0] & 1 != 0;
        let split = if flags[0] & 0b10 != 0 { Split::Eval } else { Split::Train };

        let patch = LabeledPatch { image, pixel_mask, is_contaminated, split };
        patch
            .validate()
            .map_err(|e| bad(format!("patch {i} fails validation: {e}")))?;
        patches.push(patch);
    }

    // The file must end exactly here.
    let mut extra = [0u8; 1];
    match input.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after final patch".into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((patches, header))
}

fn pack_mask(mask: &[u8]) -> Vec<u8> {
    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    packed
}

fn unpack_mask(packed: &[u8], len: usize) -> Option<Vec<u8>> {
    let mut mask = vec![0u8; len];
    for (i, slot) in mask.iter_mut().enumerate() {
        *slot = (packed[i / 8] >> (i % 8)) & 1;
    }
    // Reject set bits beyond the mask length.
    for i in len..packed.len() * 8 {
        if (packed[i / 8] >> (i % 8)) & 1 != 0 {
            return None;
        }
    }
    Some(mask)
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    input.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
