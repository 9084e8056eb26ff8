//! Binary checkpoint format.
//!
//! One format serves LM checkpoints and dual-encoder checkpoints: a free-form
//! key/value header (config snapshot, step counter, metrics), a tensor
//! manifest, a raw f32 parameter blob, and an optional optimizer-state blob.
//! Loading validates that manifest offsets tile the blob exactly and that the
//! file ends where the last section ends; a corrupt file never yields a
//! partial checkpoint.
//!
//! # Layout (little-endian)
//!
//! ```text
//! magic "GLIMCKPT", version u32 = 1
//! kv_count u32, then per entry: key_len u32, key bytes, val_len u32, val bytes
//! manifest_count u32, then per tensor:
//!     name_len u32, name bytes, ndim u32, dims u64 each, offset u64 (in f32s)
//! param_len u64, then param_len * 4 bytes of f32 values
//! opt_flag u8 (0 absent, 1 present); when present:
//!     step u64, then two f64 blobs (first and second moments), param_len * 8 bytes each
//! ```
//! Optimizer moments are stored at f64 so a resumed run continues bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::optim::AdamState;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"GLIMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kv: Vec<(String, String)>,
    pub store: ParamStore<f32>,
    pub opt: Option<AdamState>,
}

impl Checkpoint {
    pub fn value(&self, key: &str) -> Option<&str> {
        self.kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn save(
    path: impl AsRef<Path>,
    kv: &[(String, String)],
    store: &ParamStore<f32>,
    opt: Option<&AdamState>,
) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    for (k, v) in kv {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(v.as_bytes());
    }

    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in store.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += p.data.len() as u64;
    }

    out.extend_from_slice(&offset.to_le_bytes());
    for p in store.params() {
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    match opt {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for blob in [&state.m, &state.v] {
                for vec in blob.iter() {
                    for &v in vec {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let fail = |msg: &str| CheckpointError::Format(msg.to_string());
    let mut cur = 0usize;
    macro_rules! take {
        ($n:expr) => {{
            let n: usize = $n;
            let end = cur.checked_add(n).ok_or_else(|| fail("length overflow"))?;
            if end > bytes.len() {
                return Err(fail("truncated file"));
            }
            let s = &bytes[cur..end];
            cur = end;
            s
        }};
    }
    macro_rules! take_u32 {
        () => {
            u32::from_le_bytes(take!(4).try_into().unwrap())
        };
    }
    macro_rules! take_u64 {
        () => {
            u64::from_le_bytes(take!(8).try_into().unwrap())
        };
    }
    macro_rules! take_str {
        () => {{
            let len = take_u32!() as usize;
            if len > bytes.len() {
                return Err(fail("string length exceeds file size"));
            }
            std::str::from_utf8(take!(len))
                .map_err(|_| fail("non-UTF-8 string"))?
                .to_string()
        }};
    }

    if take!(8) != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = take_u32!();
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }

    let kv_count = take_u32!() as usize;
    if kv_count > bytes.len() {
        return Err(fail("kv count exceeds file size"));
    }
    let mut kv = Vec::with_capacity(kv_count);
    for _ in 0..kv_count {
        let k = take_str!();
        let v = take_str!();
        kv.push((k, v));
    }

    let manifest_count = take_u32!() as usize;
    if manifest_count > bytes.len() {
        return Err(fail("manifest count exceeds file size"));
    }
    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        len: u64,
    }
    let mut manifest = Vec::with_capacity(manifest_count);
    for _ in 0..manifest_count {
        let name = take_str!();
        let ndim = take_u32!() as usize;
        if ndim > 8 {
            return Err(fail("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1u64;
        for _ in 0..ndim {
            let d = take_u64!();
            len = len.checked_mul(d).ok_or_else(|| fail("shape overflow"))?;
            shape.push(d as usize);
        }
        let offset = take_u64!();
        manifest.push(Entry { name, shape, offset, len });
    }

    let param_len = take_u64!();
    // offsets must tile [0, param_len) exactly, in manifest order
    let mut expect = 0u64;
    for e in &manifest {
        if e.offset != expect {
            return Err(fail(&format!(
                "manifest offset for {} is {}, expected {expect}",
                e.name, e.offset
            )));
        }
        expect = expect.checked_add(e.len).ok_or_else(|| fail("offset overflow"))?;
    }
    if expect != param_len {
        return Err(fail("manifest does not tile the parameter blob"));
    }
    if (param_len as usize).checked_mul(4).map_or(true, |n| cur + n > bytes.len()) {
        return Err(fail("truncated parameter blob"));
    }

    let mut store: ParamStore<f32> = ParamStore::new();
    for e in &manifest {
        let raw = take!(e.len as usize * 4);
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.contains(&e.name) {
            return Err(fail(&format!("duplicate tensor name {}", e.name)));
        }
        store.insert(e.name.clone(), e.shape.clone(), data);
    }

    let flag = take!(1)[0];
    let opt = match flag {
        0 => None,
        1 => {
            let step = take_u64!();
            let mut blobs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut blob = Vec::with_capacity(manifest.len());
                for e in &manifest {
                    let raw = take!(e.len as usize * 8);
                    blob.push(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    );
                }
                blobs.push(blob);
            }
            let v = blobs.pop().unwrap();
            let m = blobs.pop().unwrap();
            Some(AdamState { m, v, step })
        }
        other => return Err(fail(&format!("bad optimizer flag {other}"))),
    };

    if cur != bytes.len() {
        return Err(fail("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { kv, store, opt })
}
