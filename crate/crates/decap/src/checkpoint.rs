//! Binary checkpoint format.
//!
//! Layout: the magic string `DECAP1`, then for each named parameter in
//! store order: name length (u32 little-endian), UTF-8 name, rank (u32),
//! dims (u32 each), raw 32-bit little-endian floats. Values are held in
//! `f64` in memory and stored as `f32` on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;

pub const MAGIC: &[u8; 6] = b"DECAP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic) in {0}")]
    BadMagic(String),
    #[error("malformed checkpoint {path}: {what}")]
    Malformed { path: String, what: String },
    #[error("parameter {name}: checkpoint shape {found:?} does not match store shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write every parameter of `store` to `path`.
pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        w.write_all(bytes).map_err(|e| io_err(path, e))?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
        for &v in &p.data {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Raw contents of a checkpoint file in on-disk order.
pub fn read_entries(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let mut entries = Vec::new();
    loop {
        let mut lenbuf = [0u8; 4];
        match r.read_exact(&mut lenbuf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(path, e)),
        }
        let name_len = u32::from_le_bytes(lenbuf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Malformed {
            path: path.display().to_string(),
            what: "parameter name is not UTF-8".into(),
        })?;
        r.read_exact(&mut lenbuf).map_err(|e| io_err(path, e))?;
        let rank = u32::from_le_bytes(lenbuf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut lenbuf).map_err(|e| io_err(path, e))?;
            shape.push(u32::from_le_bytes(lenbuf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut fbuf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut fbuf).map_err(|e| io_err(path, e))?;
            data.push(f32::from_le_bytes(fbuf) as f64);
        }
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Load values into an already-built store. Every parameter whose name
/// starts with `prefix` (empty = all) must be present with a matching
/// shape; extra checkpoint entries outside the prefix are ignored.
pub fn load_into(store: &mut ParamStore, path: &Path, prefix: &str) -> Result<(), CheckpointError> {
    let entries = read_entries(path)?;
    let mut found: Vec<(crate::params::ParamId, Vec<f64>)> = Vec::new();
    for (name, shape, data) in &entries {
        if !name.starts_with(prefix) {
            continue;
        }
        let Some(id) = store.id_of(name) else { continue };
        let expected = store.get(id).shape.clone();
        if expected != *shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: shape.clone(),
                expected,
            });
        }
        found.push((id, data.clone()));
    }
    for id in store.ids() {
        let name = store.name(id).to_string();
        if name.starts_with(prefix) && !found.iter().any(|(f, _)| *f == id) {
            return Err(CheckpointError::MissingParam(name));
        }
    }
    for (id, data) in found {
        store.get_mut(id).data = data;
    }
    Ok(())
}
