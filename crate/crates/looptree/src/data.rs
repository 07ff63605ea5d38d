//! Tensor data directories: raw little-endian f32 files plus `shapes.json`.
//!
//! ```json
//! {"0": {"file": "slot0.f32", "shape": [64, 64]}, "1": {"shape": [64, 64]}}
//! ```
//!
//! Keys are slot numbers; `file` defaults to `slot{N}.f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use looptree_core::backend::Buffers;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "shapes.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub shape: Vec<usize>,
}

impl Entry {
    fn file_for(&self, slot: usize) -> String {
        self.file.clone().unwrap_or_else(|| format!("slot{slot}.f32"))
    }
}

pub type Manifest = BTreeMap<usize, Entry>;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{MANIFEST}: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{file}: {got} bytes, expected {expected} for shape {shape:?}")]
    Size { file: String, got: usize, expected: usize, shape: Vec<usize> },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn decode(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn encode(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read every buffer listed in the manifest.
pub fn read_dir(dir: &Path) -> Result<(Manifest, Buffers), DataError> {
    let m = read_manifest(dir)?;
    let mut bufs = Buffers::new();
    for (slot, e) in &m {
        let file = e.file_for(*slot);
        let p = dir.join(&file);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let expected = 4 * e.shape.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(DataError::Size { file, got: bytes.len(), expected, shape: e.shape.clone() });
        }
        bufs.insert(*slot, decode(&bytes));
    }
    Ok((m, bufs))
}

/// Write `bufs` and merge their entries into the manifest.
pub fn write_dir(dir: &Path, shapes: &BTreeMap<usize, Vec<usize>>, bufs: &Buffers) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut m = match read_manifest(dir) {
        Ok(m) => m,
        Err(DataError::Io { .. }) => Manifest::new(),
        Err(e) => return Err(e),
    };
    for (slot, data) in bufs {
        let e = Entry { file: None, shape: shapes.get(slot).cloned().unwrap_or_else(|| vec![data.len()]) };
        let p = dir.join(e.file_for(*slot));
        fs::write(&p, encode(data)).map_err(io_err(&p))?;
        m.insert(*slot, e);
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(io_err(&p))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0e38, f32::NEG_INFINITY, 0.1];
        let shapes = BTreeMap::from([(3, vec![2, 3])]);
        write_dir(dir.path(), &shapes, &Buffers::from([(3, v.clone())])).unwrap();
        let (m, b) = read_dir(dir.path()).unwrap();
        assert_eq!(m[&3].shape, vec![2, 3]);
        assert_eq!(encode(&b[&3]), encode(&v));
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), r#"{"0": {"shape": [4]}}"#).unwrap();
        fs::write(dir.path().join("slot0.f32"), [0u8; 12]).unwrap();
        assert!(matches!(read_dir(dir.path()), Err(DataError::Size { expected: 16, .. })));
    }
}
