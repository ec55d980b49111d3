//! Checkpoint serialization: a flat binary file of named f64 arrays plus a
//! JSON manifest of shapes.
//!
//! Binary layout, little-endian, entries sorted by name:
//!   u64 name byte length | name UTF-8 bytes | u64 element count | f64 payload
//! The manifest at `<stem>.manifest.json` maps each name to its shape.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::Tensor;

pub fn bin_path(stem: &Path) -> PathBuf {
    PathBuf::from(format!("{}.bin", stem.display()))
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", stem.display()))
}

/// Writes `<stem>.bin` and `<stem>.manifest.json`.
pub fn write_checkpoint(stem: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let bin = bin_path(stem);
    let mut w = BufWriter::new(File::create(&bin).map_err(|e| Error::io(&bin, e))?);
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())
            .and_then(|_| w.write_all(bytes))
            .and_then(|_| w.write_all(&(tensor.numel() as u64).to_le_bytes()))
            .map_err(|e| Error::io(&bin, e))?;
        for v in tensor.value().iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
        }
        shapes.insert(name.clone(), tensor.shape().to_vec());
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;

    let manifest = manifest_path(stem);
    let json = serde_json::to_string_pretty(&shapes)?;
    std::fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Reads both files back; every array is validated against the manifest.
pub fn read_checkpoint(stem: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let manifest = manifest_path(stem);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let shapes: BTreeMap<String, Vec<usize>> = serde_json::from_str(&text)?;

    let bin = bin_path(stem);
    let mut r = BufReader::new(File::open(&bin).map_err(|e| Error::io(&bin, e))?);
    let mut out = BTreeMap::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(&bin, e)),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Checkpoint {
                path: bin.clone(),
                reason: format!("implausible name length {name_len}"),
            });
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(&bin, e))?;
        let name = String::from_utf8(name_bytes).map_err(|e| Error::Checkpoint {
            path: bin.clone(),
            reason: format!("array name is not UTF-8: {e}"),
        })?;
        r.read_exact(&mut len8).map_err(|e| Error::io(&bin, e))?;
        let count = u64::from_le_bytes(len8) as usize;
        let shape = shapes.get(&name).cloned().ok_or_else(|| Error::Checkpoint {
            path: manifest.clone(),
            reason: format!("array {name:?} missing from manifest"),
        })?;
        let expected: usize = shape.iter().product();
        if expected != count {
            return Err(Error::Checkpoint {
                path: bin.clone(),
                reason: format!(
                    "array {name:?} has {count} elements but manifest shape {shape:?} implies {expected}"
                ),
            });
        }
        let mut data = Vec::with_capacity(count);
        let mut v8 = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut v8).map_err(|e| Error::io(&bin, e))?;
            data.push(f64::from_le_bytes(v8));
        }
        out.insert(name, (shape, data));
    }
    for name in shapes.keys() {
        if !out.contains_key(name) {
            return Err(Error::Checkpoint {
                path: bin.clone(),
                reason: format!("array {name:?} listed in manifest but absent from binary"),
            });
        }
    }
    Ok(out)
}

/// Copies checkpoint values into an existing named-parameter map; shapes must
/// match exactly and the name sets must coincide.
pub fn load_into(stem: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let loaded = read_checkpoint(stem)?;
    let bin = bin_path(stem);
    for (name, tensor) in params {
        let (shape, data) = loaded.get(name).ok_or_else(|| Error::Checkpoint {
            path: bin.clone(),
            reason: format!("parameter {name:?} not present in checkpoint"),
        })?;
        if shape != tensor.shape() {
            return Err(Error::Checkpoint {
                path: bin.clone(),
                reason: format!(
                    "parameter {name:?} shape {shape:?} does not match model shape {:?}",
                    tensor.shape()
                ),
            });
        }
        tensor.set_value(data);
    }
    for name in loaded.keys() {
        if !params.contains_key(name) {
            return Err(Error::Checkpoint {
                path: bin.clone(),
                reason: format!("checkpoint carries unknown parameter {name:?}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_entries() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("heads.box.w0".to_string(), Tensor::param(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125]));
        m.insert("newborn.embedding".to_string(), Tensor::param(&[4], vec![0.5, 1.5, -2.5, 3.5]));
        m
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let entries = sample_entries();
        write_checkpoint(&stem, &entries).unwrap();
        let loaded = read_checkpoint(&stem).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, tensor) in &entries {
            let (shape, data) = &loaded[name];
            assert_eq!(shape, &tensor.shape().to_vec());
            assert_eq!(data, &tensor.to_vec());
        }
    }

    #[test]
    fn load_into_restores_parameter_values() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let entries = sample_entries();
        write_checkpoint(&stem, &entries).unwrap();
        let fresh = sample_entries();
        for t in fresh.values() {
            t.set_value(&vec![0.0; t.numel()]);
        }
        load_into(&stem, &fresh).unwrap();
        for (name, t) in &fresh {
            assert_eq!(t.to_vec(), entries[name].to_vec());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        write_checkpoint(&stem, &sample_entries()).unwrap();
        let mut wrong = BTreeMap::new();
        wrong.insert("heads.box.w0".to_string(), Tensor::param(&[3, 2], vec![0.0; 6]));
        wrong.insert("newborn.embedding".to_string(), Tensor::param(&[4], vec![0.0; 4]));
        let err = load_into(&stem, &wrong).unwrap_err();
        assert!(err.to_string().contains("does not match model shape"));
    }

    #[test]
    fn truncated_binary_is_an_io_error() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        write_checkpoint(&stem, &sample_entries()).unwrap();
        let bin = bin_path(&stem);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_checkpoint(&stem).is_err());
    }

    #[test]
    fn missing_manifest_entry_is_detected() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        write_checkpoint(&stem, &sample_entries()).unwrap();
        let manifest = manifest_path(&stem);
        std::fs::write(&manifest, "{}").unwrap();
        let err = read_checkpoint(&stem).unwrap_err();
        assert!(err.to_string().contains("missing from manifest"));
    }
}
