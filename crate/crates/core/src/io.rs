//! Little-endian f32 blobs and JSON files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name and shape of one array in a weights blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values; any other length is a format error.
pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Concatenates the tensors into one blob and returns the manifest entries.
pub fn write_tensors(path: &Path, named: &[(String, &Tensor<f32>)]) -> Result<Vec<TensorEntry>> {
    let total: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut blob = Vec::with_capacity(total);
    for (_, t) in named {
        blob.extend_from_slice(t.data());
    }
    write_f32_le(path, &blob)?;
    Ok(named
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect())
}

pub fn read_tensors(path: &Path, entries: &[TensorEntry]) -> Result<Vec<Tensor<f32>>> {
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let blob = read_f32_le(path, total)?;
    let mut offset = 0;
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), blob[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}

/// Copies loaded arrays into parameter slots, checking count and shapes.
pub fn assign_tensors(path: &Path, dst: Vec<&mut Tensor<f32>>, src: Vec<Tensor<f32>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, manifest lists {}", dst.len(), src.len()),
        ));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(Error::format(
                path,
                format!("tensor shape {:?} does not match {:?}", s.shape(), d.shape()),
            ));
        }
        *d = s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let v = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1e30, -3.75];
        write_f32_le(&p, &v).unwrap();
        let back = read_f32_le(&p, v.len()).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(read_f32_le(&p, 4), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_f32_le(Path::new("/nonexistent/q.bin"), 1).unwrap_err();
        assert!(e.is_io());
    }
}
