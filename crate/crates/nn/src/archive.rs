//! safetensors reader and writer.
//!
//! Layout: little-endian `u64` header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw little-endian data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn archive_err(path: &Path, reason: impl Into<String>) -> NnError {
    NnError::Archive {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes tensors sorted by name so identical inputs give identical bytes.
pub fn save<T: Scalar>(
    path: &Path,
    tensors: &[(String, Tensor<T>)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor<T>)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            "__metadata__".into(),
            serde_json::to_value(metadata).expect("string map serialises"),
        );
    }
    let mut offset = 0usize;
    for (name, t) in &sorted {
        let bytes = t.numel() * T::BYTES;
        let entry = Entry {
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            data_offsets: [offset, offset + bytes],
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("entry serialises"));
        offset += bytes;
    }
    let mut json = serde_json::to_vec(&header).expect("header serialises");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut buf = Vec::with_capacity(8 + json.len() + offset);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &sorted {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, BTreeMap<String, Entry>, BTreeMap<String, String>)> {
    if bytes.len() < 8 {
        return Err(archive_err(path, "file shorter than the 8-byte header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if n > bytes.len() - 8 {
        return Err(archive_err(path, format!("header length {n} exceeds file size")));
    }
    let raw: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| archive_err(path, format!("invalid header: {e}")))?;
    let mut entries = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (k, v) in raw {
        if k == "__metadata__" {
            metadata = serde_json::from_value(v).map_err(|e| archive_err(path, format!("metadata: {e}")))?;
            continue;
        }
        let e: Entry = serde_json::from_value(v).map_err(|e| archive_err(path, format!("tensor {k}: {e}")))?;
        entries.insert(k, e);
    }
    Ok((8 + n, entries, metadata))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| archive_err(path, e.to_string()))
}

/// Tensor shapes without decoding the payload.
pub fn read_shapes(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let bytes = read_file(path)?;
    let (_, entries, _) = parse_header(path, &bytes)?;
    Ok(entries.into_iter().map(|(k, e)| (k, e.shape)).collect())
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read_file(path)?;
    Ok(parse_header(path, &bytes)?.2)
}

/// Loads every tensor, converting `F16`/`BF16`/`F32`/`F64`/`I64` payloads to `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = read_file(path)?;
    let (start, entries, _) = parse_header(path, &bytes)?;
    let data = &bytes[start..];
    let mut out = BTreeMap::new();
    for (name, e) in entries {
        let [lo, hi] = e.data_offsets;
        if lo > hi || hi > data.len() {
            return Err(archive_err(
                path,
                format!("tensor {name} has offsets outside the payload"),
            ));
        }
        let raw = &data[lo..hi];
        let numel: usize = e.shape.iter().product();
        let values: Vec<T> = match e.dtype.as_str() {
            "F32" => {
                check_len(path, &name, raw.len(), numel, 4)?;
                raw.chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect()
            }
            "F64" => {
                check_len(path, &name, raw.len(), numel, 8)?;
                raw.chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect()
            }
            "F16" => {
                check_len(path, &name, raw.len(), numel, 2)?;
                raw.chunks_exact(2)
                    .map(|c| T::from_f64(half::f16::from_le_bytes([c[0], c[1]]).to_f64()))
                    .collect()
            }
            "BF16" => {
                check_len(path, &name, raw.len(), numel, 2)?;
                raw.chunks_exact(2)
                    .map(|c| T::from_f64(half::bf16::from_le_bytes([c[0], c[1]]).to_f64()))
                    .collect()
            }
            "I64" => {
                check_len(path, &name, raw.len(), numel, 8)?;
                raw.chunks_exact(8)
                    .map(|c| T::from_f64(i64::from_le_bytes(c.try_into().expect("8 bytes")) as f64))
                    .collect()
            }
            other => return Err(archive_err(path, format!("tensor {name}: unsupported dtype {other}"))),
        };
        out.insert(name, Tensor::new(e.shape, values));
    }
    Ok(out)
}

fn check_len(path: &Path, name: &str, bytes: usize, numel: usize, width: usize) -> Result<()> {
    if bytes != numel * width {
        return Err(archive_err(
            path,
            format!("tensor {name}: {bytes} bytes for {numel} elements"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let tensors = vec![
            (
                "b".to_string(),
                Tensor::<f32>::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]),
            ),
            ("a".to_string(), Tensor::<f32>::new(vec![3], vec![7.0, 8.0, 9.0])),
        ];
        let mut meta = BTreeMap::new();
        meta.insert("family".to_string(), "custom_cnn".to_string());
        save(&path, &tensors, &meta).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back["b"], tensors[0].1);
        assert_eq!(back["a"], tensors[1].1);
        assert_eq!(read_metadata(&path).unwrap(), meta);
        // f32 archives widen losslessly into f64.
        let wide = load::<f64>(&path).unwrap();
        assert_eq!(wide["b"].data(), &[1.0, -2.0, 3.5, 0.25]);
    }

    #[test]
    fn corrupt_archive_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"\xff\xff\xff\xff\xff\xff\xff\x7fjunk").unwrap();
        let err = load::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("bad.safetensors"), "{err}");
        let missing = dir.path().join("missing.safetensors");
        let err = load::<f32>(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.safetensors"), "{err}");
    }
}
