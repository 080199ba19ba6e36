//! `mp-ckpt-v1` container: a plain-text `key = value` header followed by
//! little-endian IEEE-754 arrays in declaration order.
//!
//! ```text
//! version = mp-ckpt-v1
//! dtype = f32
//! meta.<key> = <value>
//! params = 2
//! param.0 = canonical.grid 48x48x48x6
//! param.1 = slots 12x32
//! end_header
//! <binary payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "mp-ckpt-v1";
const END_HEADER: &str = "end_header\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor<T>)>,
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("version = {CHECKPOINT_VERSION}\n"));
    header.push_str(&format!("dtype = {}\n", T::DTYPE));
    for (k, v) in &ckpt.meta {
        if k.contains(['\n', '=']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable metadata key {k:?}")));
        }
        header.push_str(&format!("meta.{k} = {v}\n"));
    }
    header.push_str(&format!("params = {}\n", ckpt.params.len()));
    for (i, (name, t)) in ckpt.params.iter().enumerate() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("parameter name {name:?} has whitespace")));
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let shape = if shape.is_empty() {
            "scalar".to_string()
        } else {
            shape.join("x")
        };
        header.push_str(&format!("param.{i} = {name} {shape}\n"));
    }
    header.push_str(END_HEADER);

    let payload: usize = ckpt.params.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(header.len() + payload * T::BYTES);
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &ckpt.params {
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let end = find(&bytes, END_HEADER.as_bytes())
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;

    let mut kv = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    if kv.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
        return Err(bad(format!("expected version {CHECKPOINT_VERSION}")));
    }
    let dtype = kv.get("dtype").ok_or_else(|| bad("missing dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(bad(format!("checkpoint dtype {dtype}, requested {}", T::DTYPE)));
    }
    let count: usize = kv
        .get("params")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing params count".into()))?;

    let mut offset = end + END_HEADER.len();
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let entry = kv
            .get(&format!("param.{i}"))
            .ok_or_else(|| bad(format!("missing param.{i}")))?;
        let (name, shape) = entry
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed param.{i}")))?;
        let shape: Vec<usize> = if shape == "scalar" {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
                .collect::<Result<_>>()?
        };
        let n: usize = shape.iter().product();
        let len = n * T::BYTES;
        if offset + len > bytes.len() {
            return Err(bad(format!("payload truncated in {name}")));
        }
        let data = bytes[offset..offset + len]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += len;
        params.push((name.to_string(), Tensor::new(shape, data)?));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload".into()));
    }
    let meta = kv
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v)))
        .collect();
    Ok(Checkpoint { meta, params })
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint {
            meta: BTreeMap::from([("slots".to_string(), "12".to_string())]),
            params: vec![
                ("grid".to_string(), Tensor::new(vec![2, 1, 2], vec![0.1f64, -0.0, 1e-300, f64::MAX]).unwrap()),
                ("bias".to_string(), Tensor::scalar(std::f64::consts::PI)),
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for ((na, a), (nb, b)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint::<f32> {
            meta: BTreeMap::new(),
            params: vec![("w".to_string(), Tensor::vector(vec![1.0, 2.0]))],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
        let text = std::fs::read(&path).unwrap();
        assert!(text.starts_with(b"version = mp-ckpt-v1\ndtype = f32\n"));
    }
}
