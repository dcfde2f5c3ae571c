//! Single-file parameter checkpoints.
//!
//! Layout: the 8-byte magic `CDACKPT1`, a little-endian `u64` manifest
//! length, the manifest as JSON (`[{"name", "shape"}]`, names sorted), then
//! every tensor's values as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamMap;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CDACKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn to_bytes(params: &ParamMap) -> Result<Vec<u8>> {
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&manifest)?;
    let scalars: usize = params.values().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.values() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < n {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&body[..n])?;
    if manifest.windows(2).any(|w| w[0].name >= w[1].name) {
        return Err(Error::Checkpoint(
            "manifest names are not strictly sorted".into(),
        ));
    }
    Ok((manifest, &body[n..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamMap> {
    let (manifest, mut data) = split_header(bytes)?;
    let total: usize = manifest.iter().map(ManifestEntry::len).sum();
    if data.len() != 8 * total {
        return Err(Error::Checkpoint(format!(
            "expected {} value bytes, found {}",
            8 * total,
            data.len()
        )));
    }
    let mut out = ParamMap::new();
    for entry in manifest {
        let n = entry.len();
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        let t = Tensor::new(entry.shape, values)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        out.insert(entry.name, t);
    }
    Ok(out)
}

/// Manifest only, without decoding values.
pub fn manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    Ok(split_header(bytes)?.0)
}

pub fn save(path: &Path, params: &ParamMap) -> Result<()> {
    fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamMap> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Scalar count summed over the manifest's array sizes.
pub fn enumerated_count(entries: &[ManifestEntry]) -> usize {
    entries.iter().map(ManifestEntry::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamMap {
        let mut p = ParamMap::new();
        p.insert(
            "b".into(),
            Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]),
        );
        p.insert(
            "a/w".into(),
            Tensor::matrix(2, 2, vec![0.1, -2.5, f64::EPSILON, 3.0]).unwrap(),
        );
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = to_bytes(&p).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(p.len(), q.len());
        for (k, t) in &p {
            assert_eq!(t.shape(), q[k].shape());
            assert_eq!(t.to_bits(), q[k].to_bits());
        }
        let m = manifest(&bytes).unwrap();
        assert_eq!(m[0].name, "a/w");
        assert_eq!(enumerated_count(&m), 7);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"not a checkpoint").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }
}
