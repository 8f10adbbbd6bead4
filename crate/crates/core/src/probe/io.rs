//! `VTSF1` feature files: magic, u32 n, u32 dim, n·dim LE f32, n LE u16
//! labels.

use std::io::{Read, Write};
use std::path::Path;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 5] = b"VTSF1";

pub fn write_features<W: Write>(mut w: W, set: &FeatureSet) -> Result<()> {
    let io = |e| Error::io("<feature stream>", e);
    let n = u32::try_from(set.len()).map_err(|_| Error::Format("too many rows".into()))?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::Format("feature dim too large".into()))?;
    let mut buf = Vec::with_capacity(13 + set.len() * (4 * set.dim() + 2));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for &v in set.x().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in set.labels() {
        let l = u16::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in u16")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

/// The class count is taken as `max label + 1`.
pub fn read_features<R: Read>(mut r: R) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<feature stream>", e))?;
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err(Error::Format("missing VTSF1 magic".into()));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expect = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(13 + 2 * n))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() != expect {
        return Err(Error::Format(format!("expected {expect} bytes for n={n}, dim={dim}, found {}", bytes.len())));
    }
    if dim == 0 {
        return Err(Error::Format("feature dim is zero".into()));
    }
    let body = &bytes[13..];
    let data = body[..4 * n * dim].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let labels: Vec<usize> =
        body[4 * n * dim..].chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    FeatureSet::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

pub fn save_features(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(std::io::BufWriter::new(f), set)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(std::io::BufReader::new(f))
}
