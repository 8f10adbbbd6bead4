//! `VTSK1` checkpoints.
//!
//! Layout: the 5 magic bytes `VTSK1`, a single-line JSON header terminated by
//! `\n`, then every parameter as little-endian `f32`, concatenated in header
//! order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, ShapeConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"VTSK1";

#[derive(Serialize, Deserialize)]
struct Header {
    shape: ShapeConfig,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dims: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(mut w: W, shape: &ShapeConfig, params: &ParamSet) -> Result<()> {
    let header = Header {
        shape: shape.clone(),
        params: params.iter().map(|(n, t)| Entry { name: n.to_string(), dims: t.shape().to_vec() }).collect(),
    };
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (_, t) in params.iter() {
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ShapeConfig, ParamSet)> {
    let mut r = BufReader::new(r);
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(io)?;
    if line.pop() != Some(b'\n') {
        return Err(Error::Format("unterminated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&line)?;
    header.shape.validate()?;

    let mut params = ParamSet::new();
    for e in header.params {
        let n: usize = e.dims.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated data for `{}`", e.name)))?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.insert(e.name, Tensor::new(e.dims, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok((header.shape, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, shape: &ShapeConfig, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), shape, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ShapeConfig, ParamSet)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}
