//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RFMOECKP" | version u32 | header_len u64 | header (TOML model config)
//! count u64 | count × [name_len u32 | name | ndim u32 | ndim × u64 | f64 data]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"RFMOECKP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, out: &mut W) -> Result<()> {
    let header = toml::to_string(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (name, t) in model.names.iter().zip(&model.params) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

/// Bound on any length field, guarding allocations against corrupt input.
const MAX_LEN: u64 = 1 << 32;

fn bounded(v: u64, what: &str) -> Result<usize> {
    if v > MAX_LEN {
        return Err(Error::Format(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    if &read_array::<8, _>(input)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = bounded(read_u64(input)?, "header length")?;
    let header = read_string(input, header_len)?;
    let config: ModelConfig = toml::from_str(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut model = Model::build(&config)?;
    let count = bounded(read_u64(input)?, "tensor count")?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let name = read_string(input, name_len)?;
        let ndim = read_u32(input)? as usize;
        let shape = (0..ndim)
            .map(|_| bounded(read_u64(input)?, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let numel = bounded(shape.iter().product::<usize>() as u64, "tensor size")?;
        let mut raw = vec![0u8; numel * 8];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated tensor {name}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    model.load_params(named)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
