//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `GTCK`, u32 version, u8 trained flag,
//! u32-length-prefixed JSON config, u32 record count, then per record a
//! u32-length-prefixed name, u32 rank, u64 dims and raw f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Forecaster, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_u32, read_u64, read_u8, write_bytes};

const MAGIC: &[u8; 4] = b"GTCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Forecaster<f32>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[model.is_trained() as u8])?;
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(&mut w, &config)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (_, name, t) in model.params().iter() {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Forecaster<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let trained = read_u8(&mut r)? != 0;
    let config: ModelConfig =
        serde_json::from_slice(&read_bytes(&mut r)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Forecaster::<f32>::new(config)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name =
            String::from_utf8(read_bytes(&mut r)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = model
            .params()
            .by_name(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?
            .shape()
            .to_vec();
        if dims != expected {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {dims:?}, expected {expected:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated parameter data".into()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.params_mut().set(&name, data)?;
    }
    if trained {
        model.mark_trained();
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Forecaster<f32>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Forecaster<f32>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
