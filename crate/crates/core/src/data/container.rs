//! Dataset container.
//!
//! Little-endian layout: magic `GTDS`, u32 version, u32 N, u32 C, u64 frame
//! count, C length-prefixed feature names, u8 normalization flag followed by
//! C (min, max) f64 pairs when set, N length-prefixed node ids, N·N f64
//! adjacency, frames as f32, labels as u8, timestamps as i64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FrameSeries, Normalization};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::io::{read_f32, read_f64, read_i64, read_string, read_u32, read_u64, read_u8, write_bytes};

const MAGIC: &[u8; 4] = b"GTDS";
const VERSION: u32 = 1;

pub fn write_series<W: Write>(s: &FrameSeries, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(s.nodes() as u32).to_le_bytes())?;
    w.write_all(&(s.features() as u32).to_le_bytes())?;
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    for name in s.feature_names() {
        write_bytes(&mut w, name.as_bytes())?;
    }
    match s.normalization() {
        None => w.write_all(&[0])?,
        Some(stats) => {
            w.write_all(&[1])?;
            for (lo, hi) in stats.min.iter().zip(&stats.max) {
                w.write_all(&lo.to_le_bytes())?;
                w.write_all(&hi.to_le_bytes())?;
            }
        }
    }
    for id in s.graph().node_ids() {
        write_bytes(&mut w, id.as_bytes())?;
    }
    for a in s.graph().adjacency() {
        w.write_all(&a.to_le_bytes())?;
    }
    for v in s.frames() {
        w.write_all(&v.to_le_bytes())?;
    }
    let labels: Vec<u8> = s.labels().iter().map(|&l| l as u8).collect();
    w.write_all(&labels)?;
    for t in s.timestamps() {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series<R: Read>(mut r: R) -> Result<FrameSeries> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let len = read_u64(&mut r)? as usize;
    let names = (0..c).map(|_| read_string(&mut r)).collect::<Result<Vec<_>>>()?;
    let normalization = match read_u8(&mut r)? {
        0 => None,
        1 => {
            let (mut min, mut max) = (Vec::with_capacity(c), Vec::with_capacity(c));
            for _ in 0..c {
                min.push(read_f64(&mut r)?);
                max.push(read_f64(&mut r)?);
            }
            Some(Normalization { min, max })
        }
        flag => return Err(Error::Format(format!("bad normalization flag {flag}"))),
    };
    let ids = (0..n).map(|_| read_string(&mut r)).collect::<Result<Vec<_>>>()?;
    let adjacency = (0..n * n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    let graph = GraphSpec::new(adjacency, ids).map_err(|e| Error::Format(format!("stored graph: {e}")))?;
    let frames = (0..len * n * c).map(|_| read_f32(&mut r)).collect::<Result<Vec<_>>>()?;
    let labels = (0..len)
        .map(|_| match read_u8(&mut r)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("bad label byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let timestamps = (0..len).map(|_| read_i64(&mut r)).collect::<Result<Vec<_>>>()?;
    FrameSeries::new(graph, names, frames, timestamps, labels, normalization)
        .map_err(|e| Error::Format(format!("stored series: {e}")))
}

pub fn save_series(s: &FrameSeries, path: &Path) -> Result<()> {
    write_series(s, BufWriter::new(File::create(path)?))
}

pub fn load_series(path: &Path) -> Result<FrameSeries> {
    read_series(BufReader::new(File::open(path)?))
}
