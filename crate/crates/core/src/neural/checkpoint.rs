//! `GNN1` checkpoint files: named f32 arrays, little-endian.
//!
//! Layout: magic "GNN1", array count (u32), then per array: name length
//! (u32), UTF-8 name, rank (u32), dims (u32 each), f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"GNN1";

pub fn save_gnn1<S: Scalar>(path: &Path, arrays: &[(String, Tensor<S>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let count = u32::try_from(arrays.len())
        .map_err(|_| Error::Validation("too many arrays for checkpoint".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.dims().len() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_gnn1(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected GNN1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|_| Error::Format("truncated count".into()))?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(|_| Error::Format("truncated name length".into()))?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        r.read_exact(&mut buf4).map_err(|_| Error::Format("truncated rank".into()))?;
        let rank = u32::from_le_bytes(buf4) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4).map_err(|_| Error::Format("truncated dims".into()))?;
            dims.push(u32::from_le_bytes(buf4) as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("truncated payload for array {name:?}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((name, Tensor::new(dims, data)?));
    }
    Ok(arrays)
}
