//! Deterministic named-tensor archive: a JSON metadata record followed by
//! name-sorted raw tensors. Writing the same content twice produces the same
//! bytes, which is what the checkpoint round-trip guarantees build on.

use crate::error::{AliError, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ALITNSR1";

pub fn write_archive<F: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<F>>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta_bytes = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, value) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dtype = F::DTYPE.as_bytes();
        buf.extend_from_slice(&(dtype.len() as u64).to_le_bytes());
        buf.extend_from_slice(dtype);
        buf.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&((value.len() * F::BYTES) as u64).to_le_bytes());
        for v in value.iter() {
            v.write_le(&mut buf);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_archive<F: Scalar>(
    path: &Path,
) -> Result<(BTreeMap<String, ArrayD<F>>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(AliError::Serde("archive truncated".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let read_u64 = |at: &mut usize| -> Result<u64> {
        let s = take(at, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut at, 8)? != MAGIC {
        return Err(AliError::Serde("bad archive magic".into()));
    }
    let meta_len = read_u64(&mut at)? as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut at, meta_len)?)?;
    let n = read_u64(&mut at)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name_len = read_u64(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|e| AliError::Serde(e.to_string()))?;
        let dtype_len = read_u64(&mut at)? as usize;
        let dtype = String::from_utf8(take(&mut at, dtype_len)?.to_vec())
            .map_err(|e| AliError::Serde(e.to_string()))?;
        if dtype != F::DTYPE {
            return Err(AliError::Serde(format!(
                "archive tensor {name} has dtype {dtype}, expected {}",
                F::DTYPE
            )));
        }
        let ndim = read_u64(&mut at)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut at)? as usize);
        }
        let data_len = read_u64(&mut at)? as usize;
        let data = take(&mut at, data_len)?;
        let count = data_len / F::BYTES;
        let mut values = Vec::with_capacity(count);
        for k in 0..count {
            values.push(F::read_le(&data[k * F::BYTES..]));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| AliError::Serde(e.to_string()))?;
        tensors.insert(name, arr);
    }
    Ok((tensors, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn archive_roundtrip_bitexact() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("b.w".to_string(), arr2(&[[1.5f32, -2.0]]).into_dyn());
        tensors.insert("a.w".to_string(), arr2(&[[0.25f32]]).into_dyn());
        let meta = serde_json::json!({"stage": 1, "note": "x"});

        let p1 = dir.path().join("a1.bin");
        write_archive(&p1, &tensors, &meta).unwrap();
        let (t2, m2) = read_archive::<f32>(&p1).unwrap();
        assert_eq!(tensors, t2);
        assert_eq!(meta, m2);

        let p2 = dir.path().join("a2.bin");
        write_archive(&p2, &t2, &m2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), arr2(&[[1.0f64]]).into_dyn());
        let p = dir.path().join("a.bin");
        write_archive(&p, &tensors, &serde_json::json!({})).unwrap();
        assert!(read_archive::<f32>(&p).is_err());
    }
}
