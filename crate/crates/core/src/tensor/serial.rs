//! Binary tensor and model-checkpoint formats.
//!
//! Single tensor ("MRT1"): magic, u32 rank, rank x u64 extents, u8 dtype
//! code (0 = f64, 1 = f32), then the row-major payload. All integers and
//! payload values are little-endian.
//!
//! Model container ("MRM1"): magic, u32 config length, config JSON bytes,
//! u32 record count, then per record a u16 name length, the UTF-8 name,
//! and an embedded MRT1 tensor. Records are written in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"MRT1";
const MODEL_MAGIC: &[u8; 4] = b"MRM1";
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 30;

/// A tensor read back from disk, in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
}

impl AnyTensor {
    pub fn to_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F64(t) => t,
            AnyTensor::F32(t) => t.cast(),
        }
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            AnyTensor::F64(_) => f64::DTYPE,
            AnyTensor::F32(_) => f32::DTYPE,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::F32(t) => t.shape(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Serial(msg.into())
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[T::DTYPE])?;
    let mut buf = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let magic = read_exact::<_, 4>(r, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("bad tensor magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_exact::<_, 4>(r, "rank")?);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elems: u64 = 1;
    for i in 0..rank {
        let e = u64::from_le_bytes(read_exact::<_, 8>(r, "extent")?);
        elems = elems
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| bad(format!("extent {i} makes the tensor implausibly large")))?;
        shape.push(e as usize);
    }
    let dtype = read_exact::<_, 1>(r, "dtype")?[0];

    fn payload<T: Scalar, R: Read>(r: &mut R, shape: &[usize], elems: u64) -> Result<Tensor<T>> {
        let mut buf = vec![0u8; elems as usize * T::BYTES];
        r.read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated payload: {e}")))?;
        let data = buf.chunks_exact(T::BYTES).map(T::from_le).collect();
        Tensor::from_vec(shape, data)
    }

    match dtype {
        0 => Ok(AnyTensor::F64(payload::<f64, _>(r, &shape, elems)?)),
        1 => Ok(AnyTensor::F32(payload::<f32, _>(r, &shape, elems)?)),
        d => Err(bad(format!("unknown dtype code {d}"))),
    }
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Writes a model checkpoint: configuration JSON plus every parameter of
/// the store as a named double-precision tensor record.
pub fn write_model<W: Write>(w: &mut W, config_json: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    let cfg = config_json.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(bad(format!("parameter name too long: {name:?}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        write_tensor(w, tensor)?;
    }
    Ok(())
}

/// Reads a model checkpoint back as its configuration JSON and named
/// parameter tensors, in stored order.
pub fn read_model<R: Read>(r: &mut R) -> Result<(String, Vec<(String, Tensor<f64>)>)> {
    let magic = read_exact::<_, 4>(r, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(bad(format!("bad model magic {magic:?}")));
    }
    let cfg_len = u32::from_le_bytes(read_exact::<_, 4>(r, "config length")?);
    let mut cfg = vec![0u8; cfg_len as usize];
    r.read_exact(&mut cfg)
        .map_err(|e| bad(format!("truncated config: {e}")))?;
    let config =
        String::from_utf8(cfg).map_err(|_| bad("config is not valid UTF-8"))?;
    let count = u32::from_le_bytes(read_exact::<_, 4>(r, "record count")?);
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact::<_, 2>(r, "name length")?);
        let mut nb = vec![0u8; name_len as usize];
        r.read_exact(&mut nb)
            .map_err(|e| bad(format!("truncated name: {e}")))?;
        let name =
            String::from_utf8(nb).map_err(|_| bad("record name is not valid UTF-8"))?;
        let tensor = read_tensor(r)?.to_f64();
        records.push((name, tensor));
    }
    Ok((config, records))
}

pub fn save_model(path: &Path, config_json: &str, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, config_json, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(String, Vec<(String, Tensor<f64>)>)> {
    read_model(&mut BufReader::new(File::open(path)?))
}
