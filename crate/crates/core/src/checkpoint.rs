//! Binary checkpoints.
//!
//! Layout, all little-endian: the magic `MXTF`, a `u32` format version, the ten
//! config fields as `u64` in [`crate::config::FIELD_NAMES`] order, then every
//! tensor of [`TransformerModel::params`] as a `u32` rank, `u64` dimensions and
//! `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MXTF";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(model: &TransformerModel<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in model.config.as_array() {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for t in model.params() {
        buf.clear();
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(model: &TransformerModel<T>) -> Vec<u8> {
    let mut v = Vec::new();
    write_checkpoint(model, &mut v).expect("writing to memory cannot fail");
    v
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(read_array(r)?)).map_err(|_| Error::Format("value overflows usize".into()))
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<TransformerModel<T>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut fields = [0usize; 10];
    for f in &mut fields {
        *f = read_u64(&mut r)?;
    }
    let config = ModelConfig::from_array(fields)?;
    let shapes = TransformerModel::<T>::param_shapes(&config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for expected in &shapes {
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        if &shape != expected {
            return Err(Error::Format(format!("tensor shape {shape:?}, expected {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    TransformerModel::from_params(config, tensors)
}

pub fn load<T: Scalar>(path: &Path) -> Result<TransformerModel<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
