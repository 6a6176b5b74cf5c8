//! Checkpoint container, version 1. All integers little-endian.
//!
//! ```text
//! magic        8 bytes  "RDSYMCK\0"
//! version      u32      1
//! desc_len     u32      byte length of the descriptor
//! descriptor   desc_len UTF-8 bytes (opaque to this module)
//! rng_seed     u64
//! count        u32      number of parameter tensors, sorted by path
//! per tensor:
//!   name_len   u32
//!   name       name_len UTF-8 bytes
//!   ndim       u32
//!   dims       ndim x u64
//!   payload    prod(dims) x f32
//! ```
//!
//! Values are stored as `f32`, so a load/save cycle reproduces the file
//! byte for byte.

use std::io::{Read, Write};

use super::{GradError, ParameterSet, Tensor};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RDSYMCK\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub descriptor: String,
    pub params: ParameterSet,
}

pub fn write_container<W: Write>(mut w: W, c: &Container) -> Result<(), GradError> {
    w.write_all(MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    write_bytes(&mut w, c.descriptor.as_bytes())?;
    w.write_all(&c.params.rng_seed().to_le_bytes())?;
    w.write_all(&(c.params.len() as u32).to_le_bytes())?;
    for (path, t) in c.params.iter() {
        write_bytes(&mut w, path.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container, GradError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GradError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(GradError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let descriptor = read_string(&mut r)?;
    let seed = read_u64(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut params = ParameterSet::new(seed);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(Container { descriptor, params })
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), GradError> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GradError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, GradError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, GradError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| GradError::Format(e.to_string()))
}
