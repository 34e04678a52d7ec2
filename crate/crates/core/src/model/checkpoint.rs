//! Checkpoint container.
//!
//! All integers are little-endian:
//!
//! ```text
//! magic        8 bytes   "PLNCKPT\0"
//! version      u32       1
//! config_len   u32       byte length of the config JSON
//! config       bytes     UTF-8 JSON of ModelConfig
//! n_tensors    u32
//! per tensor:
//!   name_len   u16
//!   name       bytes     UTF-8, e.g. "layers.3.attn.w_qkv"
//!   ndim       u8
//!   dims       ndim x u32
//!   data       prod(dims) x f32, row-major
//! ```
//!
//! Tensors appear in layout order; readers match them by name and shape.

use std::io::{Read, Write};

use super::linalg::Scalar;
use super::params::Layout;
use super::{ModelConfig, ModelError, Transformer};

pub const MAGIC: &[u8; 8] = b"PLNCKPT\0";
pub const VERSION: u32 = 1;

pub fn write<T: Scalar, W: Write>(model: &Transformer<T>, mut w: W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg =
        serde_json::to_vec(&model.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.layout.tensors.len() as u32).to_le_bytes())?;
    for t in &model.layout.tensors {
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[t.shape.len() as u8])?;
        for &dim in &t.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.range.len() * 4);
        for x in &model.params[t.range.clone()] {
            buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(model: &Transformer<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write(model, &mut out).expect("writing to memory");
    out
}

pub fn read<T: Scalar, R: Read>(mut r: R) -> Result<Transformer<T>, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    let layout = Layout::new(&config);
    let mut params = vec![T::zero(); layout.len];
    let mut filled = vec![false; layout.tensors.len()];
    let count = read_u32(&mut r)? as usize;
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let shape = (0..ndim[0])
            .map(|_| read_u32(&mut r).map(|x| x as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let idx = layout
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
        let info = &layout.tensors[idx];
        if info.shape != shape {
            return Err(bad(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                info.shape
            )));
        }
        let mut buf = vec![0u8; info.range.len() * 4];
        r.read_exact(&mut buf)?;
        for (dst, chunk) in params[info.range.clone()]
            .iter_mut()
            .zip(buf.chunks_exact(4))
        {
            *dst = T::from_f32(f32::from_le_bytes(chunk.try_into().unwrap())).unwrap();
        }
        filled[idx] = true;
    }
    if let Some(i) = filled.iter().position(|&f| !f) {
        return Err(bad(format!("missing tensor `{}`", layout.tensors[i].name)));
    }
    Ok(Transformer {
        config,
        layout,
        params,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save<T: Scalar>(model: &Transformer<T>, path: &std::path::Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &std::path::Path) -> Result<Transformer<T>, ModelError> {
    let file = std::fs::File::open(path)?;
    read(std::io::BufReader::new(file))
}
