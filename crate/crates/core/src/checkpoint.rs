//! `DEFTCKPT` model files: model configuration plus every parameter with its
//! Adam state, raw little-endian.

use std::fs;
use std::path::Path;

use crate::datasets::io::Cursor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VaeModel};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DEFTCKPT";
pub const VERSION: u16 = 1;

fn write_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Real>(model: &VaeModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE_TAG);
    let meta = model.config.to_metadata();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&p.step_count.to_le_bytes());
        write_tensor(&p.value, &mut out);
        write_tensor(&p.adam_m, &mut out);
        write_tensor(&p.adam_v, &mut out);
    }
    out
}

fn read_tensor<T: Real>(c: &mut Cursor<'_>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = c.take(n * T::BYTES, "parameter values")?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Element width in bits (32 or 64) of a serialized checkpoint, read from
/// its header.
pub fn checkpoint_precision(buf: &[u8]) -> Result<u32> {
    let mut c = Cursor::new(buf);
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic { expected: "DEFTCKPT" });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    match c.u8("dtype")? {
        t if t == f32::DTYPE_TAG => Ok(32),
        t if t == f64::DTYPE_TAG => Ok(64),
        t => Err(Error::Format(format!("unknown checkpoint dtype tag {t}"))),
    }
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<VaeModel<T>> {
    let mut c = Cursor::new(buf);
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic { expected: "DEFTCKPT" });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let dtype = c.u8("dtype")?;
    if dtype != T::DTYPE_TAG {
        return Err(Error::Format(format!(
            "checkpoint dtype tag {dtype}, expected {}",
            T::DTYPE_TAG
        )));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(c.take(meta_len, "metadata")?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let config = ModelConfig::from_metadata(meta)?;
    let mut model = VaeModel::<T>::new(config, 0)?;
    let count = c.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, model needs {}",
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name_len = c.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let p = model.params.get_mut(id);
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "entry {name:?} {shape:?} does not match model parameter {:?} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        p.step_count = c.u64("step count")?;
        p.value = read_tensor(&mut c, &shape)?;
        p.adam_m = read_tensor(&mut c, &shape)?;
        p.adam_v = read_tensor(&mut c, &shape)?;
        if !(p.value.is_finite() && p.adam_m.is_finite() && p.adam_v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint entry {name:?}")));
        }
    }
    if !c.done() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &VaeModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<VaeModel<T>> {
    decode_checkpoint(&fs::read(path)?)
}
