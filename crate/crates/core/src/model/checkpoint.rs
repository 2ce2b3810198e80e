//! Binary checkpoint: header, config echo, tensor directory, f32 payload.
//!
//! Layout (little-endian): magic `S4CK`, version u32, config length u32 and
//! `key=value` text, tensor count u32, then per tensor its name (u32 length +
//! UTF-8), rank u32 and dims u32; finally every tensor's data as f32 in
//! directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelConfig};
use crate::attention::{read_reals, write_reals};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"S4CK";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(model: &Model<T>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg = model.config().to_kv();
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    let params = model.params();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
    }
    for (_, t) in params.iter() {
        let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        write_reals(w, &data)?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Stream(e)
    }
}

/// Reads a checkpoint, checking that the tensor directory matches the layout
/// the stored config implies.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<Model<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(truncated)?;
    let cfg = String::from_utf8(cfg).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&cfg)?;
    let mut model = Model::<T>::new(config, 0)?;

    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.params().len()
        )));
    }
    let mut directory = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if model.params().get(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                model.params().get(id).shape()
            )));
        }
        directory.push((id, shape));
    }
    for (id, shape) in directory {
        let n = shape.iter().product();
        let data: Vec<f32> = read_reals(r, n).map_err(|e| match e {
            Error::Format(_) => Error::Format("truncated checkpoint".into()),
            other => other,
        })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "checkpoint tensor {}",
                model.params().name(id)
            )));
        }
        let t = Tensor::new(shape, data.iter().map(|&v| T::lit(v as f64)).collect())?;
        model.params_mut().set(id, t)?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
