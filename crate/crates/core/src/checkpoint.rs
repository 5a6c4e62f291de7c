//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "MRCAE01\0"
//! config     u32 LE length, then that many bytes of JSON model config
//! count      u32 LE number of tensors
//! tensor*    u32 name length, name bytes, u32 rank, rank x u32 dims,
//!            prod(dims) x f32 LE values
//! ```
//!
//! All integers are little-endian. Values are always stored as `f32`; a
//! double-precision model is rounded on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{group_prefix, Model, ModelConfig};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"MRCAE01\0";

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn collect<T: Real>(model: &Model<T>) -> Vec<NamedTensor> {
    let to32 = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
    let enc = model.config().encoder.len();
    let mut out = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        for (si, set) in layer.sets.iter().enumerate() {
            let prefix = group_prefix(layer.kind, li, enc, si);
            let f = &set.filters;
            let n = &set.norm;
            out.push(NamedTensor {
                name: format!("{prefix}.weight"),
                dims: vec![f.num_filters, f.in_channels, f.filter_len],
                values: to32(&f.weights),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.bias"),
                dims: vec![f.bias.len()],
                values: to32(&f.bias),
            });
            for (suffix, v) in [
                ("gamma", &n.gamma),
                ("beta", &n.beta),
                ("running_mean", &n.running_mean),
                ("running_var", &n.running_var),
            ] {
                out.push(NamedTensor {
                    name: format!("{prefix}.{suffix}"),
                    dims: vec![v.len()],
                    values: to32(v),
                });
            }
        }
    }
    let o = model.output_layer();
    out.push(NamedTensor {
        name: "output.weight".into(),
        dims: vec![o.num_filters, o.in_channels, o.filter_len],
        values: to32(&o.weights),
    });
    out.push(NamedTensor {
        name: "output.bias".into(),
        dims: vec![o.bias.len()],
        values: to32(&o.bias),
    });
    out
}

/// Serializes `model` into checkpoint bytes.
pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    if !model.is_finite() {
        return Err(Error::numeric("refusing to checkpoint non-finite parameters"));
    }
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::format("config", e.to_string()))?;
    let tensors = collect(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes a checkpoint; the file is replaced atomically.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    let tmp = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(what, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses checkpoint bytes into a model of element type `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "header")? != MAGIC {
        return Err(Error::format("header", "bad magic, not an MRCAE checkpoint"));
    }
    let len = r.u32("config")?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::format("config", e.to_string()))?;
    let mut model = Model::<T>::build(config)?;
    let mut expected: Vec<NamedTensor> = collect(&model);
    let mut seen = vec![false; expected.len()];

    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(Error::format(
            "tensor count",
            format!("expected {} tensors, found {count}", expected.len()),
        ));
    }
    for _ in 0..count {
        let name_len = r.u32("tensor name")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format("tensor name", "name is not UTF-8"))?
            .to_string();
        let idx = expected
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::format(&name, "unexpected tensor"))?;
        if seen[idx] {
            return Err(Error::format(&name, "duplicate tensor"));
        }
        seen[idx] = true;
        let rank = r.u32(&name)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&name)?);
        }
        if dims != expected[idx].dims {
            return Err(Error::format(
                &name,
                format!("dimension mismatch: file has {dims:?}, model needs {:?}", expected[idx].dims),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &name)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&name, "non-finite value"));
        }
        expected[idx].values = values;
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", "unexpected bytes after the last tensor"));
    }
    install(&mut model, &expected);
    model.layers().iter().flat_map(|l| &l.sets).try_for_each(|s| {
        s.norm
            .validate()
            .map_err(|e| Error::format("batch norm", e.to_string()))
    })?;
    Ok(model)
}

fn install<T: Real>(model: &mut Model<T>, tensors: &[NamedTensor]) {
    let conv = |v: &[f32]| v.iter().map(|x| T::of(*x as f64)).collect::<Vec<T>>();
    let mut it = tensors.iter();
    let mut next = || conv(&it.next().expect("tensor order matches collect").values);
    for layer in model.layers_mut() {
        for set in &mut layer.sets {
            set.filters.weights = next();
            set.filters.bias = next();
            set.norm.gamma = next();
            set.norm.beta = next();
            set.norm.running_mean = next();
            set.norm.running_var = next();
        }
    }
    let out = model.output_layer_mut();
    out.weights = next();
    out.bias = next();
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and verifies it fits a run configured with `expected`.
pub fn load_checkpoint_for<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<T>> {
    let model = load_checkpoint(path)?;
    model.check_compatible(expected)?;
    Ok(model)
}
