//! Little-endian model file: magic, format version, network text, then every
//! parameter and buffer in registry order as `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::network::{ModelParams, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"QENH";
pub const MODEL_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

pub fn write_model(spec: &NetworkSpec, params: &ModelParams, out: &mut impl Write) -> Result<()> {
    check_against_spec(spec, params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    put_bytes(&mut buf, spec.to_text().as_bytes());
    let entries: Vec<(u8, &String, &Tensor)> = params
        .params
        .iter()
        .map(|(k, t)| (KIND_PARAM, k, t))
        .chain(params.buffers.iter().map(|(k, t)| (KIND_BUFFER, k, t)))
        .collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, t) in entries {
        buf.push(kind);
        put_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::ModelFormat(format!("write failed: {e}")))
}

pub fn read_model(input: &mut impl Read) -> Result<(NetworkSpec, ModelParams)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::ModelFormat(format!("read failed: {e}")))?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {version} is not supported (expected {MODEL_VERSION})"
        )));
    }
    let text = std::str::from_utf8(r.bytes_prefixed()?)
        .map_err(|_| Error::ModelFormat("network description is not UTF-8".into()))?;
    let spec = NetworkSpec::from_text(text)?;
    let count = r.u32()? as usize;
    let mut params = ModelParams::default();
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let name = std::str::from_utf8(r.bytes_prefixed()?)
            .map_err(|_| Error::ModelFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32()? as usize;
        let shape = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::ModelFormat("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::ModelFormat(format!("`{name}`: {e}")))?;
        let map = match kind {
            KIND_PARAM => &mut params.params,
            KIND_BUFFER => &mut params.buffers,
            k => return Err(Error::ModelFormat(format!("unknown entry kind {k}"))),
        };
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::ModelFormat(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat("trailing bytes after last tensor".into()));
    }
    check_against_spec(&spec, &params)?;
    Ok((spec, params))
}

pub fn save_model(spec: &NetworkSpec, params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(spec, params, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkSpec, ModelParams)> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut f)
}

/// Every tensor the architecture declares must be present with the right shape, and
/// nothing else.
fn check_against_spec(spec: &NetworkSpec, params: &ModelParams) -> Result<()> {
    let mut want_p = BTreeMap::new();
    let mut want_b = BTreeMap::new();
    for (prefix, layer) in spec.layers() {
        for (s, shape) in layer.param_shapes() {
            want_p.insert(format!("{prefix}.{s}"), shape);
        }
        for (s, shape) in layer.buffer_shapes() {
            want_b.insert(format!("{prefix}.{s}"), shape);
        }
    }
    for (want, have, what) in [(&want_p, &params.params, "parameter"), (&want_b, &params.buffers, "buffer")] {
        for (name, shape) in want {
            match have.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(Error::ModelFormat(format!(
                        "{what} `{name}` has shape {:?}, network needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::ModelFormat(format!("missing {what} `{name}`"))),
            }
        }
        if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::ModelFormat(format!("unexpected {what} `{extra}`")));
        }
    }
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::ModelFormat(format!(
                "truncated file ({} bytes, needed {} more at offset {})",
                self.bytes.len(),
                n,
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
