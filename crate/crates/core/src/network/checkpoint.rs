//! Binary checkpoint container.
//!
//! ```text
//! "FTMC" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! | entry_count u32 | entry*
//! entry := name_len u16 | name | partition u8 | dtype u8 | ndim u8
//!        | dims (u32 each) | scalars
//! ```
//! All integers and scalars are little-endian. Partition tags are
//! 0 = backbone, 1 = ftm, 2 = head, 3 = buffer; dtype 0 = f32. Parameters are
//! written in name order, followed by buffers in name order.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelState, NetworkConfig, Partition};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const BUFFER_TAG: u8 = 3;
const DTYPE_F32: u8 = 0;

fn put_entry(out: &mut Vec<u8>, name: &str, tag: u8, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint(model: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config().to_kv().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let buffers = model.buffers();
    out.extend_from_slice(&((model.params().len() + buffers.len()) as u32).to_le_bytes());
    for (name, t) in model.params() {
        put_entry(&mut out, name, Partition::of(name).tag(), t);
    }
    for (name, t) in &buffers {
        put_entry(&mut out, name, BUFFER_TAG, t);
    }
    out
}

pub fn save_checkpoint(model: &ModelState<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let bytes = self.take(n, what)?;
        std::str::from_utf8(bytes).map_err(|_| Error::Format {
            offset: start,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected FTMC");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let cfg_text = r.utf8(cfg_len, "config")?;
    let config = KvMap::parse(cfg_text)
        .and_then(|kv| NetworkConfig::from_kv(&kv))
        .map_err(|e| Error::Format {
            offset: cfg_at,
            message: format!("invalid config: {e}"),
        })?;
    let count = r.u32("entry count")?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..count {
        let entry_at = r.pos;
        let nlen = r.u16("name length")? as usize;
        let name = r.utf8(nlen, "name")?.to_string();
        let tag = r.u8("partition tag")?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            r.pos -= 1;
            return r.fail(format!("unsupported dtype tag {dtype}"));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format {
            offset: entry_at,
            message: format!("entry `{name}`: {e}"),
        })?;
        let dup = if tag == BUFFER_TAG {
            buffers.insert(name.clone(), t).is_some()
        } else {
            if tag > BUFFER_TAG || Partition::of(&name).tag() != tag {
                return Err(Error::Format {
                    offset: entry_at,
                    message: format!("entry `{name}` carries partition tag {tag}"),
                });
            }
            params.insert(name.clone(), t).is_some()
        };
        if dup {
            return Err(Error::Format {
                offset: entry_at,
                message: format!("duplicate entry `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last entry");
    }
    ModelState::from_parts(config, params, buffers).map_err(|e| Error::Format {
        offset: r.pos,
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState<f32>> {
    read_checkpoint(&std::fs::read(path)?)
}
