//! Binary model snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        b"S2IM"
//! version      u16
//! in_channels  u32   input_size u32   kernel u32   layers u32   last_relu u8
//! per layer    channels u32   pool u8
//! tensors      u32
//! per tensor   name_len u16, name utf-8, ndim u8, dims u32 × ndim, values f64 × prod(dims)
//! head         proxies_per_class u32, margin f64, scale f64, scale_floor f64, slots u32, class id u32 × slots
//! ```
//!
//! Tensors are stored in the order `conv{i}.weight`, `conv{i}.bias`, then
//! `head.proxies` when the head has any slot.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Backbone, BackboneConfig, Model, ProxyHead};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SNAPSHOT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"S2IM";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::contract(format!(
                "snapshot truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expect_name: &str) -> Result<Tensor> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::contract("snapshot tensor name is not utf-8"))?;
        if name != expect_name {
            return Err(Error::contract(format!("expected tensor `{expect_name}`, found `{name}`")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.backbone.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        for v in [cfg.in_channels, cfg.input_size, cfg.kernel, cfg.channels.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(cfg.last_relu as u8);
        for (&c, &p) in cfg.channels.iter().zip(&cfg.pool_after) {
            out.extend_from_slice(&(c as u32).to_le_bytes());
            out.push(p as u8);
        }
        let proxies = self.head.proxy_tensor();
        let count = 2 * cfg.channels.len() + proxies.is_some() as usize;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (i, (w, b)) in self.backbone.weights.iter().zip(&self.backbone.biases).enumerate() {
            put_tensor(&mut out, &format!("conv{i}.weight"), w);
            put_tensor(&mut out, &format!("conv{i}.bias"), b);
        }
        if let Some(p) = &proxies {
            put_tensor(&mut out, "head.proxies", p);
        }
        out.extend_from_slice(&(self.head.proxies_per_class() as u32).to_le_bytes());
        out.extend_from_slice(&self.head.margin().to_le_bytes());
        out.extend_from_slice(&self.head.scale().to_le_bytes());
        out.extend_from_slice(&self.head.scale_floor().to_le_bytes());
        out.extend_from_slice(&(self.head.slots() as u32).to_le_bytes());
        for &c in self.head.classes() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::contract("not a model snapshot (bad magic)"));
        }
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::contract(format!("unsupported snapshot version {version}")));
        }
        let in_channels = r.u32()? as usize;
        let input_size = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let last_relu = r.u8()? != 0;
        let mut channels = Vec::with_capacity(layers);
        let mut pool_after = Vec::with_capacity(layers);
        for _ in 0..layers {
            channels.push(r.u32()? as usize);
            pool_after.push(r.u8()? != 0);
        }
        let config = BackboneConfig {
            in_channels,
            input_size,
            channels,
            kernel,
            pool_after,
            last_relu,
        };
        config.validate()?;
        let count = r.u32()? as usize;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for i in 0..layers {
            weights.push(r.tensor(&format!("conv{i}.weight"))?);
            biases.push(r.tensor(&format!("conv{i}.bias"))?);
        }
        let proxies = if count > 2 * layers {
            Some(r.tensor("head.proxies")?)
        } else {
            None
        };
        let k = r.u32()? as usize;
        let margin = r.f64()?;
        let scale = r.f64()?;
        let scale_floor = r.f64()?;
        let slots = r.u32()? as usize;
        let mut classes = Vec::with_capacity(slots);
        for _ in 0..slots {
            classes.push(r.u32()?);
        }
        if r.pos != buf.len() {
            return Err(Error::contract("trailing bytes after snapshot"));
        }
        let dim = config.final_channels();
        let head = ProxyHead::from_parts(
            dim,
            k,
            margin,
            scale,
            scale_floor,
            classes,
            proxies.map(Tensor::into_data).unwrap_or_default(),
        )?;
        let backbone = Backbone {
            config,
            weights,
            biases,
        };
        Ok(Model { backbone, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// SHA-256 of the snapshot bytes, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
