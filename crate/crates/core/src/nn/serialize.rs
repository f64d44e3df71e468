//! Little-endian binary containers for trained parameters and edge masks.
//!
//! Model file: magic, version `u32`, layer count `u32`, the architecture as
//! a length-prefixed TOML string, then per layer a tensor count `u32` and
//! each tensor as `rows u64`, `cols u64` and `rows · cols` `f64` values.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::{LayerParams, Model};
use super::topology::LayerMask;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"DYNGNN\0\x01";
const MASK_MAGIC: &[u8; 8] = b"DYNMSK\0\x01";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<u32> {
        if self.take(8)? != magic {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        self.u32()
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rows() as u64).to_le_bytes());
    out.extend((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l.saturating_mul(8) <= r.buf.len())
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {rows}x{cols}")))?;
    let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(rows, cols, data)
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let cfg = toml::to_string(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend(MODEL_MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((model.layers.len() as u32).to_le_bytes());
    out.extend((cfg.len() as u32).to_le_bytes());
    out.extend(cfg.as_bytes());
    for l in &model.layers {
        let ts = [&l.w, &l.attn_src, &l.attn_dst, &l.bias];
        out.extend((ts.len() as u32).to_le_bytes());
        for t in ts {
            put_tensor(&mut out, t);
        }
    }
    Ok(out)
}

pub fn decode_model(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, at: 0 };
    let n_layers = r.header(MODEL_MAGIC)? as usize;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let config: ModelConfig = toml::from_str(cfg_text).map_err(|e| Error::Format(e.to_string()))?;
    if config.depth != n_layers {
        return Err(Error::Format(format!(
            "header lists {n_layers} layers but the architecture has depth {}",
            config.depth
        )));
    }
    let mut raw = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let count = r.u32()?;
        if count != 4 {
            return Err(Error::Format(format!("layer holds {count} tensors, expected 4")));
        }
        raw.push([get_tensor(&mut r)?, get_tensor(&mut r)?, get_tensor(&mut r)?, get_tensor(&mut r)?]);
    }
    r.finish()?;
    let (d_in, n_classes) = match (raw.first(), raw.last()) {
        (Some(first), Some(last)) => (first[0].rows(), last[3].cols()),
        _ => return Err(Error::Format("model has no layers".into())),
    };
    let shapes = config.layer_shapes(d_in, n_classes);
    let layers: Vec<LayerParams> = raw
        .into_iter()
        .zip(shapes)
        .map(|([w, attn_src, attn_dst, bias], shape)| LayerParams {
            shape,
            w,
            attn_src,
            attn_dst,
            bias,
        })
        .collect();
    for l in &layers {
        l.validate().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(Model { config, layers })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| in_file(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn encode_masks(masks: &[LayerMask]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MASK_MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((masks.len() as u32).to_le_bytes());
    for m in masks {
        out.extend((m.alive.len() as u64).to_le_bytes());
        out.extend(m.alive.iter().map(|&a| a as u8));
        match &m.scale {
            Some(s) => {
                out.push(1);
                for v in s {
                    out.extend(v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
    }
    out
}

pub fn decode_masks(buf: &[u8]) -> Result<Vec<LayerMask>> {
    let mut r = Reader { buf, at: 0 };
    let n = r.header(MASK_MAGIC)? as usize;
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        let alive = r.take(len)?.iter().map(|&b| b != 0).collect();
        let scale = match r.u8()? {
            0 => None,
            1 => Some((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?),
            b => return Err(Error::Format(format!("bad scale flag {b}"))),
        };
        masks.push(LayerMask { alive, scale });
    }
    r.finish()?;
    Ok(masks)
}

pub fn save_masks(masks: &[LayerMask], path: &Path) -> Result<()> {
    fs::write(path, encode_masks(masks)).map_err(|e| Error::io(path, e))
}

pub fn load_masks(path: &Path) -> Result<Vec<LayerMask>> {
    decode_masks(&fs::read(path).map_err(|e| Error::io(path, e))?).map_err(|e| in_file(path, e))
}
