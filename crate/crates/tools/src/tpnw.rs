//! TPNW weight files.
//!
//! Layout, all little-endian: bytes 0-3 ASCII "TPNW", u32 version (= 1),
//! then the model configuration (eight u32 fields in declaration order:
//! context_frames, horizon, channels, embed_dim, reduc_factor,
//! evolver_depth, evolver_dim, lead_time_classes, followed by f64 dropout),
//! f64 normalization mean and std, u32 parameter count, then per
//! parameter: u32 name length, UTF-8 name bytes, u32 rank, rank u32 dims,
//! and the float32 values in row-major order. Parameters are stored in
//! the model's canonical order, so equal models serialize to equal bytes.

use std::path::Path;

use nowcast_core::autodiff::Tensor;
use nowcast_core::model::{Model, ModelConfig};

use crate::error::{Result, ToolError};

pub const MAGIC: &[u8; 4] = b"TPNW";
pub const VERSION: u32 = 1;

pub fn write_weights(model: &Model, path: &Path) -> Result<()> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.context_frames,
        cfg.horizon,
        cfg.channels,
        cfg.embed_dim,
        cfg.reduc_factor,
        cfg.evolver_depth,
        cfg.evolver_dim,
        cfg.lead_time_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&model.norm_mean.to_le_bytes());
    out.extend_from_slice(&model.norm_std.to_le_bytes());
    let params: Vec<(&str, &Tensor)> = model.params_named().collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| ToolError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ToolError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                needed: (n - (self.bytes.len() - self.pos)) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_weights(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| ToolError::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(ToolError::BadMagic {
            path: path.to_path_buf(),
            expected: "TPNW",
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ToolError::BadVersion {
            path: path.to_path_buf(),
            got: version,
            expected: VERSION,
        });
    }
    let mut ints = [0usize; 8];
    for slot in ints.iter_mut() {
        *slot = cur.u32()? as usize;
    }
    let dropout = cur.f64()?;
    let cfg = ModelConfig {
        context_frames: ints[0],
        horizon: ints[1],
        channels: ints[2],
        embed_dim: ints[3],
        reduc_factor: ints[4],
        dropout,
        evolver_depth: ints[5],
        evolver_dim: ints[6],
        lead_time_classes: ints[7],
    };
    let norm_mean = cur.f64()?;
    let norm_std = cur.f64()?;
    let param_count = cur.u32()? as usize;
    let mut named = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_offset = cur.pos as u64;
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ToolError::Malformed {
                path: path.to_path_buf(),
                offset: name_offset,
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_offset = cur.pos as u64;
        let mut data = Vec::with_capacity(numel);
        for p in 0..numel {
            let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset: data_offset + 4 * p as u64,
                    detail: format!("non-finite value in parameter {name}"),
                });
            }
            data.push(v as f64);
        }
        named.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(ToolError::Malformed {
            path: path.to_path_buf(),
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after parameters", bytes.len() - cur.pos),
        });
    }
    Ok(Model::from_parts(cfg, &named, norm_mean, norm_std)?)
}
