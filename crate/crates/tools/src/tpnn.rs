//! TPNN raster sequence files.
//!
//! Layout, all little-endian: bytes 0-3 ASCII "TPNN", u32 version (= 1),
//! u32 frame count T, u32 height H, u32 width W, u32 step_seconds, then
//! T i64 timestamps, then T*H*W float32 values in frame-major row-major
//! order (mm/h). Rasters must be square. The format has no missing-data
//! sentinel; NaN anywhere is a parse error.

use std::path::Path;

use nowcast_core::{FieldSequence, Grid, PrecipField};

use crate::error::{Result, ToolError};

pub const MAGIC: &[u8; 4] = b"TPNN";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 24;

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

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parsed header plus raw frame data; shared by the precipitation and
/// raw (signed field) readers.
struct RawFile {
    step_seconds: u32,
    timestamps: Vec<i64>,
    /// One row-major n*n buffer per frame.
    frames: Vec<Vec<f64>>,
    n: usize,
}

fn read_raw_file(path: &Path, allow_negative: bool) -> Result<RawFile> {
    let bytes = std::fs::read(path).map_err(|e| ToolError::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(ToolError::BadMagic {
            path: path.to_path_buf(),
            expected: "TPNN",
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
    let t = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let step_seconds = cur.u32()?;
    if h != w {
        return Err(ToolError::Malformed {
            path: path.to_path_buf(),
            offset: 12,
            detail: format!("non-square raster {h}x{w}"),
        });
    }
    let mut timestamps = Vec::with_capacity(t);
    for i in 0..t {
        let offset = HEADER_BYTES + 8 * i as u64;
        let ts = cur.i64()?;
        // raw field files may repeat a valid time across channels, so the
        // cadence check only applies to precipitation sequences
        if i > 0 && !allow_negative {
            let prev = timestamps[i - 1];
            if ts <= prev {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("timestamps not strictly increasing at frame {i} ({prev} then {ts})"),
                });
            }
            if ts - prev != step_seconds as i64 {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!(
                        "timestamp gap {} at frame {i}, header declares step {step_seconds}",
                        ts - prev
                    ),
                });
            }
        }
        timestamps.push(ts);
    }
    let payload_base = HEADER_BYTES + 8 * t as u64;
    let mut frames = Vec::with_capacity(t);
    for f in 0..t {
        let mut data = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let v = cur.f32()?;
            let offset = payload_base + 4 * (f * h * w + p) as u64;
            if v.is_nan() {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("NaN value in frame {f}, pixel {p}"),
                });
            }
            if !v.is_finite() {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("non-finite value in frame {f}, pixel {p}"),
                });
            }
            if !allow_negative && v < 0.0 {
                return Err(ToolError::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("negative rain rate {v} in frame {f}, pixel {p}"),
                });
            }
            data.push(v as f64);
        }
        frames.push(data);
    }
    if cur.pos != bytes.len() {
        return Err(ToolError::Malformed {
            path: path.to_path_buf(),
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        });
    }
    Ok(RawFile {
        step_seconds,
        timestamps,
        frames,
        n: h,
    })
}

/// Read a precipitation sequence. All domain invariants (non-negative
/// rates, power-of-two side, exact cadence) are enforced; errors name the
/// byte offset of the offending field.
pub fn read_sequence(path: &Path) -> Result<FieldSequence> {
    let raw = read_raw_file(path, false)?;
    let mut fields = Vec::with_capacity(raw.frames.len());
    for (data, &ts) in raw.frames.iter().zip(&raw.timestamps) {
        let grid = Grid::from_vec(raw.n, data.clone())?;
        fields.push(PrecipField::new(grid, ts)?);
    }
    Ok(FieldSequence::new(fields, raw.step_seconds)?)
}

fn encode(
    n: usize,
    step_seconds: u32,
    timestamps: &[i64],
    frames: &[&[f64]],
) -> Vec<u8> {
    let t = frames.len();
    let mut out = Vec::with_capacity(24 + 8 * t + 4 * t * n * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&step_seconds.to_le_bytes());
    for &ts in timestamps {
        out.extend_from_slice(&ts.to_le_bytes());
    }
    for frame in frames {
        for &v in frame.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Write a precipitation sequence. Deterministic: equal sequences produce
/// identical bytes.
pub fn write_sequence(seq: &FieldSequence, path: &Path) -> Result<()> {
    let timestamps: Vec<i64> = seq.frames().iter().map(|f| f.timestamp()).collect();
    let frames: Vec<&[f64]> = seq.frames().iter().map(|f| f.values().values()).collect();
    let bytes = encode(seq.n(), seq.step_seconds(), &timestamps, &frames);
    std::fs::write(path, bytes).map_err(|e| ToolError::io(path, e))
}

/// Write arbitrary finite rasters (motion components, intensity
/// corrections) in the same container. Values may be negative; the file
/// is not readable as a precipitation sequence.
pub fn write_raw(
    n: usize,
    step_seconds: u32,
    timestamps: &[i64],
    frames: &[&[f64]],
    path: &Path,
) -> Result<()> {
    if timestamps.len() != frames.len() {
        return Err(ToolError::Data(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            frames.len()
        )));
    }
    for (i, frame) in frames.iter().enumerate() {
        if frame.len() != n * n {
            return Err(ToolError::Data(format!(
                "frame {i} has {} values, raster wants {}",
                frame.len(),
                n * n
            )));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(ToolError::Data(format!("non-finite value in frame {i}")));
        }
    }
    let bytes = encode(n, step_seconds, timestamps, frames);
    std::fs::write(path, bytes).map_err(|e| ToolError::io(path, e))
}

/// Read a raw raster file written by `write_raw`. Frames keep their
/// stored order; negative values are allowed.
pub fn read_raw(path: &Path) -> Result<(u32, Vec<i64>, Vec<Vec<f64>>, usize)> {
    let raw = read_raw_file(path, true)?;
    Ok((raw.step_seconds, raw.timestamps, raw.frames, raw.n))
}
