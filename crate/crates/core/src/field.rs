//! Core raster field types and elementary field algebra.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{same_side, Grid};
use crate::math;

/// One n-by-n precipitation raster in mm/h at a timestamp.
///
/// Values are finite and non-negative; the side is a power of two >= 8 so
/// the spectral flow solver and 4x4 pooling always apply.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecipField {
    values: Grid<f64>,
    timestamp: i64,
}

pub fn side_is_valid(n: usize) -> bool {
    n >= 8 && n.is_power_of_two()
}

impl PrecipField {
    pub fn new(values: Grid<f64>, timestamp: i64) -> Result<Self> {
        if !side_is_valid(values.side()) {
            return Err(Error::InvalidField(format!(
                "grid side {} must be a power of two >= 8",
                values.side()
            )));
        }
        for (idx, v) in values.values().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidField(format!(
                    "non-finite rain rate at flat index {idx}"
                )));
            }
            if *v < 0.0 {
                return Err(Error::InvalidField(format!(
                    "negative rain rate {v} at flat index {idx}"
                )));
            }
        }
        Ok(PrecipField { values, timestamp })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.values.side()
    }

    #[inline]
    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    #[inline]
    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn with_timestamp(&self, timestamp: i64) -> Self {
        PrecipField {
            values: self.values.clone(),
            timestamp,
        }
    }
}

/// Ordered frames with a fixed temporal spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSequence {
    frames: Vec<PrecipField>,
    step_seconds: u32,
}

impl FieldSequence {
    pub fn new(frames: Vec<PrecipField>, step_seconds: u32) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidSequence {
                frame: frames.len(),
                reason: format!("sequence needs at least 2 frames, got {}", frames.len()),
            });
        }
        if step_seconds == 0 {
            return Err(Error::InvalidConfig("step_seconds must be positive".into()));
        }
        let n = frames[0].n();
        for (k, f) in frames.iter().enumerate() {
            if f.n() != n {
                return Err(Error::InvalidSequence {
                    frame: k,
                    reason: format!("grid side {} differs from first frame {}", f.n(), n),
                });
            }
            if k > 0 {
                let expect = frames[k - 1].timestamp() + step_seconds as i64;
                if f.timestamp() != expect {
                    return Err(Error::InvalidSequence {
                        frame: k,
                        reason: format!(
                            "timestamp {} not monotone by step {} (expected {})",
                            f.timestamp(),
                            step_seconds,
                            expect
                        ),
                    });
                }
            }
        }
        Ok(FieldSequence {
            frames,
            step_seconds,
        })
    }

    #[inline]
    pub fn frames(&self) -> &[PrecipField] {
        &self.frames
    }

    #[inline]
    pub fn step_seconds(&self) -> u32 {
        self.step_seconds
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.frames[0].n()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // length >= 2 by construction
    }

    /// Last `count` frames as a new sequence.
    pub fn tail(&self, count: usize) -> Result<FieldSequence> {
        if count < 2 || count > self.frames.len() {
            return Err(Error::Domain(format!(
                "tail of {count} frames from a {}-frame sequence",
                self.frames.len()
            )));
        }
        FieldSequence::new(
            self.frames[self.frames.len() - count..].to_vec(),
            self.step_seconds,
        )
    }

    /// Contiguous window `[start, start+count)` as a new sequence.
    pub fn window(&self, start: usize, count: usize) -> Result<FieldSequence> {
        if count < 2 || start + count > self.frames.len() {
            return Err(Error::Domain(format!(
                "window [{start}, {}) out of bounds for {} frames",
                start + count,
                self.frames.len()
            )));
        }
        FieldSequence::new(self.frames[start..start + count].to_vec(), self.step_seconds)
    }
}

/// Per-pixel 2-component displacement in pixels per step.
///
/// `u` is the east-west (column) component, `v` north-south (row).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    u: Grid<f64>,
    v: Grid<f64>,
}

impl MotionField {
    pub fn new(u: Grid<f64>, v: Grid<f64>) -> Result<Self> {
        let n = same_side(&u, &v)?;
        let cap = n as f64 / 2.0;
        for (uu, vv) in u.values().iter().zip(v.values()) {
            if !uu.is_finite() || !vv.is_finite() {
                return Err(Error::NonFinite("motion field"));
            }
            if math::hypot(*uu, *vv) > cap {
                return Err(Error::InvalidField(format!(
                    "displacement magnitude {} exceeds n/2 = {}",
                    math::hypot(*uu, *vv),
                    cap
                )));
            }
        }
        Ok(MotionField { u, v })
    }

    pub fn zeros(n: usize) -> Self {
        MotionField {
            u: Grid::zeros(n),
            v: Grid::zeros(n),
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.u.side()
    }

    #[inline]
    pub fn u(&self) -> &Grid<f64> {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &Grid<f64> {
        &self.v
    }
}

/// Per-pixel additive correction in mm/h per step; may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityField {
    values: Grid<f64>,
}

impl IntensityField {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::NonFinite("intensity field"));
        }
        Ok(IntensityField { values })
    }

    pub fn zeros(n: usize) -> Self {
        IntensityField {
            values: Grid::zeros(n),
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.values.side()
    }

    #[inline]
    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }
}

/// Exceedance mask: `mask[i,j] = values[i,j] >= t`.
///
/// The comparison is `>=` so a pixel exactly at threshold counts as rain;
/// the metrics module relies on the same convention.
pub fn threshold_mask(field: &PrecipField, t: f64) -> Result<Grid<bool>> {
    if !(t > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must be positive, got {t}"
        )));
    }
    Ok(field.values().map(|v| *v >= t))
}

/// Block-wise any-reduction; `block = 1` is the identity.
pub fn max_pool(mask: &Grid<bool>, block: usize) -> Result<Grid<bool>> {
    if block == 0 || mask.side() % block != 0 {
        return Err(Error::Domain(format!(
            "pooling block {} does not divide grid side {}",
            block,
            mask.side()
        )));
    }
    if block == 1 {
        return Ok(mask.clone());
    }
    let out_side = mask.side() / block;
    Ok(Grid::from_fn(out_side, |bi, bj| {
        for i in bi * block..(bi + 1) * block {
            for j in bj * block..(bj + 1) * block {
                if *mask.get(i, j) {
                    return true;
                }
            }
        }
        false
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn zero_field(n: usize, ts: i64) -> PrecipField {
        PrecipField::new(Grid::zeros(n), ts).unwrap()
    }

    #[test]
    fn rejects_negative_and_nonfinite() {
        let mut g = Grid::zeros(8);
        *g.get_mut(0, 0) = -1.0;
        assert!(PrecipField::new(g, 0).is_err());
        let mut g = Grid::zeros(8);
        *g.get_mut(3, 3) = f64::NAN;
        assert!(PrecipField::new(g, 0).is_err());
    }

    #[test]
    fn rejects_bad_side() {
        assert!(PrecipField::new(Grid::zeros(12), 0).is_err());
        assert!(PrecipField::new(Grid::zeros(4), 0).is_err());
        assert!(PrecipField::new(Grid::zeros(8), 0).is_ok());
    }

    #[test]
    fn sequence_monotonicity() {
        let frames = vec![zero_field(8, 0), zero_field(8, 600), zero_field(8, 600)];
        let err = FieldSequence::new(frames, 600).unwrap_err();
        match err {
            Error::InvalidSequence { frame, .. } => assert_eq!(frame, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn sequence_needs_two_frames() {
        assert!(FieldSequence::new(vec![zero_field(8, 0)], 600).is_err());
    }

    #[test]
    fn motion_magnitude_bound() {
        let n = 8;
        let u = Grid::filled(n, 5.0);
        let v = Grid::zeros(n);
        assert!(MotionField::new(u, v).is_err()); // 5 > 8/2
        let u = Grid::filled(n, 3.0);
        let v = Grid::zeros(n);
        assert!(MotionField::new(u, v).is_ok());
    }

    #[test]
    fn threshold_boundary_is_ge() {
        let f = PrecipField::new(Grid::filled(8, 4.0), 0).unwrap();
        let m = threshold_mask(&f, 4.0).unwrap();
        assert!(m.values().iter().all(|b| *b));
        let m = threshold_mask(&zero_field(8, 0), 4.0).unwrap();
        assert!(m.values().iter().all(|b| !*b));
    }

    #[test]
    fn threshold_matches_scalar_loop() {
        // independent per-pixel comparison oracle
        let f = PrecipField::new(Grid::from_fn(8, |i, j| ((i * 31 + j * 7) % 13) as f64), 0)
            .unwrap();
        let m = threshold_mask(&f, 8.0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(*m.get(i, j), *f.values().get(i, j) >= 8.0);
            }
        }
    }

    #[test]
    fn max_pool_identity_and_single_hit() {
        let mut mask = Grid::filled(8, false);
        *mask.get_mut(5, 2) = true;
        assert_eq!(max_pool(&mask, 1).unwrap(), mask);
        let pooled = max_pool(&mask, 4).unwrap();
        assert_eq!(pooled.side(), 2);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(*pooled.get(i, j), i == 1 && j == 0);
            }
        }
    }

    #[test]
    fn max_pool_all_true() {
        let mask = Grid::filled(8, true);
        let pooled = max_pool(&mask, 4).unwrap();
        assert!(pooled.values().iter().all(|b| *b));
    }

    #[test]
    fn max_pool_bad_block() {
        let mask = Grid::filled(8, false);
        assert!(max_pool(&mask, 3).is_err());
    }
}
