//! Differentiable backward semi-Lagrangian warp and the extrapolation
//! baseline built on it.
//!
//! Each output pixel pulls from `p - flow(p)` with bilinear interpolation,
//! adds the intensity correction, and clamps at zero. Out-of-domain source
//! positions replicate the nearest border pixel.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{FieldSequence, IntensityField, MotionField, PrecipField};
use crate::flow::{estimate_flow, FlowConfig};
use crate::grid::Grid;
use crate::math;

/// Per-output-pixel linearization of the warp forward rule.
#[derive(Debug, Clone, Copy)]
pub struct PixelJacobian {
    /// Flat indices of the 4 bilinear source pixels (y0x0, y0x1, y1x0, y1x1).
    pub src: [usize; 4],
    /// Matching bilinear weights; non-negative, sum to 1.
    pub weights: [f64; 4],
    /// d(sampled value)/d(source x), zero when the x coordinate clamped.
    pub d_dx: f64,
    /// d(sampled value)/d(source y), zero when the y coordinate clamped.
    pub d_dy: f64,
    /// False when the zero-clamp is active (pre-clamp value <= 0), which
    /// kills every downstream gradient at this pixel.
    pub active: bool,
}

/// Sparse Jacobian bookkeeping for the whole warp; the intensity
/// contribution is the identity gated by `active`.
#[derive(Debug, Clone)]
pub struct WarpJacobians {
    pub pixels: Vec<PixelJacobian>,
    pub n: usize,
}

fn check_sides(flow: &MotionField, intensity: &IntensityField, frame: &PrecipField) -> Result<usize> {
    let n = frame.n();
    if flow.n() != n {
        return Err(Error::ShapeMismatch { expected: n, got: flow.n() });
    }
    if intensity.n() != n {
        return Err(Error::ShapeMismatch { expected: n, got: intensity.n() });
    }
    Ok(n)
}

fn sample_axis(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    // returns (lo index, hi index, hi weight, clamped)
    let max = (n - 1) as f64;
    if coord <= 0.0 {
        return (0, 0, 0.0, coord < 0.0);
    }
    if coord >= max {
        return (n - 1, n - 1, 0.0, coord > max);
    }
    let lo = math::floor(coord) as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, coord - lo as f64, false)
}

/// Forward warp together with the per-pixel Jacobian data the VJP needs.
pub fn warp_with_jacobians(
    flow: &MotionField,
    intensity: &IntensityField,
    frame: &PrecipField,
) -> Result<(PrecipField, WarpJacobians)> {
    let n = check_sides(flow, intensity, frame)?;
    let f = frame.values();
    let mut out = Grid::zeros(n);
    let mut pixels = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let sx = j as f64 - flow.u().get(i, j);
            let sy = i as f64 - flow.v().get(i, j);
            let (x0, x1, wx, cx) = sample_axis(sx, n);
            let (y0, y1, wy, cy) = sample_axis(sy, n);
            let f00 = *f.get(y0, x0);
            let f01 = *f.get(y0, x1);
            let f10 = *f.get(y1, x0);
            let f11 = *f.get(y1, x1);
            let sampled = (1.0 - wy) * ((1.0 - wx) * f00 + wx * f01)
                + wy * ((1.0 - wx) * f10 + wx * f11);
            let raw = sampled + intensity.values().get(i, j);
            let active = raw > 0.0;
            *out.get_mut(i, j) = if active { raw } else { 0.0 };
            pixels.push(PixelJacobian {
                src: [y0 * n + x0, y0 * n + x1, y1 * n + x0, y1 * n + x1],
                weights: [
                    (1.0 - wy) * (1.0 - wx),
                    (1.0 - wy) * wx,
                    wy * (1.0 - wx),
                    wy * wx,
                ],
                d_dx: if cx {
                    0.0
                } else {
                    (1.0 - wy) * (f01 - f00) + wy * (f11 - f10)
                },
                d_dy: if cy {
                    0.0
                } else {
                    (1.0 - wx) * (f10 - f00) + wx * (f11 - f01)
                },
                active,
            });
        }
    }
    let out_field = PrecipField::new(out, frame.timestamp())?;
    Ok((out_field, WarpJacobians { pixels, n }))
}

/// The fixed differentiable advection operator:
/// `out(p) = clamp_0(bilinear(frame, p - flow(p)) + intensity(p))`.
pub fn warp(
    flow: &MotionField,
    intensity: &IntensityField,
    frame: &PrecipField,
) -> Result<PrecipField> {
    warp_with_jacobians(flow, intensity, frame).map(|(f, _)| f)
}

/// Gradients of the warp output w.r.t. its three inputs.
#[derive(Debug, Clone)]
pub struct WarpGrads {
    pub flow_u: Grid<f64>,
    pub flow_v: Grid<f64>,
    pub intensity: Grid<f64>,
    pub frame: Grid<f64>,
}

/// Exact vector-Jacobian product of the warp forward rule. The clamp
/// subgradient at zero is taken as zero.
pub fn warp_vjp(
    upstream: &Grid<f64>,
    flow: &MotionField,
    intensity: &IntensityField,
    frame: &PrecipField,
) -> Result<WarpGrads> {
    let n = check_sides(flow, intensity, frame)?;
    if upstream.side() != n {
        return Err(Error::ShapeMismatch { expected: n, got: upstream.side() });
    }
    let (_, jac) = warp_with_jacobians(flow, intensity, frame)?;
    Ok(apply_vjp(upstream, &jac))
}

/// VJP from precomputed Jacobian data (used by the tape adapter so forward
/// work is not repeated).
pub fn apply_vjp(upstream: &Grid<f64>, jac: &WarpJacobians) -> WarpGrads {
    let n = jac.n;
    let mut grads = WarpGrads {
        flow_u: Grid::zeros(n),
        flow_v: Grid::zeros(n),
        intensity: Grid::zeros(n),
        frame: Grid::zeros(n),
    };
    let frame_flat = grads.frame.values_mut();
    for i in 0..n {
        for j in 0..n {
            let p = &jac.pixels[i * n + j];
            if !p.active {
                continue;
            }
            let g = *upstream.get(i, j);
            if g == 0.0 {
                continue;
            }
            *grads.intensity.get_mut(i, j) = g;
            for k in 0..4 {
                frame_flat[p.src[k]] += g * p.weights[k];
            }
            // source coordinate is p - flow, so d/d(flow) = -d/d(source)
            *grads.flow_u.get_mut(i, j) = -g * p.d_dx;
            *grads.flow_v.get_mut(i, j) = -g * p.d_dy;
        }
    }
    grads
}

/// PySTEPS-style deterministic extrapolation: estimate one flow from the
/// trailing frames, then advect the last frame forward repeatedly.
pub fn extrapolate(
    frames: &FieldSequence,
    cfg: &FlowConfig,
    steps: usize,
) -> Result<Vec<PrecipField>> {
    if steps < 1 {
        return Err(Error::Domain("extrapolation needs steps >= 1".into()));
    }
    let tail = frames.tail(cfg.context_frames)?;
    let flow = estimate_flow(&tail, cfg)?.flow;
    let n = frames.n();
    let zero_s = IntensityField::zeros(n);
    let mut current = frames.frames().last().unwrap().clone();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let ts = current.timestamp() + frames.step_seconds() as i64;
        current = warp(&flow, &zero_s, &current)?.with_timestamp(ts);
        out.push(current.clone());
        let _ = k;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn random_field(n: usize, rng: &mut Rng) -> PrecipField {
        PrecipField::new(Grid::from_fn(n, |_, _| rng.uniform_in(0.5, 10.0)), 0).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = Rng::seed_from(3);
        for _ in 0..5 {
            let x = random_field(16, &mut rng);
            let out = warp(&MotionField::zeros(16), &IntensityField::zeros(16), &x).unwrap();
            assert_eq!(out.values(), x.values());
        }
    }

    #[test]
    fn unit_shift_matches_index_oracle() {
        // flow = (1, 0) px east: out(i, j) samples (i, j-1), border replicated
        let n = 16;
        let frame =
            PrecipField::new(Grid::from_fn(n, |i, j| ((i * 3 + j * 7) % 11) as f64), 0).unwrap();
        let flow = MotionField::new(Grid::filled(n, 1.0), Grid::zeros(n)).unwrap();
        let out = warp(&flow, &IntensityField::zeros(n), &frame).unwrap();
        for i in 0..n {
            for j in 0..n {
                let jj = if j == 0 { 0 } else { j - 1 };
                assert_eq!(out.values().get(i, j), frame.values().get(i, jj));
            }
        }
    }

    #[test]
    fn pure_intensity_on_zero_frame() {
        let n = 8;
        let zero = PrecipField::new(Grid::zeros(n), 0).unwrap();
        let s = IntensityField::new(Grid::filled(n, 2.0)).unwrap();
        let out = warp(&MotionField::zeros(n), &s, &zero).unwrap();
        assert!(out.values().values().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn clamp_keeps_output_non_negative() {
        let n = 8;
        let frame = PrecipField::new(Grid::filled(n, 1.0), 0).unwrap();
        let s = IntensityField::new(Grid::filled(n, -3.0)).unwrap();
        let out = warp(&MotionField::zeros(n), &s, &frame).unwrap();
        assert!(out.values().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let n = 16;
        let mut rng = Rng::seed_from(9);
        let frame = random_field(n, &mut rng);
        let u = Grid::from_fn(n, |_, _| rng.uniform_in(-3.0, 3.0));
        let v = Grid::from_fn(n, |_, _| rng.uniform_in(-3.0, 3.0));
        let flow = MotionField::new(u, v).unwrap();
        let (_, jac) = warp_with_jacobians(&flow, &IntensityField::zeros(n), &frame).unwrap();
        for p in &jac.pixels {
            let sum: f64 = p.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.weights.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let n = 8;
        let mut rng = Rng::seed_from(4);
        let frame = random_field(n, &mut rng);
        let g = warp_vjp(
            &Grid::zeros(n),
            &MotionField::zeros(n),
            &IntensityField::zeros(n),
            &frame,
        )
        .unwrap();
        assert!(g.flow_u.values().iter().all(|v| *v == 0.0));
        assert!(g.frame.values().iter().all(|v| *v == 0.0));
        assert!(g.intensity.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_upstream_at_zero_flow_is_identity_jacobian() {
        let n = 8;
        let frame = PrecipField::new(Grid::filled(n, 5.0), 0).unwrap();
        let mut upstream = Grid::zeros(n);
        *upstream.get_mut(3, 4) = 1.0;
        let g = warp_vjp(
            &upstream,
            &MotionField::zeros(n),
            &IntensityField::zeros(n),
            &frame,
        )
        .unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == 3 && j == 4 { 1.0 } else { 0.0 };
                assert_eq!(*g.intensity.get(i, j), want);
                assert_eq!(*g.frame.get(i, j), want);
            }
        }
    }

    #[test]
    fn intensity_additivity_away_from_clamp() {
        let n = 16;
        let mut rng = Rng::seed_from(11);
        let frame = random_field(n, &mut rng);
        let u = Grid::from_fn(n, |_, _| rng.uniform_in(-2.0, 2.0));
        let v = Grid::from_fn(n, |_, _| rng.uniform_in(-2.0, 2.0));
        let flow = MotionField::new(u, v).unwrap();
        let s1 = IntensityField::new(Grid::from_fn(n, |_, _| rng.uniform_in(0.0, 1.0))).unwrap();
        let s2 = 0.7;
        let sum =
            IntensityField::new(Grid::from_fn(n, |i, j| s1.values().get(i, j) + s2)).unwrap();
        let a = warp(&flow, &sum, &frame).unwrap();
        let b = warp(&flow, &s1, &frame).unwrap();
        // frame >= 0.5 and intensities >= 0, so no clamp activates
        for (av, bv) in a.values().values().iter().zip(b.values().values()) {
            assert!((av - (bv + s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn static_extrapolation_is_persistence() {
        let n = 16;
        let frame = |ts| {
            PrecipField::new(Grid::from_fn(n, |i, j| ((i + j) % 5) as f64), ts).unwrap()
        };
        let seq = FieldSequence::new(
            (0..3).map(|k| frame(k * 600)).collect::<Vec<_>>(),
            600,
        )
        .unwrap();
        let cfg = FlowConfig::default();
        let out = extrapolate(&seq, &cfg, 3).unwrap();
        assert_eq!(out.len(), 3);
        for (k, f) in out.iter().enumerate() {
            assert_eq!(f.values(), seq.frames()[2].values());
            assert_eq!(f.timestamp(), 1200 + 600 * (k as i64 + 1));
        }
    }
}
