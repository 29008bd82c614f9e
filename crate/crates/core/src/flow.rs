//! Dense motion estimation between consecutive precipitation frames.
//!
//! Two estimators share one entry point: windowed Lucas-Kanade with
//! Gauss-Newton refinement on the final frame pair, and a spectral solver
//! that expresses the optical-flow constraint in a truncated Fourier basis
//! and solves a ridge-regularized least-squares problem for global flow
//! coefficients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{FieldSequence, MotionField};
use crate::grid::Grid;
use crate::linalg::{solve_dense, solve_sym2};
use crate::math;
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMethod {
    LucasKanade,
    Darts,
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub method: FlowMethod,
    /// Odd side of the local least-squares window, >= 3.
    pub lk_window: usize,
    /// Gaussian pre-smoothing stddev in pixels before gradients.
    pub lk_smooth_sigma: f64,
    /// Retained Fourier modes per axis for the spectral solver.
    pub darts_modes: usize,
    /// Non-negative ridge term for the spectral normal equations.
    pub darts_regularization: f64,
    /// Number of trailing frames consumed by either solver.
    pub context_frames: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            method: FlowMethod::Darts,
            lk_window: 9,
            lk_smooth_sigma: 1.5,
            darts_modes: 3,
            darts_regularization: 1e-3,
            context_frames: 2,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lk_window < 3 || self.lk_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "lk_window must be odd and >= 3, got {}",
                self.lk_window
            )));
        }
        if self.darts_modes < 1 {
            return Err(Error::InvalidConfig("darts_modes must be >= 1".into()));
        }
        if self.darts_regularization < 0.0 || !self.darts_regularization.is_finite() {
            return Err(Error::InvalidConfig(
                "darts_regularization must be finite and >= 0".into(),
            ));
        }
        if self.context_frames < 2 {
            return Err(Error::InvalidConfig("context_frames must be >= 2".into()));
        }
        if !(self.lk_smooth_sigma >= 0.0) {
            return Err(Error::InvalidConfig("lk_smooth_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Estimated flow plus a flag marking texture-free inputs where the zero
/// field was returned by the degeneracy contract rather than measured.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub flow: MotionField,
    pub degenerate: bool,
}

/// Displacement in pixels per step from the penultimate toward the last
/// frame, using the trailing `cfg.context_frames` frames.
pub fn estimate_flow(frames: &FieldSequence, cfg: &FlowConfig) -> Result<FlowResult> {
    cfg.validate()?;
    if frames.len() != cfg.context_frames {
        return Err(Error::Domain(format!(
            "flow solver expects {} frames, got {}",
            cfg.context_frames,
            frames.len()
        )));
    }
    match cfg.method {
        FlowMethod::LucasKanade => lucas_kanade_solve(frames, cfg),
        FlowMethod::Darts => darts_solve(frames, cfg),
    }
}

/// Local 2x2 normal equations assembled from windowed gradients:
/// structure tensor entries and the gradient-times-temporal mismatch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalSystem {
    pub ixx: f64,
    pub ixy: f64,
    pub iyy: f64,
    pub bx: f64,
    pub by: f64,
}

const COND_LIMIT: f64 = 1e8;

/// Solve `(A^T A + ridge I) d = A^T b` for one pixel; zero when the
/// regularized system is still ill-conditioned.
pub fn lucas_kanade_pixel(sys: &LocalSystem, ridge: f64) -> (f64, f64) {
    solve_sym2(
        sys.ixx + ridge,
        sys.ixy,
        sys.iyy + ridge,
        (sys.bx, sys.by),
        COND_LIMIT,
    )
    .unwrap_or((0.0, 0.0))
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Central finite differences with replicate border.
fn fd_gradient(f: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let n = f.side();
    let gx = Grid::from_fn(n, |i, j| {
        let a = *f.get(i, clamp_idx(j as isize + 1, n));
        let b = *f.get(i, clamp_idx(j as isize - 1, n));
        (a - b) / 2.0
    });
    let gy = Grid::from_fn(n, |i, j| {
        let a = *f.get(clamp_idx(i as isize + 1, n), j);
        let b = *f.get(clamp_idx(i as isize - 1, n), j);
        (a - b) / 2.0
    });
    (gx, gy)
}

/// Least-squares temporal slope per pixel over all frames, in field units
/// per step. For two frames this reduces to the plain difference.
fn temporal_slope(frames: &[Grid<f64>]) -> Grid<f64> {
    let t = frames.len();
    let n = frames[0].side();
    let mid = (t as f64 - 1.0) / 2.0;
    let denom: f64 = (0..t).map(|k| (k as f64 - mid) * (k as f64 - mid)).sum();
    Grid::from_fn(n, |i, j| {
        let mut acc = 0.0;
        for (k, f) in frames.iter().enumerate() {
            acc += (k as f64 - mid) * f.get(i, j);
        }
        acc / denom
    })
}

/// Bilinear pull-sampling on a plain grid with replicate border; internal
/// helper for the refinement loop (fields here may be slightly negative
/// after spectral smoothing, so the public warp cannot be used).
fn pull_sample(src: &Grid<f64>, u: &Grid<f64>, v: &Grid<f64>) -> Grid<f64> {
    let n = src.side();
    let max = (n - 1) as f64;
    Grid::from_fn(n, |i, j| {
        let sx = (j as f64 - u.get(i, j)).clamp(0.0, max);
        let sy = (i as f64 - v.get(i, j)).clamp(0.0, max);
        let x0 = math::floor(sx) as usize;
        let y0 = math::floor(sy) as usize;
        let x1 = (x0 + 1).min(n - 1);
        let y1 = (y0 + 1).min(n - 1);
        let wx = sx - x0 as f64;
        let wy = sy - y0 as f64;
        (1.0 - wy) * ((1.0 - wx) * src.get(y0, x0) + wx * src.get(y0, x1))
            + wy * ((1.0 - wx) * src.get(y1, x0) + wx * src.get(y1, x1))
    })
}

fn max_abs(g: &Grid<f64>) -> f64 {
    g.values().iter().fold(0.0, |m, v| {
        let a = math::abs(*v);
        if a > m {
            a
        } else {
            m
        }
    })
}

/// Clamp per-pixel displacement magnitude so the MotionField invariant
/// always holds; outliers in flat regions are scaled, not rejected.
fn clamp_flow(mut u: Grid<f64>, mut v: Grid<f64>) -> Result<MotionField> {
    let cap = u.side() as f64 / 2.0 - 1e-9;
    let n = u.side();
    for i in 0..n {
        for j in 0..n {
            let (uu, vv) = (*u.get(i, j), *v.get(i, j));
            let mag = math::hypot(uu, vv);
            if mag > cap {
                let s = cap / mag;
                *u.get_mut(i, j) = uu * s;
                *v.get_mut(i, j) = vv * s;
            }
        }
    }
    MotionField::new(u, v)
}

const LK_RIDGE: f64 = 1e-9;
const LK_REFINE_ITERS: usize = 4;
const DEGENERACY_EPS: f64 = 1e-12;

fn lk_pass(
    prev: &Grid<f64>,
    it: &Grid<f64>,
    window: usize,
    ridge: f64,
) -> (Grid<f64>, Grid<f64>) {
    let n = prev.side();
    let (gx, gy) = fd_gradient(prev);
    let half = (window / 2) as isize;
    let mut u = Grid::zeros(n);
    let mut v = Grid::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut sys = LocalSystem::default();
            for di in -half..=half {
                for dj in -half..=half {
                    let wi = clamp_idx(i as isize + di, n);
                    let wj = clamp_idx(j as isize + dj, n);
                    let ix = *gx.get(wi, wj);
                    let iy = *gy.get(wi, wj);
                    let t = *it.get(wi, wj);
                    sys.ixx += ix * ix;
                    sys.ixy += ix * iy;
                    sys.iyy += iy * iy;
                    sys.bx -= ix * t;
                    sys.by -= iy * t;
                }
            }
            let (du, dv) = lucas_kanade_pixel(&sys, ridge);
            *u.get_mut(i, j) = du;
            *v.get_mut(i, j) = dv;
        }
    }
    (u, v)
}

fn lucas_kanade_solve(frames: &FieldSequence, cfg: &FlowConfig) -> Result<FlowResult> {
    let n = frames.n();
    let smoothed: Vec<Grid<f64>> = frames
        .frames()
        .iter()
        .map(|f| spectral::gaussian_smooth(f.values(), cfg.lk_smooth_sigma))
        .collect::<Result<_>>()?;
    let last = &smoothed[smoothed.len() - 1];
    let prev = &smoothed[smoothed.len() - 2];
    let (gx, gy) = fd_gradient(prev);
    if max_abs(&gx) < DEGENERACY_EPS && max_abs(&gy) < DEGENERACY_EPS {
        return Ok(FlowResult {
            flow: MotionField::zeros(n),
            degenerate: true,
        });
    }
    // initial solve with the multi-frame temporal slope
    let it = temporal_slope(&smoothed);
    let (mut u, mut v) = lk_pass(prev, &it, cfg.lk_window, LK_RIDGE);
    // Gauss-Newton refinement against the final pair: re-warp the previous
    // frame by the current estimate and solve for the correction.
    for _ in 0..LK_REFINE_ITERS {
        let warped = pull_sample(prev, &u, &v);
        let residual = Grid::from_fn(n, |i, j| last.get(i, j) - warped.get(i, j));
        let (du, dv) = lk_pass(&warped, &residual, cfg.lk_window, LK_RIDGE);
        for idx in 0..n * n {
            u.values_mut()[idx] += du.values()[idx];
            v.values_mut()[idx] += dv.values()[idx];
        }
    }
    Ok(FlowResult {
        flow: clamp_flow(u, v)?,
        degenerate: false,
    })
}

/// Spectral flow solve: the constraint
/// `dX/dt + u dX/dx + v dX/dy = 0` is evaluated with spectral spatial
/// derivatives and a least-squares temporal slope, with `u`, `v` expanded
/// in a truncated real Fourier basis of `darts_modes` modes per axis.
pub fn darts_solve(frames: &FieldSequence, cfg: &FlowConfig) -> Result<FlowResult> {
    cfg.validate()?;
    let n = frames.n();
    if cfg.darts_modes > n / 2 {
        return Err(Error::InvalidConfig(format!(
            "darts_modes {} exceeds Nyquist for grid side {}",
            cfg.darts_modes, n
        )));
    }
    let grids: Vec<Grid<f64>> = frames.frames().iter().map(|f| f.values().clone()).collect();
    let mean = Grid::from_fn(n, |i, j| {
        grids.iter().map(|g| g.get(i, j)).sum::<f64>() / grids.len() as f64
    });
    let (gx, gy) = spectral::gradient(&mean)?;
    let xt = temporal_slope(&grids);
    if max_abs(&gx) < DEGENERACY_EPS && max_abs(&gy) < DEGENERACY_EPS {
        return Ok(FlowResult {
            flow: MotionField::zeros(n),
            degenerate: true,
        });
    }

    let (basis, basis_wavenumber_sq) = fourier_basis(n, cfg.darts_modes);
    let b = basis.len();
    let dim = 2 * b;
    let mut normal = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let inv_pixels = 1.0 / (n * n) as f64;
    let mut row = vec![0.0; dim];
    for i in 0..n {
        for j in 0..n {
            let ix = *gx.get(i, j);
            let iy = *gy.get(i, j);
            for (k, phi) in basis.iter().enumerate() {
                let p = phi.values()[i * n + j];
                row[k] = ix * p;
                row[b + k] = iy * p;
            }
            let target = -*xt.get(i, j);
            for a in 0..dim {
                if row[a] == 0.0 {
                    continue;
                }
                let ra = row[a] * inv_pixels;
                for c in 0..dim {
                    normal[a * dim + c] += ra * row[c];
                }
                rhs[a] += ra * target;
            }
        }
    }
    // Smoothness-weighted ridge: each coefficient is penalized by its
    // squared wavenumber, relative to the mean diagonal so the shrinkage is
    // invariant to field amplitude. The constant mode is essentially free,
    // which biases the solve toward the smoothest flow explaining the data.
    let mean_diag = (0..dim).map(|d| normal[d * dim + d]).sum::<f64>() / dim as f64;
    for d in 0..dim {
        let k2 = basis_wavenumber_sq[d % b];
        normal[d * dim + d] += cfg.darts_regularization * mean_diag * k2 * k2 + 1e-14 + 1e-9 * mean_diag;
    }
    let coef = solve_dense(&normal, &rhs, dim)?;

    let mut u = Grid::zeros(n);
    let mut v = Grid::zeros(n);
    for (k, phi) in basis.iter().enumerate() {
        let (cu, cv) = (coef[k], coef[b + k]);
        if cu == 0.0 && cv == 0.0 {
            continue;
        }
        for idx in 0..n * n {
            let p = phi.values()[idx];
            u.values_mut()[idx] += cu * p;
            v.values_mut()[idx] += cv * p;
        }
    }
    Ok(FlowResult {
        flow: clamp_flow(u, v)?,
        degenerate: false,
    })
}

/// Real Fourier basis with modes |p|, |q| <= m: the constant function plus
/// cos/sin of every wave vector in a half-plane (the other half duplicates
/// them up to sign). Also returns p^2 + q^2 per basis function for the
/// smoothness penalty.
fn fourier_basis(n: usize, m: usize) -> (Vec<Grid<f64>>, Vec<f64>) {
    let mut basis = Vec::new();
    let mut k2 = Vec::new();
    basis.push(Grid::filled(n, 1.0));
    k2.push(0.0);
    let w = 2.0 * core::f64::consts::PI / n as f64;
    let mi = m as isize;
    for q in 0..=mi {
        for p in -mi..=mi {
            let in_half_plane = q > 0 || (q == 0 && p > 0);
            if !in_half_plane {
                continue;
            }
            let cos_g = Grid::from_fn(n, |i, j| {
                math::cos(w * (p as f64 * j as f64 + q as f64 * i as f64))
            });
            let sin_g = Grid::from_fn(n, |i, j| {
                math::sin(w * (p as f64 * j as f64 + q as f64 * i as f64))
            });
            basis.push(cos_g);
            basis.push(sin_g);
            let mag = (p * p + q * q) as f64;
            k2.push(mag);
            k2.push(mag);
        }
    }
    (basis, k2)
}
