//! Ground-truth motion/intensity targets and the composite losses with
//! exact gradients.
//!
//! The motion target comes from an optical-flow solve over the trailing
//! context (which includes the future frame), the intermediate frame is
//! the last observation advected by that flow, and the intensity target is
//! the residual to the true future frame. Spatial loss terms are means
//! over a border-cropped region so periodic-FFT and border-replication
//! artifacts never supervise the model.

use alloc::vec;
use alloc::vec::Vec;

use crate::advect::{apply_vjp, warp, warp_with_jacobians};
use crate::error::{Error, Result};
use crate::field::{FieldSequence, IntensityField, MotionField, PrecipField};
use crate::flow::{estimate_flow, FlowConfig};
use crate::grid::Grid;
use crate::math;

/// Pixels excluded from every spatial loss at each border.
pub const DEFAULT_CROP_MARGIN: usize = 4;

const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SupervisionPair {
    pub motion_target: MotionField,
    pub intensity_target: IntensityField,
    pub advected_intermediate: PrecipField,
    pub crop_margin: usize,
}

/// Loss term weights; defaults follow the tuned values for the variational
/// encoder-decoder.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_motion: f64,
    pub lambda_cos: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_int: 0.995,
            lambda_motion: 0.0033,
            lambda_cos: 0.00165,
            lambda_kl: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_int", self.lambda_int),
            ("lambda_motion", self.lambda_motion),
            ("lambda_cos", self.lambda_cos),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Derive supervision targets from a window whose last frame is the future
/// frame X1. The flow context is the trailing `cfg.context_frames` frames
/// of the window (including X1).
pub fn derive_targets(
    frames: &FieldSequence,
    cfg: &FlowConfig,
    crop_margin: usize,
) -> Result<SupervisionPair> {
    if frames.len() < cfg.context_frames {
        return Err(Error::Domain(alloc::format!(
            "window of {} frames is shorter than flow context {}",
            frames.len(),
            cfg.context_frames
        )));
    }
    let tail = frames.tail(cfg.context_frames)?;
    let motion_target = estimate_flow(&tail, cfg)?.flow;
    let x0 = &frames.frames()[frames.len() - 2];
    let x1 = &frames.frames()[frames.len() - 1];
    let advected = warp(&motion_target, &IntensityField::zeros(frames.n()), x0)?;
    let intensity = Grid::from_fn(frames.n(), |i, j| {
        x1.values().get(i, j) - advected.values().get(i, j)
    });
    Ok(SupervisionPair {
        motion_target,
        intensity_target: IntensityField::new(intensity)?,
        advected_intermediate: advected,
        crop_margin,
    })
}

fn cropped_count(n: usize, margin: usize) -> usize {
    let inner = n.saturating_sub(2 * margin);
    inner * inner
}

fn in_crop(i: usize, j: usize, n: usize, margin: usize) -> bool {
    i >= margin && j >= margin && i < n - margin && j < n - margin
}

/// Mean absolute difference over the cropped region, plus its gradient
/// w.r.t. `a` (sign convention sign(a - b), zero at ties).
fn l1_mean_and_grad(a: &Grid<f64>, b: &Grid<f64>, margin: usize) -> (f64, Grid<f64>) {
    let n = a.side();
    let count = cropped_count(n, margin).max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Grid::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if !in_crop(i, j, n, margin) {
                continue;
            }
            let d = a.get(i, j) - b.get(i, j);
            sum += math::abs(d);
            *grad.get_mut(i, j) = if d > 0.0 {
                1.0 / count
            } else if d < 0.0 {
                -1.0 / count
            } else {
                0.0
            };
        }
    }
    (sum / count, grad)
}

/// Direction mismatch in [0, 2]: one minus the mean cosine similarity over
/// valid pixels. Pixels where both vectors have norm below the epsilon are
/// excluded from the mean.
pub fn cosine_term(v: &MotionField, v_hat: &MotionField) -> Result<f64> {
    let (value, _, _) = cosine_term_with_grad(v, v_hat, 0)?;
    Ok(value)
}

/// Cosine mismatch plus gradients w.r.t. the predicted field components.
pub fn cosine_term_with_grad(
    v: &MotionField,
    v_hat: &MotionField,
    margin: usize,
) -> Result<(f64, Grid<f64>, Grid<f64>)> {
    if v.n() != v_hat.n() {
        return Err(Error::ShapeMismatch {
            expected: v.n(),
            got: v_hat.n(),
        });
    }
    let n = v.n();
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut grad_u = Grid::zeros(n);
    let mut grad_v = Grid::zeros(n);
    let mut contributions: Vec<(usize, usize, f64, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if !in_crop(i, j, n, margin) {
                continue;
            }
            let (tu, tv) = (*v.u().get(i, j), *v.v().get(i, j));
            let (pu, pv) = (*v_hat.u().get(i, j), *v_hat.v().get(i, j));
            let tn = math::hypot(tu, tv);
            let pn = math::hypot(pu, pv);
            if tn < COS_EPS && pn < COS_EPS {
                continue;
            }
            valid += 1;
            let denom = tn * pn + COS_EPS;
            let dot = tu * pu + tv * pv;
            sum += dot / denom;
            // d(dot/denom)/d(pu, pv); the norm derivative vanishes for a
            // zero predicted vector (subgradient choice)
            let (du, dv) = if pn < COS_EPS {
                (tu / denom, tv / denom)
            } else {
                (
                    tu / denom - dot * tn * (pu / pn) / (denom * denom),
                    tv / denom - dot * tn * (pv / pn) / (denom * denom),
                )
            };
            contributions.push((i, j, du, dv));
        }
    }
    if valid == 0 {
        return Ok((0.0, grad_u, grad_v));
    }
    let scale = -1.0 / valid as f64;
    for (i, j, du, dv) in contributions {
        *grad_u.get_mut(i, j) = scale * du;
        *grad_v.get_mut(i, j) = scale * dv;
    }
    Ok((1.0 - sum / valid as f64, grad_u, grad_v))
}

/// KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1).
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    let (value, _, _) = kl_with_grad(mu, log_var)?;
    Ok(value)
}

pub fn kl_with_grad(mu: &[f64], log_var: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if mu.len() != log_var.len() {
        return Err(Error::ShapeMismatch {
            expected: mu.len(),
            got: log_var.len(),
        });
    }
    let mut value = 0.0;
    let mut d_mu = vec![0.0; mu.len()];
    let mut d_lv = vec![0.0; mu.len()];
    for k in 0..mu.len() {
        if !mu[k].is_finite() || !log_var[k].is_finite() {
            return Err(Error::NonFinite("latent parameters"));
        }
        let var = math::exp(log_var[k]);
        value += 0.5 * (mu[k] * mu[k] + var - log_var[k] - 1.0);
        d_mu[k] = mu[k];
        d_lv[k] = 0.5 * (var - 1.0);
    }
    Ok((value, d_mu, d_lv))
}

/// Per-term breakdown of the composite encoder-decoder loss.
#[derive(Debug, Clone, Copy)]
pub struct VedLossTerms {
    pub total: f64,
    pub intensity: f64,
    pub motion: f64,
    pub cosine: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct VedLoss {
    pub terms: VedLossTerms,
    pub grad_motion_u: Grid<f64>,
    pub grad_motion_v: Grid<f64>,
    pub grad_intensity: Grid<f64>,
    pub grad_mu: Vec<f64>,
    pub grad_log_var: Vec<f64>,
}

/// Composite loss over predicted fields and latent parameters:
/// weighted l1 on intensity, l1 plus cosine mismatch on motion, and KL
/// regularization toward the standard normal. Exact gradients w.r.t. the
/// predictions and latent parameters.
pub fn loss_ved(
    pred_motion: &MotionField,
    pred_intensity: &IntensityField,
    targets: &SupervisionPair,
    mu: &[f64],
    log_var: &[f64],
    w: &LossWeights,
) -> Result<VedLoss> {
    w.validate()?;
    let n = targets.motion_target.n();
    if pred_motion.n() != n || pred_intensity.n() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: pred_motion.n().max(pred_intensity.n()),
        });
    }
    let margin = targets.crop_margin;
    let (int_term, mut g_int) =
        l1_mean_and_grad(pred_intensity.values(), targets.intensity_target.values(), margin);
    let (mu_term_u, mut g_mu_u) =
        l1_mean_and_grad(pred_motion.u(), targets.motion_target.u(), margin);
    let (mu_term_v, mut g_mu_v) =
        l1_mean_and_grad(pred_motion.v(), targets.motion_target.v(), margin);
    // mean over all 2N motion components
    let motion_term = (mu_term_u + mu_term_v) / 2.0;
    let (cos_value, g_cos_u, g_cos_v) =
        cosine_term_with_grad(&targets.motion_target, pred_motion, margin)?;
    let (kl_value, g_kl_mu, g_kl_lv) = kl_with_grad(mu, log_var)?;

    let total = w.lambda_int * int_term
        + w.lambda_motion * motion_term
        + w.lambda_cos * cos_value
        + w.lambda_kl * kl_value;

    for idx in 0..n * n {
        g_int.values_mut()[idx] *= w.lambda_int;
        g_mu_u.values_mut()[idx] = w.lambda_motion * g_mu_u.values()[idx] / 2.0
            + w.lambda_cos * g_cos_u.values()[idx];
        g_mu_v.values_mut()[idx] = w.lambda_motion * g_mu_v.values()[idx] / 2.0
            + w.lambda_cos * g_cos_v.values()[idx];
    }
    let grad_mu = g_kl_mu.iter().map(|g| g * w.lambda_kl).collect();
    let grad_log_var = g_kl_lv.iter().map(|g| g * w.lambda_kl).collect();

    Ok(VedLoss {
        terms: VedLossTerms {
            total,
            intensity: int_term,
            motion: motion_term,
            cosine: cos_value,
            kl: kl_value,
        },
        grad_motion_u: g_mu_u,
        grad_motion_v: g_mu_v,
        grad_intensity: g_int,
        grad_mu,
        grad_log_var,
    })
}

#[derive(Debug, Clone)]
pub struct EvolverLoss {
    pub value: f64,
    pub grad_motion_u: Grid<f64>,
    pub grad_motion_v: Grid<f64>,
    pub grad_intensity: Grid<f64>,
}

/// Teacher-forced frame loss: l1 between the true previous frame warped by
/// the predicted fields and the true next frame, over the cropped region.
/// Gradients flow through the warp VJP.
pub fn loss_evolver(
    pred_motion: &MotionField,
    pred_intensity: &IntensityField,
    x_prev: &PrecipField,
    x_next: &PrecipField,
    crop_margin: usize,
) -> Result<EvolverLoss> {
    let n = x_prev.n();
    if x_next.n() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: x_next.n(),
        });
    }
    let (warped, jac) = warp_with_jacobians(pred_motion, pred_intensity, x_prev)?;
    let (value, upstream) = l1_mean_and_grad(warped.values(), x_next.values(), crop_margin);
    let grads = apply_vjp(&upstream, &jac);
    Ok(EvolverLoss {
        value,
        grad_motion_u: grads.flow_u,
        grad_motion_v: grads.flow_v,
        grad_intensity: grads.intensity,
    })
}
