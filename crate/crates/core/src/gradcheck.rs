//! Finite-difference self-check suite: the warp VJP, every tape op, both
//! composite losses, and an end-to-end probe through the trained stack.
//! The CLI surfaces these results; tests pin the tolerances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::advect;
use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{synthesize_storms, StormFlow, StormSpec};
use crate::error::Result;
use crate::field::{FieldSequence, IntensityField, MotionField, PrecipField};
use crate::grid::Grid;
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::supervise::{loss_evolver, loss_ved, LossWeights, SupervisionPair};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Random instances per op check.
    pub instances: usize,
    /// Deliberately corrupt the warp VJP; the suite must then fail on the
    /// warp component. Negative control for the harness itself.
    pub corrupt_warp: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            instances: 10,
            corrupt_warp: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    Tensor {
        shape,
        data: (0..numel).map(|_| rng.uniform_in(lo, hi)).collect(),
    }
}

fn seed_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    }
}

/// Check one tape op: analytic input gradients of a seeded scalar probe
/// against central differences on every input element.
fn check_tape_op<G, F>(
    name: &str,
    rng: &mut Rng,
    instances: usize,
    gen: G,
    build: F,
    tolerance: f64,
) -> Result<CheckResult>
where
    G: Fn(&mut Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = gen(rng);
        let eval = |xs: &[Tensor], seed: &Tensor| -> Result<(f64, Vec<Var>, Var, Tape)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars)?;
            let l = tape
                .value(out)
                .data
                .iter()
                .zip(&seed.data)
                .map(|(a, b)| a * b)
                .sum();
            Ok((l, vars, out, tape))
        };
        // shape probe to size the seed
        let (_, _, out0, tape0) = eval(&inputs, &Tensor::scalar(0.0))?;
        let seed = seed_tensor(rng, &tape0.value(out0).shape.clone());
        let (_, vars, out, mut tape) = eval(&inputs, &seed)?;
        let grads = tape.backward(&[(out, seed.clone())])?;
        for (vi, input) in inputs.iter().enumerate() {
            for k in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[vi].data[k] += FD_STEP;
                let mut minus = inputs.clone();
                minus[vi].data[k] -= FD_STEP;
                let fd = (eval(&plus, &seed)?.0 - eval(&minus, &seed)?.0) / (2.0 * FD_STEP);
                let an = grads.get(vars[vi]).map_or(0.0, |t| t.data[k]);
                worst = worst.max(rel_err(fd, an));
            }
        }
    }
    Ok(CheckResult {
        component: name.into(),
        max_rel_err: worst,
        tolerance,
    })
}

fn positive_frame(rng: &mut Rng, n: usize) -> PrecipField {
    PrecipField::new(Grid::from_fn(n, |_, _| rng.uniform_in(2.0, 6.0)), 0).unwrap()
}

/// Flow with fractional components bounded away from the bilinear kinks.
fn fractional_flow(rng: &mut Rng, n: usize) -> (Grid<f64>, Grid<f64>) {
    let gen = |rng: &mut Rng| {
        Grid::from_fn(n, |_, _| {
            let mag = rng.uniform_in(0.2, 0.8);
            if rng.uniform() < 0.5 {
                mag
            } else {
                -mag
            }
        })
    };
    (gen(rng), gen(rng))
}

/// Direct check of the advection VJP against finite differences on the
/// warp forward rule, over all four inputs.
fn check_warp_vjp(rng: &mut Rng, instances: usize, corrupt: bool) -> Result<CheckResult> {
    let n = 16;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (u, v) = fractional_flow(rng, n);
        let intensity = Grid::from_fn(n, |_, _| rng.uniform_in(0.5, 1.5));
        let frame = positive_frame(rng, n);
        let seed = Grid::from_fn(n, |_, _| rng.uniform_in(-1.0, 1.0));

        let eval = |u: &Grid<f64>, v: &Grid<f64>, s: &Grid<f64>, f: &Grid<f64>| -> Result<f64> {
            let out = advect::warp(
                &MotionField::new(u.clone(), v.clone())?,
                &IntensityField::new(s.clone())?,
                &PrecipField::new(f.clone(), 0)?,
            )?;
            Ok(out
                .values()
                .values()
                .iter()
                .zip(seed.values())
                .map(|(a, b)| a * b)
                .sum())
        };

        let mut grads = advect::warp_vjp(
            &seed,
            &MotionField::new(u.clone(), v.clone())?,
            &IntensityField::new(intensity.clone())?,
            &frame,
        )?;
        if corrupt {
            for g in grads.flow_u.values_mut() {
                *g *= 1.02;
            }
        }

        let fvals = frame.values();
        for idx in 0..n * n {
            let fd_of = |which: usize| -> Result<f64> {
                let mut pu = u.clone();
                let mut mu = u.clone();
                let mut pv = v.clone();
                let mut mv = v.clone();
                let mut ps = intensity.clone();
                let mut ms = intensity.clone();
                let mut pf = fvals.clone();
                let mut mf = fvals.clone();
                match which {
                    0 => {
                        pu.values_mut()[idx] += FD_STEP;
                        mu.values_mut()[idx] -= FD_STEP;
                    }
                    1 => {
                        pv.values_mut()[idx] += FD_STEP;
                        mv.values_mut()[idx] -= FD_STEP;
                    }
                    2 => {
                        ps.values_mut()[idx] += FD_STEP;
                        ms.values_mut()[idx] -= FD_STEP;
                    }
                    _ => {
                        pf.values_mut()[idx] += FD_STEP;
                        mf.values_mut()[idx] -= FD_STEP;
                    }
                }
                Ok((eval(&pu, &pv, &ps, &pf)? - eval(&mu, &mv, &ms, &mf)?) / (2.0 * FD_STEP))
            };
            worst = worst.max(rel_err(fd_of(0)?, grads.flow_u.values()[idx]));
            worst = worst.max(rel_err(fd_of(1)?, grads.flow_v.values()[idx]));
            worst = worst.max(rel_err(fd_of(2)?, grads.intensity.values()[idx]));
            worst = worst.max(rel_err(fd_of(3)?, grads.frame.values()[idx]));
        }
    }
    Ok(CheckResult {
        component: "warp_vjp".into(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
    })
}

fn check_loss_ved(rng: &mut Rng, instances: usize) -> Result<CheckResult> {
    let n = 16;
    let margin = 4;
    let latent = 8;
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (tu, tv) = fractional_flow(rng, n);
        let targets = SupervisionPair {
            motion_target: MotionField::new(tu, tv)?,
            intensity_target: IntensityField::new(Grid::from_fn(n, |_, _| {
                rng.uniform_in(-1.0, 1.0)
            }))?,
            advected_intermediate: positive_frame(rng, n),
            crop_margin: margin,
        };
        let (pu, pv) = fractional_flow(rng, n);
        let pi = Grid::from_fn(n, |_, _| rng.uniform_in(-1.0, 1.0));
        let mu: Vec<f64> = (0..latent).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let lv: Vec<f64> = (0..latent).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let eval = |pu: &Grid<f64>, pv: &Grid<f64>, pi: &Grid<f64>, mu: &[f64], lv: &[f64]| -> Result<f64> {
            Ok(loss_ved(
                &MotionField::new(pu.clone(), pv.clone())?,
                &IntensityField::new(pi.clone())?,
                &targets,
                mu,
                lv,
                &w,
            )?
            .terms
            .total)
        };
        let loss = loss_ved(
            &MotionField::new(pu.clone(), pv.clone())?,
            &IntensityField::new(pi.clone())?,
            &targets,
            &mu,
            &lv,
            &w,
        )?;
        for idx in 0..n * n {
            let mut p = pu.clone();
            let mut m = pu.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&p, &pv, &pi, &mu, &lv)? - eval(&m, &pv, &pi, &mu, &lv)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_motion_u.values()[idx]));

            let mut p = pv.clone();
            let mut m = pv.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&pu, &p, &pi, &mu, &lv)? - eval(&pu, &m, &pi, &mu, &lv)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_motion_v.values()[idx]));

            let mut p = pi.clone();
            let mut m = pi.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&pu, &pv, &p, &mu, &lv)? - eval(&pu, &pv, &m, &mu, &lv)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_intensity.values()[idx]));
        }
        for idx in 0..latent {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p[idx] += FD_STEP;
            m[idx] -= FD_STEP;
            let fd = (eval(&pu, &pv, &pi, &p, &lv)? - eval(&pu, &pv, &pi, &m, &lv)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_mu[idx]));

            let mut p = lv.clone();
            let mut m = lv.clone();
            p[idx] += FD_STEP;
            m[idx] -= FD_STEP;
            let fd = (eval(&pu, &pv, &pi, &mu, &p)? - eval(&pu, &pv, &pi, &mu, &m)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_log_var[idx]));
        }
    }
    Ok(CheckResult {
        component: "loss_ved".into(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
    })
}

fn check_loss_evolver(rng: &mut Rng, instances: usize) -> Result<CheckResult> {
    let n = 16;
    let margin = 4;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let x_prev = positive_frame(rng, n);
        let x_next = positive_frame(rng, n);
        let (pu, pv) = fractional_flow(rng, n);
        let pi = Grid::from_fn(n, |_, _| rng.uniform_in(0.5, 1.5));

        let eval = |pu: &Grid<f64>, pv: &Grid<f64>, pi: &Grid<f64>| -> Result<f64> {
            Ok(loss_evolver(
                &MotionField::new(pu.clone(), pv.clone())?,
                &IntensityField::new(pi.clone())?,
                &x_prev,
                &x_next,
                margin,
            )?
            .value)
        };
        let loss = loss_evolver(
            &MotionField::new(pu.clone(), pv.clone())?,
            &IntensityField::new(pi.clone())?,
            &x_prev,
            &x_next,
            margin,
        )?;
        for idx in 0..n * n {
            let mut p = pu.clone();
            let mut m = pu.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&p, &pv, &pi)? - eval(&m, &pv, &pi)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_motion_u.values()[idx]));

            let mut p = pv.clone();
            let mut m = pv.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&pu, &p, &pi)? - eval(&pu, &m, &pi)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_motion_v.values()[idx]));

            let mut p = pi.clone();
            let mut m = pi.clone();
            p.values_mut()[idx] += FD_STEP;
            m.values_mut()[idx] -= FD_STEP;
            let fd = (eval(&pu, &pv, &p)? - eval(&pu, &pv, &m)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, loss.grad_intensity.values()[idx]));
        }
    }
    Ok(CheckResult {
        component: "loss_evolver".into(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
    })
}

fn probe_window(seed: u64) -> Result<FieldSequence> {
    let spec = StormSpec {
        n: 32,
        frames: 6,
        blobs: 2,
        amplitude: (10.0, 25.0),
        sigma: (3.0, 4.0),
        flow: StormFlow::Constant { u: 1.0, v: 0.5 },
        growth: 0.0,
        step_seconds: 600,
        start_timestamp: 0,
    };
    Ok(synthesize_storms(&spec, seed)?.sequence)
}

/// End-to-end probe: the evolver-loss gradient through encoder, evolver,
/// decoder and warp, on a 5-parameter subset spanning the stack.
fn check_end_to_end(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        context_frames: 3,
        horizon: 3,
        channels: 8,
        embed_dim: 4,
        reduc_factor: 4,
        dropout: 0.0,
        evolver_depth: 2,
        evolver_dim: 8,
        lead_time_classes: 4,
    };
    let window = probe_window(seed.wrapping_add(17))?;
    let mut model = Model::init(cfg.clone(), seed)?;
    model.fit_normalization(core::slice::from_ref(&window))?;
    let k = 2;
    let margin = 4;
    let (_, grads) = model.evolver_loss_param_grads(&window, k, margin)?;
    let names: Vec<String> = model.params_named().map(|(n, _)| n.into()).collect();
    let probes = [
        ("enc0.w", 0usize),
        ("dec_out.w", 0usize),
        ("flo_out.w", 0usize),
        ("emb.w", (k - 1) * cfg.embed_dim),
        ("ev0.w", 0usize),
        ("ev_out.w", 0usize),
    ];
    let mut worst = 0.0f64;
    for (name, elem) in probes {
        let pidx = names.iter().position(|n| *n == name).unwrap();
        let analytic = grads[pidx].data[elem];
        model.perturb_param(name, elem, FD_STEP)?;
        let plus = model.evolver_loss_value(&window, k, margin)?;
        model.perturb_param(name, elem, -2.0 * FD_STEP)?;
        let minus = model.evolver_loss_value(&window, k, margin)?;
        model.perturb_param(name, elem, FD_STEP)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(fd, analytic));
    }
    Ok(CheckResult {
        component: "end_to_end".into(),
        max_rel_err: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// Run the whole suite. Components are independent; every result is
/// reported even when an early one fails.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from(opts.seed);
    let inst = opts.instances;
    let n = 16;
    let mut results = Vec::new();

    results.push(check_warp_vjp(&mut rng.fork(1), inst, opts.corrupt_warp)?);

    results.push(check_tape_op(
        "op_add",
        &mut rng.fork(2),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], -2.0, 2.0), rand_tensor(r, vec![n, n], -2.0, 2.0)],
        |t, v| t.add(v[0], v[1]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_mul",
        &mut rng.fork(3),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], -2.0, 2.0), rand_tensor(r, vec![n, n], -2.0, 2.0)],
        |t, v| t.mul(v[0], v[1]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_scale",
        &mut rng.fork(4),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], -2.0, 2.0)],
        |t, v| Ok(t.scale(v[0], -0.37)),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_add_channel_bias",
        &mut rng.fork(5),
        inst,
        |r| vec![rand_tensor(r, vec![3, n, n], -1.0, 1.0), rand_tensor(r, vec![3], -1.0, 1.0)],
        |t, v| t.add_channel_bias(v[0], v[1]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_matmul",
        &mut rng.fork(6),
        inst,
        |r| vec![rand_tensor(r, vec![4, 6], -1.0, 1.0), rand_tensor(r, vec![6, 3], -1.0, 1.0)],
        |t, v| t.matmul(v[0], v[1]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_conv2d_s1",
        &mut rng.fork(7),
        inst,
        |r| vec![rand_tensor(r, vec![2, n, n], -1.0, 1.0), rand_tensor(r, vec![2, 2, 3, 3], -0.5, 0.5)],
        |t, v| t.conv2d(v[0], v[1], 1),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_conv2d_s2",
        &mut rng.fork(8),
        inst,
        |r| vec![rand_tensor(r, vec![2, n, n], -1.0, 1.0), rand_tensor(r, vec![2, 2, 3, 3], -0.5, 0.5)],
        |t, v| t.conv2d(v[0], v[1], 2),
        OP_TOLERANCE,
    )?);
    // kink pixels excluded by sampling magnitudes away from zero
    results.push(check_tape_op(
        "op_relu",
        &mut rng.fork(9),
        inst,
        |r| {
            let mut x = rand_tensor(r, vec![n, n], 0.1, 2.0);
            for (k, v) in x.data.iter_mut().enumerate() {
                if k % 2 == 0 {
                    *v = -*v;
                }
            }
            vec![x]
        },
        |t, v| Ok(t.relu(v[0])),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_sigmoid",
        &mut rng.fork(10),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], -3.0, 3.0)],
        |t, v| Ok(t.sigmoid(v[0])),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_mean",
        &mut rng.fork(11),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], -2.0, 2.0)],
        |t, v| Ok(t.mean(v[0])),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_l1_distance",
        &mut rng.fork(12),
        inst,
        |r| vec![rand_tensor(r, vec![n, n], 1.0, 2.0), rand_tensor(r, vec![n, n], -2.0, -1.0)],
        |t, v| t.l1_distance(v[0], v[1]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_reshape",
        &mut rng.fork(13),
        inst,
        |r| vec![rand_tensor(r, vec![4, n], -1.0, 1.0)],
        |t, v| t.reshape(v[0], vec![n, 4]),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_slice_channels",
        &mut rng.fork(14),
        inst,
        |r| vec![rand_tensor(r, vec![3, n, n], -1.0, 1.0)],
        |t, v| t.slice_channels(v[0], 1, 2),
        OP_TOLERANCE,
    )?);
    results.push(check_tape_op(
        "op_upsample2x",
        &mut rng.fork(15),
        inst,
        |r| vec![rand_tensor(r, vec![2, n / 2, n / 2], -1.0, 1.0)],
        |t, v| t.upsample2x(v[0]),
        OP_TOLERANCE,
    )?);
    {
        let mut noise_rng = rng.fork(160);
        let noise = Tensor {
            shape: vec![n],
            data: (0..n).map(|_| noise_rng.normal()).collect(),
        };
        results.push(check_tape_op(
            "op_gaussian_sample",
            &mut rng.fork(16),
            inst,
            |r| vec![rand_tensor(r, vec![n], -1.0, 1.0), rand_tensor(r, vec![n], -1.0, 1.0)],
            move |t, v| t.gaussian_sample(v[0], v[1], noise.clone()),
            OP_TOLERANCE,
        )?);
    }
    {
        let mut frame_rng = rng.fork(170);
        let frame = positive_frame(&mut frame_rng, n);
        results.push(check_tape_op(
            "op_warp",
            &mut rng.fork(17),
            inst,
            |r| {
                let (u, v) = fractional_flow(r, n);
                let mut flow = Vec::with_capacity(2 * n * n);
                flow.extend_from_slice(u.values());
                flow.extend_from_slice(v.values());
                vec![
                    Tensor::new(vec![2, n, n], flow).unwrap(),
                    rand_tensor(r, vec![1, n, n], 0.5, 1.5),
                ]
            },
            move |t, v| t.warp(v[0], v[1], &frame),
            OP_TOLERANCE,
        )?);
    }

    results.push(check_loss_ved(&mut rng.fork(18), inst)?);
    results.push(check_loss_evolver(&mut rng.fork(19), inst)?);
    results.push(check_end_to_end(opts.seed)?);

    Ok(results)
}

/// Render results as stable `key=value` lines.
pub fn format_report(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "component={} max_rel_err={:.3e} tolerance={:.1e} status={}\n",
            r.component,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "fail" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_with_default_seed() {
        let results = run_suite(&GradCheckOptions::default()).unwrap();
        assert!(results.len() >= 19);
        for r in &results {
            assert!(r.passed(), "{} rel err {}", r.component, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_warp_fails_only_the_warp_component() {
        let results = run_suite(&GradCheckOptions {
            corrupt_warp: true,
            instances: 2,
            ..Default::default()
        })
        .unwrap();
        let warp = results.iter().find(|r| r.component == "warp_vjp").unwrap();
        assert!(!warp.passed());
        for r in results.iter().filter(|r| r.component != "warp_vjp") {
            assert!(r.passed(), "{}", r.component);
        }
    }

    #[test]
    fn report_is_key_value_lines() {
        let results = run_suite(&GradCheckOptions {
            instances: 1,
            ..Default::default()
        })
        .unwrap();
        let report = format_report(&results);
        for line in report.lines() {
            assert!(line.starts_with("component="));
            assert!(line.contains(" max_rel_err="));
            assert!(line.contains(" status="));
        }
    }
}
