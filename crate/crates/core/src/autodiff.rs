//! Minimal reverse-mode tape sized for the models in this crate.
//!
//! Values are plain f64 tensors of up to four dimensions. Every op records
//! enough on the tape to run an exact vector-Jacobian product; the warp op
//! delegates to the advection module so the physics operator and its
//! gradient live in one place.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::advect::{self, WarpJacobians};
use crate::error::{Error, Result};
use crate::field::{IntensityField, MotionField, PrecipField};
use crate::grid::Grid;
use crate::math;

/// Dense row-major tensor. Shape is the logical extent per dimension;
/// `data.len()` always equals the product.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::TensorShape {
                op: "new".into(),
                detail: format!("rank {} unsupported", shape.len()),
            });
        }
        if numel != data.len() {
            return Err(Error::TensorShape {
                op: "new".into(),
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_grid(g: &Grid<f64>) -> Self {
        Tensor {
            shape: vec![g.side(), g.side()],
            data: g.values().to_vec(),
        }
    }

    /// Interpret a `[n, n]` or `[1, n, n]` tensor as a grid.
    pub fn to_grid(&self) -> Result<Grid<f64>> {
        let n = match self.shape.as_slice() {
            [a, b] if a == b => *a,
            [1, a, b] if a == b => *a,
            _ => {
                return Err(Error::TensorShape {
                    op: "to_grid".into(),
                    detail: format!("shape {:?} is not a square grid", self.shape),
                })
            }
        };
        Grid::from_vec(n, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale { x: Var, k: f64 },
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, stride: usize },
    Relu(Var),
    Sigmoid(Var),
    Mean(Var),
    L1 { a: Var, b: Var },
    Reshape(Var),
    SliceChannels { x: Var, start: usize },
    ConcatChannels { a: Var, b: Var },
    Upsample2x(Var),
    GaussianSample { mu: Var, log_var: Var, noise: Tensor },
    Warp { flow: Var, intensity: Var, jac: WarpJacobians, clamp_mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Collected gradients from one backward pass, indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Records one forward computation; single use, `backward` consumes it.
/// Output range of a 3x3 tap so that the sampled input index
/// `o * stride + k - 1` stays inside `[0, extent)`.
#[inline]
fn tap_range(extent: usize, out_extent: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = ((extent - k) / stride + 1).min(out_extent);
    (lo, hi)
}

/// One shifted-row accumulation of the forward convolution:
/// `out[oy, ox] += wgt * x[oy * stride + ky - 1, ox * stride + kx - 1]`.
/// Row-sliced so the stride-1 inner loop vectorizes.
#[allow(clippy::too_many_arguments)]
fn conv_tap_fwd(
    out: &mut [f64],
    x: &[f64],
    wgt: f64,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    ky: usize,
    kx: usize,
) {
    let (y_lo, y_hi) = tap_range(h, oh, stride, ky);
    let (x_lo, x_hi) = tap_range(wd, ow, stride, kx);
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    let len = x_hi - x_lo;
    for oy in y_lo..y_hi {
        let iy = oy * stride + ky - 1;
        let ix0 = x_lo * stride + kx - 1;
        if stride == 1 {
            let orow = &mut out[oy * ow + x_lo..oy * ow + x_hi];
            let xrow = &x[iy * wd + ix0..iy * wd + ix0 + len];
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o += wgt * *v;
            }
        } else {
            for i in 0..len {
                out[oy * ow + x_lo + i] += wgt * x[iy * wd + ix0 + 2 * i];
            }
        }
    }
}

/// Backward counterpart of one tap: scatters the upstream row into the
/// input gradient and reduces the weight gradient in the same sweep.
#[allow(clippy::too_many_arguments)]
fn conv_tap_bwd(
    gx: &mut [f64],
    gw: &mut f64,
    x: &[f64],
    upstream: &[f64],
    wgt: f64,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    ky: usize,
    kx: usize,
) {
    let (y_lo, y_hi) = tap_range(h, oh, stride, ky);
    let (x_lo, x_hi) = tap_range(wd, ow, stride, kx);
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    let len = x_hi - x_lo;
    let mut acc = 0.0;
    for oy in y_lo..y_hi {
        let iy = oy * stride + ky - 1;
        let ix0 = x_lo * stride + kx - 1;
        if stride == 1 {
            let urow = &upstream[oy * ow + x_lo..oy * ow + x_hi];
            let gxrow = &mut gx[iy * wd + ix0..iy * wd + ix0 + len];
            let xrow = &x[iy * wd + ix0..iy * wd + ix0 + len];
            for ((gxv, xv), uv) in gxrow.iter_mut().zip(xrow).zip(urow) {
                *gxv += wgt * *uv;
                acc += *uv * *xv;
            }
        } else {
            for i in 0..len {
                let u = upstream[oy * ow + x_lo + i];
                let xi = iy * wd + ix0 + 2 * i;
                gx[xi] += wgt * u;
                acc += u * x[xi];
            }
        }
    }
    *gw += acc;
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::TensorShape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    /// Register a value. Leaves have no parents; gradients still flow to
    /// them and are read back through `Grads`, so the same entry point
    /// serves parameters and constants.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.id].value.shape;
        let sb = &self.nodes[b.id].value.shape;
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = &self.nodes[x.id].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * k).collect(),
        };
        self.push(t, Op::Scale { x, k })
    }

    /// `x` is `[C, H, W]`, `bias` is `[C]`; adds bias[c] to every pixel of
    /// channel c.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[x.id].value.shape.clone();
        let bs = &self.nodes[bias.id].value.shape;
        let [c, h, w] = match xs.as_slice() {
            [c, h, w] => [*c, *h, *w],
            _ => return Err(shape_err("add_channel_bias", format!("input shape {:?}", xs))),
        };
        if bs.as_slice() != [c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("bias {:?} for {} channels", bs, c),
            ));
        }
        let mut data = self.nodes[x.id].value.data.clone();
        let bv = self.nodes[bias.id].value.data.clone();
        for ch in 0..c {
            for p in &mut data[ch * h * w..(ch + 1) * h * w] {
                *p += bv[ch];
            }
        }
        Ok(self.push(
            Tensor { shape: xs, data },
            Op::AddChannelBias { x, bias },
        ))
    }

    /// `a` is `[m, k]`, `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.id].value.shape.clone();
        let sb = self.nodes[b.id].value.shape.clone();
        let (m, k) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => return Err(shape_err("matmul", format!("lhs {:?}", sa))),
        };
        let (k2, n) = match sb.as_slice() {
            [k2, n] => (*k2, *n),
            _ => return Err(shape_err("matmul", format!("rhs {:?}", sb))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let av = &self.nodes[a.id].value.data;
        let bv = &self.nodes[b.id].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += x * bv[l * n + j];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul { a, b },
        ))
    }

    /// 3x3 convolution, zero padding 1, stride 1 or 2. `x` is `[Cin, H, W]`,
    /// `w` is `[Cout, Cin, 3, 3]`; even H, W required for stride 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.nodes[x.id].value.shape.clone();
        let ws = self.nodes[w.id].value.shape.clone();
        let [cin, h, wd] = match xs.as_slice() {
            [c, h, wd] => [*c, *h, *wd],
            _ => return Err(shape_err("conv2d", format!("input {:?}", xs))),
        };
        let [cout, cin2, kh, kw] = match ws.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return Err(shape_err("conv2d", format!("weight {:?}", ws))),
        };
        if cin != cin2 || kh != 3 || kw != 3 {
            return Err(shape_err(
                "conv2d",
                format!("weight {:?} for {} input channels", ws, cin),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(shape_err("conv2d", format!("stride {}", stride)));
        }
        if stride == 2 && (h % 2 != 0 || wd % 2 != 0) {
            return Err(shape_err("conv2d", format!("stride 2 on odd extent {}x{}", h, wd)));
        }
        let (oh, ow) = (h / stride, wd / stride);
        let xv = &self.nodes[x.id].value.data;
        let wv = &self.nodes[w.id].value.data;
        let mut data = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let out = &mut data[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let xch = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = wv[((co * cin + ci) * 3 + ky) * 3 + kx];
                        conv_tap_fwd(out, xch, wgt, h, wd, oh, ow, stride, ky, kx);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![cout, oh, ow],
                data,
            },
            Op::Conv2d { x, w, stride },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.max(0.0)).collect(),
        };
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| 1.0 / (1.0 + math::exp(-a))).collect(),
        };
        self.push(t, Op::Sigmoid(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean absolute difference; subgradient 0 where the difference is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let av = &self.nodes[a.id].value.data;
        let bv = &self.nodes[b.id].value.data;
        let m = av
            .iter()
            .zip(bv)
            .map(|(x, y)| math::abs(x - y))
            .sum::<f64>()
            / av.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::L1 { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = &self.nodes[x.id].value;
        if shape.iter().product::<usize>() != v.numel() || shape.is_empty() || shape.len() > 4 {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", v.shape, shape),
            ));
        }
        let t = Tensor {
            shape,
            data: v.data.clone(),
        };
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Contiguous channel slice of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xs = self.nodes[x.id].value.shape.clone();
        let [c, h, w] = match xs.as_slice() {
            [c, h, w] => [*c, *h, *w],
            _ => return Err(shape_err("slice_channels", format!("input {:?}", xs))),
        };
        if start + count > c || count == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("[{start}, {}) of {} channels", start + count, c),
            ));
        }
        let data = self.nodes[x.id].value.data[start * h * w..(start + count) * h * w].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![count, h, w],
                data,
            },
            Op::SliceChannels { x, start },
        ))
    }

    /// Channel-wise concatenation of two `[C, H, W]` tensors with matching
    /// spatial extents.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.id].value.shape.clone();
        let sb = self.nodes[b.id].value.shape.clone();
        let ([ca, h, w], [cb, hb, wb]) = match (sa.as_slice(), sb.as_slice()) {
            ([ca, h, w], [cb, hb, wb]) => ([*ca, *h, *w], [*cb, *hb, *wb]),
            _ => return Err(shape_err("concat_channels", format!("{sa:?} / {sb:?}"))),
        };
        if (h, w) != (hb, wb) {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&self.nodes[a.id].value.data);
        data.extend_from_slice(&self.nodes[b.id].value.data);
        Ok(self.push(
            Tensor {
                shape: vec![ca + cb, h, w],
                data,
            },
            Op::ConcatChannels { a, b },
        ))
    }

    /// Nearest-neighbor 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.id].value.shape.clone();
        let [c, h, w] = match xs.as_slice() {
            [c, h, w] => [*c, *h, *w],
            _ => return Err(shape_err("upsample2x", format!("input {:?}", xs))),
        };
        let xv = &self.nodes[x.id].value.data;
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data[(ch * 2 * h + i) * 2 * w + j] = xv[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data,
            },
            Op::Upsample2x(x),
        ))
    }

    /// Reparameterized draw `mu + exp(log_var / 2) * noise`; `noise` is a
    /// fixed standard-normal sample, not differentiated.
    pub fn gaussian_sample(&mut self, mu: Var, log_var: Var, noise: Tensor) -> Result<Var> {
        let shape = self.same_shape("gaussian_sample", mu, log_var)?;
        if noise.shape != shape {
            return Err(shape_err(
                "gaussian_sample",
                format!("noise {:?} vs {:?}", noise.shape, shape),
            ));
        }
        let mv = &self.nodes[mu.id].value.data;
        let lv = &self.nodes[log_var.id].value.data;
        let data = mv
            .iter()
            .zip(lv)
            .zip(&noise.data)
            .map(|((m, l), e)| m + math::exp(l / 2.0) * e)
            .collect();
        Ok(self.push(
            Tensor { shape, data },
            Op::GaussianSample { mu, log_var, noise },
        ))
    }

    /// Differentiable advection node: `flow` is `[2, n, n]` (u then v),
    /// `intensity` is `[1, n, n]`, `frame` is the fixed source field. Flow
    /// values are clamped to the admissible magnitude with a zero
    /// subgradient outside, so unconstrained parameters stay safe to feed
    /// in. Output is `[1, n, n]`.
    pub fn warp(&mut self, flow: Var, intensity: Var, frame: &PrecipField) -> Result<Var> {
        let n = frame.n();
        let fs = &self.nodes[flow.id].value.shape;
        if fs.as_slice() != [2, n, n] {
            return Err(shape_err("warp", format!("flow {:?} for side {}", fs, n)));
        }
        let is = &self.nodes[intensity.id].value.shape;
        if is.as_slice() != [1, n, n] {
            return Err(shape_err("warp", format!("intensity {:?} for side {}", is, n)));
        }
        let bound = n as f64 / 2.0 - 1e-9;
        let mut clamp_mask = vec![false; 2 * n * n];
        let mut clamped = self.nodes[flow.id].value.data.clone();
        for p in 0..n * n {
            let (u, v) = (clamped[p], clamped[n * n + p]);
            if !(u.is_finite() && v.is_finite()) {
                return Err(Error::NonFinite("warp flow input"));
            }
            let mag = math::hypot(u, v);
            if mag > bound {
                // rescale to the admissible magnitude; subgradient zero
                let s = bound / mag;
                clamped[p] = u * s;
                clamped[n * n + p] = v * s;
                clamp_mask[p] = true;
                clamp_mask[n * n + p] = true;
            }
        }
        let u = Grid::from_vec(n, clamped[..n * n].to_vec())?;
        let v = Grid::from_vec(n, clamped[n * n..].to_vec())?;
        let motion = MotionField::new(u, v)?;
        let ivals = Grid::from_vec(n, self.nodes[intensity.id].value.data.clone())?;
        let sfield = IntensityField::new(ivals)?;
        let (out, jac) = advect::warp_with_jacobians(&motion, &sfield, frame)?;
        let t = Tensor {
            shape: vec![1, n, n],
            data: out.values().values().to_vec(),
        };
        Ok(self.push(
            t,
            Op::Warp {
                flow,
                intensity,
                jac,
                clamp_mask,
            },
        ))
    }

    /// Reverse sweep from the seeded outputs. Consumes the tape; a second
    /// call is an error.
    pub fn backward(&mut self, seeds: &[(Var, Tensor)]) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape != self.nodes[v.id].value.shape {
                return Err(shape_err(
                    "backward",
                    format!(
                        "seed {:?} for value {:?}",
                        g.shape, self.nodes[v.id].value.shape
                    ),
                ));
            }
            accumulate(&mut grads[v.id], g.clone());
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a.id], g.clone());
                    accumulate(&mut grads[b.id], g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.id].value.data.clone();
                    let bv = self.nodes[b.id].value.data.clone();
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&bv).map(|(u, w)| u * w).collect(),
                    };
                    let gb = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&av).map(|(u, w)| u * w).collect(),
                    };
                    accumulate(&mut grads[a.id], ga);
                    accumulate(&mut grads[b.id], gb);
                }
                Op::Scale { x, k } => {
                    let (x, k) = (*x, *k);
                    let gx = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|u| u * k).collect(),
                    };
                    accumulate(&mut grads[x.id], gx);
                }
                Op::AddChannelBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let [c, h, w] = match self.nodes[x.id].value.shape.as_slice() {
                        [c, h, w] => [*c, *h, *w],
                        _ => unreachable!(),
                    };
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        gb[ch] = g.data[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    accumulate(&mut grads[x.id], g.clone());
                    accumulate(
                        &mut grads[bias.id],
                        Tensor {
                            shape: vec![c],
                            data: gb,
                        },
                    );
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (
                        self.nodes[a.id].value.shape[0],
                        self.nodes[a.id].value.shape[1],
                    );
                    let n = self.nodes[b.id].value.shape[1];
                    let av = self.nodes[a.id].value.data.clone();
                    let bv = self.nodes[b.id].value.data.clone();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..n {
                            let u = g.data[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i * k + l] += u * bv[l * n + j];
                                gb[l * n + j] += u * av[i * k + l];
                            }
                        }
                    }
                    accumulate(
                        &mut grads[a.id],
                        Tensor {
                            shape: vec![m, k],
                            data: ga,
                        },
                    );
                    accumulate(
                        &mut grads[b.id],
                        Tensor {
                            shape: vec![k, n],
                            data: gb,
                        },
                    );
                }
                Op::Conv2d { x, w, stride } => {
                    let (x, w, stride) = (*x, *w, *stride);
                    let [cin, h, wd] = match self.nodes[x.id].value.shape.as_slice() {
                        [c, h, wd] => [*c, *h, *wd],
                        _ => unreachable!(),
                    };
                    let cout = self.nodes[w.id].value.shape[0];
                    let (oh, ow) = (h / stride, wd / stride);
                    let xv = self.nodes[x.id].value.data.clone();
                    let wv = self.nodes[w.id].value.data.clone();
                    let mut gx = vec![0.0; cin * h * wd];
                    let mut gw = vec![0.0; cout * cin * 9];
                    for co in 0..cout {
                        let upstream = &g.data[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            let gxch = &mut gx[ci * h * wd..(ci + 1) * h * wd];
                            let xch = &xv[ci * h * wd..(ci + 1) * h * wd];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                    conv_tap_bwd(
                                        gxch, &mut gw[wi], xch, upstream, wv[wi], h, wd, oh,
                                        ow, stride, ky, kx,
                                    );
                                }
                            }
                        }
                    }
                    accumulate(
                        &mut grads[x.id],
                        Tensor {
                            shape: vec![cin, h, wd],
                            data: gx,
                        },
                    );
                    accumulate(
                        &mut grads[w.id],
                        Tensor {
                            shape: vec![cout, cin, 3, 3],
                            data: gw,
                        },
                    );
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = self.nodes[x.id].value.data.clone();
                    let gx = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&xv)
                            .map(|(u, a)| if *a > 0.0 { *u } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads[x.id], gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    // reuse the forward value: s' = s (1 - s)
                    let sv = self.nodes[id].value.data.clone();
                    let gx = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&sv)
                            .map(|(u, s)| u * s * (1.0 - s))
                            .collect(),
                    };
                    accumulate(&mut grads[x.id], gx);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let n = self.nodes[x.id].value.numel();
                    let u = g.data[0] / n as f64;
                    accumulate(
                        &mut grads[x.id],
                        Tensor {
                            shape: self.nodes[x.id].value.shape.clone(),
                            data: vec![u; n],
                        },
                    );
                }
                Op::L1 { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.id].value.data.clone();
                    let bv = self.nodes[b.id].value.data.clone();
                    let scale = g.data[0] / av.len() as f64;
                    let sgn: Vec<f64> = av
                        .iter()
                        .zip(&bv)
                        .map(|(x, y)| {
                            if x > y {
                                scale
                            } else if x < y {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let shape = self.nodes[a.id].value.shape.clone();
                    accumulate(
                        &mut grads[a.id],
                        Tensor {
                            shape: shape.clone(),
                            data: sgn.clone(),
                        },
                    );
                    accumulate(
                        &mut grads[b.id],
                        Tensor {
                            shape,
                            data: sgn.iter().map(|s| -s).collect(),
                        },
                    );
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let gx = Tensor {
                        shape: self.nodes[x.id].value.shape.clone(),
                        data: g.data.clone(),
                    };
                    accumulate(&mut grads[x.id], gx);
                }
                Op::SliceChannels { x, start } => {
                    let (x, start) = (*x, *start);
                    let xs = self.nodes[x.id].value.shape.clone();
                    let (h, w) = (xs[1], xs[2]);
                    let mut gx = vec![0.0; xs.iter().product()];
                    gx[start * h * w..start * h * w + g.data.len()].copy_from_slice(&g.data);
                    accumulate(
                        &mut grads[x.id],
                        Tensor {
                            shape: xs,
                            data: gx,
                        },
                    );
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.nodes[a.id].value.shape.clone();
                    let sb = self.nodes[b.id].value.shape.clone();
                    let na: usize = sa.iter().product();
                    accumulate(
                        &mut grads[a.id],
                        Tensor {
                            shape: sa,
                            data: g.data[..na].to_vec(),
                        },
                    );
                    accumulate(
                        &mut grads[b.id],
                        Tensor {
                            shape: sb,
                            data: g.data[na..].to_vec(),
                        },
                    );
                }
                Op::Upsample2x(x) => {
                    let x = *x;
                    let [c, h, w] = match self.nodes[x.id].value.shape.as_slice() {
                        [c, h, w] => [*c, *h, *w],
                        _ => unreachable!(),
                    };
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                gx[(ch * h + i / 2) * w + j / 2] +=
                                    g.data[(ch * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                    accumulate(
                        &mut grads[x.id],
                        Tensor {
                            shape: vec![c, h, w],
                            data: gx,
                        },
                    );
                }
                Op::GaussianSample { mu, log_var, noise } => {
                    let (mu, log_var) = (*mu, *log_var);
                    let lv = self.nodes[log_var.id].value.data.clone();
                    let noise = noise.data.clone();
                    let glv = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&lv)
                            .zip(&noise)
                            .map(|((u, l), e)| u * 0.5 * math::exp(l / 2.0) * e)
                            .collect(),
                    };
                    accumulate(&mut grads[mu.id], g.clone());
                    accumulate(&mut grads[log_var.id], glv);
                }
                Op::Warp {
                    flow,
                    intensity,
                    jac,
                    clamp_mask,
                } => {
                    let (flow, intensity) = (*flow, *intensity);
                    let n = jac.n;
                    let upstream = Grid::from_vec(n, g.data.clone())?;
                    let wg = advect::apply_vjp(&upstream, jac);
                    let mut gf = Vec::with_capacity(2 * n * n);
                    gf.extend_from_slice(wg.flow_u.values());
                    gf.extend_from_slice(wg.flow_v.values());
                    for (gv, clamped) in gf.iter_mut().zip(clamp_mask) {
                        if *clamped {
                            *gv = 0.0;
                        }
                    }
                    accumulate(
                        &mut grads[flow.id],
                        Tensor {
                            shape: vec![2, n, n],
                            data: gf,
                        },
                    );
                    accumulate(
                        &mut grads[intensity.id],
                        Tensor {
                            shape: vec![1, n, n],
                            data: wg.intensity.values().to_vec(),
                        },
                    );
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&contrib.data) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Adam hyperparameters; defaults follow common practice for this model
/// family.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam state. Missing gradients are treated as zero so
/// moment decay still advances uniformly.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Domain(format!(
                "adam state for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1t = 1.0 - math::powi(self.cfg.beta1, t);
        let b2t = 1.0 - math::powi(self.cfg.beta2, t);
        for (pi, p) in params.iter_mut().enumerate() {
            if p.numel() != self.m[pi].len() {
                return Err(Error::Domain(format!(
                    "param {pi} size changed: {} vs {}",
                    p.numel(),
                    self.m[pi].len()
                )));
            }
            for k in 0..p.numel() {
                let g = grads[pi].as_ref().map_or(0.0, |t| t.data[k]);
                if !g.is_finite() {
                    return Err(Error::NonFinite("adam gradient"));
                }
                let m = &mut self.m[pi][k];
                let v = &mut self.v[pi][k];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                p.data[k] -= self.cfg.lr * mhat / (math::sqrt(vhat) + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(|_| rng.uniform_in(lo, hi)).collect(),
        }
    }

    /// Scalar probe L = sum(seed * out); analytic grads from the tape,
    /// numeric grads by central differences on every input element.
    fn fd_check<F>(inputs: &[Tensor], build: F, tol: f64, seed: u64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |xs: &[Tensor]| -> (f64, Tensor, Vec<Var>, Var, Tape) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let out_val = tape.value(out).clone();
            let mut srng = Rng::seed_from(seed);
            let seed_t = Tensor {
                shape: out_val.shape.clone(),
                data: (0..out_val.numel()).map(|_| srng.uniform_in(-1.0, 1.0)).collect(),
            };
            let l = out_val
                .data
                .iter()
                .zip(&seed_t.data)
                .map(|(a, b)| a * b)
                .sum::<f64>();
            (l, seed_t, vars, out, tape)
        };

        let (_, seed_t, vars, out, mut tape) = eval(inputs);
        let grads = tape.backward(&[(out, seed_t)]).unwrap();

        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]);
            for k in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[vi].data[k] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data[k] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic.map_or(0.0, |t| t.data[k]);
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {vi} elem {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = Rng::seed_from(1);
        for trial in 0..10 {
            let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
            let b = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
            fd_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-6, trial);
            fd_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-6, trial);
            fd_check(&[a.clone()], |t, v| t.scale(v[0], -1.7), 1e-6, trial);
            fd_check(&[a.clone()], |t, v| t.sigmoid(v[0]), 1e-6, trial);
            fd_check(&[a.clone()], |t, v| t.mean(v[0]), 1e-6, trial);
        }
    }

    #[test]
    fn fd_relu_away_from_kink() {
        let mut rng = Rng::seed_from(2);
        for trial in 0..10 {
            let mut a = rand_tensor(&mut rng, vec![4, 4], 0.1, 2.0);
            for (k, v) in a.data.iter_mut().enumerate() {
                if k % 2 == 0 {
                    *v = -*v;
                }
            }
            fd_check(&[a], |t, v| t.relu(v[0]), 1e-6, trial);
        }
    }

    #[test]
    fn fd_l1_away_from_kink() {
        let mut rng = Rng::seed_from(3);
        for trial in 0..10 {
            let a = rand_tensor(&mut rng, vec![5, 5], 1.0, 2.0);
            let b = rand_tensor(&mut rng, vec![5, 5], -2.0, -1.0);
            fd_check(&[a, b], |t, v| t.l1_distance(v[0], v[1]).unwrap(), 1e-6, trial);
        }
    }

    #[test]
    fn fd_matmul() {
        let mut rng = Rng::seed_from(4);
        for trial in 0..10 {
            let a = rand_tensor(&mut rng, vec![3, 5], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![5, 2], -1.0, 1.0);
            fd_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), 1e-5, trial);
        }
    }

    #[test]
    fn fd_conv2d_both_strides() {
        let mut rng = Rng::seed_from(5);
        for trial in 0..10 {
            let x = rand_tensor(&mut rng, vec![2, 6, 6], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
            let stride = 1 + (trial % 2) as usize;
            fd_check(
                &[x, w],
                move |t, v| t.conv2d(v[0], v[1], stride).unwrap(),
                1e-5,
                trial,
            );
        }
    }

    #[test]
    fn fd_shape_ops() {
        let mut rng = Rng::seed_from(6);
        for trial in 0..10 {
            let x = rand_tensor(&mut rng, vec![3, 4, 4], -1.0, 1.0);
            fd_check(
                &[x.clone()],
                |t, v| t.reshape(v[0], vec![4, 12]).unwrap(),
                1e-6,
                trial,
            );
            fd_check(&[x.clone()], |t, v| t.upsample2x(v[0]).unwrap(), 1e-6, trial);
            fd_check(
                &[x],
                |t, v| t.slice_channels(v[0], 1, 2).unwrap(),
                1e-6,
                trial,
            );
        }
    }

    #[test]
    fn fd_channel_bias() {
        let mut rng = Rng::seed_from(7);
        for trial in 0..10 {
            let x = rand_tensor(&mut rng, vec![3, 4, 4], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![3], -1.0, 1.0);
            fd_check(
                &[x, b],
                |t, v| t.add_channel_bias(v[0], v[1]).unwrap(),
                1e-6,
                trial,
            );
        }
    }

    #[test]
    fn fd_gaussian_sample() {
        let mut rng = Rng::seed_from(8);
        for trial in 0..10 {
            let mu = rand_tensor(&mut rng, vec![6], -1.0, 1.0);
            let lv = rand_tensor(&mut rng, vec![6], -1.0, 1.0);
            let noise = Tensor {
                shape: vec![6],
                data: (0..6).map(|_| rng.normal()).collect(),
            };
            fd_check(
                &[mu, lv],
                move |t, v| t.gaussian_sample(v[0], v[1], noise.clone()).unwrap(),
                1e-6,
                trial,
            );
        }
    }

    #[test]
    fn fd_warp_node_matches_advection_vjp() {
        // fractional flow away from integer lattice and a strictly positive
        // frame keep both kink families inactive under the FD step
        let mut rng = Rng::seed_from(9);
        for trial in 0..10 {
            let n = 8;
            let frame = PrecipField::new(
                Grid::from_fn(n, |_, _| rng.uniform_in(2.0, 6.0)),
                0,
            )
            .unwrap();
            let mut flow = rand_tensor(&mut rng, vec![2, n, n], 0.2, 0.8);
            for (k, v) in flow.data.iter_mut().enumerate() {
                if k % 3 == 0 {
                    *v = -*v;
                }
            }
            let intensity = rand_tensor(&mut rng, vec![1, n, n], 0.5, 1.0);
            let f = frame.clone();
            fd_check(
                &[flow, intensity],
                move |t, v| t.warp(v[0], v[1], &f).unwrap(),
                1e-5,
                trial,
            );
        }
    }

    #[test]
    fn warp_node_clamps_flow_with_dead_gradient() {
        let n = 8;
        let frame =
            PrecipField::new(Grid::from_fn(n, |i, j| (i + j) as f64 + 1.0), 0).unwrap();
        let mut flow = Tensor::zeros(vec![2, n, n]);
        flow.data[0] = 100.0;
        let intensity = Tensor::zeros(vec![1, n, n]);
        let mut tape = Tape::new();
        let fv = tape.leaf(flow);
        let iv = tape.leaf(intensity);
        let out = tape.warp(fv, iv, &frame).unwrap();
        assert!(tape.value(out).all_finite());
        let seed = Tensor {
            shape: vec![1, n, n],
            data: vec![1.0; n * n],
        };
        let grads = tape.backward(&[(out, seed)]).unwrap();
        assert_eq!(grads.get(fv).unwrap().data[0], 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x, dy/dx = 2x + 1
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sq = tape.mul(xv, xv).unwrap();
        let y = tape.add(sq, xv).unwrap();
        let seed = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let grads = tape.backward(&[(y, seed)]).unwrap();
        for (g, v) in grads.get(xv).unwrap().data.iter().zip(&x.data) {
            assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_seed_backward_sums_objectives() {
        let x = Tensor::new(vec![2], vec![3.0, -2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let a = tape.scale(xv, 2.0);
        let b = tape.scale(xv, 5.0);
        let seed = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let grads = tape
            .backward(&[(a, seed.clone()), (b, seed)])
            .unwrap();
        assert_eq!(grads.get(xv).unwrap().data, vec![7.0, 7.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0);
        let seed = Tensor::scalar(1.0);
        tape.backward(&[(y, seed.clone())]).unwrap();
        assert!(matches!(
            tape.backward(&[(y, seed)]),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let cfg = AdamConfig {
            lr: 1e-2,
            ..Default::default()
        };
        let mut params = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let grads = vec![Some(Tensor::new(vec![3], vec![0.5, -3.0, 1e-3]).unwrap())];
        let mut adam = Adam::new(cfg, &[3]);
        adam.step(&mut params, &grads).unwrap();
        assert!((params[0].data[0] - (1.0 - 1e-2)).abs() < 1e-6);
        assert!((params[0].data[1] - (2.0 + 1e-2)).abs() < 1e-6);
        assert!((params[0].data[2] - (3.0 - 1e-2)).abs() < 1e-4);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (p - 5)^2 by gradient alone
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(cfg, &[1]);
        for _ in 0..2000 {
            let g = 2.0 * (params[0].data[0] - 5.0);
            let grads = vec![Some(Tensor::scalar(g))];
            adam.step(&mut params, &grads).unwrap();
        }
        assert!((params[0].data[0] - 5.0).abs() < 1e-2, "{}", params[0].data[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Some(Tensor::scalar(f64::NAN))];
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        assert!(adam.step(&mut params, &grads).is_err());
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut rng = Rng::seed_from(11);
        let x = rand_tensor(&mut rng, vec![1, 6, 6], -1.0, 1.0);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data[4] = 1.0; // center tap
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let y = tape.conv2d(xv, wv, 1).unwrap();
        assert_eq!(tape.value(y).data, x.data);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![3, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(b, a).is_err());
        assert!(tape.reshape(a, vec![7]).is_err());
        let x = tape.leaf(Tensor::zeros(vec![2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(tape.conv2d(x, w, 1).is_err());
        assert!(tape.slice_channels(x, 1, 2).is_err());
    }
}
