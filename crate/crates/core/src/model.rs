//! Toy-scale nowcasting model: a variational encoder-decoder emitting
//! motion and intensity fields, plus a lead-time-conditioned latent
//! evolver. The evolver trunk uses conv blocks as a stand-in for attention
//! at this scale; the conditioning interface (one-hot lead index, linear
//! embedding, broadcast add) is the contract under test.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::advect;
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{FieldSequence, IntensityField, MotionField, PrecipField};
use crate::flow::FlowConfig;
use crate::grid::Grid;
use crate::math;
use crate::rng::Rng;
use crate::supervise::{
    derive_targets, loss_evolver, loss_ved, LossWeights, SupervisionPair, VedLossTerms,
};

/// Fixed gain on the decoder's flow channels, px per step per unit of
/// head output.
pub const FLOW_GAIN: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of context frames fed to the encoder (T + 1).
    pub context_frames: usize,
    /// Forecast horizon T_f in steps.
    pub horizon: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub reduc_factor: usize,
    pub dropout: f64,
    pub evolver_depth: usize,
    pub evolver_dim: usize,
    pub lead_time_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_frames: 4,
            horizon: 18,
            channels: 128,
            embed_dim: 4,
            reduc_factor: 4,
            dropout: 0.2,
            evolver_depth: 4,
            evolver_dim: 64,
            lead_time_classes: 18,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_frames < 2 {
            return Err(Error::InvalidConfig("context_frames must be >= 2".into()));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be >= 1".into()));
        }
        if ![2, 4, 8].contains(&self.reduc_factor) {
            return Err(Error::InvalidConfig(format!(
                "reduc_factor must be 2, 4 or 8, got {}",
                self.reduc_factor
            )));
        }
        if self.channels == 0 || self.evolver_dim == 0 || self.evolver_depth == 0 {
            return Err(Error::InvalidConfig("zero-sized architecture dimension".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig(
                "embed_dim must be >= 2 to hold both latent groups".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lead_time_classes < self.horizon {
            return Err(Error::InvalidConfig(format!(
                "lead_time_classes {} < horizon {}",
                self.lead_time_classes, self.horizon
            )));
        }
        Ok(())
    }

    /// The latent splits into intensity channels followed by motion
    /// channels; the two groups are produced by parallel encoder stacks
    /// and consumed by parallel decoder branches, so each pathway trains
    /// on its own loss terms alone.
    fn latent_split(&self) -> (usize, usize) {
        let ef = self.embed_dim / 2;
        (self.embed_dim - ef, ef)
    }

    fn stages(&self) -> usize {
        match self.reduc_factor {
            2 => 1,
            4 => 2,
            _ => 3,
        }
    }
}

/// Latent grid state: distribution parameters and the drawn sample, all
/// shaped `[embed_dim, n / reduc_factor, n / reduc_factor]`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub sample: Tensor,
}

impl LatentState {
    fn check(&self) -> Result<()> {
        if self.mu.shape != self.log_var.shape || self.mu.shape != self.sample.shape {
            return Err(Error::TensorShape {
                op: "latent",
                detail: format!(
                    "mu {:?} / log_var {:?} / sample {:?}",
                    self.mu.shape, self.log_var.shape, self.sample.shape
                ),
            });
        }
        if !(self.mu.all_finite() && self.log_var.all_finite() && self.sample.all_finite()) {
            return Err(Error::NonFinite("latent state"));
        }
        Ok(())
    }
}

/// Options shared by both training stages.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub crop_margin: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            crop_margin: 4,
        }
    }
}

/// One logged VED training step (batch-mean loss terms).
#[derive(Debug, Clone)]
pub struct VedStepRecord {
    pub step: usize,
    pub terms: VedLossTerms,
}

/// One logged evolver training step; `k` is the lead index drawn for it.
#[derive(Debug, Clone)]
pub struct EvolverStepRecord {
    pub step: usize,
    pub k: usize,
    pub loss: f64,
}

/// Forecast plus the interpretable per-step fields that produced it.
#[derive(Debug)]
pub struct Nowcast {
    pub frames: Vec<PrecipField>,
    pub fields: Vec<(MotionField, IntensityField)>,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// Parameters `0..ved_count` belong to the encoder/decoder; the rest
    /// to the evolver. The split carries the freeze contract.
    ved_count: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

fn conv_shape(cout: usize, cin: usize) -> Vec<usize> {
    vec![cout, cin, 3, 3]
}

impl Model {
    /// Parameter layout for a config; shapes are independent of grid side
    /// and horizon.
    fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, usize) {
        let c = cfg.channels;
        let e = cfg.embed_dim;
        let d = cfg.evolver_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for s in 0..cfg.stages() {
            let cin = if s == 0 { cfg.context_frames } else { c };
            out.push((format!("enc{s}.w"), conv_shape(c, cin)));
            out.push((format!("enc{s}.b"), vec![c]));
        }
        let (ei, ef) = cfg.latent_split();
        out.push(("mu.w".into(), conv_shape(ei, c)));
        out.push(("mu.b".into(), vec![ei]));
        out.push(("lv.w".into(), conv_shape(ei, c)));
        out.push(("lv.b".into(), vec![ei]));
        // the motion encoder runs one stage deeper than the intensity
        // encoder: flow needs the wider receptive field, while the extra
        // coarseness costs nothing against smooth motion targets
        for s in 0..cfg.stages() + 1 {
            // it additionally sees consecutive-frame differences, the raw
            // signal optical flow is solved from
            let cin = if s == 0 { 2 * cfg.context_frames - 1 } else { c };
            out.push((format!("fenc{s}.w"), conv_shape(c, cin)));
            out.push((format!("fenc{s}.b"), vec![c]));
        }
        out.push(("fmu.w".into(), conv_shape(ef, c)));
        out.push(("fmu.b".into(), vec![ef]));
        out.push(("flv.w".into(), conv_shape(ef, c)));
        out.push(("flv.b".into(), vec![ef]));
        out.push(("dec_in.w".into(), conv_shape(c, ei)));
        out.push(("dec_in.b".into(), vec![c]));
        for s in 0..cfg.stages() {
            out.push((format!("dec{s}.w"), conv_shape(c, c)));
            out.push((format!("dec{s}.b"), vec![c]));
        }
        out.push(("dec_out.w".into(), conv_shape(1, c)));
        out.push(("dec_out.b".into(), vec![1]));
        for s in 0..cfg.stages() {
            let cin = if s == 0 { ef } else { c };
            out.push((format!("flo{s}.w"), conv_shape(c, cin)));
            out.push((format!("flo{s}.b"), vec![c]));
        }
        out.push(("flo_out.w".into(), conv_shape(2, c)));
        out.push(("flo_out.b".into(), vec![2]));
        let ved_count = out.len();
        out.push(("emb.w".into(), vec![cfg.lead_time_classes, e]));
        out.push(("ev_in.w".into(), conv_shape(d, e)));
        out.push(("ev_in.b".into(), vec![d]));
        for l in 0..cfg.evolver_depth {
            out.push((format!("ev{l}.w"), conv_shape(d, d)));
            out.push((format!("ev{l}.b"), vec![d]));
        }
        out.push(("ev_out.w".into(), conv_shape(e, d)));
        out.push(("ev_out.b".into(), vec![e]));
        (out, ved_count)
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let (layout, ved_count) = Model::layout(&cfg);
        let mut rng = Rng::seed_from(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".b") || name == "ev_out.w" {
                // zero residual output so the evolver starts as the
                // identity on the latent
                vec![0.0; numel]
            } else if name == "emb.w" {
                (0..numel).map(|_| 0.1 * rng.normal()).collect()
            } else {
                // He init over the conv fan-in; the output head starts
                // small so initial displacements stay far from the
                // magnitude clamp, whose subgradient is zero
                let fan_in = shape[1] * shape[2] * shape[3];
                let head = if name == "dec_out.w" || name == "flo_out.w" { 0.02 } else { 1.0 };
                let std = head * math::sqrt(2.0 / fan_in as f64);
                (0..numel).map(|_| std * rng.normal()).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Model {
            cfg,
            names,
            params,
            ved_count,
            norm_mean: 0.0,
            norm_std: 1.0,
        })
    }

    /// Rebuild a model from persisted named parameters; every parameter in
    /// the layout must be present with its exact shape.
    pub fn from_parts(
        cfg: ModelConfig,
        named: &[(String, Tensor)],
        norm_mean: f64,
        norm_std: f64,
    ) -> Result<Model> {
        let mut model = Model::init(cfg, 0)?;
        if !(norm_std > 0.0 && norm_std.is_finite() && norm_mean.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bad normalization ({norm_mean}, {norm_std})"
            )));
        }
        model.norm_mean = norm_mean;
        model.norm_std = norm_std;
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in named {
            let idx = model
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            if tensor.shape != model.params[idx].shape {
                return Err(Error::TensorShape {
                    op: "from_parts",
                    detail: format!(
                        "{name}: stored {:?}, layout wants {:?}",
                        tensor.shape, model.params[idx].shape
                    ),
                });
            }
            if !tensor.all_finite() {
                return Err(Error::NonFinite("stored parameter"));
            }
            model.params[idx] = tensor.clone();
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!(
                "parameter {} missing from weights",
                model.names[missing]
            )));
        }
        Ok(model)
    }

    pub fn params_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Mean and standard deviation over every pixel of the given windows;
    /// applied affinely to encoder inputs.
    pub fn fit_normalization(&mut self, windows: &[FieldSequence]) -> Result<()> {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for w in windows {
            for f in w.frames() {
                for v in f.values().values() {
                    sum += v;
                    sumsq += v * v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Domain("no frames to fit normalization".into()));
        }
        let mean = sum / count as f64;
        let var = (sumsq / count as f64 - mean * mean).max(0.0);
        self.norm_mean = mean;
        self.norm_std = math::sqrt(var).max(1e-6);
        Ok(())
    }

    fn idx(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("layout name")
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn latent_side(&self, n: usize) -> Result<usize> {
        if n % self.cfg.reduc_factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "grid side {n} not divisible by reduc_factor {}",
                self.cfg.reduc_factor
            )));
        }
        Ok(n / self.cfg.reduc_factor)
    }

    fn context_tensor(&self, frames: &FieldSequence) -> Result<Tensor> {
        if frames.len() != self.cfg.context_frames {
            return Err(Error::Domain(format!(
                "encoder wants {} context frames, got {}",
                self.cfg.context_frames,
                frames.len()
            )));
        }
        let n = frames.n();
        let mut data = Vec::with_capacity(self.cfg.context_frames * n * n);
        for f in frames.frames() {
            data.extend(
                f.values()
                    .values()
                    .iter()
                    .map(|v| (v - self.norm_mean) / self.norm_std),
            );
        }
        Tensor::new(vec![self.cfg.context_frames, n, n], data)
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        x: Var,
        name: &str,
        stride: usize,
        relu: bool,
    ) -> Result<Var> {
        let w = pv[self.idx(&format!("{name}.w"))];
        let b = pv[self.idx(&format!("{name}.b"))];
        let h = tape.conv2d(x, w, stride)?;
        let h = tape.add_channel_bias(h, b)?;
        Ok(if relu { tape.relu(h) } else { h })
    }

    /// Append consecutive-frame differences to a `[T, n, n]` context
    /// stack, giving `[2T - 1, n, n]`.
    fn with_frame_diffs(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let t = self.cfg.context_frames;
        let mut out = input;
        for i in 0..t - 1 {
            let next = tape.slice_channels(input, i + 1, 1)?;
            let prev = tape.slice_channels(input, i, 1)?;
            let neg = tape.scale(prev, -1.0);
            let diff = tape.add(next, neg)?;
            out = tape.concat_channels(out, diff)?;
        }
        Ok(out)
    }

    fn encode_on(&self, tape: &mut Tape, pv: &[Var], input: Var) -> Result<(Var, Var)> {
        let mut h = input;
        for s in 0..self.cfg.stages() {
            h = self.conv_block(tape, pv, h, &format!("enc{s}"), 2, true)?;
        }
        let mu_i = self.conv_block(tape, pv, h, "mu", 1, false)?;
        let lv_i = self.conv_block(tape, pv, h, "lv", 1, false)?;
        let mut f = self.with_frame_diffs(tape, input)?;
        for s in 0..self.cfg.stages() + 1 {
            f = self.conv_block(tape, pv, f, &format!("fenc{s}"), 2, true)?;
        }
        let mu_f = self.conv_block(tape, pv, f, "fmu", 1, false)?;
        let lv_f = self.conv_block(tape, pv, f, "flv", 1, false)?;
        let mu_f = tape.upsample2x(mu_f)?;
        let lv_f = tape.upsample2x(lv_f)?;
        let mu = tape.concat_channels(mu_i, mu_f)?;
        let lv = tape.concat_channels(lv_i, lv_f)?;
        Ok((mu, lv))
    }

    /// Decode fields from latent state. Intensity reads the stochastic
    /// sample; motion reads the distribution mean, since sampling noise
    /// carries no information about the flow target and only degrades the
    /// motion branch's gradient signal-to-noise ratio.
    fn decode_on(&self, tape: &mut Tape, pv: &[Var], z: Var, z_flow: Var) -> Result<(Var, Var)> {
        let (ei, ef) = self.cfg.latent_split();
        let z = tape.slice_channels(z, 0, ei)?;
        let z_flow = tape.slice_channels(z_flow, ei, ef)?;
        let mut h = self.conv_block(tape, pv, z, "dec_in", 1, true)?;
        for s in 0..self.cfg.stages() {
            let up = tape.upsample2x(h)?;
            h = self.conv_block(tape, pv, up, &format!("dec{s}"), 1, true)?;
        }
        let out = self.conv_block(tape, pv, h, "dec_out", 1, false)?;
        // the heads work in scaled units: flow in FLOW_GAIN px per step,
        // intensity in normalized rain units, so displacement- and
        // rain-rate-sized outputs are reachable from small weights
        let intensity = tape.scale(out, self.norm_std);
        // the motion head runs on its own trunk so its parameters see only
        // motion-term gradients; with per-parameter step normalization the
        // loss-weight scale then cancels out of its update direction
        // the motion trunk stays at latent resolution and the decoded
        // flow is upsampled at the end: motion targets are smooth, and a
        // coarse flow head cannot spend capacity on per-pixel wiggle that
        // recursive advection would compound
        let mut f = z_flow;
        for s in 0..self.cfg.stages() {
            let stride = if s == 0 { 2 } else { 1 };
            f = self.conv_block(tape, pv, f, &format!("flo{s}"), stride, true)?;
        }
        let mut fout = self.conv_block(tape, pv, f, "flo_out", 1, false)?;
        for _ in 0..=self.cfg.stages() {
            fout = tape.upsample2x(fout)?;
        }
        let flow = tape.scale(fout, FLOW_GAIN);
        Ok((flow, intensity))
    }

    fn evolve_on(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        z: Var,
        k: usize,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if k < 2 || k > self.cfg.horizon {
            return Err(Error::Domain(format!(
                "lead index {k} outside 2..={}",
                self.cfg.horizon
            )));
        }
        let classes = self.cfg.lead_time_classes;
        let mut one_hot = vec![0.0; classes];
        // class c encodes lead time c + 1
        one_hot[k - 1] = 1.0;
        let oh = tape.leaf(Tensor::new(vec![1, classes], one_hot)?);
        let emb = tape.matmul(oh, pv[self.idx("emb.w")])?;
        let emb = tape.reshape(emb, vec![self.cfg.embed_dim])?;
        let mut h = tape.add_channel_bias(z, emb)?;
        h = self.conv_block(tape, pv, h, "ev_in", 1, true)?;
        let mut drop = dropout_rng;
        for l in 0..self.cfg.evolver_depth {
            h = self.conv_block(tape, pv, h, &format!("ev{l}"), 1, true)?;
            if let Some(rng) = drop.as_deref_mut() {
                if self.cfg.dropout > 0.0 {
                    let shape = tape.value(h).shape.clone();
                    let keep = 1.0 - self.cfg.dropout;
                    let mask: Vec<f64> = (0..tape.value(h).numel())
                        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let m = tape.leaf(Tensor::new(shape, mask)?);
                    h = tape.mul(h, m)?;
                }
            }
        }
        let delta = self.conv_block(tape, pv, h, "ev_out", 1, false)?;
        tape.add(z, delta)
    }

    /// Encode a context window. `noise` must match the latent shape; pass
    /// zeros for the deterministic `sample = mu` path.
    pub fn ved_encode(&self, frames: &FieldSequence, noise: Option<&Tensor>) -> Result<LatentState> {
        let m = self.latent_side(frames.n())?;
        let shape = vec![self.cfg.embed_dim, m, m];
        let noise_t = match noise {
            Some(t) => {
                if t.shape != shape {
                    return Err(Error::TensorShape {
                        op: "ved_encode",
                        detail: format!("noise {:?}, latent {:?}", t.shape, shape),
                    });
                }
                t.clone()
            }
            None => Tensor::zeros(shape),
        };
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let input = tape.leaf(self.context_tensor(frames)?);
        let (mu, lv) = self.encode_on(&mut tape, &pv, input)?;
        let sample = tape.gaussian_sample(mu, lv, noise_t)?;
        let state = LatentState {
            mu: tape.value(mu).clone(),
            log_var: tape.value(lv).clone(),
            sample: tape.value(sample).clone(),
        };
        state.check()?;
        Ok(state)
    }

    /// Decode a latent sample into the interpretable fields. Flow values
    /// beyond the admissible magnitude are clamped.
    pub fn ved_decode(&self, latent: &LatentState) -> Result<(MotionField, IntensityField)> {
        latent.check()?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let z = tape.leaf(latent.sample.clone());
        let zf = tape.leaf(latent.mu.clone());
        let (flow, intensity) = self.decode_on(&mut tape, &pv, z, zf)?;
        let (motion, sfield, _) =
            fields_from_outputs(tape.value(flow), tape.value(intensity))?;
        Ok((motion, sfield))
    }

    /// Advance the initial latent to lead index `k` through the shared
    /// evolver network.
    pub fn evolve(&self, latent: &LatentState, k: usize) -> Result<LatentState> {
        latent.check()?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let z = tape.leaf(latent.sample.clone());
        let out = self.evolve_on(&mut tape, &pv, z, k, None)?;
        let value = tape.value(out).clone();
        let state = LatentState {
            log_var: Tensor::zeros(value.shape.clone()),
            sample: value.clone(),
            mu: value,
        };
        state.check()?;
        Ok(state)
    }

    /// Recursive forecast: decode fields per lead and advect the previous
    /// prediction. Inference is deterministic (`sample = mu`).
    pub fn nowcast(&self, frames: &FieldSequence) -> Result<Nowcast> {
        let l1 = self.ved_encode(frames, None)?;
        let step = frames.step_seconds() as i64;
        let mut prev = frames.frames().last().unwrap().clone();
        let mut out = Nowcast {
            frames: Vec::with_capacity(self.cfg.horizon),
            fields: Vec::with_capacity(self.cfg.horizon),
        };
        for k in 1..=self.cfg.horizon {
            let latent = if k == 1 { l1.clone() } else { self.evolve(&l1, k)? };
            let (motion, intensity) = self.ved_decode(&latent)?;
            let warped = advect::warp(&motion, &intensity, &prev)?;
            prev = warped.with_timestamp(prev.timestamp() + step);
            out.frames.push(prev.clone());
            out.fields.push((motion, intensity));
        }
        Ok(out)
    }

    /// Stage 1: fit encoder and decoder against optical-flow supervision
    /// with Adam. Aborts on a non-finite loss, leaving the parameters at
    /// the last finite step.
    pub fn train_ved(
        &mut self,
        windows: &[FieldSequence],
        flow_cfg: &FlowConfig,
        loss_w: &LossWeights,
        tc: &TrainConfig,
    ) -> Result<Vec<VedStepRecord>> {
        if windows.is_empty() {
            return Err(Error::Domain("empty training set".into()));
        }
        if tc.batch_size == 0 || tc.steps == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        let need = self.cfg.context_frames + 1;
        let mut pairs: Vec<SupervisionPair> = Vec::with_capacity(windows.len());
        let mut contexts: Vec<Tensor> = Vec::with_capacity(windows.len());
        for w in windows {
            if w.len() < need {
                return Err(Error::Domain(format!(
                    "window of {} frames, VED training needs {need}",
                    w.len()
                )));
            }
            let target_window = w.window(0, need)?;
            pairs.push(derive_targets(&target_window, flow_cfg, tc.crop_margin)?);
            contexts.push(self.context_tensor(&w.window(0, need - 1)?)?);
        }
        let n = windows[0].n();
        let m = self.latent_side(n)?;
        let latent_shape = vec![self.cfg.embed_dim, m, m];

        let mut rng = Rng::seed_from(tc.seed);
        let mut adam = Adam::new(
            tc.adam,
            &self.params[..self.ved_count]
                .iter()
                .map(|p| p.numel())
                .collect::<Vec<_>>(),
        );
        let mut records = Vec::with_capacity(tc.steps);
        for step in 0..tc.steps {
            let mut grad_acc: Vec<Option<Tensor>> = vec![None; self.ved_count];
            let mut terms = VedLossTerms {
                total: 0.0,
                intensity: 0.0,
                motion: 0.0,
                cosine: 0.0,
                kl: 0.0,
            };
            for _ in 0..tc.batch_size {
                let idx = rng.below(windows.len());
                let mut tape = Tape::new();
                let pv = self.bind(&mut tape);
                let input = tape.leaf(contexts[idx].clone());
                let (mu, lv) = self.encode_on(&mut tape, &pv, input)?;
                let noise = Tensor::new(
                    latent_shape.clone(),
                    (0..latent_shape.iter().product::<usize>())
                        .map(|_| rng.normal())
                        .collect(),
                )?;
                let z = tape.gaussian_sample(mu, lv, noise)?;
                let (flow, intensity) = self.decode_on(&mut tape, &pv, z, mu)?;
                let (motion, sfield, clamp_mask) =
                    fields_from_outputs(tape.value(flow), tape.value(intensity))?;
                let loss = loss_ved(
                    &motion,
                    &sfield,
                    &pairs[idx],
                    &tape.value(mu).data,
                    &tape.value(lv).data,
                    loss_w,
                )?;
                terms.total += loss.terms.total;
                terms.intensity += loss.terms.intensity;
                terms.motion += loss.terms.motion;
                terms.cosine += loss.terms.cosine;
                terms.kl += loss.terms.kl;

                let mut flow_seed = Vec::with_capacity(2 * n * n);
                flow_seed.extend_from_slice(loss.grad_motion_u.values());
                flow_seed.extend_from_slice(loss.grad_motion_v.values());
                for (g, clamped) in flow_seed.iter_mut().zip(&clamp_mask) {
                    if *clamped {
                        *g = 0.0;
                    }
                }
                let seeds = [
                    (flow, Tensor::new(vec![2, n, n], flow_seed)?),
                    (
                        intensity,
                        Tensor::new(vec![1, n, n], loss.grad_intensity.values().to_vec())?,
                    ),
                    (mu, Tensor::new(latent_shape.clone(), loss.grad_mu)?),
                    (lv, Tensor::new(latent_shape.clone(), loss.grad_log_var)?),
                ];
                let grads = tape.backward(&seeds)?;
                for p in 0..self.ved_count {
                    if let Some(g) = grads.get(pv[p]) {
                        match &mut grad_acc[p] {
                            Some(acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                    *a += b;
                                }
                            }
                            slot => *slot = Some(g.clone()),
                        }
                    }
                }
            }
            let inv = 1.0 / tc.batch_size as f64;
            terms.total *= inv;
            terms.intensity *= inv;
            terms.motion *= inv;
            terms.cosine *= inv;
            terms.kl *= inv;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite("ved training loss"));
            }
            for g in grad_acc.iter_mut().flatten() {
                for v in &mut g.data {
                    *v *= inv;
                }
            }
            adam.step(&mut self.params[..self.ved_count], &grad_acc)?;
            records.push(VedStepRecord { step, terms });
        }
        Ok(records)
    }

    /// Stage 2: fit the evolver with teacher forcing; lead indices are
    /// drawn uniformly from `2..=horizon`. VED parameters are never
    /// touched.
    pub fn train_evolver(
        &mut self,
        windows: &[FieldSequence],
        tc: &TrainConfig,
    ) -> Result<Vec<EvolverStepRecord>> {
        if windows.is_empty() {
            return Err(Error::Domain("empty training set".into()));
        }
        if self.cfg.horizon < 2 {
            return Err(Error::InvalidConfig(
                "evolver training needs horizon >= 2".into(),
            ));
        }
        let ctx = self.cfg.context_frames;
        let need = ctx + self.cfg.horizon;
        for w in windows {
            if w.len() < need {
                return Err(Error::Domain(format!(
                    "window of {} frames, evolver training needs {need}",
                    w.len()
                )));
            }
        }
        let n = windows[0].n();
        let mut contexts = Vec::with_capacity(windows.len());
        for w in windows {
            contexts.push(self.context_tensor(&w.window(0, ctx)?)?);
        }

        let mut rng = Rng::seed_from(tc.seed.wrapping_add(1));
        let ev_sizes: Vec<usize> = self.params[self.ved_count..]
            .iter()
            .map(|p| p.numel())
            .collect();
        let mut adam = Adam::new(tc.adam, &ev_sizes);
        let mut records = Vec::with_capacity(tc.steps);
        for step in 0..tc.steps {
            let ev_count = self.params.len() - self.ved_count;
            let mut grad_acc: Vec<Option<Tensor>> = vec![None; ev_count];
            let mut loss_sum = 0.0;
            let k = 2 + rng.below(self.cfg.horizon - 1);
            for _ in 0..tc.batch_size {
                let idx = rng.below(windows.len());
                let mut tape = Tape::new();
                let pv = self.bind(&mut tape);
                let input = tape.leaf(contexts[idx].clone());
                // frozen-encoder latent, deterministic sample
                let (mu, lv) = self.encode_on(&mut tape, &pv, input)?;
                let noise = Tensor::zeros(tape.value(mu).shape.clone());
                let z = tape.gaussian_sample(mu, lv, noise)?;
                let zk = self.evolve_on(&mut tape, &pv, z, k, Some(&mut rng))?;
                let (flow, intensity) = self.decode_on(&mut tape, &pv, zk, zk)?;
                let (motion, sfield, clamp_mask) =
                    fields_from_outputs(tape.value(flow), tape.value(intensity))?;
                // teacher forcing: warp the true previous frame
                let x_prev = &windows[idx].frames()[ctx - 1 + k - 1];
                let x_next = &windows[idx].frames()[ctx - 1 + k];
                let loss = loss_evolver(&motion, &sfield, x_prev, x_next, tc.crop_margin)?;
                loss_sum += loss.value;

                let mut flow_seed = Vec::with_capacity(2 * n * n);
                flow_seed.extend_from_slice(loss.grad_motion_u.values());
                flow_seed.extend_from_slice(loss.grad_motion_v.values());
                for (g, clamped) in flow_seed.iter_mut().zip(&clamp_mask) {
                    if *clamped {
                        *g = 0.0;
                    }
                }
                let seeds = [
                    (flow, Tensor::new(vec![2, n, n], flow_seed)?),
                    (
                        intensity,
                        Tensor::new(vec![1, n, n], loss.grad_intensity.values().to_vec())?,
                    ),
                ];
                let grads = tape.backward(&seeds)?;
                for (g, slot) in pv[self.ved_count..]
                    .iter()
                    .map(|v| grads.get(*v))
                    .zip(&mut grad_acc)
                {
                    if let Some(g) = g {
                        match slot {
                            Some(acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                    *a += b;
                                }
                            }
                            None => *slot = Some(g.clone()),
                        }
                    }
                }
            }
            let loss_mean = loss_sum / tc.batch_size as f64;
            if !loss_mean.is_finite() {
                return Err(Error::NonFinite("evolver training loss"));
            }
            for g in grad_acc.iter_mut().flatten() {
                for v in &mut g.data {
                    *v /= tc.batch_size as f64;
                }
            }
            adam.step(&mut self.params[self.ved_count..], &grad_acc)?;
            records.push(EvolverStepRecord {
                step,
                k,
                loss: loss_mean,
            });
        }
        Ok(records)
    }
}

impl Model {
    fn evolver_pass(
        &self,
        window: &FieldSequence,
        k: usize,
        crop_margin: usize,
        with_grads: bool,
    ) -> Result<(f64, Vec<Tensor>)> {
        let ctx = self.cfg.context_frames;
        if window.len() < ctx + k {
            return Err(Error::Domain(format!(
                "window of {} frames cannot reach lead {k}",
                window.len()
            )));
        }
        let n = window.n();
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let input = tape.leaf(self.context_tensor(&window.window(0, ctx)?)?);
        let (mu, lv) = self.encode_on(&mut tape, &pv, input)?;
        let noise = Tensor::zeros(tape.value(mu).shape.clone());
        let z = tape.gaussian_sample(mu, lv, noise)?;
        let zk = self.evolve_on(&mut tape, &pv, z, k, None)?;
        let (flow, intensity) = self.decode_on(&mut tape, &pv, zk, zk)?;
        let (motion, sfield, clamp_mask) =
            fields_from_outputs(tape.value(flow), tape.value(intensity))?;
        let x_prev = &window.frames()[ctx - 1 + k - 1];
        let x_next = &window.frames()[ctx - 1 + k];
        let loss = loss_evolver(&motion, &sfield, x_prev, x_next, crop_margin)?;
        if !with_grads {
            return Ok((loss.value, Vec::new()));
        }
        let mut flow_seed = Vec::with_capacity(2 * n * n);
        flow_seed.extend_from_slice(loss.grad_motion_u.values());
        flow_seed.extend_from_slice(loss.grad_motion_v.values());
        for (g, clamped) in flow_seed.iter_mut().zip(&clamp_mask) {
            if *clamped {
                *g = 0.0;
            }
        }
        let seeds = [
            (flow, Tensor::new(vec![2, n, n], flow_seed)?),
            (
                intensity,
                Tensor::new(vec![1, n, n], loss.grad_intensity.values().to_vec())?,
            ),
        ];
        let grads = tape.backward(&seeds)?;
        let out = pv
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape.clone()))
            })
            .collect();
        Ok((loss.value, out))
    }

    /// Teacher-forced evolver loss for one window at lead `k`, with the
    /// deterministic latent path. A forward-only hook for self-checks.
    pub fn evolver_loss_value(&self, window: &FieldSequence, k: usize, crop_margin: usize) -> Result<f64> {
        self.evolver_pass(window, k, crop_margin, false).map(|(l, _)| l)
    }

    /// Same pass with gradients for every parameter, ordered as
    /// `params_named`. Used by the finite-difference self-check.
    pub fn evolver_loss_param_grads(
        &self,
        window: &FieldSequence,
        k: usize,
        crop_margin: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.evolver_pass(window, k, crop_margin, true)
    }

    /// Shift one parameter element; self-check plumbing.
    pub fn perturb_param(&mut self, name: &str, elem: usize, delta: f64) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        let p = &mut self.params[idx];
        if elem >= p.numel() {
            return Err(Error::Domain(format!(
                "element {elem} out of range for {name} ({} values)",
                p.numel()
            )));
        }
        p.data[elem] += delta;
        Ok(())
    }
}

/// Convert raw decoder outputs into typed fields. Flow components beyond
/// the admissible magnitude clamp; the returned mask marks them so
/// gradient seeds can apply the matching zero subgradient.
fn fields_from_outputs(
    flow: &Tensor,
    intensity: &Tensor,
) -> Result<(MotionField, IntensityField, Vec<bool>)> {
    let n = match flow.shape.as_slice() {
        [2, a, b] if a == b => *a,
        _ => {
            return Err(Error::TensorShape {
                op: "fields_from_outputs",
                detail: format!("flow {:?}", flow.shape),
            })
        }
    };
    let bound = n as f64 / 2.0 - 1e-9;
    let mut mask = vec![false; 2 * n * n];
    let mut clamped = flow.data.clone();
    for p in 0..n * n {
        let (u, v) = (clamped[p], clamped[n * n + p]);
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("decoded flow"));
        }
        let mag = math::hypot(u, v);
        if mag > bound {
            // rescale to the admissible magnitude; subgradient zero
            let s = bound / mag;
            clamped[p] = u * s;
            clamped[n * n + p] = v * s;
            mask[p] = true;
            mask[n * n + p] = true;
        }
    }
    let motion = MotionField::new(
        Grid::from_vec(n, clamped[..n * n].to_vec())?,
        Grid::from_vec(n, clamped[n * n..].to_vec())?,
    )?;
    let sfield = IntensityField::new(intensity.to_grid()?)?;
    Ok((motion, sfield, mask))
}
