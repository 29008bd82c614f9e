// scratch harness for tuning the toy benchmark; not part of the suite
use std::time::Instant;

use nowcast_core::advect::extrapolate;
use nowcast_core::autodiff::AdamConfig;
use nowcast_core::dataset::{synthesize_storms, StormFlow, StormSpec};
use nowcast_core::flow::{FlowConfig, FlowMethod};
use nowcast_core::metrics::{evaluate_run, SkillTable, DEFAULT_POOLS, DEFAULT_THRESHOLDS};
use nowcast_core::model::{Model, ModelConfig, TrainConfig};
use nowcast_core::rng::Rng;
use nowcast_core::{FieldSequence, PrecipField};

fn envnum<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn toy_event(seed: u64, flow: StormFlow, frames: usize) -> FieldSequence {
    let spec = StormSpec {
        n: 64,
        frames,
        blobs: 3,
        amplitude: (8.0, 40.0),
        sigma: (4.0, 7.0),
        flow,
        growth: envnum("GROWTH", 0.04),
        step_seconds: 600,
        start_timestamp: 0,
    };
    synthesize_storms(&spec, seed).unwrap().sequence
}

fn csi_m(table: &SkillTable, lead_minutes: u32) -> f64 {
    table.aggregate(lead_minutes, 1).unwrap().csi_m
}

fn main() {
    let started = Instant::now();
    let context: usize = 4;
    let horizon: usize = 6;
    let events: usize = envnum("EVENTS", 200);
    let held_out: usize = envnum("HELD", 40);
    let ved_steps: usize = envnum("VED_STEPS", 1300);
    let ev_steps: usize = envnum("EV_STEPS", 700);
    let channels: usize = envnum("CHANNELS", 16);
    let lr: f64 = envnum("LR", 1e-4);

    let rot_every: usize = envnum("ROT_EVERY", 0);
    let mut meta = Rng::seed_from(707);
    let mut flows = Vec::new();
    let corpus: Vec<FieldSequence> = (0..events as u64)
        .map(|seed| {
            let uv = (meta.uniform_in(-1.8, 1.8), meta.uniform_in(-1.8, 1.8));
            let omega = meta.uniform_in(0.05, 0.12) * if seed % 2 == 0 { 1.0 } else { -1.0 };
            let flow = if rot_every > 0 && (seed as usize) % rot_every == 0 {
                flows.push((f64::NAN, omega));
                StormFlow::Rotational { omega }
            } else {
                flows.push(uv);
                StormFlow::Constant { u: uv.0, v: uv.1 }
            };
            toy_event(seed, flow, context + horizon)
        })
        .collect();
    let (train, test) = corpus.split_at(events - held_out);
    let test_flows = &flows[events - held_out..];

    let cfg = ModelConfig {
        context_frames: context,
        horizon,
        channels,
        embed_dim: 4,
        reduc_factor: envnum("REDUC", 4),
        dropout: 0.2,
        evolver_depth: 2,
        evolver_dim: 32,
        lead_time_classes: horizon,
    };
    let flow_cfg = FlowConfig { method: FlowMethod::LucasKanade, context_frames: 3, ..FlowConfig::default() };
    let tc_ved = TrainConfig {
        steps: ved_steps,
        batch_size: envnum("BATCH", 8),
        adam: AdamConfig { lr, ..AdamConfig::default() },
        seed: 7,
        crop_margin: 4,
    };
    let tc_ev = TrainConfig { steps: ev_steps, ..tc_ved.clone() };

    let mut weights = nowcast_core::supervise::LossWeights::default();
    weights.lambda_cos = envnum("LCOS", weights.lambda_cos);
    weights.lambda_motion = envnum("LMOT", weights.lambda_motion);
    let mut model = Model::init(cfg, 7).unwrap();
    model.fit_normalization(train).unwrap();
    let t0 = Instant::now();
    let ved = model.train_ved(train, &flow_cfg, &weights, &tc_ved).unwrap();
    println!("ved: {} steps in {:?}", ved.len(), t0.elapsed());
    for r in ved.iter().step_by((ved.len() / 12).max(1)) {
        println!(
            "  step {:4} total {:.5} int {:.5} mot {:.5} cos {:.5} kl {:.3}",
            r.step, r.terms.total, r.terms.intensity, r.terms.motion, r.terms.cosine, r.terms.kl
        );
    }
    let t0 = Instant::now();
    let ev = model.train_evolver(train, &tc_ev).unwrap();
    println!("evolver: {} steps in {:?}", ev.len(), t0.elapsed());
    for r in ev.iter().step_by((ev.len() / 12).max(1)) {
        println!("  step {:4} k {} loss {:.5}", r.step, r.k, r.loss);
    }

    let lk_cfg = FlowConfig {
        method: FlowMethod::LucasKanade,
        context_frames: 3,
        ..FlowConfig::default()
    };
    let mut model_fx = Vec::new();
    let mut persist_fx = Vec::new();
    let mut lk_fx = Vec::new();
    let mut truth = Vec::new();
    for event in test {
        let ctx = event.window(0, context).unwrap();
        let observed: Vec<PrecipField> = event.frames()[context..].to_vec();
        let cast = model.nowcast(&ctx).unwrap();
        let last = ctx.frames().last().unwrap();
        persist_fx.push(observed.iter().map(|o| last.with_timestamp(o.timestamp())).collect::<Vec<_>>());
        lk_fx.push(extrapolate(&ctx, &lk_cfg, horizon).unwrap());
        model_fx.push(cast.frames);
        truth.push(observed);
    }
    // decoded-flow diagnostics on rainy pixels of the last context frame
    for (idx, event) in test.iter().enumerate().take(5) {
        if test_flows[idx].0.is_nan() { println!("event {idx}: rotational"); continue; }
        {
            let need = context + 1;
            let pair = nowcast_core::supervise::derive_targets(
                &event.window(0, need).unwrap(), &flow_cfg, 4).unwrap();
            let last = event.frames()[context - 1].clone();
            let (tu, tv) = test_flows[idx];
            let mut e = 0.0;
            let mut c = 0usize;
            for (i, &pv) in last.values().values().iter().enumerate() {
                if pv > 1.0 {
                    let du = pair.motion_target.u().values()[i] - tu;
                    let dv = pair.motion_target.v().values()[i] - tv;
                    e += (du * du + dv * dv).sqrt();
                    c += 1;
                }
            }
            println!("event {idx}: training target err {:.3} px over {c} px", e / c as f64);
        }
        let ctx = event.window(0, context).unwrap();
        let latent = model.ved_encode(&ctx, None).unwrap();
        let (motion, intensity) = model.ved_decode(&latent).unwrap();
        let last = ctx.frames().last().unwrap();
        let (tu, tv) = test_flows[idx];
        let mut err = 0.0;
        let mut s_abs = 0.0;
        let mut count = 0usize;
        for (i, &p) in last.values().values().iter().enumerate() {
            if p > 1.0 {
                let du = motion.u().values()[i] - tu;
                let dv = motion.v().values()[i] - tv;
                err += (du * du + dv * dv).sqrt();
                s_abs += intensity.values().values()[i].abs();
                count += 1;
            }
        }
        println!(
            "event {idx}: true ({tu:.2},{tv:.2}) flow err {:.3} px, |s| {:.3} over {count} px",
            err / count as f64,
            s_abs / count as f64
        );
        let mut lead_errs = Vec::new();
        for k in 2..=horizon {
            let (mk, _) = model.ved_decode(&model.evolve(&latent, k).unwrap()).unwrap();
            let mut e = 0.0;
            let mut c = 0usize;
            for (i, &p) in last.values().values().iter().enumerate() {
                if p > 1.0 {
                    let du = mk.u().values()[i] - tu;
                    let dv = mk.v().values()[i] - tv;
                    e += (du * du + dv * dv).sqrt();
                    c += 1;
                }
            }
            lead_errs.push(format!("k{k} {:.3}", e / c as f64));
        }
        println!("  evolved flow err: {}", lead_errs.join(", "));
    }
    let tm = evaluate_run(&model_fx, &truth, 10, &DEFAULT_THRESHOLDS, &DEFAULT_POOLS).unwrap();
    let tp = evaluate_run(&persist_fx, &truth, 10, &DEFAULT_THRESHOLDS, &DEFAULT_POOLS).unwrap();
    let tl = evaluate_run(&lk_fx, &truth, 10, &DEFAULT_THRESHOLDS, &DEFAULT_POOLS).unwrap();
    println!("csi4 pool1 lead1: model {:.4}", tm.cell(10, 4.0, 1).unwrap().csi.value);
    for lead in 1..=horizon as u32 {
        println!(
            "lead {}: model {:.4} persist {:.4} lk {:.4}",
            lead,
            csi_m(&tm, lead * 10),
            csi_m(&tp, lead * 10),
            csi_m(&tl, lead * 10)
        );
    }
    for lead in [3u32, 6u32] {
        for th in DEFAULT_THRESHOLDS {
            let m = tm.cell(lead * 10, th, 1).unwrap().csi.value;
            let l = tl.cell(lead * 10, th, 1).unwrap().csi.value;
            println!("lead {lead} thr {th}: model {m:.4} lk {l:.4}");
        }
    }
    println!("total elapsed {:?}", started.elapsed());
}
