//! Plot-ready CSV emitters. All writers print headers even when there are
//! no rows, so downstream tooling can rely on the schema.

use nowcast_core::dataset::{RainEvent, SplitManifest};
use nowcast_core::metrics::{Score, SkillTable};
use nowcast_core::model::{EvolverStepRecord, VedStepRecord};

fn fmt_score(s: &Score) -> String {
    if s.no_event {
        // degenerate contingency table; keep the column numeric
        "0".into()
    } else {
        format!("{:.6}", s.value)
    }
}

/// Full skill table: one row per (lead, threshold, pool) cell.
pub fn skill_csv(table: &SkillTable) -> String {
    let mut out = String::from("lead_min,threshold,pool,tp,tn,fp,fn,csi,hss\n");
    for c in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.lead_minutes,
            c.threshold,
            c.pool,
            c.counts.true_pos,
            c.counts.true_neg,
            c.counts.false_pos,
            c.counts.false_neg,
            fmt_score(&c.csi),
            fmt_score(&c.hss),
        ));
    }
    out
}

/// Per-lead curves of the threshold-averaged scores.
pub fn summary_csv(table: &SkillTable) -> String {
    let mut out = String::from("lead_min,pool,csi_m,hss_m\n");
    for a in &table.aggregates {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            a.lead_minutes, a.pool, a.csi_m, a.hss_m
        ));
    }
    out
}

/// Event manifest. `splits` labels each event train/validation/test; with
/// no manifest every event is labeled train.
pub fn events_csv(events: &[RainEvent], splits: Option<&SplitManifest>) -> String {
    let mut out = String::from("event_id,start_unix,end_unix,peak_accum,split\n");
    for (id, ev) in events.iter().enumerate() {
        let split = match splits {
            Some(m) if m.validation.contains(&id) => "validation",
            Some(m) if m.test.contains(&id) => "test",
            _ => "train",
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            id, ev.start, ev.end, ev.accumulation_peak, split
        ));
    }
    out
}

/// Stage-1 loss curve with the per-term breakdown.
pub fn ved_curve_csv(records: &[VedStepRecord]) -> String {
    let mut out = String::from("step,stage,total,intensity,motion,cosine,kl\n");
    for r in records {
        out.push_str(&format!(
            "{},ved,{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            r.step, r.terms.total, r.terms.intensity, r.terms.motion, r.terms.cosine, r.terms.kl
        ));
    }
    out
}

/// Stage-2 loss curve; `k` is the lead index drawn for that step.
pub fn evolver_curve_csv(records: &[EvolverStepRecord]) -> String {
    let mut out = String::from("step,stage,k,loss\n");
    for r in records {
        out.push_str(&format!("{},evolver,{},{:.8}\n", r.step, r.k, r.loss));
    }
    out
}
