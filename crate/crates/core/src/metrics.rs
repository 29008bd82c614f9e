//! Forecast verification: contingency counts, CSI and HSS at multiple
//! thresholds and pooling levels, micro-averaged across events.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{max_pool, threshold_mask, PrecipField};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];
pub const DEFAULT_POOLS: [usize; 2] = [1, 4];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// Count accumulation is associative and commutative; partial counts
    /// from parallel workers merge by addition.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

/// Score with a flag marking the degenerate-denominator convention
/// (no events scored; the value is 0 by convention, never NaN).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub no_event: bool,
}

/// Threshold both fields, pool both exceedance masks, count cells.
pub fn confusion(
    forecast: &PrecipField,
    observed: &PrecipField,
    threshold: f64,
    pool: usize,
) -> Result<ConfusionCounts> {
    if forecast.n() != observed.n() {
        return Err(Error::ShapeMismatch {
            expected: observed.n(),
            got: forecast.n(),
        });
    }
    if pool != 1 && pool != 4 {
        return Err(Error::Domain(format!("pool must be 1 or 4, got {pool}")));
    }
    let fm = max_pool(&threshold_mask(forecast, threshold)?, pool)?;
    let om = max_pool(&threshold_mask(observed, threshold)?, pool)?;
    let mut c = ConfusionCounts::default();
    for (f, o) in fm.values().iter().zip(om.values()) {
        match (f, o) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Critical success index TP / (TP + FN + FP); ignores true negatives.
pub fn csi(c: &ConfusionCounts) -> Score {
    let denom = c.true_pos + c.false_neg + c.false_pos;
    if denom == 0 {
        return Score {
            value: 0.0,
            no_event: true,
        };
    }
    Score {
        value: c.true_pos as f64 / denom as f64,
        no_event: false,
    }
}

/// Heidke skill score against random chance:
/// 2(TP*TN - FN*FP) / ((TP+FN)(TN+FN) + (TP+FP)(TN+FP)).
pub fn hss(c: &ConfusionCounts) -> Score {
    let tp = c.true_pos as f64;
    let tn = c.true_neg as f64;
    let fp = c.false_pos as f64;
    let fne = c.false_neg as f64;
    let denom = (tp + fne) * (tn + fne) + (tp + fp) * (tn + fp);
    if denom == 0.0 {
        return Score {
            value: 0.0,
            no_event: true,
        };
    }
    Score {
        value: 2.0 * (tp * tn - fne * fp) / denom,
        no_event: false,
    }
}

/// One row of the skill table: counts and scores for a
/// (lead time, threshold, pooling) cell, micro-averaged over events.
#[derive(Debug, Clone)]
pub struct SkillCell {
    pub lead_minutes: u32,
    pub threshold: f64,
    pub pool: usize,
    pub counts: ConfusionCounts,
    pub csi: Score,
    pub hss: Score,
}

/// Mean scores across thresholds for one (lead time, pooling).
#[derive(Debug, Clone)]
pub struct SkillAggregate {
    pub lead_minutes: u32,
    pub pool: usize,
    pub csi_m: f64,
    pub hss_m: f64,
}

#[derive(Debug, Clone)]
pub struct SkillTable {
    pub cells: Vec<SkillCell>,
    pub aggregates: Vec<SkillAggregate>,
}

impl SkillTable {
    pub fn cell(&self, lead_minutes: u32, threshold: f64, pool: usize) -> Option<&SkillCell> {
        self.cells
            .iter()
            .find(|c| c.lead_minutes == lead_minutes && c.threshold == threshold && c.pool == pool)
    }

    pub fn aggregate(&self, lead_minutes: u32, pool: usize) -> Option<&SkillAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.lead_minutes == lead_minutes && a.pool == pool)
    }
}

/// Score a forecast run against observations. Outer slices are events,
/// inner vectors the per-lead frames; counts are summed across events
/// before any ratio is taken (micro-averaging).
pub fn evaluate_run(
    forecasts: &[Vec<PrecipField>],
    observations: &[Vec<PrecipField>],
    step_minutes: u32,
    thresholds: &[f64],
    pools: &[usize],
) -> Result<SkillTable> {
    if forecasts.len() != observations.len() {
        return Err(Error::Domain(format!(
            "{} forecast events vs {} observed events",
            forecasts.len(),
            observations.len()
        )));
    }
    if forecasts.is_empty() {
        return Err(Error::Domain("no events to evaluate".into()));
    }
    let leads = forecasts[0].len();
    for (ev, (f, o)) in forecasts.iter().zip(observations).enumerate() {
        if f.len() != leads || o.len() != leads {
            return Err(Error::Domain(format!(
                "event {ev}: forecast has {} leads, observed {}, expected {leads}",
                f.len(),
                o.len()
            )));
        }
    }

    let mut cells = Vec::new();
    let mut aggregates = Vec::new();
    for lead in 0..leads {
        let lead_minutes = (lead as u32 + 1) * step_minutes;
        for &pool in pools {
            let mut csi_sum = 0.0;
            let mut hss_sum = 0.0;
            for &t in thresholds {
                let mut counts = ConfusionCounts::default();
                for (ev, (f, o)) in forecasts.iter().zip(observations).enumerate() {
                    let c = confusion(&f[lead], &o[lead], t, pool).map_err(|e| {
                        Error::Domain(format!("event {ev}, lead {lead_minutes} min: {e}"))
                    })?;
                    counts.merge(&c);
                }
                let cell = SkillCell {
                    lead_minutes,
                    threshold: t,
                    pool,
                    counts,
                    csi: csi(&counts),
                    hss: hss(&counts),
                };
                csi_sum += cell.csi.value;
                hss_sum += cell.hss.value;
                cells.push(cell);
            }
            aggregates.push(SkillAggregate {
                lead_minutes,
                pool,
                csi_m: csi_sum / thresholds.len() as f64,
                hss_m: hss_sum / thresholds.len() as f64,
            });
        }
    }
    Ok(SkillTable { cells, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::Rng;
    use alloc::vec;

    fn field_from(vals: Grid<f64>) -> PrecipField {
        PrecipField::new(vals, 0).unwrap()
    }

    #[test]
    fn perfect_forecast_has_no_misses() {
        let f = field_from(Grid::from_fn(8, |i, j| ((i * j) % 9) as f64));
        let c = confusion(&f, &f, 4.0, 1).unwrap();
        assert_eq!(c.false_pos, 0);
        assert_eq!(c.false_neg, 0);
        assert_eq!(c.total(), 64);
    }

    #[test]
    fn all_dry_pair_is_all_true_negative() {
        let f = field_from(Grid::zeros(8));
        let c = confusion(&f, &f, 4.0, 1).unwrap();
        assert_eq!(c.true_neg, 64);
        assert_eq!(c.true_pos + c.false_pos + c.false_neg, 0);
    }

    #[test]
    fn pooled_counts_match_brute_force() {
        // hand-placed exceedances, POOL4 on an 8x8 pair
        let mut fg = Grid::zeros(8);
        *fg.get_mut(1, 1) = 9.0;
        *fg.get_mut(6, 6) = 9.0;
        let mut og = Grid::zeros(8);
        *og.get_mut(2, 2) = 9.0;
        *og.get_mut(1, 6) = 9.0;
        let c = confusion(&field_from(fg), &field_from(og), 8.0, 4).unwrap();
        // blocks: (0,0) f+o, (0,1) o only, (1,0) none, (1,1) f only
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 1,
                true_neg: 1,
                false_pos: 1,
                false_neg: 1
            }
        );
    }

    #[test]
    fn csi_arithmetic_cases() {
        let c = ConfusionCounts {
            true_pos: 5,
            ..Default::default()
        };
        assert_eq!(csi(&c).value, 1.0);
        let c = ConfusionCounts {
            true_pos: 1,
            false_neg: 1,
            false_pos: 2,
            true_neg: 0,
        };
        assert_eq!(csi(&c).value, 0.25);
        let c = ConfusionCounts {
            true_neg: 10,
            ..Default::default()
        };
        let s = csi(&c);
        assert_eq!(s.value, 0.0);
        assert!(s.no_event);
    }

    #[test]
    fn hss_arithmetic_cases() {
        let c = ConfusionCounts {
            true_pos: 3,
            true_neg: 4,
            false_pos: 0,
            false_neg: 0,
        };
        assert_eq!(hss(&c).value, 1.0);
        let c = ConfusionCounts {
            true_pos: 2,
            true_neg: 2,
            false_pos: 1,
            false_neg: 1,
        };
        assert!((hss(&c).value - 1.0 / 3.0).abs() < 1e-12);
        let s = hss(&ConfusionCounts::default());
        assert_eq!(s.value, 0.0);
        assert!(s.no_event);
    }

    #[test]
    fn hss_near_zero_for_independent_forecasts() {
        // Monte-Carlo: forecast independent of truth at matching base rate
        let mut rng = Rng::seed_from(77);
        let p = 0.3;
        let mut c = ConfusionCounts::default();
        for _ in 0..1_000_000 {
            let f = rng.uniform() < p;
            let o = rng.uniform() < p;
            match (f, o) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        assert!(hss(&c).value.abs() < 0.02, "hss {}", hss(&c).value);
    }

    #[test]
    fn csi_invariant_under_added_dry_cells() {
        let mut c = ConfusionCounts {
            true_pos: 7,
            true_neg: 3,
            false_pos: 2,
            false_neg: 4,
        };
        let before = csi(&c).value;
        c.true_neg += 1000;
        assert_eq!(csi(&c).value, before);
    }

    #[test]
    fn micro_average_equals_summed_counts() {
        let mut rng = Rng::seed_from(8);
        let mut rand_field =
            || field_from(Grid::from_fn(16, |_, _| rng.uniform_in(0.0, 20.0)));
        let ev1 = vec![rand_field()];
        let ev2 = vec![rand_field()];
        let obs1 = vec![rand_field()];
        let obs2 = vec![rand_field()];
        let table = evaluate_run(
            &[ev1.clone(), ev2.clone()],
            &[obs1.clone(), obs2.clone()],
            10,
            &[8.0],
            &[1],
        )
        .unwrap();
        let mut counts = confusion(&ev1[0], &obs1[0], 8.0, 1).unwrap();
        counts.merge(&confusion(&ev2[0], &obs2[0], 8.0, 1).unwrap());
        let cell = table.cell(10, 8.0, 1).unwrap();
        assert_eq!(cell.counts, counts);
        assert_eq!(cell.csi.value, csi(&counts).value);
    }

    #[test]
    fn full_table_shape_and_perfect_scores() {
        let f = field_from(Grid::from_fn(16, |i, j| ((i + 2 * j) % 70) as f64));
        let events = vec![vec![f.clone(), f.clone()]];
        let table = evaluate_run(
            &events,
            &events,
            10,
            &DEFAULT_THRESHOLDS,
            &DEFAULT_POOLS,
        )
        .unwrap();
        assert_eq!(table.cells.len(), 2 * 2 * 5);
        assert_eq!(table.aggregates.len(), 2 * 2);
        for cell in &table.cells {
            if !cell.csi.no_event {
                assert_eq!(cell.csi.value, 1.0);
            }
        }
    }

    #[test]
    fn misaligned_events_name_the_offender() {
        let f = field_from(Grid::zeros(8));
        let err = evaluate_run(
            &[vec![f.clone()], vec![f.clone(), f.clone()]],
            &[vec![f.clone()], vec![f.clone(), f.clone()]],
            10,
            &[4.0],
            &[1],
        );
        assert!(err.is_err());
        let msg = alloc::format!("{}", err.unwrap_err());
        assert!(msg.contains("event 1"), "{msg}");
    }
}
