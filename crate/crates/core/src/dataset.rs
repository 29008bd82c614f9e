//! Rain-event extraction, split assignment, training-window sampling, and
//! the synthetic storm generator used as the ground-truth oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{FieldSequence, MotionField, PrecipField};
use crate::grid::Grid;
use crate::math;
use crate::rng::Rng;

/// Cadence the accumulation window is defined for.
pub const EVENT_STEP_SECONDS: u32 = 600;
/// Half-width of the accumulation window in frames (30 min at 10-min steps).
const ACCUM_HALF_FRAMES: usize = 3;
/// Half-width of the labeled event window in seconds (4 h).
const EVENT_HALF_SECONDS: i64 = 4 * 3600;

/// A contiguous rainy interval triggered by windowed accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RainEvent {
    pub start: i64,
    pub end: i64,
    pub source: String,
    /// Largest windowed accumulation among the timestamps that triggered
    /// this event.
    pub accumulation_peak: f64,
}

/// Scan a 10-min sequence for timestamps whose 7-frame accumulation
/// (pixels summed over a ±30 min window, inclusive) strictly exceeds
/// `tau`, label `[t - 4 h, t + 4 h]` around each, merge intersecting
/// labels, and clip to the sequence bounds.
pub fn extract_events(seq: &FieldSequence, tau: f64, source: &str) -> Result<Vec<RainEvent>> {
    if seq.step_seconds() != EVENT_STEP_SECONDS {
        return Err(Error::InvalidConfig(format!(
            "event extraction is defined for {EVENT_STEP_SECONDS} s cadence, sequence has {} s",
            seq.step_seconds()
        )));
    }
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be finite and non-negative, got {tau}")));
    }
    let frames = seq.frames();
    let mass: Vec<f64> = frames.iter().map(|f| f.values().total()).collect();
    let first_ts = frames[0].timestamp();
    let last_ts = frames[frames.len() - 1].timestamp();

    // (start, end, window sum) per triggering timestamp, in time order
    let mut marked: Vec<(i64, i64, f64)> = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let lo = t.saturating_sub(ACCUM_HALF_FRAMES);
        let hi = (t + ACCUM_HALF_FRAMES).min(frames.len() - 1);
        let sum: f64 = mass[lo..=hi].iter().sum();
        if sum > tau {
            let ts = frame.timestamp();
            marked.push((
                (ts - EVENT_HALF_SECONDS).max(first_ts),
                (ts + EVENT_HALF_SECONDS).min(last_ts),
                sum,
            ));
        }
    }

    let mut events: Vec<RainEvent> = Vec::new();
    for (start, end, sum) in marked {
        match events.last_mut() {
            // closed intervals intersect when the next start is not past
            // the running end
            Some(prev) if start <= prev.end => {
                prev.end = prev.end.max(end);
                prev.accumulation_peak = prev.accumulation_peak.max(sum);
            }
            _ => events.push(RainEvent {
                start,
                end,
                source: source.into(),
                accumulation_peak: sum,
            }),
        }
    }
    Ok(events)
}

/// Event-level split assignment; indices refer to the extracted event list.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// Assign whole events to train/validation/test uniformly at random.
/// Sizes follow largest-remainder rounding of the fractions so they always
/// sum to the event count.
pub fn split_events(events: &[RainEvent], fractions: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let total: f64 = fractions.iter().sum();
    if math::abs(total - 1.0) > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = events.len();
    if n < 3 {
        return Err(Error::Domain(format!("{n} events cannot fill 3 splits")));
    }

    let mut sizes = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0;
    for (k, f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        sizes[k] = exact as usize;
        assigned += sizes[k];
        remainders.push((k, exact - sizes[k] as f64));
    }
    // ties resolve in declaration order: train, validation, test
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in remainders.iter().take(n - assigned) {
        sizes[*k] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut train = order[..sizes[0]].to_vec();
    let mut validation = order[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let mut test = order[sizes[0] + sizes[1]..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest {
        train,
        validation,
        test,
        fractions,
        seed,
    })
}

/// Windows cut from the events of one split.
#[derive(Debug)]
pub struct SampledWindows {
    /// Each window holds `context + horizon` consecutive frames, fully
    /// inside a single event.
    pub windows: Vec<FieldSequence>,
    /// Events too short to yield a window; the caller reports these.
    pub skipped_events: Vec<usize>,
}

/// Cut every admissible training window of `context + horizon` frames from
/// the listed events. Windows never straddle event boundaries.
pub fn sample_windows(
    seq: &FieldSequence,
    events: &[RainEvent],
    event_ids: &[usize],
    context: usize,
    horizon: usize,
) -> Result<SampledWindows> {
    if context < 2 || horizon < 1 {
        return Err(Error::InvalidConfig(format!(
            "window needs context >= 2 and horizon >= 1, got {context}/{horizon}"
        )));
    }
    let need = context + horizon;
    let step = seq.step_seconds() as i64;
    let first_ts = seq.frames()[0].timestamp();
    let mut out = SampledWindows {
        windows: Vec::new(),
        skipped_events: Vec::new(),
    };
    for &id in event_ids {
        let ev = events
            .get(id)
            .ok_or_else(|| Error::Domain(format!("event index {id} out of range")))?;
        // first frame at or after the event start, last at or before its end
        let lo = ((ev.start - first_ts + step - 1) / step).max(0) as usize;
        let hi_ts = ev.end.min(seq.frames()[seq.len() - 1].timestamp());
        let hi = ((hi_ts - first_ts) / step) as usize;
        let len = hi + 1 - lo;
        if len < need {
            out.skipped_events.push(id);
            continue;
        }
        for start in lo..=hi + 1 - need {
            out.windows.push(seq.window(start, need)?);
        }
    }
    Ok(out)
}

/// Motion model for the synthetic generator.
#[derive(Debug, Clone, Copy)]
pub enum StormFlow {
    /// Uniform translation in px per step.
    Constant { u: f64, v: f64 },
    /// Solid-body rotation about the grid center, radians per step.
    Rotational { omega: f64 },
}

/// Parameters for `synthesize_storms`. Ranges are sampled uniformly
/// per blob.
#[derive(Debug, Clone)]
pub struct StormSpec {
    pub n: usize,
    pub frames: usize,
    pub blobs: usize,
    /// Peak rain rate range in mm/h.
    pub amplitude: (f64, f64),
    /// Blob radius range in pixels.
    pub sigma: (f64, f64),
    pub flow: StormFlow,
    /// Relative amplitude growth per step; 0 is steady state.
    pub growth: f64,
    pub step_seconds: u32,
    pub start_timestamp: i64,
}

impl Default for StormSpec {
    fn default() -> Self {
        StormSpec {
            n: 64,
            frames: 12,
            blobs: 3,
            amplitude: (8.0, 40.0),
            sigma: (4.0, 7.0),
            flow: StormFlow::Constant { u: 1.0, v: 0.0 },
            growth: 0.0,
            step_seconds: EVENT_STEP_SECONDS,
            start_timestamp: 0,
        }
    }
}

/// A generated sequence together with the ground truth that produced it.
#[derive(Debug)]
pub struct SynthesizedStorm {
    pub sequence: FieldSequence,
    /// The advecting velocity field, px per step.
    pub flow: MotionField,
    pub growth: f64,
}

fn validate_spec(spec: &StormSpec) -> Result<()> {
    if !crate::field::side_is_valid(spec.n) {
        return Err(Error::InvalidConfig(format!("invalid grid side {}", spec.n)));
    }
    if spec.frames < 2 || spec.blobs == 0 {
        return Err(Error::InvalidConfig(format!(
            "need >= 2 frames and >= 1 blob, got {}/{}",
            spec.frames, spec.blobs
        )));
    }
    let ranges = [spec.amplitude, spec.sigma];
    for (lo, hi) in ranges {
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(Error::InvalidConfig(format!("bad range ({lo}, {hi})")));
        }
    }
    if !spec.growth.is_finite() || spec.growth <= -1.0 {
        return Err(Error::InvalidConfig(format!("bad growth {}", spec.growth)));
    }
    Ok(())
}

/// Analytic advecting-storm generator. Blob centers follow the specified
/// flow exactly and amplitudes scale by `(1 + growth)` each step, so every
/// frame is a closed-form function of time.
pub fn synthesize_storms(spec: &StormSpec, seed: u64) -> Result<SynthesizedStorm> {
    validate_spec(spec)?;
    let n = spec.n;
    let mut rng = Rng::seed_from(seed);
    let margin = spec.sigma.1 * 2.0;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(spec.blobs);
    let mut amps = Vec::with_capacity(spec.blobs);
    let mut sigmas = Vec::with_capacity(spec.blobs);
    for _ in 0..spec.blobs {
        centers.push((
            rng.uniform_in(margin, n as f64 - margin),
            rng.uniform_in(margin, n as f64 - margin),
        ));
        amps.push(rng.uniform_in(spec.amplitude.0, spec.amplitude.1));
        sigmas.push(rng.uniform_in(spec.sigma.0, spec.sigma.1));
    }

    let c = (n as f64 - 1.0) / 2.0;
    let advance = |p: (f64, f64)| -> (f64, f64) {
        match spec.flow {
            StormFlow::Constant { u, v } => (p.0 + u, p.1 + v),
            StormFlow::Rotational { omega } => {
                let (s, co) = (math::sin(omega), math::cos(omega));
                let (dx, dy) = (p.0 - c, p.1 - c);
                (c + co * dx - s * dy, c + s * dx + co * dy)
            }
        }
    };

    let mut frames = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let scale = math::powi(1.0 + spec.growth, k as i32);
        let grid = Grid::from_fn(n, |i, j| {
            let mut acc = 0.0;
            for b in 0..spec.blobs {
                let dx = j as f64 - centers[b].0;
                let dy = i as f64 - centers[b].1;
                acc += scale * amps[b]
                    * math::exp(-(dx * dx + dy * dy) / (2.0 * sigmas[b] * sigmas[b]));
            }
            acc
        });
        frames.push(PrecipField::new(
            grid,
            spec.start_timestamp + k as i64 * spec.step_seconds as i64,
        )?);
        for p in &mut centers {
            *p = advance(*p);
        }
    }

    // velocity field of the advecting motion, px per step
    let (u, v) = match spec.flow {
        StormFlow::Constant { u, v } => (Grid::filled(n, u), Grid::filled(n, v)),
        StormFlow::Rotational { omega } => (
            Grid::from_fn(n, |i, _| -omega * (i as f64 - c)),
            Grid::from_fn(n, |_, j| omega * (j as f64 - c)),
        ),
    };
    Ok(SynthesizedStorm {
        sequence: FieldSequence::new(frames, spec.step_seconds)?,
        flow: MotionField::new(u, v)?,
        growth: spec.growth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::supervise::derive_targets;
    use alloc::string::ToString;
    use alloc::vec;

    const STEP: i64 = EVENT_STEP_SECONDS as i64;

    fn flat_sequence(mass_per_frame: &[f64], n: usize, t0: i64) -> FieldSequence {
        let frames = mass_per_frame
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let per_px = m / (n * n) as f64;
                PrecipField::new(Grid::filled(n, per_px), t0 + k as i64 * STEP).unwrap()
            })
            .collect();
        FieldSequence::new(frames, EVENT_STEP_SECONDS).unwrap()
    }

    #[test]
    fn dry_sequence_yields_no_events() {
        let seq = flat_sequence(&[0.0; 60], 8, 0);
        assert!(extract_events(&seq, 100.0, "s").unwrap().is_empty());
    }

    #[test]
    fn single_spike_marks_union_of_triggering_labels() {
        // a point spike at frame 30 exceeds the accumulation threshold for
        // every timestamp within +-30 min of it, so the merged label spans
        // [t - 4.5 h, t + 4.5 h] clipped to the sequence
        let mut mass = vec![0.0; 60];
        mass[30] = 101.0;
        let seq = flat_sequence(&mass, 8, 0);
        let events = extract_events(&seq, 100.0, "s").unwrap();
        assert_eq!(events.len(), 1);
        let t = 30 * STEP;
        assert_eq!(events[0].start, t - 3 * STEP - EVENT_HALF_SECONDS);
        assert_eq!(events[0].end, (t + 3 * STEP + EVENT_HALF_SECONDS).min(59 * STEP));
        assert!((events[0].accumulation_peak - 101.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_strictly_greater() {
        let mut mass = vec![0.0; 60];
        mass[30] = 100.0;
        let seq = flat_sequence(&mass, 8, 0);
        assert!(extract_events(&seq, 100.0, "s").unwrap().is_empty());
    }

    #[test]
    fn accumulation_spans_seven_frames() {
        // 7 frames of mass 20 centered on frame 30 sum to 140 only for
        // timestamps whose window covers all of them
        let mut mass = vec![0.0; 60];
        for m in &mut mass[27..=33] {
            *m = 20.0;
        }
        let seq = flat_sequence(&mass, 8, 0);
        let events = extract_events(&seq, 139.0, "s").unwrap();
        assert_eq!(events.len(), 1);
        assert!((events[0].accumulation_peak - 140.0).abs() < 1e-9);
    }

    #[test]
    fn spikes_six_hours_apart_merge() {
        // 36 frames apart = 6 h < 8 h, so the two labels intersect
        let mut mass = vec![0.0; 120];
        mass[30] = 101.0;
        mass[66] = 101.0;
        let seq = flat_sequence(&mass, 8, 0);
        let events = extract_events(&seq, 100.0, "s").unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start, 27 * STEP - EVENT_HALF_SECONDS);
        assert_eq!(events[0].end, 69 * STEP + EVENT_HALF_SECONDS);
    }

    #[test]
    fn distant_spikes_stay_separate_and_sorted() {
        // 60 frames apart = 10 h; even with the 30 min trigger spread the
        // labels end 1 h short of touching
        let mut mass = vec![0.0; 150];
        mass[30] = 101.0;
        mass[90] = 101.0;
        let seq = flat_sequence(&mass, 8, 0);
        let events = extract_events(&seq, 100.0, "s").unwrap();
        assert_eq!(events.len(), 2);
        assert!(events[0].end < events[1].start);
    }

    #[test]
    fn dry_prefix_does_not_shift_event_times() {
        let mut mass = vec![0.0; 90];
        mass[60] = 101.0;
        let base = extract_events(&flat_sequence(&mass[30..], 8, 30 * STEP), 100.0, "s").unwrap();
        let padded = extract_events(&flat_sequence(&mass, 8, 0), 100.0, "s").unwrap();
        assert_eq!(base[0].start, padded[0].start);
        assert_eq!(base[0].end, padded[0].end);
    }

    #[test]
    fn wrong_cadence_is_rejected() {
        let frames = vec![
            PrecipField::new(Grid::zeros(8), 0).unwrap(),
            PrecipField::new(Grid::zeros(8), 1800).unwrap(),
        ];
        let seq = FieldSequence::new(frames, 1800).unwrap();
        assert!(extract_events(&seq, 100.0, "s").is_err());
    }

    fn dummy_events(count: usize) -> Vec<RainEvent> {
        (0..count)
            .map(|k| RainEvent {
                start: k as i64 * 100_000,
                end: k as i64 * 100_000 + 50_000,
                source: "s".to_string(),
                accumulation_peak: 1.0,
            })
            .collect()
    }

    #[test]
    fn twenty_events_split_fourteen_three_three() {
        let m = split_events(&dummy_events(20), [0.70, 0.15, 0.15], 7).unwrap();
        assert_eq!(m.train.len(), 14);
        assert_eq!(m.validation.len(), 3);
        assert_eq!(m.test.len(), 3);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let ev = dummy_events(20);
        let a = split_events(&ev, [0.70, 0.15, 0.15], 7).unwrap();
        let b = split_events(&ev, [0.70, 0.15, 0.15], 7).unwrap();
        let c = split_events(&ev, [0.70, 0.15, 0.15], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_partition_for_many_seeds() {
        let ev = dummy_events(17);
        for seed in 0..100 {
            let m = split_events(&ev, [0.70, 0.15, 0.15], seed).unwrap();
            let mut all: Vec<usize> = m
                .train
                .iter()
                .chain(&m.validation)
                .chain(&m.test)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..17).collect::<Vec<_>>(), "seed {seed}");
        }
    }

    #[test]
    fn bad_fractions_and_tiny_sets_are_errors() {
        assert!(split_events(&dummy_events(20), [0.5, 0.2, 0.2], 1).is_err());
        assert!(split_events(&dummy_events(2), [0.70, 0.15, 0.15], 1).is_err());
    }

    fn event_for_frames(lo: usize, hi: usize) -> RainEvent {
        RainEvent {
            start: lo as i64 * STEP,
            end: hi as i64 * STEP,
            source: "s".to_string(),
            accumulation_peak: 1.0,
        }
    }

    #[test]
    fn window_counts_match_closed_form() {
        let seq = flat_sequence(&vec![1.0; 60], 8, 0);
        let context = 3;
        let horizon = 2; // need = 5
        let events = vec![
            event_for_frames(0, 4),   // exactly 5 frames -> 1 window
            event_for_frames(10, 13), // 4 frames -> skipped
            event_for_frames(20, 29), // 10 frames -> 6 windows
        ];
        let s = sample_windows(&seq, &events, &[0, 1, 2], context, horizon).unwrap();
        assert_eq!(s.windows.len(), 1 + 6);
        assert_eq!(s.skipped_events, vec![1]);
        for w in &s.windows {
            assert_eq!(w.len(), 5);
        }
    }

    #[test]
    fn windows_never_cross_event_or_split_boundaries() {
        let seq = flat_sequence(&vec![1.0; 60], 8, 0);
        let events = vec![event_for_frames(0, 9), event_for_frames(10, 19)];
        let train = sample_windows(&seq, &events, &[0], 3, 2).unwrap();
        let test = sample_windows(&seq, &events, &[1], 3, 2).unwrap();
        // timestamp-range audit: train windows live in event 0's range only
        for w in &train.windows {
            for f in w.frames() {
                assert!(f.timestamp() >= events[0].start && f.timestamp() <= events[0].end);
            }
        }
        for w in &test.windows {
            for f in w.frames() {
                assert!(f.timestamp() >= events[1].start);
            }
        }
    }

    #[test]
    fn static_storm_repeats_the_first_frame() {
        let spec = StormSpec {
            flow: StormFlow::Constant { u: 0.0, v: 0.0 },
            growth: 0.0,
            frames: 5,
            ..Default::default()
        };
        let storm = synthesize_storms(&spec, 3).unwrap();
        let first = storm.sequence.frames()[0].values();
        for f in storm.sequence.frames() {
            assert_eq!(f.values().values(), first.values());
        }
    }

    fn centroid(f: &PrecipField) -> (f64, f64) {
        let mut m = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..f.n() {
            for j in 0..f.n() {
                let v = *f.values().get(i, j);
                m += v;
                cx += v * j as f64;
                cy += v * i as f64;
            }
        }
        (cx / m, cy / m)
    }

    #[test]
    fn centroid_tracks_specified_translation() {
        let spec = StormSpec {
            blobs: 1,
            frames: 4,
            sigma: (5.0, 5.0),
            flow: StormFlow::Constant { u: 1.5, v: -0.5 },
            ..Default::default()
        };
        let storm = synthesize_storms(&spec, 11).unwrap();
        let frames = storm.sequence.frames();
        for k in 1..frames.len() {
            let a = centroid(&frames[k - 1]);
            let b = centroid(&frames[k]);
            assert!((b.0 - a.0 - 1.5).abs() < 0.05, "dx {}", b.0 - a.0);
            assert!((b.1 - a.1 + 0.5).abs() < 0.05, "dy {}", b.1 - a.1);
        }
    }

    #[test]
    fn growth_scales_frame_maxima() {
        let spec = StormSpec {
            blobs: 1,
            frames: 5,
            flow: StormFlow::Constant { u: 0.0, v: 0.0 },
            growth: 0.12,
            ..Default::default()
        };
        let storm = synthesize_storms(&spec, 5).unwrap();
        let frames = storm.sequence.frames();
        for k in 1..frames.len() {
            let prev = frames[k - 1].values().values().iter().cloned().fold(0.0, f64::max);
            let cur = frames[k].values().values().iter().cloned().fold(0.0, f64::max);
            assert!((cur / prev - 1.12).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_preserves_radius_from_center() {
        let spec = StormSpec {
            blobs: 1,
            frames: 6,
            sigma: (4.0, 4.0),
            flow: StormFlow::Rotational { omega: 0.1 },
            ..Default::default()
        };
        let storm = synthesize_storms(&spec, 2).unwrap();
        let c = (spec.n as f64 - 1.0) / 2.0;
        let radius = |f: &PrecipField| {
            let (x, y) = centroid(f);
            math::hypot(x - c, y - c)
        };
        let frames = storm.sequence.frames();
        let r0 = radius(&frames[0]);
        for f in frames {
            assert!((radius(f) - r0).abs() < 0.05);
        }
        // emitted velocity matches the solid-body field
        let (i, j) = (10, 40);
        assert!((storm.flow.u().get(i, j) + 0.1 * (i as f64 - c)).abs() < 1e-12);
        assert!((storm.flow.v().get(i, j) - 0.1 * (j as f64 - c)).abs() < 1e-12);
    }

    #[test]
    fn derived_targets_recover_generator_flow() {
        // the cross-module oracle chain: generator -> flow estimator
        let spec = StormSpec {
            blobs: 2,
            frames: 4,
            n: 64,
            sigma: (5.0, 6.0),
            amplitude: (20.0, 30.0),
            flow: StormFlow::Constant { u: 1.5, v: -0.5 },
            ..Default::default()
        };
        let storm = synthesize_storms(&spec, 21).unwrap();
        let pair = derive_targets(&storm.sequence, &FlowConfig::default(), 4).unwrap();
        let support = storm.sequence.frames()[2].values();
        let mut se = 0.0;
        let mut count = 0usize;
        for i in 0..spec.n {
            for j in 0..spec.n {
                if *support.get(i, j) > 1.0 {
                    let du = pair.motion_target.u().get(i, j) - 1.5;
                    let dv = pair.motion_target.v().get(i, j) + 0.5;
                    se += du * du + dv * dv;
                    count += 1;
                }
            }
        }
        let rms = math::sqrt(se / count as f64);
        assert!(rms < 0.25, "flow rms error {rms}");
    }
}
