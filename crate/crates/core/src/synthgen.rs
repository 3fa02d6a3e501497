//! Deterministic synthetic event generator.
//!
//! A filled disc moves along the trajectory of each motion primitive. Pixels
//! entering the disc fire ON events (leading edge) and pixels leaving it fire
//! OFF events (trailing edge). Each leg of a trajectory is traversed with a
//! cosine ease, so the disc comes to rest at every turning point the way a
//! hovering vehicle would. Uniform background noise is layered on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{symbol_to_primitive, Symbol};
use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity, Resolution};
use crate::segmentation::MotionSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPrimitive {
    Vertical,
    Horizontal,
    LeftUpRight,
    LeftDownRight,
    Pause,
}

impl MotionPrimitive {
    pub const MOTIONS: [MotionPrimitive; 4] = [
        MotionPrimitive::Vertical,
        MotionPrimitive::Horizontal,
        MotionPrimitive::LeftUpRight,
        MotionPrimitive::LeftDownRight,
    ];

    pub fn is_pause(self) -> bool {
        self == MotionPrimitive::Pause
    }

    /// Path length for unit amplitude.
    fn unit_length(self) -> f64 {
        match self {
            MotionPrimitive::Vertical | MotionPrimitive::Horizontal => 4.0,
            MotionPrimitive::LeftUpRight | MotionPrimitive::LeftDownRight => 2.0 + std::f64::consts::PI,
            MotionPrimitive::Pause => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStep {
    pub kind: MotionPrimitive,
    pub seconds: f64,
}

impl MotionStep {
    pub fn new(kind: MotionPrimitive, seconds: f64) -> Self {
        MotionStep { kind, seconds }
    }

    pub fn duration_us(&self) -> u64 {
        (self.seconds * 1e6).round() as u64
    }
}

/// Minimum action length (seconds) enforced by [`MotionScript::validate`].
pub const MIN_ACTION_SECONDS: f64 = 3.0;
pub const DEFAULT_ACTION_SECONDS: f64 = 3.5;
pub const DEFAULT_PAUSE_SECONDS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub steps: Vec<MotionStep>,
    pub resolution: Resolution,
}

impl MotionScript {
    pub fn new(steps: Vec<MotionStep>, resolution: Resolution) -> Self {
        MotionScript { steps, resolution }
    }

    /// Durations must be positive; motion steps must last at least
    /// `min_action_s` seconds.
    pub fn validate(&self, min_action_s: f64) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("motion script is empty"));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !(s.seconds > 0.0 && s.seconds.is_finite()) {
                return Err(Error::invalid(format!("step {i}: duration must be positive")));
            }
            if !s.kind.is_pause() && s.seconds < min_action_s {
                return Err(Error::invalid(format!(
                    "step {i}: action lasts {}s, minimum is {min_action_s}s",
                    s.seconds
                )));
            }
        }
        Ok(())
    }

    pub fn total_us(&self) -> u64 {
        self.steps.iter().map(MotionStep::duration_us).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.steps)?)
    }

    pub fn from_json(text: &str, resolution: Resolution) -> Result<Self> {
        let steps: Vec<MotionStep> = serde_json::from_str(text)?;
        Ok(MotionScript { steps, resolution })
    }
}

/// Alternates the codebook primitive of each symbol with pauses.
pub fn script_from_symbols(symbols: &[Symbol], action_s: f64, pause_s: f64, resolution: Resolution) -> Result<MotionScript> {
    if symbols.is_empty() {
        return Err(Error::invalid("no symbols to transmit"));
    }
    let mut steps = Vec::with_capacity(symbols.len() * 2);
    for (i, &s) in symbols.iter().enumerate() {
        if i > 0 {
            steps.push(MotionStep::new(MotionPrimitive::Pause, pause_s));
        }
        steps.push(MotionStep::new(symbol_to_primitive(s)?, action_s));
    }
    Ok(MotionScript { steps, resolution })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceScale {
    Short,
    Medium,
    Long,
}

impl DistanceScale {
    pub const ALL: [DistanceScale; 3] = [DistanceScale::Short, DistanceScale::Medium, DistanceScale::Long];

    /// Apparent-size factor applied to the blob radius.
    pub fn factor(self) -> f64 {
        match self {
            DistanceScale::Short => 1.0,
            DistanceScale::Medium => 0.75,
            DistanceScale::Long => 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Radius at the short observation distance, pixels.
    pub blob_radius: f64,
    /// Mean speed along the trajectory, pixels per second. Sets the motion
    /// amplitude for a given step duration (clamped to stay in view).
    pub speed: f64,
    /// ON events emitted per leading-edge pixel crossing.
    pub event_rate: f64,
    /// OFF events per trailing-edge crossing, relative to `event_rate`.
    pub off_ratio: f64,
    /// Background events per second over the whole sensor.
    pub noise_rate: f64,
    /// Fraction of background events that are ON.
    pub noise_on_fraction: f64,
    pub seed: u64,
    pub distance_scale: DistanceScale,
    /// Offset of the trajectory centre from the sensor centre, pixels.
    pub center_offset: (f64, f64),
    /// Timestamp grid.
    pub tick_us: u64,
    /// Geometry update interval.
    pub step_us: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            blob_radius: 10.0,
            speed: 40.0,
            event_rate: 2.0,
            off_ratio: 0.75,
            noise_rate: 200.0,
            noise_on_fraction: 0.3,
            seed: 0,
            distance_scale: DistanceScale::Short,
            center_offset: (0.0, 0.0),
            tick_us: 100,
            step_us: 1000,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("blob_radius", self.blob_radius),
            ("speed", self.speed),
            ("event_rate", self.event_rate),
            ("off_ratio", self.off_ratio),
            ("noise_rate", self.noise_rate),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_on_fraction) {
            return Err(Error::invalid("noise_on_fraction must lie in [0, 1]"));
        }
        if self.tick_us == 0 || self.step_us == 0 || self.step_us % self.tick_us != 0 {
            return Err(Error::invalid("step_us must be a positive multiple of tick_us"));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.blob_radius * self.distance_scale.factor()
    }
}

/// What the generator emitted for one script step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub kind: MotionPrimitive,
    pub start_us: u64,
    pub end_us: u64,
    pub signal_events: u64,
    pub noise_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLog {
    pub steps: Vec<StepLog>,
}

impl GenLog {
    /// Ground-truth action intervals as inclusive frame ranges relative to
    /// `origin_us`.
    pub fn action_frames(&self, origin_us: u64, window_ms: u32) -> Vec<MotionSegment> {
        let w = window_ms as u64 * 1000;
        self.steps
            .iter()
            .filter(|s| !s.kind.is_pause())
            .map(|s| {
                let start = s.start_us.saturating_sub(origin_us) / w;
                let end = (s.end_us.saturating_sub(1)).saturating_sub(origin_us) / w;
                MotionSegment::new(
                    start as usize,
                    end.max(start) as usize,
                    crate::codec::primitive_to_symbol(s.kind).ok(),
                )
            })
            .collect()
    }
}

pub fn generate(script: &MotionScript, cfg: &GenConfig) -> Result<EventStream> {
    generate_with_log(script, cfg).map(|(s, _)| s)
}

pub fn generate_with_log(script: &MotionScript, cfg: &GenConfig) -> Result<(EventStream, GenLog)> {
    if script.steps.is_empty() {
        return Err(Error::invalid("motion script is empty"));
    }
    cfg.validate()?;
    let res = script.resolution;
    let mut events = Vec::new();
    let mut logs = Vec::with_capacity(script.steps.len());
    let mut start_us = 0u64;
    for (i, step) in script.steps.iter().enumerate() {
        if !(step.seconds > 0.0) {
            return Err(Error::invalid(format!("step {i}: duration must be positive")));
        }
        let dur = step.duration_us();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let before = events.len();
        if !step.kind.is_pause() {
            let path = Trajectory::new(step.kind, res, cfg, step.seconds);
            emit_blob(&path, start_us, dur, res, cfg, &mut rng, &mut events);
        }
        let signal = (events.len() - before) as u64;
        emit_noise(
            start_us,
            dur,
            res,
            cfg.noise_rate,
            cfg.noise_on_fraction,
            cfg.tick_us,
            &mut rng,
            &mut events,
        );
        logs.push(StepLog {
            kind: step.kind,
            start_us,
            end_us: start_us + dur,
            signal_events: signal,
            noise_events: (events.len() - before) as u64 - signal,
        });
        start_us += dur;
    }
    events.sort_by_key(|e| e.t);
    Ok((EventStream::from_sorted(res, events), GenLog { steps: logs }))
}

#[derive(Debug, Clone, Copy)]
enum Leg {
    Line {
        from: (f64, f64),
        to: (f64, f64),
    },
    Arc {
        center: (f64, f64),
        radius: f64,
        from: f64,
        to: f64,
        flip_y: bool,
    },
}

impl Leg {
    fn length(&self) -> f64 {
        match *self {
            Leg::Line { from, to } => ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt(),
            Leg::Arc { radius, from, to, .. } => radius * (to - from).abs(),
        }
    }

    fn at(&self, u: f64) -> (f64, f64) {
        match *self {
            Leg::Line { from, to } => (from.0 + (to.0 - from.0) * u, from.1 + (to.1 - from.1) * u),
            Leg::Arc {
                center,
                radius,
                from,
                to,
                flip_y,
            } => {
                let th = from + (to - from) * u;
                let dy = radius * th.sin();
                (center.0 + radius * th.cos(), if flip_y { center.1 + dy } else { center.1 - dy })
            }
        }
    }
}

/// Piecewise path of one primitive, legs traversed with a cosine ease.
struct Trajectory {
    legs: Vec<Leg>,
    /// Cumulative end times of each leg as fractions of the step.
    ends: Vec<f64>,
}

impl Trajectory {
    fn new(kind: MotionPrimitive, res: Resolution, cfg: &GenConfig, seconds: f64) -> Self {
        let r = cfg.radius();
        let c = (
            res.width as f64 / 2.0 + cfg.center_offset.0,
            res.height as f64 / 2.0 + cfg.center_offset.1,
        );
        let reach_x = (c.0.min(res.width as f64 - c.0) - r - 2.0).max(1.0);
        let reach_y = (c.1.min(res.height as f64 - c.1) - r - 2.0).max(1.0);
        let wanted = cfg.speed * seconds / kind.unit_length().max(1.0);
        let line = |from, to| Leg::Line { from, to };
        let legs = match kind {
            MotionPrimitive::Vertical => {
                let a = wanted.min(reach_y);
                vec![
                    line(c, (c.0, c.1 - a)),
                    line((c.0, c.1 - a), (c.0, c.1 + a)),
                    line((c.0, c.1 + a), c),
                ]
            }
            MotionPrimitive::Horizontal => {
                let a = wanted.min(reach_x);
                vec![
                    line(c, (c.0 - a, c.1)),
                    line((c.0 - a, c.1), (c.0 + a, c.1)),
                    line((c.0 + a, c.1), c),
                ]
            }
            MotionPrimitive::LeftUpRight | MotionPrimitive::LeftDownRight => {
                let a = wanted.min(reach_x).min(reach_y);
                vec![
                    line(c, (c.0 - a, c.1)),
                    Leg::Arc {
                        center: c,
                        radius: a,
                        from: std::f64::consts::PI,
                        to: 0.0,
                        flip_y: kind == MotionPrimitive::LeftDownRight,
                    },
                    line((c.0 + a, c.1), c),
                ]
            }
            MotionPrimitive::Pause => vec![line(c, c)],
        };
        let total: f64 = legs.iter().map(Leg::length).sum();
        let mut acc = 0.0;
        let ends = legs
            .iter()
            .map(|l| {
                acc += if total > 0.0 { l.length() / total } else { 1.0 / legs.len() as f64 };
                acc
            })
            .collect();
        Trajectory { legs, ends }
    }

    /// Disc centre at step fraction `s` in [0, 1].
    fn position(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, 1.0);
        let mut begin = 0.0;
        for (leg, &end) in self.legs.iter().zip(&self.ends) {
            if s <= end || end >= 1.0 - 1e-12 {
                let tau = if end > begin {
                    ((s - begin) / (end - begin)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let eased = 0.5 - 0.5 * (std::f64::consts::PI * tau).cos();
                return leg.at(eased);
            }
            begin = end;
        }
        self.legs.last().map(|l| l.at(1.0)).unwrap_or((0.0, 0.0))
    }
}

fn emission_count(rate: f64, rng: &mut ChaCha8Rng) -> u32 {
    let whole = rate.floor();
    let frac = rate - whole;
    whole as u32 + u32::from(frac > 0.0 && rng.gen::<f64>() < frac)
}

fn emit_blob(path: &Trajectory, start_us: u64, dur_us: u64, res: Resolution, cfg: &GenConfig, rng: &mut ChaCha8Rng, out: &mut Vec<Event>) {
    let r = cfg.radius();
    let r2 = r * r;
    let ticks_per_step = cfg.step_us / cfg.tick_us;
    let steps = dur_us.div_ceil(cfg.step_us);
    let inside = |c: (f64, f64), x: f64, y: f64| (x - c.0).powi(2) + (y - c.1).powi(2) <= r2;
    let mut prev = path.position(0.0);
    for k in 1..=steps {
        let cur = path.position((k * cfg.step_us) as f64 / dur_us as f64);
        let x0 = (prev.0.min(cur.0) - r - 1.0).floor().max(0.0) as i64;
        let x1 = (prev.0.max(cur.0) + r + 1.0).ceil().min(res.width as f64 - 1.0) as i64;
        let y0 = (prev.1.min(cur.1) - r - 1.0).floor().max(0.0) as i64;
        let y1 = (prev.1.max(cur.1) + r + 1.0).ceil().min(res.height as f64 - 1.0) as i64;
        let base = start_us + (k - 1) * cfg.step_us;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (was, is) = (inside(prev, px, py), inside(cur, px, py));
                let (polarity, rate) = match (was, is) {
                    (false, true) => (Polarity::Positive, cfg.event_rate),
                    (true, false) => (Polarity::Negative, cfg.event_rate * cfg.off_ratio),
                    _ => continue,
                };
                for _ in 0..emission_count(rate, rng) {
                    let t = base + rng.gen_range(0..ticks_per_step) * cfg.tick_us;
                    if t < start_us + dur_us {
                        out.push(Event::new(t, x as u16, y as u16, polarity));
                    }
                }
            }
        }
        prev = cur;
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_noise(
    start_us: u64,
    dur_us: u64,
    res: Resolution,
    rate: f64,
    on_fraction: f64,
    tick_us: u64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Event>,
) {
    if rate <= 0.0 {
        return;
    }
    let mean_gap_us = 1e6 / rate;
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() * mean_gap_us;
        let tq = (t / tick_us as f64).floor() as u64 * tick_us;
        if tq >= dur_us {
            break;
        }
        let x = rng.gen_range(0..res.width);
        let y = rng.gen_range(0..res.height);
        let p = if rng.gen::<f64>() < on_fraction {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        out.push(Event::new(start_us + tq, x, y, p));
    }
}

/// A stationary flickering patch (e.g. a blinking light), used for
/// background-class bursts that the segmenter picks up as activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlickerConfig {
    pub center: (f64, f64),
    pub half_size: f64,
    /// Event rate inside a flash, events per second.
    pub rate: f64,
    /// Mean flash and gap length, milliseconds.
    pub flash_ms: f64,
    pub seed: u64,
}

impl Default for FlickerConfig {
    fn default() -> Self {
        FlickerConfig {
            center: (64.0, 64.0),
            half_size: 12.0,
            rate: 40_000.0,
            flash_ms: 90.0,
            seed: 0,
        }
    }
}

/// Flashes with random lengths: ON events while the light switches on, OFF
/// events while it switches off, nothing in between.
pub fn generate_flicker(res: Resolution, start_us: u64, dur_us: u64, cfg: &FlickerConfig) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let x0 = (cfg.center.0 - cfg.half_size).floor().max(0.0) as u16;
    let x1 = ((cfg.center.0 + cfg.half_size).ceil() as u16).min(res.width - 1);
    let y0 = (cfg.center.1 - cfg.half_size).floor().max(0.0) as u16;
    let y1 = ((cfg.center.1 + cfg.half_size).ceil() as u16).min(res.height - 1);
    let mut events = Vec::new();
    let mut t = 0.0f64;
    let end = dur_us as f64;
    let mean = cfg.flash_ms * 1000.0;
    while t < end {
        let flash = mean * rng.gen_range(0.5..1.5);
        let gap = mean * rng.gen_range(0.5..1.5);
        let gain = rng.gen_range(0.5..1.0);
        for (offset, polarity) in [(0.0, Polarity::Positive), (flash, Polarity::Negative)] {
            let half = flash / 2.0;
            let n = (cfg.rate * gain * half / 1e6).round() as usize;
            for _ in 0..n {
                let dt = t + offset + rng.gen::<f64>() * half;
                if dt < end {
                    let x = rng.gen_range(x0..=x1);
                    let y = rng.gen_range(y0..=y1);
                    events.push(Event::new(start_us + (dt as u64 / 100) * 100, x, y, polarity));
                }
            }
        }
        t += flash * 1.5 + gap;
    }
    events.sort_by_key(|e| e.t);
    EventStream::from_sorted(res, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::frame_by_time;

    fn quiet() -> GenConfig {
        GenConfig {
            noise_rate: 0.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn pause_only_without_noise_is_empty() {
        let s = MotionScript::new(vec![MotionStep::new(MotionPrimitive::Pause, 2.0)], Resolution::default());
        assert!(generate(&s, &quiet()).unwrap().is_empty());
    }

    #[test]
    fn empty_script_rejected() {
        let s = MotionScript::new(vec![], Resolution::default());
        assert!(generate(&s, &quiet()).is_err());
    }

    #[test]
    fn vertical_stays_on_midline() {
        let cfg = quiet();
        let s = MotionScript::new(vec![MotionStep::new(MotionPrimitive::Vertical, 3.5)], Resolution::default());
        let out = generate(&s, &cfg).unwrap();
        assert!(out.len() > 1000);
        for e in out.events() {
            assert!((e.x as f64 + 0.5 - 64.0).abs() <= cfg.radius() + 1e-9);
        }
        let ys: Vec<u16> = out.events().iter().map(|e| e.y).collect();
        let span = ys.iter().max().unwrap() - ys.iter().min().unwrap();
        assert!(span > 60, "vertical excursion too small: {span}");
    }

    #[test]
    fn polarity_balance_within_bound() {
        for kind in MotionPrimitive::MOTIONS {
            let s = MotionScript::new(vec![MotionStep::new(kind, 3.5)], Resolution::default());
            let (p, n) = generate(&s, &quiet()).unwrap().polarity_counts();
            let imbalance = (p as f64 - n as f64).abs() / (p + n) as f64;
            assert!(imbalance < 0.2, "{kind:?}: {imbalance}");
        }
    }

    #[test]
    fn arcs_mirror_each_other() {
        let mk = |k| {
            let s = MotionScript::new(vec![MotionStep::new(k, 3.5)], Resolution::default());
            let ev = generate(&s, &quiet()).unwrap();
            ev.events().iter().map(|e| e.y as f64).sum::<f64>() / ev.len() as f64
        };
        assert!(mk(MotionPrimitive::LeftUpRight) < 60.0);
        assert!(mk(MotionPrimitive::LeftDownRight) > 68.0);
    }

    #[test]
    fn deterministic_for_seed() {
        let s = script_from_symbols(&[Symbol::Start, Symbol::One], 3.5, 3.0, Resolution::default()).unwrap();
        let cfg = GenConfig::default();
        assert_eq!(generate(&s, &cfg).unwrap(), generate(&s, &cfg).unwrap());
        let other = GenConfig { seed: 1, ..cfg };
        assert_ne!(generate(&s, &cfg).unwrap(), generate(&s, &other).unwrap());
    }

    #[test]
    fn symbols_alternate_with_pauses() {
        let r = Resolution::default();
        let s = script_from_symbols(&[Symbol::Start], 3.5, 3.0, r).unwrap();
        assert_eq!(s.steps, vec![MotionStep::new(MotionPrimitive::Vertical, 3.5)]);
        let s = script_from_symbols(&[Symbol::Start, Symbol::One], 3.5, 3.0, r).unwrap();
        assert_eq!(
            s.steps,
            vec![
                MotionStep::new(MotionPrimitive::Vertical, 3.5),
                MotionStep::new(MotionPrimitive::Pause, 3.0),
                MotionStep::new(MotionPrimitive::LeftUpRight, 3.5),
            ]
        );
        assert!(script_from_symbols(&[Symbol::Background], 3.5, 3.0, r).is_err());
        assert!(script_from_symbols(&[], 3.5, 3.0, r).is_err());
    }

    #[test]
    fn script_validation() {
        let r = Resolution::default();
        let short = MotionScript::new(vec![MotionStep::new(MotionPrimitive::Vertical, 2.0)], r);
        assert!(short.validate(MIN_ACTION_SECONDS).is_err());
        let zero = MotionScript::new(vec![MotionStep::new(MotionPrimitive::Pause, 0.0)], r);
        assert!(zero.validate(MIN_ACTION_SECONDS).is_err());
    }

    #[test]
    fn script_json_round_trip() {
        let s = script_from_symbols(&[Symbol::Start, Symbol::Zero, Symbol::End], 3.5, 3.0, Resolution::default()).unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"left_down_right\""));
        assert_eq!(MotionScript::from_json(&json, s.resolution).unwrap(), s);
    }

    #[test]
    fn motion_windows_exceed_pause_level() {
        let s = script_from_symbols(&[Symbol::Start, Symbol::End], 3.5, 3.0, Resolution::default()).unwrap();
        let (stream, log) = generate_with_log(&s, &GenConfig::default()).unwrap();
        let frames = frame_by_time(&stream, 33).unwrap();
        let w = 33_000;
        let in_step = |step: &StepLog, n: usize| {
            let t0 = frames.origin_us + n as u64 * w;
            t0 >= step.start_us + 200_000 && t0 + w <= step.end_us - 200_000
        };
        let pause = log.steps.iter().find(|s| s.kind.is_pause()).unwrap();
        let mut pause_q: Vec<u64> = (0..frames.len())
            .filter(|&n| in_step(pause, n))
            .map(|n| frames.frames[n].total)
            .collect();
        pause_q.sort_unstable();
        let median = pause_q[pause_q.len() / 2];
        // pause windows sit at the noise level implied by the emission log
        let expected = pause.noise_events as f64 / ((pause.end_us - pause.start_us) as f64 / w as f64);
        assert!((median as f64 - expected).abs() < 4.0 * expected.sqrt() + 1.0);
        let moving_above = log
            .steps
            .iter()
            .filter(|s| !s.kind.is_pause())
            .flat_map(|s| (0..frames.len()).filter(move |&n| in_step(s, n)))
            .filter(|&n| frames.frames[n].total > median)
            .count();
        let moving_total: usize = log
            .steps
            .iter()
            .filter(|s| !s.kind.is_pause())
            .map(|s| (0..frames.len()).filter(|&n| in_step(s, n)).count())
            .sum();
        assert!(moving_above as f64 > 0.9 * moving_total as f64);
    }

    #[test]
    fn flicker_is_confined_to_patch() {
        let cfg = FlickerConfig::default();
        let s = generate_flicker(Resolution::default(), 1_000_000, 3_000_000, &cfg);
        assert!(s.len() > 10_000);
        assert!(s
            .events()
            .iter()
            .all(|e| (e.x as f64 - 64.0).abs() <= 13.0 && e.t >= 1_000_000 && e.t < 4_000_000));
    }
}
