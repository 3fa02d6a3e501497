//! Synthetic recognition dataset: one sample per generated action or
//! background burst, cut out the way the decoder would see it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{symbol_to_primitive, Symbol};
use crate::error::{Error, Result};
use crate::event::io::{load_tensor, save_tensor};
use crate::event::{frame_by_count, frame_by_time, EventStream, Resolution, SampleTensor};
use crate::imsr::{noise_filter, NoiseFilterConfig};
use crate::par::Exec;
use crate::segmentation::{segment, SegConfig};
use crate::snn::Labeled;
use crate::synthgen::{
    generate_flicker, generate_with_log, DistanceScale, FlickerConfig, GenConfig, MotionPrimitive, MotionScript, MotionStep,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub samples_per_class: usize,
    pub time_steps: usize,
    pub input_size: usize,
    /// Every `test_every`-th sample of a class goes to the test split.
    pub test_every: usize,
    pub seed: u64,
    pub gen: GenConfig,
    pub filter: NoiseFilterConfig,
    pub seg: SegConfig,
    pub window_ms: u32,
    pub action_seconds: (f64, f64),
    /// Relative spread of speed and blob radius around `gen`.
    pub spread: f64,
    pub max_center_offset: f64,
    /// Each segment boundary moves by up to this many frames.
    pub boundary_jitter: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples_per_class: 200,
            time_steps: 16,
            input_size: 128,
            test_every: 4,
            seed: 0,
            gen: GenConfig::default(),
            filter: NoiseFilterConfig::default(),
            seg: SegConfig::default(),
            window_ms: crate::event::DEFAULT_WINDOW_MS,
            action_seconds: (3.0, 4.0),
            spread: 0.25,
            max_center_offset: 12.0,
            boundary_jitter: 3,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 || self.time_steps == 0 || self.input_size == 0 {
            return Err(Error::invalid("samples_per_class, time_steps and input_size must be positive"));
        }
        if self.test_every < 2 {
            return Err(Error::invalid("test_every must be at least 2"));
        }
        let (lo, hi) = self.action_seconds;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("action_seconds must be a positive, ordered range"));
        }
        if !(0.0..1.0).contains(&self.spread) {
            return Err(Error::invalid("spread must lie in [0, 1)"));
        }
        self.gen.validate()?;
        self.filter.validate()?;
        self.seg.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Labeled>,
    pub test: Vec<Labeled>,
}

const PAD_SECONDS: f64 = 1.5;

fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    rng.set_stream(index as u64);
    rng
}

/// Events of the segment detected in `stream`, or of `fallback` (time
/// interval) when the segmenter does not find exactly one.
fn cut(stream: &EventStream, fallback: (u64, u64), cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<EventStream> {
    let filtered = noise_filter(stream, &cfg.filter)?;
    let frames = frame_by_time(&filtered, cfg.window_ms)?;
    let found = segment(&frames, &cfg.seg);
    let (mut a, mut b) = match found.as_slice() {
        [s] => (s.start_frame, s.end_frame),
        _ => (frames.frame_of(fallback.0), frames.frame_of(fallback.1.saturating_sub(1))),
    };
    let j = cfg.boundary_jitter as i64;
    let last = frames.len().saturating_sub(1) as i64;
    a = (a as i64 + rng.gen_range(-j..=j)).clamp(0, last) as usize;
    b = (b as i64 + rng.gen_range(-j..=j)).clamp(a as i64, last) as usize;
    let (t0, _) = frames.frame_span_us(a, a);
    let (_, t1) = frames.frame_span_us(b, b);
    Ok(filtered.slice_time(t0, t1))
}

fn motion_sample(kind: MotionPrimitive, cfg: &DatasetConfig, rng: &mut ChaCha8Rng, res: Resolution) -> Result<EventStream> {
    let s = cfg.spread;
    let seconds = rng.gen_range(cfg.action_seconds.0..=cfg.action_seconds.1);
    let gen = GenConfig {
        seed: rng.gen(),
        speed: cfg.gen.speed * rng.gen_range(1.0 - s..=1.0 + s),
        blob_radius: cfg.gen.blob_radius * rng.gen_range(1.0 - s..=1.0 + s),
        distance_scale: DistanceScale::ALL[rng.gen_range(0..DistanceScale::ALL.len())],
        center_offset: (
            rng.gen_range(-cfg.max_center_offset..=cfg.max_center_offset),
            rng.gen_range(-cfg.max_center_offset..=cfg.max_center_offset),
        ),
        ..cfg.gen
    };
    let script = MotionScript::new(
        vec![
            MotionStep::new(MotionPrimitive::Pause, PAD_SECONDS),
            MotionStep::new(kind, seconds),
            MotionStep::new(MotionPrimitive::Pause, PAD_SECONDS),
        ],
        res,
    );
    let (stream, log) = generate_with_log(&script, &gen)?;
    let step = log.steps[1];
    cut(&stream, (step.start_us, step.end_us), cfg, rng)
}

fn background_sample(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, res: Resolution) -> Result<EventStream> {
    let seconds = rng.gen_range(cfg.action_seconds.0..=cfg.action_seconds.1);
    let pad = (PAD_SECONDS * 1e6) as u64;
    let dur = (seconds * 1e6) as u64;
    let script = MotionScript::new(vec![MotionStep::new(MotionPrimitive::Pause, PAD_SECONDS * 2.0 + seconds)], res);
    let gen = GenConfig {
        seed: rng.gen(),
        noise_rate: cfg.gen.noise_rate * rng.gen_range(1.0..4.0),
        ..cfg.gen
    };
    let (noise, _) = generate_with_log(&script, &gen)?;
    // A quarter of the background samples are noise alone.
    let stream = if rng.gen_bool(0.75) {
        let margin = (res.width.min(res.height) as f64 / 4.0).min(20.0);
        let flicker = FlickerConfig {
            center: (
                rng.gen_range(margin..res.width as f64 - margin),
                rng.gen_range(margin..res.height as f64 - margin),
            ),
            half_size: rng.gen_range(4.0..16.0),
            rate: rng.gen_range(10_000.0..60_000.0),
            flash_ms: rng.gen_range(40.0..200.0),
            seed: rng.gen(),
        };
        noise.merge(&generate_flicker(res, pad, dur, &flicker))?
    } else {
        noise
    };
    cut(&stream, (pad, pad + dur), cfg, rng)
}

/// Class index of sample `index` drawn for `class`, fully determined by the
/// config seed. Background is the last class.
pub fn build_sample(cfg: &DatasetConfig, class: usize, index: usize) -> Result<Labeled> {
    let res = Resolution::new(cfg.input_size as u16, cfg.input_size as u16);
    let mut rng = sample_rng(cfg.seed, class, index);
    let symbol = Symbol::from_class_index(class).ok_or_else(|| Error::Dataset(format!("class {class} out of range")))?;
    let events = if symbol == Symbol::Background {
        background_sample(cfg, &mut rng, res)?
    } else {
        let kind = symbol_to_primitive(symbol).map_err(|e| Error::Dataset(e.to_string()))?;
        motion_sample(kind, cfg, &mut rng, res)?
    };
    let tensor = frame_by_count(&events, cfg.time_steps, cfg.input_size, cfg.input_size)?;
    Ok(Labeled { tensor, label: class })
}

pub fn build_dataset(cfg: &DatasetConfig, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let classes = Symbol::CLASSES.len();
    let n = cfg.samples_per_class;
    let samples = exec.map_range(classes * n, |i| build_sample(cfg, i / n, i % n));
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in samples.into_iter().enumerate() {
        if (i % n) % cfg.test_every == cfg.test_every - 1 {
            ds.test.push(s?);
        } else {
            ds.train.push(s?);
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetIndex {
    config: DatasetConfig,
    train: Vec<String>,
    test: Vec<String>,
}

/// Writes `index.json`, one tensor file per sample and a `.label` sidecar
/// holding the symbol name.
pub fn save_dataset(ds: &Dataset, cfg: &DatasetConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = DatasetIndex {
        config: cfg.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, items, names) in [("train", &ds.train, &mut index.train), ("test", &ds.test, &mut index.test)] {
        for (i, s) in items.iter().enumerate() {
            let name = format!("{split}_{i:05}");
            save_tensor(&s.tensor, &dir.join(format!("{name}.ten")))?;
            let symbol = Symbol::from_class_index(s.label).ok_or_else(|| Error::Dataset(format!("label {} out of range", s.label)))?;
            let path = dir.join(format!("{name}.label"));
            fs::write(&path, format!("{}\n", symbol.name())).map_err(|e| Error::io(&path, e))?;
            names.push(name);
        }
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn load_sample(dir: &Path, name: &str) -> Result<Labeled> {
    let tensor: SampleTensor = load_tensor(&dir.join(format!("{name}.ten")))?;
    let path = dir.join(format!("{name}.label"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let label = Symbol::CLASSES
        .iter()
        .find(|s| s.name() == text.trim())
        .ok_or_else(|| Error::Dataset(format!("{}: unknown label {:?}", path.display(), text.trim())))?
        .class_index();
    Ok(Labeled { tensor, label })
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetConfig)> {
    let path = dir.join("index.json");
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let load = |names: &[String]| names.iter().map(|n| load_sample(dir, n)).collect::<Result<Vec<_>>>();
    Ok((
        Dataset {
            train: load(&index.train)?,
            test: load(&index.test)?,
        },
        index.config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            samples_per_class: 4,
            time_steps: 4,
            input_size: 64,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_is_three_to_one_and_deterministic() {
        let cfg = small();
        let a = build_dataset(&cfg, Exec::Sequential).unwrap();
        assert_eq!(a.train.len(), 15);
        assert_eq!(a.test.len(), 5);
        let b = build_dataset(&cfg, Exec::Parallel).unwrap();
        assert!(a.train.iter().zip(&b.train).all(|(x, y)| x == y));
        for class in 0..5 {
            assert_eq!(a.test.iter().filter(|s| s.label == class).count(), 1);
        }
    }

    #[test]
    fn motion_samples_carry_events() {
        let s = build_sample(&small(), 0, 0).unwrap();
        assert!(s.tensor.sum() > 100.0);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small();
        let ds = build_dataset(&cfg, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, &cfg, dir.path()).unwrap();
        let (back, cfg2) = load_dataset(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test, ds.test);
    }
}
