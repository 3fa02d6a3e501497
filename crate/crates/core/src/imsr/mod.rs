//! Streaming decoder: filter, frame, segment, classify, assemble, decode.

mod filter;

pub use filter::{noise_filter, NoiseFilterConfig};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_payload, render, CodecError, Message, Symbol};
use crate::error::{Error, Result};
use crate::event::{frame_by_count, frame_by_time, Event, EventStream, FrameSeries, FrameStats, Resolution, DEFAULT_WINDOW_MS};
use crate::par::Exec;
use crate::segmentation::{segment, MotionSegment, SegConfig};
use crate::snn::{argmax_class, Network};

/// Maps the events of one segment to a symbol.
pub trait SegmentClassifier: Sync {
    fn classify(&self, events: &EventStream) -> Result<Symbol>;
}

impl SegmentClassifier for Network {
    fn classify(&self, events: &EventStream) -> Result<Symbol> {
        if self.spec.classes != Symbol::CLASSES.len() {
            return Err(Error::Shape(format!(
                "decoder needs a {}-class network, found {}",
                Symbol::CLASSES.len(),
                self.spec.classes
            )));
        }
        let x = frame_by_count(events, self.spec.time_steps, self.spec.input_h, self.spec.input_w)?;
        let scores = self.forward(&x)?;
        Ok(Symbol::from_class_index(argmax_class(&scores)).expect("class index in range"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub seg: SegConfig,
    pub filter: NoiseFilterConfig,
    pub window_ms: u32,
    /// Segmentation runs once more than this many frames are unconsumed.
    pub trigger_frames: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            seg: SegConfig::default(),
            filter: NoiseFilterConfig::default(),
            window_ms: DEFAULT_WINDOW_MS,
            trigger_frames: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStatus {
    Collecting,
    Decoded,
    Failed,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    cfg: DecoderConfig,
    frames: FrameSeries,
    events: Vec<Event>,
    resolution: Resolution,
    consumed_until: usize,
    c_seq: Vec<Symbol>,
    segments: Vec<MotionSegment>,
    status: DecodeStatus,
}

impl DecoderState {
    /// `origin_us` is the left edge of frame 0.
    pub fn new(cfg: DecoderConfig, resolution: Resolution, origin_us: u64) -> Result<Self> {
        cfg.seg.validate()?;
        cfg.filter.validate()?;
        if cfg.window_ms == 0 {
            return Err(Error::invalid("frame window must be positive"));
        }
        let mut frames = FrameSeries::empty(cfg.window_ms);
        frames.origin_us = origin_us;
        Ok(DecoderState {
            cfg,
            frames,
            events: Vec::new(),
            resolution,
            consumed_until: 0,
            c_seq: Vec::new(),
            segments: Vec::new(),
            status: DecodeStatus::Collecting,
        })
    }

    pub fn c_seq(&self) -> &[Symbol] {
        &self.c_seq
    }

    pub fn status(&self) -> DecodeStatus {
        self.status
    }

    pub fn consumed_until(&self) -> usize {
        self.consumed_until
    }

    /// Classified segments, in order, with their labels.
    pub fn segments(&self) -> &[MotionSegment] {
        &self.segments
    }

    pub fn buffered_frames(&self) -> usize {
        self.frames.len()
    }

    /// Appends a batch of frames and the events inside them, then segments
    /// and classifies if enough unconsumed frames have accumulated.
    pub fn step<C: SegmentClassifier>(&mut self, new_frames: &[FrameStats], new_events: &[Event], model: &C, exec: Exec) -> Result<()> {
        if self.status != DecodeStatus::Collecting {
            return Ok(());
        }
        for f in new_frames {
            if f.frame_index != self.frames.len() || f.total != f.pos + f.neg {
                return Err(Error::invalid(format!(
                    "frame {} out of sequence or inconsistent (expected index {})",
                    f.frame_index,
                    self.frames.len()
                )));
            }
            self.frames.frames.push(*f);
        }
        let (_, buffer_end) = self.frames.frame_span_us(0, self.frames.len().saturating_sub(1));
        if let Some(e) = new_events
            .iter()
            .find(|e| e.t < self.frames.origin_us || (!self.frames.is_empty() && e.t >= buffer_end))
        {
            return Err(Error::invalid(format!("event at {} us lies outside the buffered frames", e.t)));
        }
        if let (Some(last), Some(first)) = (self.events.last(), new_events.first()) {
            if first.t < last.t {
                return Err(Error::invalid("events must arrive in time order"));
            }
        }
        self.events.extend_from_slice(new_events);

        if self.frames.len() - self.consumed_until > self.cfg.trigger_frames {
            self.process(model, exec, true)?;
        }
        Ok(())
    }

    /// Classifies every remaining segment once the input is exhausted.
    pub fn flush<C: SegmentClassifier>(&mut self, model: &C, exec: Exec) -> Result<()> {
        if self.status == DecodeStatus::Collecting {
            self.process(model, exec, false)?;
        }
        Ok(())
    }

    fn process<C: SegmentClassifier>(&mut self, model: &C, exec: Exec, defer_tail: bool) -> Result<()> {
        let len = self.frames.len();
        let min_valid = self.cfg.seg.min_valid;
        let ready: Vec<MotionSegment> = segment(&self.frames, &self.cfg.seg)
            .into_iter()
            .filter(|s| s.start_frame >= self.consumed_until)
            .filter(|s| !defer_tail || len - 1 - s.end_frame >= min_valid)
            .collect();
        if ready.is_empty() {
            return Ok(());
        }
        let stream = EventStream::new(self.resolution, self.events.clone())?;
        let labels = exec.map(&ready, |s| {
            let (a, b) = self.frames.frame_span_us(s.start_frame, s.end_frame);
            model.classify(&stream.slice_time(a, b))
        });
        for (seg, label) in ready.iter().zip(labels) {
            let label = label?;
            self.segments.push(MotionSegment::new(seg.start_frame, seg.end_frame, Some(label)));
            self.consumed_until = seg.end_frame + 1;
            if label != Symbol::Background {
                self.c_seq.push(label);
                if label == Symbol::End {
                    self.status = DecodeStatus::Decoded;
                    break;
                }
            }
        }
        Ok(())
    }

    /// Decodes the collected sequence. Marks the state failed on any codec
    /// error, which signals that a retransmission is needed.
    pub fn finalize(&mut self) -> std::result::Result<Message, CodecError> {
        if self.status != DecodeStatus::Decoded {
            self.status = DecodeStatus::Failed;
            return Err(CodecError::MissingEnd);
        }
        decode_payload(&self.c_seq).inspect_err(|_| self.status = DecodeStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub c_seq: String,
    pub message: Option<Message>,
    pub status: DecodeStatus,
    pub segments: Vec<MotionSegment>,
}

impl DecodeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the full decoder over a recorded stream. `batch_frames = None`
/// hands every frame over in a single step (offline mode).
pub fn decode_stream<C: SegmentClassifier>(
    events: &EventStream,
    cfg: &DecoderConfig,
    model: &C,
    batch_frames: Option<usize>,
    exec: Exec,
) -> Result<DecodeReport> {
    if batch_frames == Some(0) {
        return Err(Error::invalid("batch size must be positive"));
    }
    let filtered = noise_filter(events, &cfg.filter)?;
    let frames = frame_by_time(&filtered, cfg.window_ms)?;
    let mut state = DecoderState::new(*cfg, events.resolution(), frames.origin_us)?;
    let batch = batch_frames.unwrap_or(frames.len().max(1));
    let evs = filtered.events();
    let mut cursor = 0;
    for chunk in frames.frames.chunks(batch) {
        let last = chunk.last().expect("chunks are non-empty").frame_index;
        let (_, end) = frames.frame_span_us(0, last);
        let n = evs[cursor..].partition_point(|e| e.t < end);
        state.step(chunk, &evs[cursor..cursor + n], model, exec)?;
        cursor += n;
        if state.status() != DecodeStatus::Collecting {
            break;
        }
    }
    state.flush(model, exec)?;
    let message = state.finalize().ok();
    Ok(DecodeReport {
        c_seq: render(state.c_seq()),
        message,
        status: state.status(),
        segments: state.segments().to_vec(),
    })
}
