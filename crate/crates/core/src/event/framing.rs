use serde::{Deserialize, Serialize};

use super::{EventStream, Resolution};
use crate::error::{Error, Result};

/// Per-window event counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_index: usize,
    pub pos: u64,
    pub neg: u64,
    pub total: u64,
}

impl FrameStats {
    pub fn new(frame_index: usize, pos: u64, neg: u64) -> Self {
        FrameStats {
            frame_index,
            pos,
            neg,
            total: pos + neg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSeries {
    pub window_ms: u32,
    /// Timestamp of frame 0's left edge.
    pub origin_us: u64,
    pub frames: Vec<FrameStats>,
}

impl FrameSeries {
    pub fn empty(window_ms: u32) -> Self {
        FrameSeries {
            window_ms,
            origin_us: 0,
            frames: Vec::new(),
        }
    }

    /// Builds a series from raw (pos, neg) counts, indexing frames from 0.
    pub fn from_counts(window_ms: u32, counts: &[(u64, u64)]) -> Self {
        FrameSeries {
            window_ms,
            origin_us: 0,
            frames: counts.iter().enumerate().map(|(i, &(p, n))| FrameStats::new(i, p, n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn window_us(&self) -> u64 {
        self.window_ms as u64 * 1000
    }

    pub fn totals(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.total as f64).collect()
    }

    /// Time span `[start, end)` covered by the inclusive frame range.
    pub fn frame_span_us(&self, start_frame: usize, end_frame: usize) -> (u64, u64) {
        let w = self.window_us();
        (self.origin_us + start_frame as u64 * w, self.origin_us + (end_frame as u64 + 1) * w)
    }

    /// Frame holding timestamp `t` (saturating at 0 for earlier times).
    pub fn frame_of(&self, t: u64) -> usize {
        (t.saturating_sub(self.origin_us) / self.window_us()) as usize
    }
}

/// Counts events per fixed window. Frame `n` covers
/// `[t0 + n*w, t0 + (n+1)*w)` where `t0` is the first event timestamp; the
/// trailing partial window is kept, so `L = floor((t_last - t0) / w) + 1`.
pub fn frame_by_time(stream: &EventStream, window_ms: u32) -> Result<FrameSeries> {
    if window_ms == 0 {
        return Err(Error::invalid("frame window must be positive"));
    }
    let Some(t0) = stream.first_t() else {
        return Ok(FrameSeries::empty(window_ms));
    };
    let w = window_ms as u64 * 1000;
    let len = ((stream.last_t().unwrap() - t0) / w) as usize + 1;
    let mut counts = vec![(0u64, 0u64); len];
    for e in stream.events() {
        let n = ((e.t - t0) / w) as usize;
        match e.polarity {
            super::Polarity::Positive => counts[n].0 += 1,
            super::Polarity::Negative => counts[n].1 += 1,
        }
    }
    let mut series = FrameSeries::from_counts(window_ms, &counts);
    series.origin_us = t0;
    Ok(series)
}

/// Nearest-lower scaling of sensor coordinates onto an `H x W` grid.
pub fn map_coordinates(x: u16, y: u16, src: Resolution, dst_h: usize, dst_w: usize) -> (usize, usize) {
    let mx = x as usize * dst_w / src.width as usize;
    let my = y as usize * dst_h / src.height as usize;
    (mx.min(dst_w - 1), my.min(dst_h - 1))
}

/// Time-major count tensor `[F][2][H][W]`; channel 0 holds positive events.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SampleTensor {
    pub const CHANNELS: usize = 2;

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        SampleTensor {
            frames,
            height,
            width,
            data: vec![0.0; frames * Self::CHANNELS * height * width],
        }
    }

    pub fn frame_len(&self) -> usize {
        Self::CHANNELS * self.height * self.width
    }

    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * Self::CHANNELS + c) * self.height + y) * self.width + x
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Copy scaled so the largest entry is 1. All-zero tensors are returned unchanged.
    pub fn normalized(&self) -> SampleTensor {
        let m = self.max();
        let mut out = self.clone();
        if m > 0.0 {
            out.data.iter_mut().for_each(|v| *v /= m);
        }
        out
    }
}

/// Block sizes for splitting `n` items into `blocks` parts that differ by at
/// most one; the leading blocks take the remainder.
pub fn equal_count_blocks(n: usize, blocks: usize) -> Vec<usize> {
    let base = n / blocks;
    let rem = n % blocks;
    (0..blocks).map(|i| base + usize::from(i < rem)).collect()
}

/// Splits the events into `frames` equal-count blocks in time order and
/// accumulates each block into a 2-channel `height x width` count image.
pub fn frame_by_count(segment: &EventStream, frames: usize, height: usize, width: usize) -> Result<SampleTensor> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("frame_by_count needs F, H, W >= 1"));
    }
    let mut tensor = SampleTensor::zeros(frames, height, width);
    let src = segment.resolution();
    let mut events = segment.events().iter();
    for (f, size) in equal_count_blocks(segment.len(), frames).into_iter().enumerate() {
        for e in events.by_ref().take(size) {
            let (x, y) = map_coordinates(e.x, e.y, src, height, width);
            let i = tensor.index(f, e.polarity.channel(), y, x);
            tensor.data[i] += 1.0;
        }
    }
    Ok(tensor)
}
