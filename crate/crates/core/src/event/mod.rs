//! Event data model: polarity events, sorted streams and the two framings
//! used downstream (fixed time windows for segmentation, equal event counts
//! for recognition).

mod framing;
pub mod io;

pub use framing::{frame_by_count, frame_by_time, map_coordinates, FrameSeries, FrameStats, SampleTensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window length used for segmentation framing.
pub const DEFAULT_WINDOW_MS: u32 = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// File encoding: 1 = positive, 0 = negative.
    pub fn as_bit(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::Positive),
            0 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub(crate) fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Event { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u16,
    pub height: u16,
}

impl Resolution {
    pub const fn new(width: u16, height: u16) -> Self {
        Resolution { width, height }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution::new(128, 128)
    }
}

/// Events sorted by timestamp; equal timestamps keep their insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    resolution: Resolution,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and stable-sorts by timestamp.
    pub fn new(resolution: Resolution, mut events: Vec<Event>) -> Result<Self> {
        if let Some((index, e)) = events.iter().enumerate().find(|(_, e)| !resolution.contains(e.x, e.y)) {
            return Err(Error::OutOfBounds {
                index,
                x: e.x as u32,
                y: e.y as u32,
                width: resolution.width as u32,
                height: resolution.height as u32,
            });
        }
        if !is_sorted(&events) {
            events.sort_by_key(|e| e.t);
        }
        Ok(EventStream { resolution, events })
    }

    pub fn empty(resolution: Resolution) -> Self {
        EventStream {
            resolution,
            events: Vec::new(),
        }
    }

    /// Caller guarantees sortedness and bounds.
    pub(crate) fn from_sorted(resolution: Resolution, events: Vec<Event>) -> Self {
        debug_assert!(is_sorted(&events));
        debug_assert!(events.iter().all(|e| resolution.contains(e.x, e.y)));
        EventStream { resolution, events }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    /// Events with `start <= t < end`, as a new stream.
    pub fn slice_time(&self, start: u64, end: u64) -> EventStream {
        let lo = self.events.partition_point(|e| e.t < start);
        let hi = self.events.partition_point(|e| e.t < end);
        EventStream::from_sorted(self.resolution, self.events[lo..hi.max(lo)].to_vec())
    }

    /// Merges two streams with equal resolution. On equal timestamps events
    /// of `self` come first.
    pub fn merge(&self, other: &EventStream) -> Result<EventStream> {
        if self.resolution != other.resolution {
            return Err(Error::invalid(format!(
                "cannot merge {}x{} with {}x{}",
                self.resolution.width, self.resolution.height, other.resolution.width, other.resolution.height
            )));
        }
        let (a, b) = (&self.events, &other.events);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            if b[j].t < a[i].t {
                out.push(b[j]);
                j += 1;
            } else {
                out.push(a[i]);
                i += 1;
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Ok(EventStream::from_sorted(self.resolution, out))
    }

    pub fn polarity_counts(&self) -> (u64, u64) {
        let pos = self.events.iter().filter(|e| e.polarity == Polarity::Positive).count() as u64;
        (pos, self.events.len() as u64 - pos)
    }
}

fn is_sorted(events: &[Event]) -> bool {
    events.windows(2).all(|w| w[0].t <= w[1].t)
}
