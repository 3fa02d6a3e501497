use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::EventStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFilterConfig {
    /// Chebyshev radius of the spatial neighbourhood, pixels.
    pub neighborhood: u16,
    pub time_window_us: u64,
    pub min_support: usize,
}

impl Default for NoiseFilterConfig {
    fn default() -> Self {
        NoiseFilterConfig {
            neighborhood: 1,
            time_window_us: 5000,
            min_support: 1,
        }
    }
}

impl NoiseFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_window_us == 0 || self.min_support == 0 {
            return Err(Error::invalid("noise filter needs time_window_us > 0 and min_support >= 1"));
        }
        Ok(())
    }
}

/// Keeps an event iff at least `min_support` other events fall inside its
/// spatial neighbourhood within `time_window_us` on either side. Support is
/// symmetric in time, so with `min_support = 1` every survivor's supporter
/// survives too and the filter is idempotent.
pub fn noise_filter(stream: &EventStream, cfg: &NoiseFilterConfig) -> Result<EventStream> {
    cfg.validate()?;
    let res = stream.resolution();
    let (w, h) = (res.width as usize, res.height as usize);
    let mut per_pixel: Vec<Vec<u64>> = vec![Vec::new(); w * h];
    for e in stream.events() {
        per_pixel[e.y as usize * w + e.x as usize].push(e.t);
    }
    let r = cfg.neighborhood as isize;
    let win = cfg.time_window_us;
    let kept = stream
        .events()
        .iter()
        .filter(|e| {
            let (lo, hi) = (e.t.saturating_sub(win), e.t.saturating_add(win));
            let mut support = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (e.x as isize + dx, e.y as isize + dy);
                    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                        continue;
                    }
                    let ts = &per_pixel[y as usize * w + x as usize];
                    let n = ts.partition_point(|&t| t <= hi) - ts.partition_point(|&t| t < lo);
                    support += n;
                    if dx == 0 && dy == 0 {
                        support -= 1;
                    }
                    if support >= cfg.min_support {
                        return true;
                    }
                }
            }
            false
        })
        .copied()
        .collect();
    EventStream::new(res, kept)
}
