//! Plain-text event and frame files plus the binary sample container.
//!
//! Event CSV:
//! ```text
//! # resolution 128x128
//! t_us,x,y,p
//! 0,1,2,1
//! ```
//! The resolution comment is optional on input; when absent the caller's
//! default applies.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventStream, FrameSeries, FrameStats, Polarity, Resolution, SampleTensor};
use crate::error::{Error, Result};

pub const EVENT_HEADER: &str = "t_us,x,y,p";
pub const FRAME_HEADER: &str = "frame_index,pos,neg,total";
pub const TENSOR_MAGIC: &[u8; 8] = b"MOCOMTEN";

pub fn write_events<W: Write>(stream: &EventStream, mut w: W) -> std::io::Result<()> {
    let r = stream.resolution();
    writeln!(w, "# resolution {}x{}", r.width, r.height)?;
    writeln!(w, "{EVENT_HEADER}")?;
    for e in stream.events() {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.polarity.as_bit())?;
    }
    w.flush()
}

pub fn save_events(stream: &EventStream, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_events(stream, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_events(path: &Path, default_resolution: Resolution) -> Result<EventStream> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(BufReader::new(f), path, default_resolution)
}

pub fn read_events<R: BufRead>(reader: R, path: &Path, default_resolution: Resolution) -> Result<EventStream> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut resolution = default_resolution;
    let mut header_seen = false;
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(dims) = comment.trim().strip_prefix("resolution") {
                resolution = parse_resolution(dims.trim()).ok_or_else(|| parse_err(lineno, format!("bad resolution comment `{line}`")))?;
            }
            continue;
        }
        if !header_seen {
            if line != EVENT_HEADER {
                return Err(parse_err(lineno, format!("expected header `{EVENT_HEADER}`, found `{line}`")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.trim()
                .parse::<u64>()
                .map_err(|_| parse_err(lineno, format!("invalid {what} `{s}`")))
        };
        let t = num(fields[0], "timestamp")?;
        let x = num(fields[1], "x")?;
        let y = num(fields[2], "y")?;
        let p = num(fields[3], "polarity")?;
        let polarity = u8::try_from(p)
            .ok()
            .and_then(Polarity::from_bit)
            .ok_or_else(|| parse_err(lineno, format!("polarity must be 0 or 1, found {p}")))?;
        if x >= resolution.width as u64 || y >= resolution.height as u64 {
            return Err(Error::OutOfBounds {
                index: events.len(),
                x: x.min(u32::MAX as u64) as u32,
                y: y.min(u32::MAX as u64) as u32,
                width: resolution.width as u32,
                height: resolution.height as u32,
            });
        }
        events.push(Event::new(t, x as u16, y as u16, polarity));
    }
    if !header_seen {
        return Err(parse_err(0, format!("missing header `{EVENT_HEADER}`")));
    }
    EventStream::new(resolution, events)
}

fn parse_resolution(s: &str) -> Option<Resolution> {
    let (w, h) = s.split_once('x')?;
    let w: u16 = w.trim().parse().ok()?;
    let h: u16 = h.trim().parse().ok()?;
    (w > 0 && h > 0).then(|| Resolution::new(w, h))
}

pub fn write_frames<W: Write>(frames: &FrameSeries, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FRAME_HEADER}")?;
    for f in &frames.frames {
        writeln!(w, "{},{},{},{}", f.frame_index, f.pos, f.neg, f.total)?;
    }
    w.flush()
}

pub fn save_frames(frames: &FrameSeries, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_frames(frames, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Reads a frames CSV. Indices must be contiguous from 0 and `total` must
/// equal `pos + neg`.
pub fn load_frames(path: &Path, window_ms: u32) -> Result<FrameSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == FRAME_HEADER => {}
        Some((i, h)) => return Err(parse_err(i + 1, format!("expected header `{FRAME_HEADER}`, found `{h}`"))),
        None => return Err(parse_err(0, "empty frames file".into())),
    }
    let mut frames = Vec::new();
    for (i, line) in lines {
        let vals: Vec<u64> = line
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(i + 1, format!("malformed frame row `{line}`")))?;
        if vals.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, found {}", vals.len())));
        }
        if vals[0] as usize != frames.len() {
            return Err(parse_err(i + 1, format!("frame index {} out of sequence", vals[0])));
        }
        if vals[3] != vals[1] + vals[2] {
            return Err(parse_err(i + 1, "total != pos + neg".into()));
        }
        frames.push(FrameStats::new(frames.len(), vals[1], vals[2]));
    }
    Ok(FrameSeries {
        window_ms,
        origin_us: 0,
        frames,
    })
}

pub fn write_tensor<W: Write>(t: &SampleTensor, mut w: W) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    for d in [t.frames, SampleTensor::CHANNELS, t.height, t.width] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_tensor<R: Read>(mut r: R, path: &Path) -> Result<SampleTensor> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad tensor magic"));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    if dims[1] != SampleTensor::CHANNELS {
        return Err(bad("tensor must have 2 channels"));
    }
    let n = dims.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(bad("tensor payload length does not match header"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(SampleTensor {
        frames: dims[0],
        height: dims[2],
        width: dims[3],
        data,
    })
}

pub fn save_tensor(t: &SampleTensor, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(t, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<SampleTensor> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<EventStream> {
        read_events(text.as_bytes(), Path::new("mem.csv"), Resolution::new(128, 128))
    }

    #[test]
    fn reads_and_sorts() {
        let s = read("t_us,x,y,p\n0,1,2,1\n5,0,0,0\n").unwrap();
        assert_eq!(s.len(), 2);
        let s = read("t_us,x,y,p\n9,1,2,1\n5,0,0,0\n").unwrap();
        assert_eq!(s.events()[0].t, 5);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(read("t_us,x,y,p\n").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match read("t_us,x,y,p\n0,1,2,1\n3,abc,2,1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read("t_us,x,y,p\n0,1,2,2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read("t_us,x,y,p\n0,1,2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn out_of_resolution_rejected() {
        assert!(matches!(
            read("# resolution 4x4\nt_us,x,y,p\n0,4,0,1\n"),
            Err(Error::OutOfBounds { x: 4, width: 4, .. })
        ));
    }

    #[test]
    fn missing_header_rejected() {
        assert!(read("0,1,2,1\n").is_err());
    }

    #[test]
    fn resolution_comment_round_trip() {
        let s = EventStream::new(Resolution::new(346, 260), vec![Event::new(3, 345, 259, Polarity::Negative)]).unwrap();
        let mut buf = Vec::new();
        write_events(&s, &mut buf).unwrap();
        let back = read_events(buf.as_slice(), Path::new("m"), Resolution::default()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn tensor_round_trip() {
        let mut t = SampleTensor::zeros(2, 3, 4);
        t.data[7] = 3.0;
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..8], TENSOR_MAGIC);
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 8 + 16 + 4 * 48);
        assert_eq!(read_tensor(buf.as_slice(), Path::new("m")).unwrap(), t);
        assert!(read_tensor(&buf[..buf.len() - 1], Path::new("m")).is_err());
    }
}
