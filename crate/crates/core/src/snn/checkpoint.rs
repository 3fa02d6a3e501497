//! Binary checkpoint container.
//!
//! ```text
//! "MOCOMNET1"
//! repeated: u32 name_len | name (UTF-8) | u32 rank | rank x u32 dims | f32 payload
//! ```
//! All integers and floats are little-endian. The architecture travels in
//! `meta.*` records so a checkpoint is self-describing.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LifParams, Network, NetworkSpec, Params, SpikeFn};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MOCOMNET1";

fn meta(spec: &NetworkSpec) -> Vec<(&'static str, Vec<f32>)> {
    let (kind, alpha) = match spec.spike_fn {
        SpikeFn::Heaviside { alpha } => (0.0, alpha),
        SpikeFn::Smooth { alpha } => (1.0, alpha),
    };
    vec![
        (
            "meta.arch",
            [
                spec.input_h,
                spec.input_w,
                spec.in_channels,
                spec.conv_channels,
                spec.pool,
                spec.hidden,
                spec.classes,
                spec.votes,
                spec.time_steps,
            ]
            .iter()
            .map(|&v| v as f32)
            .collect(),
        ),
        (
            "meta.lif",
            vec![spec.lif.tau_m, spec.lif.threshold, spec.lif.resistance, kind, alpha],
        ),
        (
            "meta.train",
            vec![spec.dropout, spec.bn_eps, spec.bn_momentum, f32::from(u8::from(spec.detach_reset))],
        ),
    ]
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, data) in meta(&net.spec) {
        write_record(&mut w, name, &[data.len()], &data)?;
    }
    for (name, dims, data) in net.params.named(&net.spec) {
        write_record(&mut w, name, &dims, data)?;
    }
    w.flush()
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Checkpoint("truncated record header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Checkpoint(e.to_string())),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn need_u32<R: Read>(r: &mut R) -> Result<u32> {
    read_u32(r)?.ok_or_else(|| Error::Checkpoint("truncated record".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    while let Some(len) = read_u32(&mut r)? {
        if len > 4096 {
            return Err(Error::Checkpoint("record name too long".into()));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated record name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = need_u32(&mut r)?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| need_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload too large")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("{name}: truncated payload")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        records
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    };
    let (_, arch) = take("meta.arch")?;
    let (_, lif) = take("meta.lif")?;
    let (_, train) = take("meta.train")?;
    if arch.len() != 9 || lif.len() != 5 || train.len() != 4 {
        return Err(Error::Checkpoint("malformed meta records".into()));
    }
    let u = |v: f32| v as usize;
    let alpha = lif[4];
    let spec = NetworkSpec {
        input_h: u(arch[0]),
        input_w: u(arch[1]),
        in_channels: u(arch[2]),
        conv_channels: u(arch[3]),
        pool: u(arch[4]),
        hidden: u(arch[5]),
        classes: u(arch[6]),
        votes: u(arch[7]),
        time_steps: u(arch[8]),
        dropout: train[0],
        bn_eps: train[1],
        bn_momentum: train[2],
        lif: LifParams {
            tau_m: lif[0],
            threshold: lif[1],
            resistance: lif[2],
        },
        spike_fn: if lif[3] == 0.0 {
            SpikeFn::Heaviside { alpha }
        } else {
            SpikeFn::Smooth { alpha }
        },
        detach_reset: train[3] != 0.0,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;

    let mut params = Params::zeros(&spec);
    let expected: Vec<(&'static str, Vec<usize>)> = params.named(&spec).into_iter().map(|(n, d, _)| (n, d)).collect();
    for (name, dims) in expected {
        let (got_dims, data) = take(name)?;
        if got_dims != dims {
            return Err(Error::Checkpoint(format!("{name}: dims {got_dims:?}, expected {dims:?}")));
        }
        *params.tensor_mut(name).expect("known tensor") = data;
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unknown record {extra}")));
    }
    Network::from_parts(spec, params)
}
