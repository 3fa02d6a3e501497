use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, TAPS};
use crate::error::{Error, Result};
use crate::event::SampleTensor;

/// Energy per accumulate, picojoules.
pub const AC_PJ: f64 = 0.9;
/// Energy per multiply-accumulate, picojoules.
pub const MAC_PJ: f64 = 4.6;

/// Per-inference operation counts and energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    /// Spike-driven accumulates, mean over the probe set.
    pub acs: f64,
    /// Analog-input convolution and batchnorm multiplies.
    pub macs: f64,
    pub energy_mj: f64,
    pub probe_samples: usize,
}

/// `(AC_PJ * acs + MAC_PJ * macs) * 1e-12` joules, expressed in millijoules.
pub fn energy_mj(acs: f64, macs: f64) -> f64 {
    (AC_PJ * 1e-12 * acs + MAC_PJ * 1e-12 * macs) * 1e3
}

pub fn count_params(spec: &NetworkSpec) -> u64 {
    let g = spec.geometry();
    let (cin, c) = (g.cin as u64, g.c as u64);
    let taps = TAPS as u64;
    cin * taps * c + c * taps * c + 2 * 2 * c + g.flat as u64 * g.hidden as u64 + g.hidden as u64 * g.out as u64
}

fn structural_macs(spec: &NetworkSpec) -> f64 {
    let g = spec.geometry();
    let conv1 = g.n1() * g.c * g.cin * TAPS;
    let bn = (g.n1() + g.n2()) * g.c;
    ((conv1 + bn) * g.t) as f64
}

pub fn count_cost(net: &Network, probe: &[SampleTensor]) -> Result<CostReport> {
    if probe.is_empty() {
        return Err(Error::invalid("cost probe set is empty"));
    }
    let mut acs = 0.0;
    for x in probe {
        let a = net.activity(x)?;
        acs += a.conv2 + a.fc1 + a.fc2;
    }
    let acs = acs / probe.len() as f64;
    let macs = structural_macs(&net.spec);
    Ok(CostReport {
        params: count_params(&net.spec),
        acs,
        macs,
        energy_mj: energy_mj(acs, macs),
        probe_samples: probe.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyFit {
    pub ac_pj: f64,
    pub mac_pj: f64,
    /// Largest `|fit - energy| / energy` over the rows.
    pub max_rel_residual: f64,
}

/// Least-squares fit of `energy_mj = a * acs_g + b * macs_g` without
/// intercept. With counts in units of 1e9 and energy in mJ, `a` and `b` come
/// out in picojoules.
pub fn fit_energy_model(rows: &[(f64, f64, f64)]) -> Result<EnergyFit> {
    let (mut sxx, mut sxy, mut syy, mut sxe, mut sye) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, e) in rows {
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxe += x * e;
        sye += y * e;
    }
    let det = sxx * syy - sxy * sxy;
    if rows.len() < 2 || det.abs() <= 1e-12 * (sxx * syy).max(f64::MIN_POSITIVE) {
        return Err(Error::invalid("energy fit needs two independent rows"));
    }
    let a = (sxe * syy - sye * sxy) / det;
    let b = (sye * sxx - sxe * sxy) / det;
    let max_rel_residual = rows.iter().map(|&(x, y, e)| ((a * x + b * y - e) / e).abs()).fold(0.0, f64::max);
    Ok(EnergyFit {
        ac_pj: a,
        mac_pj: b,
        max_rel_residual,
    })
}
