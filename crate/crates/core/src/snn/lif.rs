use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    /// Membrane time constant in units of the simulation step.
    pub tau_m: f32,
    pub threshold: f32,
    pub resistance: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau_m: 2.0,
            threshold: 1.0,
            resistance: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0) || !(self.threshold > 0.0) || !self.resistance.is_finite() {
            return Err(Error::invalid("LIF needs tau_m > 0 and threshold > 0"));
        }
        Ok(())
    }

    pub fn decay(&self) -> f32 {
        (-1.0 / self.tau_m).exp()
    }
}

/// Forward spike nonlinearity. Both variants share the arctan surrogate
/// derivative; `Smooth` also uses its integral in the forward pass so the
/// network becomes differentiable end to end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpikeFn {
    Heaviside { alpha: f32 },
    Smooth { alpha: f32 },
}

impl Default for SpikeFn {
    fn default() -> Self {
        SpikeFn::Heaviside { alpha: 2.0 }
    }
}

impl SpikeFn {
    pub fn alpha(&self) -> f32 {
        match *self {
            SpikeFn::Heaviside { alpha } | SpikeFn::Smooth { alpha } => alpha,
        }
    }

    /// Spike for membrane distance `u = H_pre - H_th`.
    #[inline]
    pub fn fire(&self, u: f32) -> f32 {
        match *self {
            SpikeFn::Heaviside { .. } => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Smooth { alpha } => (std::f32::consts::FRAC_PI_2 * alpha * u).atan() / std::f32::consts::PI + 0.5,
        }
    }

    #[inline]
    pub fn grad(&self, u: f32) -> f32 {
        surrogate_grad(self.alpha(), u)
    }
}

/// `alpha / (2 (1 + (pi alpha u / 2)^2))`.
#[inline]
pub fn surrogate_grad(alpha: f32, u: f32) -> f32 {
    let a = std::f32::consts::FRAC_PI_2 * alpha * u;
    alpha / (2.0 * (1.0 + a * a))
}

/// One Heaviside LIF update with hard reset to zero. Returns `(H', S)`.
pub fn lif_step(h: f32, input: f32, p: &LifParams) -> (f32, f32) {
    let pre = h * p.decay() + p.resistance * input;
    if pre >= p.threshold {
        (0.0, 1.0)
    } else {
        (pre, 0.0)
    }
}
