//! Spiking convolutional classifier trained with surrogate gradients.
//!
//! Architecture (bias-free):
//! conv3x3(2->C) -> BN -> LIF -> maxpool(p) -> conv3x3(C->C) -> BN -> LIF ->
//! maxpool(p) -> flatten -> dropout -> fc(->hidden) -> LIF -> dropout ->
//! fc(->classes*votes) -> LIF -> voting.
//!
//! Class scores are output firing rates averaged over each vote group and
//! over time, so they lie in `[0, 1]`.

mod checkpoint;
mod cost;
mod engine;
mod lif;
mod loss;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use cost::{count_cost, count_params, energy_mj, fit_energy_model, CostReport, EnergyFit, AC_PJ, MAC_PJ};
pub use engine::{Batch, BatchOutput, Network};
pub use lif::{lif_step, surrogate_grad, LifParams, SpikeFn};
pub use loss::{loss_mse, loss_mse_grad, one_hot};
pub use params::Params;
pub use train::{argmax_class, evaluate, train, EpochStats, Labeled, TrainConfig, TrainReport, CURVES_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution kernel side; padding is `KERNEL / 2` so spatial size is kept.
pub const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    pub conv_channels: usize,
    pub pool: usize,
    pub hidden: usize,
    pub classes: usize,
    pub votes: usize,
    pub time_steps: usize,
    pub dropout: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    pub lif: LifParams,
    pub spike_fn: SpikeFn,
    /// Gradient flows only through `1 - S` in the reset branch when set.
    pub detach_reset: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_h: 128,
            input_w: 128,
            in_channels: 2,
            conv_channels: 128,
            pool: 4,
            hidden: 128,
            classes: 5,
            votes: 10,
            time_steps: 16,
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            lif: LifParams::default(),
            spike_fn: SpikeFn::default(),
            detach_reset: true,
        }
    }
}

impl NetworkSpec {
    pub fn with_input(size: usize) -> Self {
        NetworkSpec {
            input_h: size,
            input_w: size,
            ..NetworkSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("in_channels", self.in_channels),
            ("conv_channels", self.conv_channels),
            ("pool", self.pool),
            ("hidden", self.hidden),
            ("classes", self.classes),
            ("votes", self.votes),
            ("time_steps", self.time_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        let sq = self.pool * self.pool;
        if self.input_h % sq != 0 || self.input_w % sq != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be divisible by pool^2 = {sq}",
                self.input_h, self.input_w
            )));
        }
        if self.pool * self.pool > u8::MAX as usize + 1 {
            return Err(Error::invalid("pool window too large"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bad batchnorm constants"));
        }
        self.lif.validate()
    }

    pub fn outputs(&self) -> usize {
        self.classes * self.votes
    }

    pub(crate) fn geometry(&self) -> Geometry {
        let (h2, w2) = (self.input_h / self.pool, self.input_w / self.pool);
        let (h3, w3) = (h2 / self.pool, w2 / self.pool);
        Geometry {
            h1: self.input_h,
            w1: self.input_w,
            cin: self.in_channels,
            c: self.conv_channels,
            pool: self.pool,
            h2,
            w2,
            h3,
            w3,
            flat: h3 * w3 * self.conv_channels,
            hidden: self.hidden,
            out: self.outputs(),
            classes: self.classes,
            votes: self.votes,
            t: self.time_steps,
        }
    }
}

/// Derived layer sizes. Layer-1 maps are `h1 x w1`, layer-2 maps `h2 x w2`,
/// the flattened pool output has `h3 * w3 * c` entries in `[y][x][c]` order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub h1: usize,
    pub w1: usize,
    pub cin: usize,
    pub c: usize,
    pub pool: usize,
    pub h2: usize,
    pub w2: usize,
    pub h3: usize,
    pub w3: usize,
    pub flat: usize,
    pub hidden: usize,
    pub out: usize,
    pub classes: usize,
    pub votes: usize,
    pub t: usize,
}

impl Geometry {
    pub fn n1(&self) -> usize {
        self.h1 * self.w1
    }

    pub fn n2(&self) -> usize {
        self.h2 * self.w2
    }

    pub fn n3(&self) -> usize {
        self.h3 * self.w3
    }

    pub fn window(&self) -> usize {
        self.pool * self.pool
    }
}

/// Tap offset `(dy, dx)` of kernel index `k`.
#[inline]
pub(crate) fn tap_offset(k: usize) -> (isize, isize) {
    ((k / KERNEL) as isize - 1, (k % KERNEL) as isize - 1)
}
