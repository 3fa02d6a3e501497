//! Random inputs, network tweaks and the finite-difference gradient check
//! shared by the engine tests and the acceptance run.

use mocom::event::SampleTensor;
use mocom::par::Exec;
use mocom::snn::{Batch, Network, NetworkSpec, SpikeFn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::reference::{self, RefParams};

pub fn random_tensor(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, density: f64) -> SampleTensor {
    let mut x = SampleTensor::zeros(t, h, w);
    for v in x.data.iter_mut() {
        if rng.gen_bool(density) {
            *v = rng.gen_range(1..5) as f32;
        }
    }
    x
}

/// Tensor whose events cluster in one corner so that most pool windows stay
/// inactive.
pub fn clustered_tensor(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, events: usize) -> SampleTensor {
    let mut x = SampleTensor::zeros(t, h, w);
    for _ in 0..events {
        let (f, c) = (rng.gen_range(0..t), rng.gen_range(0..2));
        let (y, xx) = (rng.gen_range(0..h / 2), rng.gen_range(0..w / 3));
        let i = x.index(f, c, y, xx);
        x.data[i] += 1.0;
    }
    x
}

pub fn jitter_bn(net: &mut Network, rng: &mut ChaCha8Rng) {
    let p = &mut net.params;
    for g in p.bn1_gamma.iter_mut().chain(p.bn2_gamma.iter_mut()) {
        *g = rng.gen_range(0.8..1.6);
    }
    for b in p.bn1_beta.iter_mut().chain(p.bn2_beta.iter_mut()) {
        *b = rng.gen_range(-0.2..0.4);
    }
}

pub fn scale_fc(net: &mut Network, s: f32) {
    net.params.fc1.iter_mut().for_each(|v| *v *= s);
    net.params.fc2.iter_mut().for_each(|v| *v *= s);
}

pub fn smooth_spec(base: NetworkSpec) -> NetworkSpec {
    NetworkSpec {
        spike_fn: SpikeFn::Smooth { alpha: 2.0 },
        detach_reset: false,
        ..base
    }
}

pub fn micro_spec() -> NetworkSpec {
    smooth_spec(NetworkSpec {
        input_h: 4,
        input_w: 4,
        conv_channels: 1,
        pool: 2,
        hidden: 3,
        votes: 2,
        time_steps: 2,
        dropout: 0.0,
        ..NetworkSpec::default()
    })
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct FdResult {
    pub worst: f64,
    /// Tensor and index of the worst entry.
    pub worst_at: (usize, usize),
    pub checked: usize,
    /// Relative gap between the engine loss and the reference loss.
    pub loss_gap: f64,
}

/// Central differences of the dense reference loss against the engine's
/// gradients, over the selected (tensor, index) pairs.
pub fn check_gradients(
    net: &Network,
    xs: &[SampleTensor],
    labels: &[usize],
    seed: Option<u64>,
    pick: &dyn Fn(usize, usize) -> bool,
) -> FdResult {
    let batch = Batch {
        inputs: xs.iter().collect(),
        labels: labels.to_vec(),
        dropout_seed: seed,
    };
    let out = net.run_batch(&batch, true, Exec::Sequential).unwrap();
    let grads = out.grads.unwrap();
    let masks: Option<Vec<_>> = seed.map(|s| (0..xs.len()).map(|i| net.dropout_masks(s, i)).collect());
    let inputs: Vec<&SampleTensor> = xs.iter().collect();
    let base = RefParams::from(&net.params);
    let ref_loss = reference::batch_loss(net, &base, &inputs, labels, masks.as_deref());
    let loss_gap = rel_err(ref_loss, out.loss, 1e-6);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0);
    let mut checked = 0;
    for (ti, g) in grads.trainable().iter().enumerate() {
        for i in 0..g.len() {
            if !pick(ti, i) {
                continue;
            }
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.tensors[ti][i] += h;
            minus.tensors[ti][i] -= h;
            let fd = (reference::batch_loss(net, &plus, &inputs, labels, masks.as_deref())
                - reference::batch_loss(net, &minus, &inputs, labels, masks.as_deref()))
                / (2.0 * h);
            let e = rel_err(g[i] as f64, fd, 1e-6);
            if e > worst {
                worst = e;
                worst_at = (ti, i);
            }
            checked += 1;
        }
    }
    FdResult {
        worst,
        worst_at,
        checked,
        loss_gap,
    }
}
