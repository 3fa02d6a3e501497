//! Sparse-exact forward and backward passes.
//!
//! Event tensors are mostly empty, so layer 1 is evaluated only inside the
//! pool windows that contain a position whose receptive field ever sees a
//! nonzero input ("active" windows). Every other layer-1 neuron receives the
//! same batchnorm shift at every step and therefore follows one shared
//! per-channel trajectory, simulated once. The layer-2 convolution of such a
//! map splits into the convolution of the constant background plus sparse
//! corrections at the active windows. Results are identical to the dense
//! computation up to float summation order.

use matrixmultiply::sgemm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_mse, loss_mse_grad, one_hot};
use super::{tap_offset, Geometry, NetworkSpec, Params, SpikeFn, TAPS};
use crate::error::{Error, Result};
use crate::event::SampleTensor;
use crate::par::Exec;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Params,
}

/// A training micro-batch. Inputs are raw count tensors; normalisation by the
/// per-sample maximum happens inside the network.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a SampleTensor>,
    pub labels: Vec<usize>,
    /// Seed for the dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub scores: Vec<Vec<f32>>,
    pub loss: f64,
    /// Gradient of the batch loss, present when requested.
    pub grads: Option<Params>,
    /// Per-layer batch mean and biased variance used for normalisation.
    pub bn_mean: [Vec<f32>; 2],
    pub bn_var: [Vec<f32>; 2],
    pub bn_count: [usize; 2],
}

/// Spike-driven accumulate counts of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Activity {
    pub conv2: f64,
    pub fc1: f64,
    pub fc2: f64,
}

#[derive(Clone, Copy)]
struct Lif {
    decay: f32,
    threshold: f32,
    r: f32,
    spike: SpikeFn,
    detach: bool,
}

impl Lif {
    fn new(spec: &NetworkSpec) -> Self {
        Lif {
            decay: spec.lif.decay(),
            threshold: spec.lif.threshold,
            r: spec.lif.resistance,
            spike: spec.spike_fn,
            detach: spec.detach_reset,
        }
    }

    /// Advances `h` by one step; returns `(H_pre, S)`.
    #[inline(always)]
    fn step(&self, h: &mut f32, input: f32) -> (f32, f32) {
        let pre = self.decay * *h + self.r * input;
        let s = self.spike.fire(pre - self.threshold);
        *h = pre * (1.0 - s);
        (pre, s)
    }

    /// Reverse step: takes `H_pre`, the upstream spike gradient and the
    /// carried `dL/dH`, returns `dL/dI` and updates the carry.
    #[inline(always)]
    fn back(&self, pre: f32, ds: f32, carry: &mut f32) -> f32 {
        let u = pre - self.threshold;
        let s = self.spike.fire(u);
        let sg = self.spike.grad(u);
        let mut through = 1.0 - s;
        if !self.detach {
            through -= pre * sg;
        }
        let dpre = ds * sg + *carry * through;
        *carry = self.decay * dpre;
        self.r * dpre
    }

    /// Row update with a batchnorm input `z * scale + shift`; stores `H_pre`
    /// and the spikes.
    fn step_bn_row(&self, h: &mut [f32], z: &[f32], bn: &BnAffine, pre: &mut [f32], s: &mut [f32]) {
        match self.spike {
            SpikeFn::Heaviside { .. } => self.step_bn_row_with(heaviside, h, z, bn, pre, s),
            SpikeFn::Smooth { alpha } => self.step_bn_row_with(|u| smooth(alpha, u), h, z, bn, pre, s),
        }
    }

    #[inline(always)]
    fn step_bn_row_with<F: Fn(f32) -> f32>(&self, fire: F, h: &mut [f32], z: &[f32], bn: &BnAffine, pre: &mut [f32], s: &mut [f32]) {
        let rows = h
            .iter_mut()
            .zip(z)
            .zip(&bn.scale)
            .zip(&bn.shift)
            .zip(pre.iter_mut())
            .zip(s.iter_mut());
        for (((((h, &z), &sc), &sh), p), s) in rows {
            let v = self.decay * *h + self.r * (z * sc + sh);
            let sp = fire(v - self.threshold);
            *h = v * (1.0 - sp);
            *p = v;
            *s = sp;
        }
    }

    /// Reverse row step feeding a batchnorm. `pd` holds `H_pre` on entry and
    /// `dL/dy` on exit; the batchnorm sums over `dy` and `dy * xhat` are
    /// accumulated into `sums`.
    #[allow(clippy::too_many_arguments)]
    fn back_bn_row(&self, pd: &mut [f32], ds: &[f32], carry: &mut [f32], z: &[f32], bn: &BnAffine, sums: &mut ChannelSums) {
        match self.spike {
            SpikeFn::Heaviside { alpha } => self.back_bn_row_with(heaviside, alpha, pd, ds, carry, z, bn, sums),
            SpikeFn::Smooth { alpha } => self.back_bn_row_with(|u| smooth(alpha, u), alpha, pd, ds, carry, z, bn, sums),
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn back_bn_row_with<F: Fn(f32) -> f32>(
        &self,
        fire: F,
        alpha: f32,
        pd: &mut [f32],
        ds: &[f32],
        carry: &mut [f32],
        z: &[f32],
        bn: &BnAffine,
        sums: &mut ChannelSums,
    ) {
        let keep = if self.detach { 0.0 } else { 1.0 };
        let rows = pd
            .iter_mut()
            .zip(ds)
            .zip(carry.iter_mut())
            .zip(z)
            .zip(bn.mean.iter().zip(&bn.invstd))
            .zip(sums.a.iter_mut().zip(sums.b.iter_mut()));
        for (((((pd, &ds), carry), &z), (&m, &is)), (sa, sb)) in rows {
            let pre = *pd;
            let u = pre - self.threshold;
            let sg = super::surrogate_grad(alpha, u);
            let through = 1.0 - fire(u) - keep * pre * sg;
            let dpre = ds * sg + *carry * through;
            *carry = self.decay * dpre;
            let dy = self.r * dpre;
            *pd = dy;
            *sa += dy as f64;
            *sb += (dy * (z - m) * is) as f64;
        }
    }
}

#[inline(always)]
fn heaviside(u: f32) -> f32 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline(always)]
fn smooth(alpha: f32, u: f32) -> f32 {
    SpikeFn::Smooth { alpha }.fire(u)
}

#[derive(Debug, Clone)]
struct BnAffine {
    mean: Vec<f32>,
    invstd: Vec<f32>,
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl BnAffine {
    fn new(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Self {
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let scale: Vec<f32> = gamma.iter().zip(&invstd).map(|(g, i)| g * i).collect();
        let shift = beta.iter().zip(&scale).zip(mean).map(|((b, s), m)| b - s * m).collect();
        BnAffine {
            mean: mean.to_vec(),
            invstd,
            scale,
            shift,
        }
    }
}

/// Per-channel constants of the batchnorm input gradient
/// `dz = k (dy - mean(dy) - xhat mean(dy xhat))`.
struct BnBack {
    k: Vec<f32>,
    mdy: Vec<f32>,
    mdyx: Vec<f32>,
}

#[derive(Default)]
struct ChannelSums {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ChannelSums {
    fn new(c: usize) -> Self {
        ChannelSums {
            a: vec![0.0; c],
            b: vec![0.0; c],
        }
    }

    /// Adds `v` and `v * v` of one row.
    fn add_row(&mut self, row: &[f32]) {
        for ((a, b), &v) in self.a.iter_mut().zip(self.b.iter_mut()).zip(row) {
            let v = v as f64;
            *a += v;
            *b += v * v;
        }
    }

    fn add(&mut self, o: &ChannelSums) {
        self.a.iter_mut().zip(&o.a).for_each(|(x, y)| *x += y);
        self.b.iter_mut().zip(&o.b).for_each(|(x, y)| *x += y);
    }
}

/// Forward record and scratch of a single sample.
struct Record {
    /// Per step: `(layer-1 position, channel, value)` of nonzero inputs.
    input: Vec<Vec<(u32, u32, f32)>>,
    /// Active pool windows in the layer-2 grid, ascending.
    wins: Vec<u32>,
    /// Layer-1 position -> active index `slot * window + offset`, or NONE.
    act_of: Vec<u32>,
    m1: Vec<f32>,
    m2: Vec<f32>,
    /// `[t][active][c]` membrane before reset; replaced by `dL/dI` in backward.
    hp1: Vec<f32>,
    /// `[t][c]` background trajectory, same treatment as `hp1`.
    hp1_bg: Vec<f32>,
    s_bg: Vec<f32>,
    pooled1: Vec<f32>,
    arg1: Vec<u8>,
    z2: Vec<f32>,
    hp2: Vec<f32>,
    arg2: Vec<u8>,
    x2: Vec<f32>,
    hp3: Vec<f32>,
    x3: Vec<f32>,
    hp4: Vec<f32>,
    scores: Vec<f32>,
    activity: Activity,
    grads: Option<SampleGrads>,
}

struct SampleGrads {
    conv1: Vec<f32>,
    conv2: Vec<f32>,
    fc1: Vec<f32>,
    fc2: Vec<f32>,
}

impl Record {
    fn n_act(&self, g: &Geometry) -> usize {
        self.wins.len() * g.window()
    }
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Network {
            params: Params::init(&spec, seed),
            spec,
        })
    }

    pub fn from_parts(spec: NetworkSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let want = Params::zeros(&spec);
        let names = want.named(&spec);
        for ((name, _, a), (_, _, b)) in names.iter().zip(params.named(&spec)) {
            if a.len() != b.len() {
                return Err(Error::Shape(format!("{name}: expected {} values, found {}", a.len(), b.len())));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn check_input(&self, x: &SampleTensor) -> Result<()> {
        let s = &self.spec;
        if x.frames != s.time_steps || x.height != s.input_h || x.width != s.input_w {
            return Err(Error::Shape(format!(
                "input {}x2x{}x{} does not match network {}x2x{}x{}",
                x.frames, x.height, x.width, s.time_steps, s.input_h, s.input_w
            )));
        }
        if SampleTensor::CHANNELS != s.in_channels {
            return Err(Error::Shape("network expects a different channel count".into()));
        }
        Ok(())
    }

    /// Inference-mode class scores (running batchnorm statistics, no dropout).
    pub fn forward(&self, x: &SampleTensor) -> Result<Vec<f32>> {
        self.check_input(x)?;
        Ok(self.eval_record(x).scores)
    }

    pub fn predict(&self, xs: &[SampleTensor], exec: Exec) -> Result<Vec<Vec<f32>>> {
        for x in xs {
            self.check_input(x)?;
        }
        Ok(exec.map(xs, |x| self.eval_record(x).scores))
    }

    pub(crate) fn activity(&self, x: &SampleTensor) -> Result<Activity> {
        self.check_input(x)?;
        Ok(self.eval_record(x).activity)
    }

    fn eval_record(&self, x: &SampleTensor) -> Record {
        let g = self.spec.geometry();
        let p = &self.params;
        let mut rec = self.record(x, &g, None, 0);
        let bn1 = BnAffine::new(&p.bn1_gamma, &p.bn1_beta, &p.bn1_mean, &p.bn1_var, self.spec.bn_eps);
        let bn2 = BnAffine::new(&p.bn2_gamma, &p.bn2_beta, &p.bn2_mean, &p.bn2_var, self.spec.bn_eps);
        self.layer1_forward(&mut rec, &g, &bn1);
        self.layer2_forward(&mut rec, &g, &bn2);
        rec
    }

    /// Dropout scale per unit of the two dropout layers for one sample.
    pub fn dropout_masks(&self, seed: u64, sample: usize) -> (Vec<f32>, Vec<f32>) {
        let g = self.spec.geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample as u64);
        let p = self.spec.dropout;
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect() };
        let m1 = draw(g.flat);
        let m2 = draw(g.hidden);
        (m1, m2)
    }

    /// Train-mode pass over a batch with batch statistics; computes gradients
    /// of the mean-over-batch squared error when `backward` is set.
    pub fn run_batch(&self, batch: &Batch, backward: bool, exec: Exec) -> Result<BatchOutput> {
        let n = batch.inputs.len();
        if n == 0 || batch.labels.len() != n {
            return Err(Error::invalid("batch needs matching non-empty inputs and labels"));
        }
        for x in &batch.inputs {
            self.check_input(x)?;
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.spec.classes) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        let g = self.spec.geometry();
        let p = &self.params;
        let eps = self.spec.bn_eps;
        let idx: Vec<usize> = (0..n).collect();
        let mut recs: Vec<Record> = exec.map(&idx, |&i| self.record(batch.inputs[i], &g, batch.dropout_seed, i));

        let sums1 = reduce(exec.map(&recs, |r| self.layer1_sums(r, &g)), g.c);
        let count1 = n * g.t * g.n1();
        let (mean1, var1) = moments(&sums1, count1);
        let bn1 = BnAffine::new(&p.bn1_gamma, &p.bn1_beta, &mean1, &var1, eps);

        let sums2 = reduce(exec.map_mut(&mut recs, |r| self.layer1_forward(r, &g, &bn1)), g.c);
        let count2 = n * g.t * g.n2();
        let (mean2, var2) = moments(&sums2, count2);
        let bn2 = BnAffine::new(&p.bn2_gamma, &p.bn2_beta, &mean2, &var2, eps);
        exec.map_mut(&mut recs, |r| self.layer2_forward(r, &g, &bn2));

        let pred: Vec<Vec<f64>> = recs.iter().map(|r| r.scores.iter().map(|&s| s as f64).collect()).collect();
        let targets: Vec<Vec<f64>> = batch.labels.iter().map(|&l| one_hot(l, g.classes)).collect();
        let loss = loss_mse(&pred, &targets)?;
        let dscores: Vec<Vec<f32>> = loss_mse_grad(&pred, &targets)?
            .into_iter()
            .map(|row| row.into_iter().map(|v| v as f32).collect())
            .collect();

        let grads = if backward {
            let mut pairs: Vec<(&mut Record, &Vec<f32>)> = recs.iter_mut().zip(&dscores).collect();
            let bsum2 = reduce(exec.map_mut(&mut pairs, |(r, d)| self.layer2_backward(r, &g, &bn2, d)), g.c);
            let back2 = bn_back(&p.bn2_gamma, &bn2, &bsum2, count2);
            let bsum1 = reduce(exec.map_mut(&mut recs, |r| self.layer1_backward(r, &g, &bn1, &bn2, &back2)), g.c);
            let back1 = bn_back(&p.bn1_gamma, &bn1, &bsum1, count1);
            exec.map_mut(&mut recs, |r| self.conv1_backward(r, &g, &bn1, &back1));

            let mut grads = Params::zeros(&self.spec);
            for r in &recs {
                let sg = r.grads.as_ref().expect("backward ran");
                add_into(&mut grads.conv1, &sg.conv1);
                add_into(&mut grads.conv2, &sg.conv2);
                add_into(&mut grads.fc1, &sg.fc1);
                add_into(&mut grads.fc2, &sg.fc2);
            }
            grads.bn1_gamma = bsum1.b.iter().map(|&v| v as f32).collect();
            grads.bn1_beta = bsum1.a.iter().map(|&v| v as f32).collect();
            grads.bn2_gamma = bsum2.b.iter().map(|&v| v as f32).collect();
            grads.bn2_beta = bsum2.a.iter().map(|&v| v as f32).collect();
            Some(grads)
        } else {
            None
        };

        Ok(BatchOutput {
            scores: recs.into_iter().map(|r| r.scores).collect(),
            loss,
            grads,
            bn_mean: [mean1, mean2],
            bn_var: [var1, var2],
            bn_count: [count1, count2],
        })
    }

    /// Exponential moving update of the running statistics, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, out: &BatchOutput) {
        let m = self.spec.bn_momentum;
        let p = &mut self.params;
        let layers = [(&mut p.bn1_mean, &mut p.bn1_var, 0usize), (&mut p.bn2_mean, &mut p.bn2_var, 1usize)];
        for (rm, rv, l) in layers {
            let n = out.bn_count[l] as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..rm.len() {
                rm[c] = (1.0 - m) * rm[c] + m * out.bn_mean[l][c];
                rv[c] = (1.0 - m) * rv[c] + m * out.bn_var[l][c] * unbias;
            }
        }
    }

    fn record(&self, x: &SampleTensor, g: &Geometry, dropout_seed: Option<u64>, sample: usize) -> Record {
        let max = x.max();
        let n1 = g.n1();
        let input: Vec<Vec<(u32, u32, f32)>> = (0..g.t)
            .map(|t| {
                let frame = x.frame(t);
                let mut out = Vec::new();
                if max > 0.0 {
                    for ch in 0..g.cin {
                        for (pos, &v) in frame[ch * n1..(ch + 1) * n1].iter().enumerate() {
                            if v != 0.0 {
                                out.push((pos as u32, ch as u32, v / max));
                            }
                        }
                    }
                }
                out
            })
            .collect();

        let mut mark = vec![false; g.n2()];
        for &(pos, _, _) in input.iter().flatten() {
            let (qy, qx) = ((pos as usize / g.w1) as isize, (pos as usize % g.w1) as isize);
            for k in 0..TAPS {
                let (dy, dx) = tap_offset(k);
                let (py, px) = (qy - dy, qx - dx);
                if py >= 0 && px >= 0 && (py as usize) < g.h1 && (px as usize) < g.w1 {
                    mark[(py as usize / g.pool) * g.w2 + px as usize / g.pool] = true;
                }
            }
        }
        let wins: Vec<u32> = (0..g.n2() as u32).filter(|&w| mark[w as usize]).collect();
        let mut act_of = vec![NONE; n1];
        let win = g.window();
        for (slot, &w) in wins.iter().enumerate() {
            let (wy, wx) = (w as usize / g.w2, w as usize % g.w2);
            for iy in 0..g.pool {
                for ix in 0..g.pool {
                    let p = (wy * g.pool + iy) * g.w1 + wx * g.pool + ix;
                    act_of[p] = (slot * win + iy * g.pool + ix) as u32;
                }
            }
        }

        let (m1, m2) = match dropout_seed {
            Some(seed) if self.spec.dropout > 0.0 => self.dropout_masks(seed, sample),
            _ => (vec![1.0; g.flat], vec![1.0; g.hidden]),
        };

        Record {
            input,
            wins,
            act_of,
            m1,
            m2,
            hp1: Vec::new(),
            hp1_bg: Vec::new(),
            s_bg: Vec::new(),
            pooled1: Vec::new(),
            arg1: Vec::new(),
            z2: Vec::new(),
            hp2: Vec::new(),
            arg2: Vec::new(),
            x2: Vec::new(),
            hp3: Vec::new(),
            x3: Vec::new(),
            hp4: Vec::new(),
            scores: Vec::new(),
            activity: Activity::default(),
            grads: None,
        }
    }

    /// Layer-1 convolution at step `t`, written for the active positions.
    fn conv1(&self, rec: &Record, g: &Geometry, t: usize, z: &mut [f32]) {
        let c = g.c;
        z.fill(0.0);
        for &(pos, ch, v) in &rec.input[t] {
            let (qy, qx) = ((pos as usize / g.w1) as isize, (pos as usize % g.w1) as isize);
            for k in 0..TAPS {
                let (dy, dx) = tap_offset(k);
                let (py, px) = (qy - dy, qx - dx);
                if py < 0 || px < 0 || py as usize >= g.h1 || px as usize >= g.w1 {
                    continue;
                }
                let a = rec.act_of[py as usize * g.w1 + px as usize] as usize;
                let w = &self.params.conv1[(ch as usize * TAPS + k) * c..][..c];
                axpy(&mut z[a * c..(a + 1) * c], v, w);
            }
        }
    }

    /// Sum and sum of squares of the layer-1 pre-activations over all
    /// positions and steps (background positions contribute zeros).
    fn layer1_sums(&self, rec: &Record, g: &Geometry) -> ChannelSums {
        let c = g.c;
        let mut z = vec![0.0f32; rec.n_act(g) * c];
        let mut sums = ChannelSums::new(c);
        for t in 0..g.t {
            self.conv1(rec, g, t, &mut z);
            for row in z.chunks_exact(c) {
                sums.add_row(row);
            }
        }
        sums
    }

    /// Layer-1 LIF, first pooling and the layer-2 convolution. Returns the
    /// layer-2 pre-activation sums for batch statistics.
    fn layer1_forward(&self, rec: &mut Record, g: &Geometry, bn: &BnAffine) -> ChannelSums {
        let (c, t_n, n2, win) = (g.c, g.t, g.n2(), g.window());
        let n_act = rec.n_act(g);
        let slots = rec.wins.len();
        let lif = Lif::new(&self.spec);
        let w2 = &self.params.conv2;

        rec.hp1 = vec![0.0; t_n * n_act * c];
        rec.hp1_bg = vec![0.0; t_n * c];
        rec.s_bg = vec![0.0; t_n * c];
        rec.pooled1 = vec![0.0; t_n * slots * c];
        rec.arg1 = vec![0; t_n * slots * c];
        rec.z2 = vec![0.0; t_n * n2 * c];

        let mut h = vec![0.0f32; n_act * c];
        let mut h_bg = vec![0.0f32; c];
        let mut z = vec![0.0f32; n_act * c];
        let mut s = vec![0.0f32; n_act * c];
        let mut u = vec![0.0f32; TAPS * c];
        let mut delta = vec![0.0f32; slots * c];
        let mut spread = vec![0.0f32; slots * TAPS * c];
        let mut sums = ChannelSums::new(c);
        let taps_total = valid_tap_total(g.h2, g.w2);
        let taps_active: usize = rec.wins.iter().map(|&q| valid_taps(q as usize, g.h2, g.w2)).sum();

        for t in 0..t_n {
            self.conv1(rec, g, t, &mut z);
            let hp = &mut rec.hp1[t * n_act * c..(t + 1) * n_act * c];
            for (((zr, hr), pr), sr) in z
                .chunks_exact(c)
                .zip(h.chunks_exact_mut(c))
                .zip(hp.chunks_exact_mut(c))
                .zip(s.chunks_exact_mut(c))
            {
                lif.step_bn_row(hr, zr, bn, pr, sr);
            }
            let b = &mut rec.s_bg[t * c..(t + 1) * c];
            for ch in 0..c {
                let (pre, sp) = lif.step(&mut h_bg[ch], bn.shift[ch]);
                rec.hp1_bg[t * c + ch] = pre;
                b[ch] = sp;
            }

            let pooled = &mut rec.pooled1[t * slots * c..(t + 1) * slots * c];
            let arg = &mut rec.arg1[t * slots * c..(t + 1) * slots * c];
            for slot in 0..slots {
                let base = slot * win;
                let pr = &mut pooled[slot * c..(slot + 1) * c];
                let ar = &mut arg[slot * c..(slot + 1) * c];
                pr.copy_from_slice(&s[base * c..(base + 1) * c]);
                ar.fill(0);
                for j in 1..win {
                    let row = &s[(base + j) * c..(base + j + 1) * c];
                    for ch in 0..c {
                        if row[ch] > pr[ch] {
                            pr[ch] = row[ch];
                            ar[ch] = j as u8;
                        }
                    }
                }
            }

            // background part of the layer-2 convolution
            u.fill(0.0);
            for ch in 0..c {
                if b[ch] != 0.0 {
                    for k in 0..TAPS {
                        axpy(&mut u[k * c..(k + 1) * c], b[ch], &w2[(ch * TAPS + k) * c..][..c]);
                    }
                }
            }
            let z2 = &mut rec.z2[t * n2 * c..(t + 1) * n2 * c];
            conv_constant_map(&u, g.h2, g.w2, c, z2);
            let bg_spikes = b.iter().filter(|&&v| v != 0.0).count();
            rec.activity.conv2 += ((taps_total - taps_active) * bg_spikes * c) as f64;

            // corrections at active windows: out[slot][k][o] = sum_ch delta[slot][ch] W2[ch][k][o]
            for (slot, &q) in rec.wins.iter().enumerate() {
                let vt = valid_taps(q as usize, g.h2, g.w2);
                let fired = pooled[slot * c..(slot + 1) * c].iter().filter(|&&v| v != 0.0).count();
                rec.activity.conv2 += (vt * c * fired) as f64;
                for ch in 0..c {
                    delta[slot * c + ch] = pooled[slot * c + ch] - b[ch];
                }
            }
            if slots > 0 {
                unsafe {
                    sgemm(
                        slots,
                        c,
                        TAPS * c,
                        1.0,
                        delta.as_ptr(),
                        c as isize,
                        1,
                        w2.as_ptr(),
                        (TAPS * c) as isize,
                        1,
                        0.0,
                        spread.as_mut_ptr(),
                        (TAPS * c) as isize,
                        1,
                    );
                }
            }
            for (slot, &q) in rec.wins.iter().enumerate() {
                let (qy, qx) = ((q as usize / g.w2) as isize, (q as usize % g.w2) as isize);
                for k in 0..TAPS {
                    let (dy, dx) = tap_offset(k);
                    let (py, px) = (qy - dy, qx - dx);
                    if py < 0 || px < 0 || py as usize >= g.h2 || px as usize >= g.w2 {
                        continue;
                    }
                    let p = py as usize * g.w2 + px as usize;
                    add_into(&mut z2[p * c..(p + 1) * c], &spread[(slot * TAPS + k) * c..][..c]);
                }
            }
            for row in z2.chunks_exact(c) {
                sums.add_row(row);
            }
        }
        sums
    }

    /// Layer-2 LIF, second pooling, the fully connected layers and voting.
    fn layer2_forward(&self, rec: &mut Record, g: &Geometry, bn: &BnAffine) {
        let (c, t_n, n2, n3) = (g.c, g.t, g.n2(), g.n3());
        let (flat, hid, out) = (g.flat, g.hidden, g.out);
        let lif = Lif::new(&self.spec);
        let p = &self.params;

        rec.hp2 = vec![0.0; t_n * n2 * c];
        rec.arg2 = vec![0; t_n * n3 * c];
        rec.x2 = vec![0.0; t_n * flat];
        rec.hp3 = vec![0.0; t_n * hid];
        rec.x3 = vec![0.0; t_n * hid];
        rec.hp4 = vec![0.0; t_n * out];
        rec.scores = vec![0.0; g.classes];

        let mut h2 = vec![0.0f32; n2 * c];
        let mut s2 = vec![0.0f32; n2 * c];
        let mut h3 = vec![0.0f32; hid];
        let mut h4 = vec![0.0f32; out];
        let mut z3 = vec![0.0f32; hid];
        let mut z4 = vec![0.0f32; out];
        let norm = 1.0 / (g.votes * t_n) as f32;

        for t in 0..t_n {
            let z2 = &rec.z2[t * n2 * c..(t + 1) * n2 * c];
            let hp = &mut rec.hp2[t * n2 * c..(t + 1) * n2 * c];
            for (((zr, hr), pr), sr) in z2
                .chunks_exact(c)
                .zip(h2.chunks_exact_mut(c))
                .zip(hp.chunks_exact_mut(c))
                .zip(s2.chunks_exact_mut(c))
            {
                lif.step_bn_row(hr, zr, bn, pr, sr);
            }

            let x2 = &mut rec.x2[t * flat..(t + 1) * flat];
            let arg = &mut rec.arg2[t * n3 * c..(t + 1) * n3 * c];
            for w in 0..n3 {
                let (wy, wx) = (w / g.w3, w % g.w3);
                let xr = &mut x2[w * c..(w + 1) * c];
                let ar = &mut arg[w * c..(w + 1) * c];
                let first = (wy * g.pool) * g.w2 + wx * g.pool;
                xr.copy_from_slice(&s2[first * c..(first + 1) * c]);
                ar.fill(0);
                for j in 1..g.window() {
                    let pos = (wy * g.pool + j / g.pool) * g.w2 + wx * g.pool + j % g.pool;
                    let row = &s2[pos * c..(pos + 1) * c];
                    for ch in 0..c {
                        if row[ch] > xr[ch] {
                            xr[ch] = row[ch];
                            ar[ch] = j as u8;
                        }
                    }
                }
            }
            z3.fill(0.0);
            for (i, (xv, &m)) in x2.iter_mut().zip(&rec.m1).enumerate() {
                *xv *= m;
                if *xv != 0.0 {
                    rec.activity.fc1 += hid as f64;
                    axpy(&mut z3, *xv, &p.fc1[i * hid..(i + 1) * hid]);
                }
            }

            let x3 = &mut rec.x3[t * hid..(t + 1) * hid];
            z4.fill(0.0);
            for j in 0..hid {
                let (pre, sp) = lif.step(&mut h3[j], z3[j]);
                rec.hp3[t * hid + j] = pre;
                x3[j] = sp * rec.m2[j];
                if x3[j] != 0.0 {
                    rec.activity.fc2 += out as f64;
                    axpy(&mut z4, x3[j], &p.fc2[j * out..(j + 1) * out]);
                }
            }
            for o in 0..out {
                let (pre, sp) = lif.step(&mut h4[o], z4[o]);
                rec.hp4[t * out + o] = pre;
                rec.scores[o / g.votes] += sp * norm;
            }
        }
    }

    /// Reverse sweep from the scores down to the layer-2 batchnorm output.
    /// Leaves `dL/dy2` in `hp2` and returns `(sum dy2, sum dy2 * xhat2)`.
    fn layer2_backward(&self, rec: &mut Record, g: &Geometry, bn: &BnAffine, dscore: &[f32]) -> ChannelSums {
        let (c, t_n, n2, n3) = (g.c, g.t, g.n2(), g.n3());
        let (flat, hid, out) = (g.flat, g.hidden, g.out);
        let lif = Lif::new(&self.spec);
        let p = &self.params;
        let mut gr = SampleGrads {
            conv1: vec![0.0; p.conv1.len()],
            conv2: vec![0.0; p.conv2.len()],
            fc1: vec![0.0; p.fc1.len()],
            fc2: vec![0.0; p.fc2.len()],
        };

        let norm = 1.0 / (g.votes * t_n) as f32;
        let ds4: Vec<f32> = (0..out).map(|o| dscore[o / g.votes] * norm).collect();
        let mut carry4 = vec![0.0f32; out];
        let mut carry3 = vec![0.0f32; hid];
        let mut carry2 = vec![0.0f32; n2 * c];
        let mut di4 = vec![0.0f32; out];
        let mut di3 = vec![0.0f32; hid];
        let mut ds2 = vec![0.0f32; n2 * c];
        let mut sums = ChannelSums::new(c);

        for t in (0..t_n).rev() {
            for o in 0..out {
                di4[o] = lif.back(rec.hp4[t * out + o], ds4[o], &mut carry4[o]);
            }
            let x3 = &rec.x3[t * hid..(t + 1) * hid];
            for j in 0..hid {
                let wrow = &p.fc2[j * out..(j + 1) * out];
                if x3[j] != 0.0 {
                    axpy(&mut gr.fc2[j * out..(j + 1) * out], x3[j], &di4);
                }
                let ds3 = if rec.m2[j] == 0.0 { 0.0 } else { rec.m2[j] * dot(wrow, &di4) };
                di3[j] = lif.back(rec.hp3[t * hid + j], ds3, &mut carry3[j]);
            }

            let x2 = &rec.x2[t * flat..(t + 1) * flat];
            let arg = &rec.arg2[t * n3 * c..(t + 1) * n3 * c];
            ds2.fill(0.0);
            let live = di3.iter().any(|&v| v != 0.0);
            for i in 0..flat {
                if x2[i] != 0.0 {
                    axpy(&mut gr.fc1[i * hid..(i + 1) * hid], x2[i], &di3);
                }
                if !live || rec.m1[i] == 0.0 {
                    continue;
                }
                let d = rec.m1[i] * dot(&p.fc1[i * hid..(i + 1) * hid], &di3);
                let (w, ch) = (i / c, i % c);
                let j = arg[i] as usize;
                let pos = ((w / g.w3) * g.pool + j / g.pool) * g.w2 + (w % g.w3) * g.pool + j % g.pool;
                ds2[pos * c + ch] = d;
            }

            let hp = &mut rec.hp2[t * n2 * c..(t + 1) * n2 * c];
            let z2 = &rec.z2[t * n2 * c..(t + 1) * n2 * c];
            for (((pr, dr), cr), zr) in hp
                .chunks_exact_mut(c)
                .zip(ds2.chunks_exact(c))
                .zip(carry2.chunks_exact_mut(c))
                .zip(z2.chunks_exact(c))
            {
                lif.back_bn_row(pr, dr, cr, zr, bn, &mut sums);
            }
        }
        rec.grads = Some(gr);
        sums
    }

    /// Layer-2 convolution backward, first pooling and layer-1 LIF reverse
    /// sweep. Leaves `dL/dy1` in `hp1` / `hp1_bg` and returns the layer-1
    /// batchnorm sums.
    fn layer1_backward(&self, rec: &mut Record, g: &Geometry, bn1: &BnAffine, bn2: &BnAffine, back2: &BnBack) -> ChannelSums {
        let (c, t_n, n2, win) = (g.c, g.t, g.n2(), g.window());
        let n_act = rec.n_act(g);
        let slots = rec.wins.len();
        let lif = Lif::new(&self.spec);
        let w2 = &self.params.conv2;
        let mut gr = rec.grads.take().expect("layer2_backward ran");

        let mut dz2 = vec![0.0f32; n2 * c];
        let mut sk = vec![0.0f32; TAPS * c];
        let mut tk = vec![0.0f32; TAPS * c];
        let mut gather = vec![0.0f32; slots * TAPS * c];
        let mut delta = vec![0.0f32; slots * c];
        let mut din = vec![0.0f32; slots * c];
        let mut ds1 = vec![0.0f32; n_act * c];
        let mut carry1 = vec![0.0f32; n_act * c];
        let mut carry_bg = vec![0.0f32; c];
        let mut z1 = vec![0.0f32; n_act * c];
        let mut sums = ChannelSums::new(c);
        let xh_bg: Vec<f32> = (0..c).map(|ch| -bn1.mean[ch] * bn1.invstd[ch]).collect();

        for t in (0..t_n).rev() {
            let dy2 = &rec.hp2[t * n2 * c..(t + 1) * n2 * c];
            let z2 = &rec.z2[t * n2 * c..(t + 1) * n2 * c];
            for ((dz, dy), z) in dz2.chunks_exact_mut(c).zip(dy2.chunks_exact(c)).zip(z2.chunks_exact(c)) {
                for ch in 0..c {
                    let xh = (z[ch] - bn2.mean[ch]) * bn2.invstd[ch];
                    dz[ch] = back2.k[ch] * (dy[ch] - back2.mdy[ch] - xh * back2.mdyx[ch]);
                }
            }

            tap_sums(&dz2, g.h2, g.w2, c, &mut sk);
            let b = &rec.s_bg[t * c..(t + 1) * c];
            for ch in 0..c {
                if b[ch] != 0.0 {
                    for k in 0..TAPS {
                        axpy(&mut gr.conv2[(ch * TAPS + k) * c..][..c], b[ch], &sk[k * c..(k + 1) * c]);
                    }
                }
            }

            let pooled = &rec.pooled1[t * slots * c..(t + 1) * slots * c];
            for slot in 0..slots {
                for ch in 0..c {
                    delta[slot * c + ch] = pooled[slot * c + ch] - b[ch];
                }
            }
            // gather[slot][k] = dz2 at the output that tap k of the window feeds
            tk.copy_from_slice(&sk);
            for (slot, &q) in rec.wins.iter().enumerate() {
                let (qy, qx) = ((q as usize / g.w2) as isize, (q as usize % g.w2) as isize);
                for k in 0..TAPS {
                    let (dy, dx) = tap_offset(k);
                    let (py, px) = (qy - dy, qx - dx);
                    let row = &mut gather[(slot * TAPS + k) * c..][..c];
                    if py < 0 || px < 0 || py as usize >= g.h2 || px as usize >= g.w2 {
                        row.fill(0.0);
                    } else {
                        let p = py as usize * g.w2 + px as usize;
                        row.copy_from_slice(&dz2[p * c..(p + 1) * c]);
                        sub_from(&mut tk[k * c..(k + 1) * c], row);
                    }
                }
            }
            if slots > 0 {
                // din[slot][ch] = sum_{k,o} gather[slot][k][o] W2[ch][k][o]
                // dW2[ch][k][o] += sum_slot delta[slot][ch] gather[slot][k][o]
                unsafe {
                    sgemm(
                        slots,
                        TAPS * c,
                        c,
                        1.0,
                        gather.as_ptr(),
                        (TAPS * c) as isize,
                        1,
                        w2.as_ptr(),
                        1,
                        (TAPS * c) as isize,
                        0.0,
                        din.as_mut_ptr(),
                        c as isize,
                        1,
                    );
                    sgemm(
                        c,
                        slots,
                        TAPS * c,
                        1.0,
                        delta.as_ptr(),
                        1,
                        c as isize,
                        gather.as_ptr(),
                        (TAPS * c) as isize,
                        1,
                        1.0,
                        gr.conv2.as_mut_ptr(),
                        (TAPS * c) as isize,
                        1,
                    );
                }
            }

            // aggregated gradient reaching the background neurons
            let mut ds_bg = vec![0.0f32; c];
            for ch in 0..c {
                let mut acc = 0.0f32;
                for k in 0..TAPS {
                    acc += dot(&w2[(ch * TAPS + k) * c..][..c], &tk[k * c..(k + 1) * c]);
                }
                ds_bg[ch] = acc;
            }

            ds1.fill(0.0);
            let arg = &rec.arg1[t * slots * c..(t + 1) * slots * c];
            for slot in 0..slots {
                for ch in 0..c {
                    let a = slot * win + arg[slot * c + ch] as usize;
                    ds1[a * c + ch] = din[slot * c + ch];
                }
            }

            self.conv1(rec, g, t, &mut z1);
            let hp = &mut rec.hp1[t * n_act * c..(t + 1) * n_act * c];
            for (((pr, dr), cr), zr) in hp
                .chunks_exact_mut(c)
                .zip(ds1.chunks_exact(c))
                .zip(carry1.chunks_exact_mut(c))
                .zip(z1.chunks_exact(c))
            {
                lif.back_bn_row(pr, dr, cr, zr, bn1, &mut sums);
            }
            for ch in 0..c {
                let i = t * c + ch;
                let dy = lif.back(rec.hp1_bg[i], ds_bg[ch], &mut carry_bg[ch]);
                rec.hp1_bg[i] = dy;
                sums.a[ch] += dy as f64;
                sums.b[ch] += (dy * xh_bg[ch]) as f64;
            }
        }
        rec.grads = Some(gr);
        sums
    }

    fn conv1_backward(&self, rec: &mut Record, g: &Geometry, bn1: &BnAffine, back1: &BnBack) {
        let c = g.c;
        let n_act = rec.n_act(g);
        let mut z1 = vec![0.0f32; n_act * c];
        let mut gr = rec.grads.take().expect("layer1_backward ran");
        for t in 0..g.t {
            self.conv1(rec, g, t, &mut z1);
            let dy = &mut rec.hp1[t * n_act * c..(t + 1) * n_act * c];
            for (d, z) in dy.chunks_exact_mut(c).zip(z1.chunks_exact(c)) {
                for ch in 0..c {
                    let xh = (z[ch] - bn1.mean[ch]) * bn1.invstd[ch];
                    d[ch] = back1.k[ch] * (d[ch] - back1.mdy[ch] - xh * back1.mdyx[ch]);
                }
            }
            for &(pos, ci, v) in &rec.input[t] {
                let (qy, qx) = ((pos as usize / g.w1) as isize, (pos as usize % g.w1) as isize);
                for k in 0..TAPS {
                    let (oy, ox) = tap_offset(k);
                    let (py, px) = (qy - oy, qx - ox);
                    if py < 0 || px < 0 || py as usize >= g.h1 || px as usize >= g.w1 {
                        continue;
                    }
                    let a = rec.act_of[py as usize * g.w1 + px as usize] as usize;
                    axpy(&mut gr.conv1[(ci as usize * TAPS + k) * c..][..c], v, &dy[a * c..(a + 1) * c]);
                }
            }
        }
        rec.grads = Some(gr);
    }
}

fn reduce(parts: Vec<ChannelSums>, c: usize) -> ChannelSums {
    let mut total = ChannelSums::new(c);
    for p in &parts {
        total.add(p);
    }
    total
}

fn moments(s: &ChannelSums, count: usize) -> (Vec<f32>, Vec<f32>) {
    let n = count as f64;
    let mean: Vec<f64> = s.a.iter().map(|v| v / n).collect();
    let var = s.b.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), var)
}

fn bn_back(gamma: &[f32], bn: &BnAffine, s: &ChannelSums, count: usize) -> BnBack {
    let n = count as f64;
    BnBack {
        k: gamma.iter().zip(&bn.invstd).map(|(g, i)| g * i).collect(),
        mdy: s.a.iter().map(|v| (v / n) as f32).collect(),
        mdyx: s.b.iter().map(|v| (v / n) as f32).collect(),
    }
}

/// `out[k]` = sum of the rows of `x` (an `h x w x c` map) at the outputs
/// whose tap `k` lands inside the map.
fn tap_sums(x: &[f32], h: usize, w: usize, c: usize, out: &mut [f32]) {
    let row = |y: usize, xx: usize| &x[(y * w + xx) * c..(y * w + xx + 1) * c];
    let mut full = vec![0.0f32; c];
    let (mut top, mut bottom, mut left, mut right) = (vec![0.0f32; c], vec![0.0f32; c], vec![0.0f32; c], vec![0.0f32; c]);
    for y in 0..h {
        for xx in 0..w {
            add_into(&mut full, row(y, xx));
        }
    }
    for xx in 0..w {
        add_into(&mut top, row(0, xx));
        add_into(&mut bottom, row(h - 1, xx));
    }
    for y in 0..h {
        add_into(&mut left, row(y, 0));
        add_into(&mut right, row(y, w - 1));
    }
    for k in 0..TAPS {
        let (dy, dx) = tap_offset(k);
        let o = &mut out[k * c..(k + 1) * c];
        o.copy_from_slice(&full);
        // an offset of -1 drops the first row/column, +1 the last
        let ey = match dy {
            -1 => Some((&top, 0)),
            1 => Some((&bottom, h - 1)),
            _ => None,
        };
        let ex = match dx {
            -1 => Some((&left, 0)),
            1 => Some((&right, w - 1)),
            _ => None,
        };
        if let Some((r, _)) = ey {
            sub_from(o, r);
        }
        if let Some((r, _)) = ex {
            sub_from(o, r);
        }
        if let (Some((_, y)), Some((_, xx))) = (ey, ex) {
            add_into(o, row(y, xx));
        }
    }
}

fn valid_taps(q: usize, h: usize, w: usize) -> usize {
    let (y, x) = (q / w, q % w);
    let span = |v: usize, n: usize| 1 + usize::from(v > 0) + usize::from(v + 1 < n);
    span(y, h) * span(x, w)
}

fn valid_tap_total(h: usize, w: usize) -> usize {
    (0..h * w).map(|q| valid_taps(q, h, w)).sum()
}

/// Convolution of a spatially constant input: output `p` receives the sum of
/// `u[k]` over the taps that land inside the map.
fn conv_constant_map(u: &[f32], h: usize, w: usize, c: usize, out: &mut [f32]) {
    let mut full = vec![0.0f32; c];
    for k in 0..TAPS {
        add_into(&mut full, &u[k * c..(k + 1) * c]);
    }
    for py in 0..h {
        for px in 0..w {
            let row = &mut out[(py * w + px) * c..(py * w + px + 1) * c];
            if py > 0 && px > 0 && py + 1 < h && px + 1 < w {
                row.copy_from_slice(&full);
                continue;
            }
            row.fill(0.0);
            for k in 0..TAPS {
                let (dy, dx) = tap_offset(k);
                let (y, x) = (py as isize + dy, px as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    add_into(row, &u[k * c..(k + 1) * c]);
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn add_into(y: &mut [f32], x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

#[inline]
fn sub_from(y: &mut [f32], x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv -= xv;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}
