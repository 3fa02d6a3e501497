//! Dense double-precision reimplementation of the network forward pass, kept
//! deliberately naive so it can serve as an oracle for the sparse engine.

use mocom::event::SampleTensor;
use mocom::snn::{Network, Params, SpikeFn};

#[derive(Clone, Debug)]
pub struct RefParams {
    pub tensors: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn from(p: &Params) -> Self {
        RefParams {
            tensors: p.trainable().iter().map(|t| t.iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    fn conv1(&self) -> &[f64] {
        &self.tensors[0]
    }
    fn g1(&self) -> &[f64] {
        &self.tensors[1]
    }
    fn b1(&self) -> &[f64] {
        &self.tensors[2]
    }
    fn conv2(&self) -> &[f64] {
        &self.tensors[3]
    }
    fn g2(&self) -> &[f64] {
        &self.tensors[4]
    }
    fn b2(&self) -> &[f64] {
        &self.tensors[5]
    }
    fn fc1(&self) -> &[f64] {
        &self.tensors[6]
    }
    fn fc2(&self) -> &[f64] {
        &self.tensors[7]
    }
}

/// Which batchnorm statistics to use.
pub enum Stats<'a> {
    Batch,
    Running(&'a Params),
}

fn fire(f: SpikeFn, u: f64) -> f64 {
    match f {
        SpikeFn::Heaviside { .. } => {
            if u >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        SpikeFn::Smooth { alpha } => (std::f64::consts::FRAC_PI_2 * alpha as f64 * u).atan() / std::f64::consts::PI + 0.5,
    }
}

/// LIF over `[b][t][n]` currents, returning spikes of the same shape.
fn lif(net: &Network, cur: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let l = &net.spec.lif;
    let decay = (-1.0 / l.tau_m as f64).exp();
    cur.iter()
        .map(|steps| {
            let n = steps[0].len();
            let mut h = vec![0.0; n];
            steps
                .iter()
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let pre = decay * h[j] + l.resistance as f64 * i[j];
                            let s = fire(net.spec.spike_fn, pre - l.threshold as f64);
                            h[j] = pre * (1.0 - s);
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// 3x3 same-padding convolution of `[cin][h][w]` with weights `[cin][9][cout]`.
fn conv(x: &[f64], cin: usize, cout: usize, h: usize, w: usize, wt: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            acc += wt[(ci * 9 + ky * 3 + kx) * cout + o] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn maxpool(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(ch * ho + y / p) * wo + xx / p];
                *o = o.max(x[(ch * h + y) * w + xx]);
            }
        }
    }
    out
}

/// Batchnorm over `[b][t][c*hw]`, normalising each channel jointly over
/// batch, time and space.
fn batchnorm(
    net: &Network,
    z: &[Vec<Vec<f64>>],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f32], &[f32])>,
) -> Vec<Vec<Vec<f64>>> {
    let eps = net.spec.bn_eps as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match running {
        Some((m, v)) => (m.iter().map(|&x| x as f64).collect(), v.iter().map(|&x| x as f64).collect()),
        None => {
            let mut mean = vec![0.0; c];
            let mut sq = vec![0.0; c];
            let mut n = 0.0;
            for zb in z {
                for zt in zb {
                    for ch in 0..c {
                        for v in &zt[ch * hw..(ch + 1) * hw] {
                            mean[ch] += v;
                            sq[ch] += v * v;
                        }
                    }
                    n += hw as f64;
                }
            }
            let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
            let var = sq.iter().zip(&mean).map(|(s, m)| s / n - m * m).collect();
            (mean, var)
        }
    };
    z.iter()
        .map(|zb| {
            zb.iter()
                .map(|zt| {
                    (0..c * hw)
                        .map(|i| {
                            let ch = i / hw;
                            gamma[ch] * (zt[i] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Class scores for each sample; `masks` holds the dropout scales per
/// sample (`None` for inference).
pub fn scores(net: &Network, p: &RefParams, xs: &[&SampleTensor], masks: Option<&[(Vec<f32>, Vec<f32>)]>, stats: Stats) -> Vec<Vec<f64>> {
    let s = &net.spec;
    let (h1, w1, c, cin, pool) = (s.input_h, s.input_w, s.conv_channels, s.in_channels, s.pool);
    let (h2, w2) = (h1 / pool, w1 / pool);
    let (h3, w3) = (h2 / pool, w2 / pool);
    let t_n = s.time_steps;
    let running = match stats {
        Stats::Batch => None,
        Stats::Running(rp) => Some(rp),
    };

    let z1: Vec<Vec<Vec<f64>>> = xs
        .iter()
        .map(|x| {
            let m = x.max() as f64;
            (0..t_n)
                .map(|t| {
                    let f: Vec<f64> = x.frame(t).iter().map(|&v| if m > 0.0 { v as f64 / m } else { 0.0 }).collect();
                    conv(&f, cin, c, h1, w1, p.conv1())
                })
                .collect()
        })
        .collect();
    let y1 = batchnorm(
        net,
        &z1,
        c,
        h1 * w1,
        p.g1(),
        p.b1(),
        running.map(|r| (&r.bn1_mean[..], &r.bn1_var[..])),
    );
    let s1 = lif(net, &y1);
    let z2: Vec<Vec<Vec<f64>>> = s1
        .iter()
        .map(|sb| {
            sb.iter()
                .map(|st| conv(&maxpool(st, c, h1, w1, pool), c, c, h2, w2, p.conv2()))
                .collect()
        })
        .collect();
    let y2 = batchnorm(
        net,
        &z2,
        c,
        h2 * w2,
        p.g2(),
        p.b2(),
        running.map(|r| (&r.bn2_mean[..], &r.bn2_var[..])),
    );
    let s2 = lif(net, &y2);

    let (hid, out) = (s.hidden, s.classes * s.votes);
    let flat = h3 * w3 * c;
    let mut result = Vec::new();
    for (b, sb) in s2.iter().enumerate() {
        let (m1, m2) = match masks {
            Some(m) => (
                m[b].0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                m[b].1.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            ),
            None => (vec![1.0; flat], vec![1.0; hid]),
        };
        let cur3: Vec<Vec<f64>> = sb
            .iter()
            .map(|st| {
                let pooled = maxpool(st, c, h2, w2, pool);
                // flatten in [y][x][c] order
                let mut x = vec![0.0; flat];
                for ch in 0..c {
                    for i in 0..h3 * w3 {
                        x[i * c + ch] = pooled[ch * h3 * w3 + i] * m1[i * c + ch];
                    }
                }
                (0..hid).map(|j| (0..flat).map(|i| x[i] * p.fc1()[i * hid + j]).sum()).collect()
            })
            .collect();
        let s3 = lif(net, &[cur3]).remove(0);
        let cur4: Vec<Vec<f64>> = s3
            .iter()
            .map(|st| {
                (0..out)
                    .map(|o| (0..hid).map(|j| st[j] * m2[j] * p.fc2()[j * out + o]).sum())
                    .collect()
            })
            .collect();
        let s4 = lif(net, &[cur4]).remove(0);
        let mut sc = vec![0.0; s.classes];
        for st in &s4 {
            for o in 0..out {
                sc[o / s.votes] += st[o] / (s.votes * t_n) as f64;
            }
        }
        result.push(sc);
    }
    result
}

pub fn batch_loss(net: &Network, p: &RefParams, xs: &[&SampleTensor], labels: &[usize], masks: Option<&[(Vec<f32>, Vec<f32>)]>) -> f64 {
    let sc = scores(net, p, xs, masks, Stats::Batch);
    let mut total = 0.0;
    for (s, &l) in sc.iter().zip(labels) {
        for (c, v) in s.iter().enumerate() {
            let y = if c == l { 1.0 } else { 0.0 };
            total += (v - y) * (v - y);
        }
    }
    total / xs.len() as f64
}
