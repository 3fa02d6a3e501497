use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NetworkSpec, TAPS};

/// Network weights and batchnorm state.
///
/// Layouts: conv weights are `[c_in][tap][c_out]`, fully connected weights
/// `[in][out]`. The same struct doubles as a gradient container, in which
/// case the running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1: Vec<f32>,
    pub bn1_gamma: Vec<f32>,
    pub bn1_beta: Vec<f32>,
    pub bn1_mean: Vec<f32>,
    pub bn1_var: Vec<f32>,
    pub conv2: Vec<f32>,
    pub bn2_gamma: Vec<f32>,
    pub bn2_beta: Vec<f32>,
    pub bn2_mean: Vec<f32>,
    pub bn2_var: Vec<f32>,
    pub fc1: Vec<f32>,
    pub fc2: Vec<f32>,
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let g = spec.geometry();
        Params {
            conv1: vec![0.0; g.cin * TAPS * g.c],
            bn1_gamma: vec![0.0; g.c],
            bn1_beta: vec![0.0; g.c],
            bn1_mean: vec![0.0; g.c],
            bn1_var: vec![0.0; g.c],
            conv2: vec![0.0; g.c * TAPS * g.c],
            bn2_gamma: vec![0.0; g.c],
            bn2_beta: vec![0.0; g.c],
            bn2_mean: vec![0.0; g.c],
            bn2_var: vec![0.0; g.c],
            fc1: vec![0.0; g.flat * g.hidden],
            fc2: vec![0.0; g.hidden * g.out],
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, unit gamma, zero beta.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let g = spec.geometry();
        let mut p = Params::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f32], fan_in: usize| {
            let b = 1.0 / (fan_in as f32).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
        };
        fill(&mut p.conv1, g.cin * TAPS);
        fill(&mut p.conv2, g.c * TAPS);
        fill(&mut p.fc1, g.flat);
        fill(&mut p.fc2, g.hidden);
        for v in [&mut p.bn1_gamma, &mut p.bn1_var, &mut p.bn2_gamma, &mut p.bn2_var] {
            v.fill(1.0);
        }
        p
    }

    /// Trainable tensors in a fixed order.
    pub fn trainable(&self) -> [&[f32]; 8] {
        [
            &self.conv1,
            &self.bn1_gamma,
            &self.bn1_beta,
            &self.conv2,
            &self.bn2_gamma,
            &self.bn2_beta,
            &self.fc1,
            &self.fc2,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.conv1,
            &mut self.bn1_gamma,
            &mut self.bn1_beta,
            &mut self.conv2,
            &mut self.bn2_gamma,
            &mut self.bn2_beta,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Named tensors with their logical dims, trainable ones first.
    pub fn named(&self, spec: &NetworkSpec) -> Vec<(&'static str, Vec<usize>, &[f32])> {
        let g = spec.geometry();
        let k = super::KERNEL;
        let c = vec![g.c];
        vec![
            ("conv1.weight", vec![g.cin, k, k, g.c], &self.conv1[..]),
            ("bn1.gamma", c.clone(), &self.bn1_gamma[..]),
            ("bn1.beta", c.clone(), &self.bn1_beta[..]),
            ("conv2.weight", vec![g.c, k, k, g.c], &self.conv2[..]),
            ("bn2.gamma", c.clone(), &self.bn2_gamma[..]),
            ("bn2.beta", c.clone(), &self.bn2_beta[..]),
            ("fc1.weight", vec![g.flat, g.hidden], &self.fc1[..]),
            ("fc2.weight", vec![g.hidden, g.out], &self.fc2[..]),
            ("bn1.running_mean", c.clone(), &self.bn1_mean[..]),
            ("bn1.running_var", c.clone(), &self.bn1_var[..]),
            ("bn2.running_mean", c.clone(), &self.bn2_mean[..]),
            ("bn2.running_var", c, &self.bn2_var[..]),
        ]
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        Some(match name {
            "conv1.weight" => &mut self.conv1,
            "bn1.gamma" => &mut self.bn1_gamma,
            "bn1.beta" => &mut self.bn1_beta,
            "conv2.weight" => &mut self.conv2,
            "bn2.gamma" => &mut self.bn2_gamma,
            "bn2.beta" => &mut self.bn2_beta,
            "fc1.weight" => &mut self.fc1,
            "fc2.weight" => &mut self.fc2,
            "bn1.running_mean" => &mut self.bn1_mean,
            "bn1.running_var" => &mut self.bn1_var,
            "bn2.running_mean" => &mut self.bn2_mean,
            "bn2.running_var" => &mut self.bn2_var,
            _ => return None,
        })
    }

    /// `self += other` over the trainable tensors.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.trainable_mut().into_iter().zip(other.trainable()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.trainable_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}
