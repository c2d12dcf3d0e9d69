//! Adam with bias correction, applied to a masked subset of parameters.

use serde::{Deserialize, Serialize};

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of completed updates.
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    /// Zero moments shaped like `sizes`.
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.moments.iter().map(|m| m.m.len()).collect()
    }

    /// One update of every tensor whose `mask` entry is true. Masked-out
    /// tensors and their moments are left untouched.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], mask: &[bool]) {
        debug_assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / bc1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !mask[i] {
                continue;
            }
            let Moments { m, v } = &mut self.moments[i];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let denom = (v[k] / bc2).sqrt() + self.eps;
                p[k] -= step_size * m[k] / denom;
            }
        }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(0.1, &[2]);
        let mut p = vec![1.0f32, -1.0];
        let g = vec![3.0f32, -0.5];
        opt.update(&mut [&mut p], &[&g], &[true]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn masked_tensor_is_untouched() {
        let mut opt = Adam::new(0.1, &[1, 1]);
        let (mut a, mut b) = (vec![1.0f32], vec![2.0f32]);
        opt.update(&mut [&mut a, &mut b], &[&[1.0], &[1.0]], &[true, false]);
        assert_eq!(b[0].to_bits(), 2.0f32.to_bits());
        assert_eq!(opt.moments[1].m, vec![0.0]);
        assert!(a[0] < 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = Adam::new(0.05, &[1]);
        let mut p = vec![5.0f32];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.5)];
            opt.update(&mut [&mut p], &[&g], &[true]);
        }
        assert!((p[0] - 1.5).abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let (mut a, mut b) = (vec![3.0f32], vec![4.0f32]);
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((a[0] - 0.6).abs() < 1e-6 && (b[0] - 0.8).abs() < 1e-6);
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 1.0).abs() < 1e-6);
    }
}
