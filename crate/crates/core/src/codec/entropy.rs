//! Latent likelihood models: a per-channel logistic prior for the hyper
//! latent and a zero-mean Gaussian conditional for the main latent. Both
//! integrate the density over unit bins centred on the (noisy or rounded)
//! symbol and clamp the result from below.

use super::layers::Param;
use ndarray::{Array3, Axis, Zip};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Smallest likelihood a symbol can take.
pub const LIKELIHOOD_BOUND: f64 = 1e-9;
/// Smallest Gaussian scale; the hyper-decoder output maps to `floor + softplus`.
pub const SCALE_FLOOR: f64 = 0.11;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Per-channel logistic density with learnable location and log-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Param,
    pub log_scale: Param,
    pub channels: usize,
}

impl FactorizedPrior {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            loc: Param::new(format!("{prefix}.loc"), vec![channels], vec![0.0; channels]),
            log_scale: Param::new(format!("{prefix}.log_scale"), vec![channels], vec![0.0; channels]),
            channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// Bin probability and its partials `(dp/dz, dp/dlog_scale)` at one symbol.
    fn bin(z: f64, loc: f64, log_scale: f64) -> (f64, f64, f64) {
        let inv = (-log_scale).exp();
        let (a, b) = ((z - loc + 0.5) * inv, (z - loc - 0.5) * inv);
        // Mirror to the left tail so the difference never cancels.
        let p = if z > loc {
            sigmoid(-b) - sigmoid(-a)
        } else {
            sigmoid(a) - sigmoid(b)
        };
        let da = sigmoid(a) * sigmoid(-a);
        let db = sigmoid(b) * sigmoid(-b);
        (p, (da - db) * inv, -da * a + db * b)
    }

    pub fn likelihood(&self, z: &Array3<f32>) -> Array3<f64> {
        let mut out = Array3::<f64>::zeros(z.raw_dim());
        for (c, (zc, mut oc)) in z.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))).enumerate() {
            let (loc, ls) = (f64::from(self.loc.value[c]), f64::from(self.log_scale.value[c]));
            Zip::from(&mut oc).and(&zc).for_each(|o, &zv| {
                *o = Self::bin(f64::from(zv), loc, ls).0.max(LIKELIHOOD_BOUND);
            });
        }
        out
    }

    /// Gradient with respect to `z` given `g_p = dL/dp`; accumulates
    /// parameter gradients when `params` is set.
    pub fn backward(&mut self, z: &Array3<f32>, g_p: &Array3<f64>, params: bool) -> Array3<f32> {
        let mut g_z = Array3::<f32>::zeros(z.raw_dim());
        for c in 0..self.channels {
            let (loc, ls) = (f64::from(self.loc.value[c]), f64::from(self.log_scale.value[c]));
            let (mut g_loc, mut g_ls) = (0.0f64, 0.0f64);
            Zip::from(g_z.index_axis_mut(Axis(0), c))
                .and(z.index_axis(Axis(0), c))
                .and(g_p.index_axis(Axis(0), c))
                .for_each(|gz, &zv, &gp| {
                    let (p, dz, dls) = Self::bin(f64::from(zv), loc, ls);
                    if p < LIKELIHOOD_BOUND {
                        return;
                    }
                    *gz = (gp * dz) as f32;
                    g_loc -= gp * dz;
                    g_ls += gp * dls;
                });
            if params {
                self.loc.grad[c] += g_loc as f32;
                self.log_scale.grad[c] += g_ls as f32;
            }
        }
        g_z
    }
}

/// Gaussian scales from raw hyper-decoder output.
pub fn scales_from_raw(raw: &Array3<f32>) -> Array3<f64> {
    raw.mapv(|r| SCALE_FLOOR + softplus(f64::from(r)))
}

/// Chain `dL/dscale` back to the raw hyper-decoder output.
pub fn scales_backward(raw: &Array3<f32>, g_scale: &Array3<f64>) -> Array3<f32> {
    Zip::from(raw).and(g_scale).map_collect(|&r, &g| (g * sigmoid(f64::from(r))) as f32)
}

/// Zero-mean Gaussian bin probability at `y` with scale `s`, and its
/// partials `(dp/dy, dp/ds)`.
fn gaussian_bin(y: f64, s: f64) -> (f64, f64, f64) {
    let a = y.abs();
    let (u, l) = ((0.5 - a) / s, (-0.5 - a) / s);
    let p = std_normal_cdf(u) - std_normal_cdf(l);
    let (pu, pl) = (std_normal_pdf(u), std_normal_pdf(l));
    let dp_da = (pl - pu) / s;
    let sign = if y > 0.0 {
        1.0
    } else if y < 0.0 {
        -1.0
    } else {
        0.0
    };
    (p, sign * dp_da, (-u * pu + l * pl) / s)
}

pub fn gaussian_likelihood(y: &Array3<f32>, scales: &Array3<f64>) -> Array3<f64> {
    Zip::from(y)
        .and(scales)
        .map_collect(|&v, &s| gaussian_bin(f64::from(v), s).0.max(LIKELIHOOD_BOUND))
}

/// Returns `(dL/dy, dL/dscale)` given `g_p = dL/dp`.
pub fn gaussian_backward(y: &Array3<f32>, scales: &Array3<f64>, g_p: &Array3<f64>) -> (Array3<f32>, Array3<f64>) {
    let mut g_y = Array3::<f32>::zeros(y.raw_dim());
    let mut g_s = Array3::<f64>::zeros(y.raw_dim());
    Zip::from(&mut g_y)
        .and(&mut g_s)
        .and(y)
        .and(scales)
        .and(g_p)
        .for_each(|gy, gs, &v, &s, &gp| {
            let (p, dy, ds) = gaussian_bin(f64::from(v), s);
            if p >= LIKELIHOOD_BOUND {
                *gy = (gp * dy) as f32;
                *gs = gp * ds;
            }
        });
    (g_y, g_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logistic_bins_sum_to_one() {
        let prior = FactorizedPrior::new("p", 1);
        let z = Array3::from_shape_fn((1, 1, 81), |(_, _, i)| i as f32 - 40.0);
        let total: f64 = prior.likelihood(&z).sum();
        // Far-tail bins are clamped up to the bound.
        assert!((total - 1.0).abs() < 81.0 * LIKELIHOOD_BOUND, "{total}");
    }

    #[test]
    fn gaussian_bins_sum_to_one() {
        let y = Array3::from_shape_fn((1, 1, 41), |(_, _, i)| i as f32 - 20.0);
        let s = Array3::from_elem((1, 1, 41), 2.5);
        let total: f64 = gaussian_likelihood(&y, &s).sum();
        assert!((total - 1.0).abs() < 41.0 * LIKELIHOOD_BOUND, "{total}");
    }

    #[test]
    fn far_tail_hits_the_bound() {
        let y = Array3::from_elem((1, 1, 1), 1e4f32);
        let s = Array3::from_elem((1, 1, 1), SCALE_FLOOR);
        assert_eq!(gaussian_likelihood(&y, &s)[[0, 0, 0]], LIKELIHOOD_BOUND);
    }

    proptest! {
        #[test]
        fn gaussian_partials_match_differences(y in -4.0f64..4.0, s in 0.2f64..5.0) {
            let h = 1e-6;
            let (_, dy, ds) = gaussian_bin(y, s);
            let fy = (gaussian_bin(y + h, s).0 - gaussian_bin(y - h, s).0) / (2.0 * h);
            let fs = (gaussian_bin(y, s + h).0 - gaussian_bin(y, s - h).0) / (2.0 * h);
            prop_assume!(y.abs() > 1e-3);
            prop_assert!((fy - dy).abs() < 1e-6);
            prop_assert!((fs - ds).abs() < 1e-6);
        }

        #[test]
        fn logistic_partials_match_differences(z in -6.0f64..6.0, loc in -1.0f64..1.0, ls in -1.0f64..1.5) {
            let h = 1e-6;
            let (_, dz, dls) = FactorizedPrior::bin(z, loc, ls);
            let fz = (FactorizedPrior::bin(z + h, loc, ls).0 - FactorizedPrior::bin(z - h, loc, ls).0) / (2.0 * h);
            let fl = (FactorizedPrior::bin(z, loc, ls + h).0 - FactorizedPrior::bin(z, loc, ls - h).0) / (2.0 * h);
            prop_assert!((fz - dz).abs() < 1e-6);
            prop_assert!((fl - dls).abs() < 1e-6);
        }

        #[test]
        fn likelihoods_are_probabilities(y in -50.0f32..50.0, s in 0.11f64..20.0) {
            let p = gaussian_likelihood(&Array3::from_elem((1, 1, 1), y), &Array3::from_elem((1, 1, 1), s))[[0, 0, 0]];
            prop_assert!((LIKELIHOOD_BOUND..=1.0).contains(&p));
        }
    }
}
