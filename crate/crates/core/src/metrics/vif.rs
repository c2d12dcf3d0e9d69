//! Pixel-domain VIF at four dyadic scales, following the libvmaf float
//! implementation. Planes are on the 0..255 scale.

use super::filter::{gaussian_taps, Correlate, PadMode, Separable};
use super::{ensure_finite, MetricError};
use ndarray::{Array2, ArrayView2, Zip};
use std::f64::consts::LN_2;

/// Variance of the additive HVS noise.
const SIGMA_NSQ: f64 = 2.0;
/// Inverse of the maximum signal variance used for flat-region scoring.
const SIGMA_MAX_INV: f64 = 4.0 / (255.0 * 255.0);
/// Floor below which variances count as zero.
const EPS: f64 = 1e-10;
/// libvmaf subtracts this before filtering.
const PLANE_OFFSET: f64 = 128.0;

pub(crate) fn scale_window(scale: usize) -> Vec<f64> {
    let n = (1usize << (4 - scale)) + 1;
    gaussian_taps(n, n as f64 / 5.0)
}

fn blur_op(taps: &[f64]) -> Separable {
    Separable::symmetric(taps.to_vec(), (taps.len() - 1) / 2, 1, PadMode::Reflect)
}

/// Reflect-padded, stride-2 blur that maps (h, w) to (h / 2, w / 2).
fn downscale_op(taps: &[f64], dim: (usize, usize)) -> Separable {
    let half = (taps.len() - 1) / 2;
    let hi = |n: usize| if n % 2 == 1 { half - 1 } else { half };
    Separable {
        horizontal: Correlate::new(taps.to_vec(), half, hi(dim.1), 2, PadMode::Reflect),
        vertical: Correlate::new(taps.to_vec(), half, hi(dim.0), 2, PadMode::Reflect),
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelTerms {
    num: f64,
    den: f64,
    d_s2: f64,
    d_s12: f64,
}

/// Per-pixel numerator and denominator with their partial derivatives with
/// respect to the raw (pre-ReLU) `sigma2_sq` and `sigma12`.
fn pixel(s1: f64, s2_raw: f64, s12: f64, egl: f64) -> PixelTerms {
    let s2 = s2_raw.max(0.0);
    let mut s1e = s1;
    let g0 = s12 / (s1 + EPS);
    let mut g = g0;
    let (mut dg_s2, mut dg_s12) = (0.0, 1.0 / (s1 + EPS));
    let mut sv = s2 - g0 * s12;
    let (mut dsv_s2, mut dsv_s12) = (1.0, -2.0 * g0);

    if s1 < EPS {
        g = 0.0;
        (dg_s2, dg_s12) = (0.0, 0.0);
        sv = s2;
        (dsv_s2, dsv_s12) = (1.0, 0.0);
        s1e = 0.0;
    }
    if s2 < EPS {
        g = 0.0;
        (dg_s2, dg_s12) = (0.0, 0.0);
        sv = 0.0;
        (dsv_s2, dsv_s12) = (0.0, 0.0);
    }
    if g < 0.0 {
        sv = s2;
        (dsv_s2, dsv_s12) = (1.0, 0.0);
        g = 0.0;
        (dg_s2, dg_s12) = (0.0, 0.0);
    }
    if sv <= EPS {
        sv = EPS;
        (dsv_s2, dsv_s12) = (0.0, 0.0);
    }
    // Enhancement gain limit: NEG mode caps the local gain at 1.
    if g > egl {
        g = egl;
        (dg_s2, dg_s12) = (0.0, 0.0);
    }

    let denom = sv + SIGMA_NSQ;
    let q = g * g * s1e / denom;
    let mut num = (1.0 + q).log2();
    let dn_dq = 1.0 / ((1.0 + q) * LN_2);
    let dq_dg = 2.0 * g * s1e / denom;
    let dq_dsv = -g * g * s1e / (denom * denom);
    let mut d_s2 = dn_dq * (dq_dg * dg_s2 + dq_dsv * dsv_s2);
    let mut d_s12 = dn_dq * (dq_dg * dg_s12 + dq_dsv * dsv_s12);

    if s12 < 0.0 {
        num = 0.0;
        d_s2 = 0.0;
        d_s12 = 0.0;
    }
    let den = if s1e < SIGMA_NSQ {
        num = 1.0 - s2 * SIGMA_MAX_INV;
        d_s2 = -SIGMA_MAX_INV;
        d_s12 = 0.0;
        1.0
    } else {
        (1.0 + s1e / SIGMA_NSQ).log2()
    };
    if s2_raw <= 0.0 {
        d_s2 = 0.0;
    }
    PixelTerms { num, den, d_s2, d_s12 }
}

struct VifScale {
    blur: Separable,
    /// Operator that produced this scale from the previous one.
    down: Option<Separable>,
    r: Array2<f64>,
    d: Array2<f64>,
    mu1: Array2<f64>,
    mu2: Array2<f64>,
    d_s2: Array2<f64>,
    d_s12: Array2<f64>,
    num: f64,
    den: f64,
}

/// Forward pass of the four VIF features, retaining what the backward pass needs.
pub struct VifForward {
    scales: Vec<VifScale>,
    in_dim: (usize, usize),
}

impl VifForward {
    pub fn new(reference: ArrayView2<'_, f64>, distorted: ArrayView2<'_, f64>, egl: f64) -> Self {
        let in_dim = reference.dim();
        let mut r = reference.mapv(|v| v - PLANE_OFFSET);
        let mut d = distorted.mapv(|v| v - PLANE_OFFSET);
        let mut scales = Vec::with_capacity(4);
        for s in 0..4 {
            let taps = scale_window(s);
            let down = (s > 0).then(|| downscale_op(&taps, r.dim()));
            if let Some(op) = &down {
                r = op.apply(r.view());
                d = op.apply(d.view());
            }
            let blur = blur_op(&taps);
            let mu1 = blur.apply(r.view());
            let mu2 = blur.apply(d.view());
            let e11 = blur.apply((&r * &r).view());
            let e22 = blur.apply((&d * &d).view());
            let e12 = blur.apply((&r * &d).view());
            let mut d_s2 = Array2::zeros(mu1.dim());
            let mut d_s12 = Array2::zeros(mu1.dim());
            let mut num = 0.0;
            let mut den = 0.0;
            {
                let ds2 = d_s2.as_slice_mut().expect("contiguous");
                let ds12 = d_s12.as_slice_mut().expect("contiguous");
                let sl = |a: &Array2<f64>| a.as_slice().expect("contiguous").to_vec();
                let (m1, m2, a, b, c) = (sl(&mu1), sl(&mu2), sl(&e11), sl(&e22), sl(&e12));
                for p in 0..m1.len() {
                    let s1 = (a[p] - m1[p] * m1[p]).max(0.0);
                    let s2_raw = b[p] - m2[p] * m2[p];
                    let s12 = c[p] - m1[p] * m2[p];
                    let t = pixel(s1, s2_raw, s12, egl);
                    num += t.num;
                    den += t.den;
                    ds2[p] = t.d_s2;
                    ds12[p] = t.d_s12;
                }
            }
            scales.push(VifScale {
                blur,
                down,
                r: r.clone(),
                d: d.clone(),
                mu1,
                mu2,
                d_s2,
                d_s12,
                num,
                den,
            });
        }
        Self { scales, in_dim }
    }

    pub fn features(&self) -> [f64; 4] {
        std::array::from_fn(|s| self.scales[s].num / self.scales[s].den)
    }

    pub fn num_den(&self) -> [(f64, f64); 4] {
        std::array::from_fn(|s| (self.scales[s].num, self.scales[s].den))
    }

    /// Gradient of `sum_s upstream[s] * feature_s` with respect to the distorted plane.
    pub fn backward(&self, upstream: [f64; 4]) -> Result<Array2<f64>, MetricError> {
        let mut carry: Option<Array2<f64>> = None;
        for s in (0..4).rev() {
            let sc = &self.scales[s];
            let w = upstream[s] / sc.den;
            let dim = sc.d.dim();
            let mut g = if w != 0.0 {
                let g_s2 = sc.d_s2.mapv(|v| v * w);
                let g_s12 = sc.d_s12.mapv(|v| v * w);
                let mut g_mu2 = Array2::zeros(sc.mu1.dim());
                Zip::from(&mut g_mu2)
                    .and(&g_s2)
                    .and(&g_s12)
                    .and(&sc.mu1)
                    .and(&sc.mu2)
                    .for_each(|gm, &a, &b, &m1, &m2| *gm = -2.0 * m2 * a - m1 * b);
                let mut g = sc.blur.adjoint(g_mu2.view(), dim);
                let t22 = sc.blur.adjoint(g_s2.view(), dim);
                let t12 = sc.blur.adjoint(g_s12.view(), dim);
                Zip::from(&mut g)
                    .and(&t22)
                    .and(&t12)
                    .and(&sc.r)
                    .and(&sc.d)
                    .for_each(|gv, &a, &b, &rv, &dv| *gv += 2.0 * dv * a + rv * b);
                g
            } else {
                Array2::zeros(dim)
            };
            if let Some(c) = carry.take() {
                g += &c;
            }
            ensure_finite(g.iter(), &format!("vif scale {s}"))?;
            carry = Some(match &sc.down {
                Some(op) => {
                    let prev_dim = if s > 1 { self.scales[s - 1].d.dim() } else { self.in_dim };
                    op.adjoint(g.view(), prev_dim)
                }
                None => g,
            });
        }
        Ok(carry.expect("four scales"))
    }
}

/// Four VIF scale features of a plane pair on the 0..255 scale.
///
/// `egl` is the enhancement gain limit; 1.0 selects NEG behaviour.
pub fn vif_features(reference: ArrayView2<'_, f64>, distorted: ArrayView2<'_, f64>, egl: f64) -> [f64; 4] {
    VifForward::new(reference, distorted, egl).features()
}
