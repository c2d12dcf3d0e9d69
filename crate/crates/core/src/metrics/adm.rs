//! Additive-impairment / detail-loss measure (ADM2) over four db2 wavelet
//! scales, following the libvmaf float implementation. Planes are on the
//! 0..255 scale.

use super::filter::{Correlate, PadMode, Separable};
use super::{ensure_finite, MetricError};
use ndarray::{Array2, ArrayView2, Axis, Zip};

const DB2_LO: [f64; 4] = [0.482962913144690, 0.836516303737469, 0.224143868041857, -0.129409522550921];
const DB2_HI: [f64; 4] = [-0.129409522550921, -0.224143868041857, 0.836516303737469, -0.482962913144690];

/// CSF weights per scale for the (h, v, d) orientations.
const RFACTORS: [[f64; 3]; 4] = [
    [0.017382, 0.017382, 0.005891],
    [0.031985, 0.031985, 0.014299],
    [0.043373, 0.043373, 0.024397],
    [0.045673, 0.045673, 0.031313],
];
const BORDER_FACTOR: f64 = 0.1;
/// Guards the division in the restoration gain `T / O`.
const DIV_EPS: f64 = 1e-30;

/// A scalar and its slope along one direction of travel. Comparisons break
/// value ties on the slope, so branches follow the one-sided limit.
#[derive(Clone, Copy, Debug)]
struct Ray {
    v: f64,
    d: f64,
}

impl Ray {
    const ZERO: Ray = Ray { v: 0.0, d: 0.0 };
    const ONE: Ray = Ray { v: 1.0, d: 0.0 };

    fn lt(self, other: Ray) -> bool {
        self.v < other.v || (self.v == other.v && self.d < other.d)
    }

    fn scale(self, c: f64) -> Ray {
        Ray {
            v: self.v * c,
            d: self.d * c,
        }
    }

    fn abs(self) -> Ray {
        if Ray::ZERO.lt(self) || (self.v == 0.0 && self.d == 0.0) {
            self
        } else {
            self.scale(-1.0)
        }
    }
}

/// Coefficients of flat regions are rounding noise around zero, and equal
/// neighbourhoods give `t` equal to `o` up to rounding. Both sit on a kink
/// of the decoupling for the purpose of choosing slopes.
const TIE_FLOOR: f64 = 1e-9;

fn snap_ties(o: f64, t: f64) -> (f64, f64) {
    let snap = |v: f64| if v.abs() < TIE_FLOOR { 0.0 } else { v };
    let (o, t) = (snap(o), snap(t));
    if (t - o).abs() < TIE_FLOOR {
        (o, o)
    } else {
        (o, t)
    }
}

/// Restored part of a distorted coefficient `t` given reference `o`.
fn decouple(o: f64, t: Ray, angle_flag: bool, egl: f64) -> Ray {
    let k_raw = Ray {
        v: t.v / (o + DIV_EPS),
        d: t.d / (o + DIV_EPS),
    };
    let k = if !Ray::ZERO.lt(k_raw) {
        Ray::ZERO
    } else if !k_raw.lt(Ray::ONE) {
        Ray::ONE
    } else {
        k_raw
    };
    let mut r = k.scale(o);
    if angle_flag && Ray::ZERO.lt(r) {
        let scaled = r.scale(egl);
        r = if scaled.lt(t) { scaled } else { t };
    }
    if angle_flag && r.lt(Ray::ZERO) {
        let scaled = r.scale(egl);
        r = if t.lt(scaled) { scaled } else { t };
    }
    r
}

fn cos_1deg_sq() -> f64 {
    (1.0f64.to_radians()).cos().powi(2)
}

/// One db2 analysis pass along `axis` for an input of length `n`.
fn dwt_pass(taps: [f64; 4], n: usize) -> Correlate {
    Correlate::new(taps.to_vec(), 1, if n % 2 == 0 { 1 } else { 2 }, 2, PadMode::Vmaf)
}

struct Dwt {
    v_lo: Correlate,
    v_hi: Correlate,
    h_lo: Correlate,
    h_hi: Correlate,
    in_dim: (usize, usize),
    mid_dim: (usize, usize),
}

/// Approximation plus (h, v, d) detail bands.
struct Bands {
    a: Array2<f64>,
    det: [Array2<f64>; 3],
}

impl Dwt {
    fn new(in_dim: (usize, usize)) -> Self {
        let v_lo = dwt_pass(DB2_LO, in_dim.0);
        let mid_dim = (v_lo.output_len(in_dim.0), in_dim.1);
        Self {
            v_lo,
            v_hi: dwt_pass(DB2_HI, in_dim.0),
            h_lo: dwt_pass(DB2_LO, in_dim.1),
            h_hi: dwt_pass(DB2_HI, in_dim.1),
            in_dim,
            mid_dim,
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Bands {
        let lo = self.v_lo.apply(x, Axis(0));
        let hi = self.v_hi.apply(x, Axis(0));
        let a = self.h_lo.apply(lo.view(), Axis(1));
        let v = self.h_hi.apply(lo.view(), Axis(1));
        let h = self.h_lo.apply(hi.view(), Axis(1));
        let d = self.h_hi.apply(hi.view(), Axis(1));
        Bands { a, det: [h, v, d] }
    }

    fn adjoint(&self, ga: Option<&Array2<f64>>, gdet: &[Array2<f64>; 3]) -> Array2<f64> {
        let n = self.in_dim.1;
        let mut glo = self.h_hi.adjoint(gdet[1].view(), Axis(1), n);
        if let Some(ga) = ga {
            glo += &self.h_lo.adjoint(ga.view(), Axis(1), n);
        }
        let mut ghi = self.h_lo.adjoint(gdet[0].view(), Axis(1), n);
        ghi += &self.h_hi.adjoint(gdet[2].view(), Axis(1), n);
        debug_assert_eq!(glo.dim(), self.mid_dim);
        let mut g = self.v_lo.adjoint(glo.view(), Axis(0), self.in_dim.0);
        g += &self.v_hi.adjoint(ghi.view(), Axis(0), self.in_dim.0);
        g
    }
}

/// Interior rectangle `[top, bottom) x [left, right)` of a band.
#[derive(Clone, Copy, Debug)]
struct Border {
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
}

impl Border {
    fn new(image_dim: (usize, usize), scale: usize) -> Self {
        let div = (1usize << (scale + 1)) as f64;
        let height = (image_dim.0 as f64 / div).ceil();
        let width = (image_dim.1 as f64 / div).ceil();
        let left = (width * BORDER_FACTOR - 0.5).floor();
        let top = (height * BORDER_FACTOR - 0.5).floor();
        Self {
            top: top as usize,
            bottom: (height - top) as usize,
            left: left as usize,
            right: (width - left) as usize,
        }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.bottom).contains(&i) && (self.left..self.right).contains(&j)
    }

    /// The constant each Minkowski pool adds, three orientations' worth.
    fn pool_constant(&self) -> f64 {
        let area = ((self.bottom - self.top) * (self.right - self.left)) as f64;
        3.0 * (area / 32.0).cbrt()
    }
}

/// 3x3 box sum with the libvmaf border convention.
fn box3() -> Separable {
    Separable::symmetric(vec![1.0, 1.0, 1.0], 1, 1, PadMode::Vmaf)
}

struct AdmScale {
    dwt: Dwt,
    border: Border,
    /// d|R|/dT and d|A|/dT per orientation, averaged over the two sides of
    /// any kink the coefficient sits on exactly.
    d_abs_r: [Array2<f64>; 3],
    d_abs_a: [Array2<f64>; 3],
    x: [Array2<f64>; 3],
    norms: [f64; 3],
    num: f64,
    den: f64,
}

/// Forward pass of ADM2 retaining what the backward pass needs.
pub struct AdmForward {
    scales: Vec<AdmScale>,
    image_dim: (usize, usize),
    num_sum: f64,
    den_sum: f64,
    score: f64,
    /// True when the score came from a numerator or denominator guard.
    guarded: bool,
}

impl AdmForward {
    pub fn new(reference: ArrayView2<'_, f64>, distorted: ArrayView2<'_, f64>, egl: f64) -> Self {
        let image_dim = reference.dim();
        let mut o_a = reference.to_owned();
        let mut t_a = distorted.to_owned();
        let mut scales = Vec::with_capacity(4);
        let box_op = box3();
        let cos_sq = cos_1deg_sq();

        for s in 0..4 {
            let dwt = Dwt::new(o_a.dim());
            let o = dwt.forward(o_a.view());
            let t = dwt.forward(t_a.view());
            let border = Border::new(image_dim, s);
            let rf = RFACTORS[s];
            let dim = o.a.dim();

            // Decouple T into restored R and additive A = T - R.
            let mut r: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
            let mut d_abs_r: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
            let mut d_abs_a: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let (oh, ov) = (o.det[0][[i, j]], o.det[1][[i, j]]);
                    let (th, tv) = (t.det[0][[i, j]], t.det[1][[i, j]]);
                    let ot_dp = oh * th + ov * tv;
                    let o_mag = oh * oh + ov * ov;
                    let t_mag = th * th + tv * tv;
                    let angle_flag = ot_dp >= 0.0 && ot_dp * ot_dp >= cos_sq * o_mag * t_mag;
                    for b in 0..3 {
                        let ov_ = o.det[b][[i, j]];
                        let tv_ = t.det[b][[i, j]];
                        let (os, ts) = snap_ties(ov_, tv_);
                        let [up, down] = [1.0, -1.0].map(|s| {
                            let rv = decouple(os, Ray { v: ts, d: s }, angle_flag, egl);
                            let av = Ray { v: ts - rv.v, d: s - rv.d };
                            (rv.abs().d, av.abs().d)
                        });
                        r[b][[i, j]] = decouple(ov_, Ray { v: tv_, d: 0.0 }, angle_flag, egl).v;
                        d_abs_r[b][[i, j]] = 0.5 * (up.0 - down.0);
                        d_abs_a[b][[i, j]] = 0.5 * (up.1 - down.1);
                    }
                }
            }

            // Denominator: CSF-weighted reference details, Minkowski p = 3.
            let mut den = border.pool_constant();
            for b in 0..3 {
                let mut acc = 0.0;
                for ((i, j), &v) in o.det[b].indexed_iter() {
                    if border.contains(i, j) {
                        acc += (rf[b] * v).abs().powi(3);
                    }
                }
                den += acc.cbrt();
            }

            // Contrast masking threshold from the additive impairments.
            let csf_a: [Array2<f64>; 3] =
                std::array::from_fn(|b| Zip::from(&t.det[b]).and(&r[b]).map_collect(|&tv, &rv| rf[b] * (tv - rv)));
            let mut thr = Array2::<f64>::zeros(dim);
            for c in &csf_a {
                let abs = c.mapv(f64::abs);
                thr += &box_op.apply(abs.view());
                thr += &abs;
            }
            thr.mapv_inplace(|v| v / 30.0);
            for ((i, j), v) in thr.indexed_iter_mut() {
                if !border.contains(i, j) {
                    *v = 0.0;
                }
            }

            let mut num = border.pool_constant();
            let mut x: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
            let mut norms = [0.0; 3];
            for b in 0..3 {
                let mut acc = 0.0;
                for ((i, j), xv) in x[b].indexed_iter_mut() {
                    if !border.contains(i, j) {
                        continue;
                    }
                    let rr = r[b][[i, j]] * rf[b];
                    let v = (rr.abs() - thr[[i, j]]).max(0.0);
                    *xv = v;
                    acc += v * v * v;
                }
                norms[b] = acc.cbrt();
                num += norms[b];
            }

            scales.push(AdmScale {
                dwt,
                border,
                d_abs_r,
                d_abs_a,
                x,
                norms,
                num,
                den,
            });
            o_a = o.a;
            t_a = t.a;
        }

        let (w, h) = (image_dim.1 as f64, image_dim.0 as f64);
        let limit = 1e-10 * (w * h) / (1920.0 * 1080.0);
        let mut num_sum: f64 = scales.iter().map(|s| s.num).sum();
        let mut den_sum: f64 = scales.iter().map(|s| s.den).sum();
        let mut guarded = false;
        if num_sum < limit {
            num_sum = 0.0;
            guarded = true;
        }
        if den_sum < limit {
            den_sum = 0.0;
            guarded = true;
        }
        let score = if den_sum == 0.0 { 1.0 } else { num_sum / den_sum };
        Self {
            scales,
            image_dim,
            num_sum,
            den_sum,
            score,
            guarded,
        }
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Per-scale `num / den`, the non-pooled ADM features.
    pub fn scale_features(&self) -> [f64; 4] {
        std::array::from_fn(|s| self.scales[s].num / self.scales[s].den)
    }

    pub fn num_den(&self) -> (f64, f64) {
        (self.num_sum, self.den_sum)
    }

    /// Gradient of `upstream * adm2` with respect to the distorted plane.
    pub fn backward(&self, upstream: f64) -> Result<Array2<f64>, MetricError> {
        let w = if self.guarded || upstream == 0.0 {
            0.0
        } else {
            upstream / self.den_sum
        };
        let box_op = box3();
        let mut carry: Option<Array2<f64>> = None;
        for s in (0..4).rev() {
            let sc = &self.scales[s];
            let rf = RFACTORS[s];
            let dim = sc.x[0].dim();
            let mut g_t: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
            if w != 0.0 {
                let mut g_thr = Array2::<f64>::zeros(dim);
                let mut g_abs_r: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros(dim));
                for b in 0..3 {
                    let n = sc.norms[b];
                    if n <= 0.0 {
                        continue;
                    }
                    let inv = w / (n * n);
                    for ((i, j), &xv) in sc.x[b].indexed_iter() {
                        if xv > 0.0 {
                            let gx = inv * xv * xv;
                            g_abs_r[b][[i, j]] += gx * rf[b];
                            g_thr[[i, j]] -= gx;
                        }
                    }
                }
                for ((i, j), v) in g_thr.indexed_iter_mut() {
                    if !sc.border.contains(i, j) {
                        *v = 0.0;
                    } else {
                        *v /= 30.0;
                    }
                }
                let g_box = box_op.adjoint(g_thr.view(), dim);
                for b in 0..3 {
                    // The threshold sums rf * |A| over orientations.
                    Zip::from(&mut g_t[b])
                        .and(&g_abs_r[b])
                        .and(&g_box)
                        .and(&g_thr)
                        .and(&sc.d_abs_r[b])
                        .and(&sc.d_abs_a[b])
                        .for_each(|gt, &gr, &gb, &gth, &dr, &da| {
                            *gt = gr * dr + rf[b] * (gb + gth) * da;
                        });
                }
            }
            let g = sc.dwt.adjoint(carry.as_ref(), &g_t);
            ensure_finite(g.iter(), &format!("adm scale {s}"))?;
            carry = Some(g);
        }
        let g = carry.expect("four scales");
        debug_assert_eq!(g.dim(), self.image_dim);
        Ok(g)
    }
}

/// ADM2 of a plane pair on the 0..255 scale; `egl = 1.0` selects NEG behaviour.
pub fn adm_feature(reference: ArrayView2<'_, f64>, distorted: ArrayView2<'_, f64>, egl: f64) -> f64 {
    AdmForward::new(reference, distorted, egl).score()
}
