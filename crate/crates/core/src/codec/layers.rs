//! Convolution, transposed convolution and GDN layers on `(C, H, W)` f32
//! tensors, each with a cached forward pass and a hand-written backward pass.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// A named parameter tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { name, shape, value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Spatial output size of a strided correlation over an `n`-long axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold `x` into `(C*k*k, oh*ow)` patches; out-of-range taps read zero.
fn im2col(x: ArrayView3<'_, f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let out = cols.as_slice_mut().expect("fresh array is contiguous");
    let n = oh * ow;
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    let dst = &mut out[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back onto a `(c, h, w)` grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: ArrayView2<'_, f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    let n = oh * ow;
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(iy as usize);
                    let s = &src[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in s.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn flat(x: &Array3<f32>) -> ArrayView2<'_, f32> {
    let (c, h, w) = x.dim();
    x.view().into_shape_with_order((c, h * w)).expect("contiguous tensor")
}

fn unflat(x: Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = x.nrows();
    x.into_shape_with_order((c, h, w)).expect("contiguous tensor")
}

fn init_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (1.0 / fan_in as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Cached state a layer needs for its backward pass.
#[derive(Debug)]
pub enum Cache {
    Cols(Array2<f32>),
    Input(Array3<f32>),
    Gdn { x: Array3<f32>, norm: Array2<f32> },
    Mask(Vec<bool>),
}

/// `k x k` correlation with zero padding, weight layout `(cout, cin, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k;
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                vec![cout, cin, k, k],
                init_uniform(rng, cout * fan_in, fan_in),
            ),
            bias: Param::new(format!("{prefix}.bias"), vec![cout], vec![0.0; cout]),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        (cin * k * k + 1) * cout
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), &self.weight.value).expect("weight shape")
    }

    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.k, self.stride, self.pad),
            conv_out_len(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Cache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_dim(h, w);
        let cols = im2col(x.view(), self.k, self.stride, self.pad, oh, ow);
        let mut y = Array2::<f32>::zeros((self.cout, oh * ow));
        general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut y);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(&self.bias.value) {
            row += b;
        }
        (unflat(y, oh, ow), Cache::Cols(cols))
    }

    /// Accumulates parameter gradients when `params` is set and returns the
    /// input gradient when `input_grad` is set.
    pub fn backward(
        &mut self,
        cache: Cache,
        g: &Array3<f32>,
        in_hw: (usize, usize),
        params: bool,
        input_grad: bool,
    ) -> Option<Array3<f32>> {
        let Cache::Cols(cols) = cache else { unreachable!("conv cache") };
        let g2 = flat(g);
        if params {
            let mut gw = ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), &self.weight.grad)
                .expect("weight shape")
                .to_owned();
            general_mat_mul(1.0, &g2, &cols.t(), 1.0, &mut gw);
            self.weight.grad.copy_from_slice(gw.as_slice().expect("contiguous"));
            for (gb, row) in self.bias.grad.iter_mut().zip(g2.axis_iter(Axis(0))) {
                *gb += row.sum();
            }
        }
        if !input_grad {
            return None;
        }
        let mut gcols = Array2::<f32>::zeros(cols.raw_dim());
        general_mat_mul(1.0, &self.weight_matrix().t(), &g2, 0.0, &mut gcols);
        let (_, oh, ow) = g.dim();
        Some(col2im(
            gcols.view(),
            self.cin,
            in_hw.0,
            in_hw.1,
            self.k,
            self.stride,
            self.pad,
            oh,
            ow,
        ))
    }
}

/// Transposed convolution, the adjoint of a [`Conv`] with the same geometry
/// producing an output `stride` times larger. Weight layout `(cin, cout, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k / (stride * stride);
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                vec![cin, cout, k, k],
                init_uniform(rng, cin * cout * k * k, fan_in.max(1)),
            ),
            bias: Param::new(format!("{prefix}.bias"), vec![cout], vec![0.0; cout]),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.cin, self.cout * self.k * self.k), &self.weight.value).expect("weight shape")
    }

    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.stride, w * self.stride)
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Cache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_dim(h, w);
        let x2 = flat(x);
        let mut cols = Array2::<f32>::zeros((self.cout * self.k * self.k, h * w));
        general_mat_mul(1.0, &self.weight_matrix().t(), &x2, 0.0, &mut cols);
        let mut y = col2im(cols.view(), self.cout, oh, ow, self.k, self.stride, self.pad, h, w);
        for (mut plane, &b) in y.axis_iter_mut(Axis(0)).zip(&self.bias.value) {
            plane += b;
        }
        (y, Cache::Input(x.clone()))
    }

    pub fn backward(&mut self, cache: Cache, g: &Array3<f32>, params: bool, input_grad: bool) -> Option<Array3<f32>> {
        let Cache::Input(x) = cache else { unreachable!("deconv cache") };
        let (_, h, w) = x.dim();
        let gcols = im2col(g.view(), self.k, self.stride, self.pad, h, w);
        if params {
            let mut gw = ArrayView2::from_shape((self.cin, self.cout * self.k * self.k), &self.weight.grad)
                .expect("weight shape")
                .to_owned();
            general_mat_mul(1.0, &flat(&x), &gcols.t(), 1.0, &mut gw);
            self.weight.grad.copy_from_slice(gw.as_slice().expect("contiguous"));
            for (gb, plane) in self.bias.grad.iter_mut().zip(g.axis_iter(Axis(0))) {
                *gb += plane.sum();
            }
        }
        if !input_grad {
            return None;
        }
        let mut gx = Array2::<f32>::zeros((self.cin, h * w));
        general_mat_mul(1.0, &self.weight_matrix(), &gcols, 0.0, &mut gx);
        Some(unflat(gx, h, w))
    }
}

const GDN_BETA_FLOOR: f32 = 1e-6;
const GDN_GAMMA_INIT: f32 = 0.1;
const GDN_GAMMA_OFF_DIAG: f32 = 1e-3;

/// Generalized divisive normalization `x / sqrt(beta + gamma x^2)` across
/// channels, or its inverse `x * sqrt(...)`. Parameterized as
/// `beta = b^2 + floor`, `gamma = g^2` so both stay non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Gdn {
    pub beta: Param,
    pub gamma: Param,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(prefix: &str, channels: usize, inverse: bool) -> Self {
        let gamma = (0..channels * channels)
            .map(|i| {
                if i / channels == i % channels {
                    GDN_GAMMA_INIT
                } else {
                    GDN_GAMMA_OFF_DIAG
                }
                .sqrt()
            })
            .collect();
        Self {
            beta: Param::new(format!("{prefix}.beta"), vec![channels], vec![1.0; channels]),
            gamma: Param::new(format!("{prefix}.gamma"), vec![channels, channels], gamma),
            channels,
            inverse,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        channels + channels * channels
    }

    fn effective(&self) -> (Array1<f32>, Array2<f32>) {
        let c = self.channels;
        let beta = Array1::from_iter(self.beta.value.iter().map(|b| b * b + GDN_BETA_FLOOR));
        let gamma = Array2::from_shape_fn((c, c), |(i, j)| {
            let g = self.gamma.value[i * c + j];
            g * g
        });
        (beta, gamma)
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Cache) {
        let (c, h, w) = x.dim();
        let (beta, gamma) = self.effective();
        let x2 = flat(x);
        let sq = x2.mapv(|v| v * v);
        let mut norm = Array2::<f32>::zeros((c, h * w));
        general_mat_mul(1.0, &gamma, &sq, 0.0, &mut norm);
        for (mut row, &b) in norm.axis_iter_mut(Axis(0)).zip(&beta) {
            row += b;
        }
        let y = if self.inverse {
            &x2 * &norm.mapv(f32::sqrt)
        } else {
            &x2 / &norm.mapv(f32::sqrt)
        };
        (unflat(y, h, w), Cache::Gdn { x: x.clone(), norm })
    }

    pub fn backward(&mut self, cache: Cache, g: &Array3<f32>, params: bool, input_grad: bool) -> Option<Array3<f32>> {
        let Cache::Gdn { x, norm } = cache else { unreachable!("gdn cache") };
        let (c, h, w) = x.dim();
        let x2 = flat(&x);
        let g2 = flat(g);
        // q = dL/dnorm per channel and pixel.
        let q = if self.inverse {
            ndarray::Zip::from(&g2)
                .and(&x2)
                .and(&norm)
                .map_collect(|&gv, &xv, &n| 0.5 * gv * xv / n.sqrt())
        } else {
            ndarray::Zip::from(&g2)
                .and(&x2)
                .and(&norm)
                .map_collect(|&gv, &xv, &n| -0.5 * gv * xv / (n * n.sqrt()))
        };
        if params {
            let sq = x2.mapv(|v| v * v);
            let mut d_gamma = Array2::<f32>::zeros((c, c));
            general_mat_mul(1.0, &q, &sq.t(), 0.0, &mut d_gamma);
            for i in 0..c {
                let d_beta: f32 = q.row(i).sum();
                self.beta.grad[i] += d_beta * 2.0 * self.beta.value[i];
                for j in 0..c {
                    self.gamma.grad[i * c + j] += d_gamma[[i, j]] * 2.0 * self.gamma.value[i * c + j];
                }
            }
        }
        if !input_grad {
            return None;
        }
        let (_, gamma) = self.effective();
        let mut back = Array2::<f32>::zeros((c, h * w));
        general_mat_mul(1.0, &gamma.t(), &q, 0.0, &mut back);
        let gx = if self.inverse {
            ndarray::Zip::from(&g2)
                .and(&x2)
                .and(&norm)
                .and(&back)
                .map_collect(|&gv, &xv, &n, &b| gv * n.sqrt() + 2.0 * xv * b)
        } else {
            ndarray::Zip::from(&g2)
                .and(&x2)
                .and(&norm)
                .and(&back)
                .map_collect(|&gv, &xv, &n, &b| gv / n.sqrt() + 2.0 * xv * b)
        };
        Some(unflat(gx, h, w))
    }
}

pub fn relu_forward(x: &Array3<f32>) -> (Array3<f32>, Cache) {
    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    (x.mapv(|v| v.max(0.0)), Cache::Mask(mask))
}

pub fn relu_backward(cache: Cache, g: &Array3<f32>) -> Array3<f32> {
    let Cache::Mask(mask) = cache else { unreachable!("relu cache") };
    let mut out = g.clone();
    out.iter_mut().zip(mask).for_each(|(v, m)| {
        if !m {
            *v = 0.0
        }
    });
    out
}
