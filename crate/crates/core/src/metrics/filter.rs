//! Padded, strided 1-D correlation along one axis of a plane, plus its adjoint.
//!
//! Every blur, wavelet pass and pooling step in the metrics is a composition
//! of these, so gradients come from running the same operators transposed.

use ndarray::{Array2, ArrayView2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Mirror without repeating the edge sample: `dcb|abcd|cba`.
    Reflect,
    /// Reflect on the low side, mirror with edge repetition on the high side:
    /// `dcb|abcdef|fed`. This is the libvmaf border convention.
    Vmaf,
}

/// One pass of `out[o] = sum_k taps[k] * x[o * stride + k - pad_lo]`.
#[derive(Clone, Debug)]
pub struct Correlate {
    pub taps: Vec<f64>,
    pub pad_lo: usize,
    pub pad_hi: usize,
    pub stride: usize,
    pub mode: PadMode,
}

impl Correlate {
    pub fn new(taps: Vec<f64>, pad_lo: usize, pad_hi: usize, stride: usize, mode: PadMode) -> Self {
        Self {
            taps,
            pad_lo,
            pad_hi,
            stride,
            mode,
        }
    }

    pub fn output_len(&self, n: usize) -> usize {
        let padded = n + self.pad_lo + self.pad_hi;
        assert!(padded >= self.taps.len(), "signal shorter than filter");
        (padded - self.taps.len()) / self.stride + 1
    }

    /// Source index for padded position `p` (already shifted by `pad_lo`), or
    /// `None` for a zero tap.
    fn source(&self, p: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&p) {
            return Some(p as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let q = if p < 0 { -p } else { 2 * (n_i - 1) - p };
                debug_assert!((0..n_i).contains(&q), "reflect pad wider than signal");
                Some(q as usize)
            }
            PadMode::Vmaf => {
                let q = if p < 0 { -p } else { 2 * n_i - 1 - p };
                debug_assert!((0..n_i).contains(&q), "vmaf pad wider than signal");
                Some(q as usize)
            }
        }
    }

    /// Flattened (output, tap) -> source index table; `usize::MAX` marks a zero tap.
    fn index_table(&self, n: usize) -> (usize, Vec<usize>) {
        let m = self.output_len(n);
        let k = self.taps.len();
        let mut table = Vec::with_capacity(m * k);
        for o in 0..m {
            for t in 0..k {
                let p = (o * self.stride + t) as isize - self.pad_lo as isize;
                table.push(self.source(p, n).unwrap_or(usize::MAX));
            }
        }
        (m, table)
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>, axis: Axis) -> Array2<f64> {
        let (h, w) = x.dim();
        let k = self.taps.len();
        match axis.index() {
            0 => {
                let (m, table) = self.index_table(h);
                let mut out = Array2::zeros((m, w));
                for o in 0..m {
                    let mut row = out.row_mut(o);
                    for t in 0..k {
                        let src = table[o * k + t];
                        if src == usize::MAX {
                            continue;
                        }
                        let tap = self.taps[t];
                        row.zip_mut_with(&x.row(src), |a, &b| *a += tap * b);
                    }
                }
                out
            }
            1 => {
                let (m, table) = self.index_table(w);
                let mut out = Array2::zeros((h, m));
                for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
                    for o in 0..m {
                        let mut acc = 0.0;
                        for t in 0..k {
                            let src = table[o * k + t];
                            if src != usize::MAX {
                                acc += self.taps[t] * xrow[src];
                            }
                        }
                        orow[o] = acc;
                    }
                }
                out
            }
            _ => panic!("planes have two axes"),
        }
    }

    /// Transpose of [`Correlate::apply`] for an input of length `n` along `axis`.
    pub fn adjoint(&self, g: ArrayView2<'_, f64>, axis: Axis, n: usize) -> Array2<f64> {
        let (gh, gw) = g.dim();
        let k = self.taps.len();
        match axis.index() {
            0 => {
                let (m, table) = self.index_table(n);
                assert_eq!(m, gh, "adjoint gradient shape mismatch");
                let mut out = Array2::zeros((n, gw));
                for o in 0..m {
                    for t in 0..k {
                        let src = table[o * k + t];
                        if src == usize::MAX {
                            continue;
                        }
                        let tap = self.taps[t];
                        out.row_mut(src).zip_mut_with(&g.row(o), |a, &b| *a += tap * b);
                    }
                }
                out
            }
            1 => {
                let (m, table) = self.index_table(n);
                assert_eq!(m, gw, "adjoint gradient shape mismatch");
                let mut out = Array2::zeros((gh, n));
                for (mut orow, grow) in out.rows_mut().into_iter().zip(g.rows()) {
                    for o in 0..m {
                        let go = grow[o];
                        for t in 0..k {
                            let src = table[o * k + t];
                            if src != usize::MAX {
                                orow[src] += self.taps[t] * go;
                            }
                        }
                    }
                }
                out
            }
            _ => panic!("planes have two axes"),
        }
    }
}

/// Separable 2-D filter: a horizontal pass followed by a vertical pass.
#[derive(Clone, Debug)]
pub struct Separable {
    pub horizontal: Correlate,
    pub vertical: Correlate,
}

impl Separable {
    pub fn symmetric(taps: Vec<f64>, pad: usize, stride: usize, mode: PadMode) -> Self {
        let c = Correlate::new(taps, pad, pad, stride, mode);
        Self {
            horizontal: c.clone(),
            vertical: c,
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let t = self.horizontal.apply(x, Axis(1));
        self.vertical.apply(t.view(), Axis(0))
    }

    pub fn adjoint(&self, g: ArrayView2<'_, f64>, in_dim: (usize, usize)) -> Array2<f64> {
        let t = self.vertical.adjoint(g, Axis(0), in_dim.0);
        self.horizontal.adjoint(t.view(), Axis(1), in_dim.1)
    }

    pub fn output_dim(&self, in_dim: (usize, usize)) -> (usize, usize) {
        (self.vertical.output_len(in_dim.0), self.horizontal.output_len(in_dim.1))
    }
}

/// Normalised Gaussian taps centred on the middle sample.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn signal(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((1, n), |(_, j)| j as f64)
    }

    #[test]
    fn reflect_padding_pattern() {
        // Identity tap over a padded signal exposes the padding.
        let c = Correlate::new(vec![1.0], 3, 3, 1, PadMode::Reflect);
        let out = c.apply(signal(5).view(), Axis(1));
        assert_eq!(out.row(0).to_vec(), vec![3., 2., 1., 0., 1., 2., 3., 4., 3., 2., 1.]);
    }

    #[test]
    fn vmaf_padding_pattern() {
        let c = Correlate::new(vec![1.0], 3, 3, 1, PadMode::Vmaf);
        let out = c.apply(signal(6).view(), Axis(1));
        assert_eq!(out.row(0).to_vec(), vec![3., 2., 1., 0., 1., 2., 3., 4., 5., 5., 4., 3.]);
    }

    #[test]
    fn strided_output_length() {
        let c = Correlate::new(vec![0.5, 0.5], 1, 1, 2, PadMode::Zero);
        assert_eq!(c.output_len(7), 4);
        assert_eq!(c.output_len(8), 5);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    fn check_adjoint(c: &Correlate, h: usize, w: usize, axis: Axis, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() - 0.5);
        let y = c.apply(x.view(), axis);
        let g = Array2::from_shape_fn(y.dim(), |_| rng.random::<f64>() - 0.5);
        let n = if axis.index() == 0 { h } else { w };
        let xt = c.adjoint(g.view(), axis, n);
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &xt).sum();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    proptest! {
        #[test]
        fn adjoint_is_transpose(
            h in 6usize..20,
            w in 6usize..20,
            k in 1usize..5,
            stride in 1usize..3,
            mode in prop_oneof![Just(PadMode::Zero), Just(PadMode::Reflect), Just(PadMode::Vmaf)],
            seed in any::<u64>(),
        ) {
            let taps: Vec<f64> = (0..k).map(|i| 0.3 + i as f64 * 0.7).collect();
            let pad_lo = k / 2;
            let pad_hi = (k - 1) - pad_lo + 1;
            let c = Correlate::new(taps, pad_lo, pad_hi, stride, mode);
            check_adjoint(&c, h, w, Axis(0), seed);
            check_adjoint(&c, h, w, Axis(1), seed);
        }
    }
}
