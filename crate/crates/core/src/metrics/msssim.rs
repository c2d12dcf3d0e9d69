//! Five-scale MS-SSIM on `[0, 1]` data with an 11-tap Gaussian window
//! (sigma 1.5), valid convolution, and 2x2 average pooling between scales.

use super::filter::{gaussian_taps, PadMode, Separable};
use super::{check_shapes, ensure_finite, MetricError, MetricValue};
use crate::imageio::ImageBatch;
use ndarray::{Array2, Array4, ArrayView2, Axis, Zip};

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN_SIZE: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Smallest image side that keeps the window inside the coarsest scale.
pub const MSSSIM_MIN_SIDE: usize = 176;

fn window() -> Separable {
    Separable::symmetric(gaussian_taps(WIN_SIZE, WIN_SIGMA), 0, 1, PadMode::Zero)
}

fn pool(dim: (usize, usize)) -> Separable {
    let (h, w) = dim;
    Separable {
        horizontal: super::filter::Correlate::new(vec![0.5, 0.5], w % 2, w % 2, 2, PadMode::Zero),
        vertical: super::filter::Correlate::new(vec![0.5, 0.5], h % 2, h % 2, 2, PadMode::Zero),
    }
}

struct Level {
    x: Array2<f64>,
    y: Array2<f64>,
    mu1: Array2<f64>,
    mu2: Array2<f64>,
    s1: Array2<f64>,
    s2: Array2<f64>,
    s12: Array2<f64>,
    cs: f64,
    ssim: f64,
}

fn level_stats(win: &Separable, x: Array2<f64>, y: Array2<f64>) -> Level {
    let mu1 = win.apply(x.view());
    let mu2 = win.apply(y.view());
    let exx = win.apply((&x * &x).view());
    let eyy = win.apply((&y * &y).view());
    let exy = win.apply((&x * &y).view());
    let s1 = &exx - &(&mu1 * &mu1);
    let s2 = &eyy - &(&mu2 * &mu2);
    let s12 = &exy - &(&mu1 * &mu2);
    let n = mu1.len() as f64;
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    Zip::from(&mu1)
        .and(&mu2)
        .and(&s1)
        .and(&s2)
        .and(&s12)
        .for_each(|&m1, &m2, &a, &b, &c| {
            let cs = (2.0 * c + C2) / (a + b + C2);
            let l = (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1);
            cs_sum += cs;
            ssim_sum += l * cs;
        });
    Level {
        x,
        y,
        mu1,
        mu2,
        s1,
        s2,
        s12,
        cs: cs_sum / n,
        ssim: ssim_sum / n,
    }
}

/// MS-SSIM of one plane pair and, optionally, its gradient with respect to `y`.
fn plane(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, with_grad: bool) -> (f64, Option<Array2<f64>>) {
    let win = window();
    let mut levels = Vec::with_capacity(5);
    let (mut cx, mut cy) = (x.to_owned(), y.to_owned());
    for i in 0..5 {
        let dim = cx.dim();
        let (nx, ny) = if i < 4 {
            let p = pool(dim);
            (Some(p.apply(cx.view())), Some(p.apply(cy.view())))
        } else {
            (None, None)
        };
        levels.push(level_stats(&win, cx, cy));
        if let (Some(a), Some(b)) = (nx, ny) {
            cx = a;
            cy = b;
        } else {
            break;
        }
    }

    let factors: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| if i < 4 { l.cs.max(0.0) } else { l.ssim.max(0.0) })
        .collect();
    let value: f64 = factors.iter().zip(MSSSIM_WEIGHTS).map(|(f, w)| f.powf(w)).product();
    if !with_grad {
        return (value, None);
    }

    // d value / d factor_i = value * w_i / factor_i; zero where the factor was clamped.
    let mut grad_next: Option<Array2<f64>> = None;
    for i in (0..levels.len()).rev() {
        let l = &levels[i];
        let f = factors[i];
        let coef = if f > 0.0 { value * MSSSIM_WEIGHTS[i] / f } else { 0.0 };
        let n = l.mu1.len() as f64;
        let last = i == 4;
        let mut g_mu2 = Array2::zeros(l.mu1.dim());
        let mut g_s2 = Array2::zeros(l.mu1.dim());
        let mut g_s12 = Array2::zeros(l.mu1.dim());
        if coef != 0.0 {
            let c = coef / n;
            let sl = |a: &Array2<f64>| a.as_slice().expect("contiguous").to_vec();
            let (mu1, mu2, s1, s2, s12) = (sl(&l.mu1), sl(&l.mu2), sl(&l.s1), sl(&l.s2), sl(&l.s12));
            let gm = g_mu2.as_slice_mut().expect("contiguous");
            let gs2 = g_s2.as_slice_mut().expect("contiguous");
            let gs12 = g_s12.as_slice_mut().expect("contiguous");
            for p in 0..mu1.len() {
                let (m1, m2) = (mu1[p], mu2[p]);
                let num = 2.0 * s12[p] + C2;
                let den = s1[p] + s2[p] + C2;
                let cs = num / den;
                let dcs_ds12 = 2.0 / den;
                let dcs_ds2 = -num / (den * den);
                if last {
                    let ln = 2.0 * m1 * m2 + C1;
                    let ld = m1 * m1 + m2 * m2 + C1;
                    let lum = ln / ld;
                    let dl_dmu2 = (2.0 * m1 * ld - ln * 2.0 * m2) / (ld * ld);
                    gm[p] = c * dl_dmu2 * cs;
                    gs12[p] = c * lum * dcs_ds12;
                    gs2[p] = c * lum * dcs_ds2;
                } else {
                    gs12[p] = c * dcs_ds12;
                    gs2[p] = c * dcs_ds2;
                }
            }
        }
        // s2 = E[y^2] - mu2^2, s12 = E[xy] - mu1 mu2
        Zip::from(&mut g_mu2)
            .and(&g_s2)
            .and(&g_s12)
            .and(&l.mu1)
            .and(&l.mu2)
            .for_each(|gm, &gs2, &gs12, &m1, &m2| *gm += -2.0 * m2 * gs2 - m1 * gs12);
        let dim = l.y.dim();
        let mut gy = win.adjoint(g_mu2.view(), dim);
        let t_yy = win.adjoint(g_s2.view(), dim);
        let t_xy = win.adjoint(g_s12.view(), dim);
        Zip::from(&mut gy)
            .and(&t_yy)
            .and(&t_xy)
            .and(&l.x)
            .and(&l.y)
            .for_each(|g, &a, &b, &xv, &yv| *g += 2.0 * yv * a + xv * b);
        if let Some(next) = grad_next.take() {
            gy += &pool(dim).adjoint(next.view(), dim);
        }
        grad_next = Some(gy);
    }
    (value, grad_next)
}

fn validate(img: &ImageBatch) -> Result<(), MetricError> {
    let side = img.height().min(img.width());
    if side < MSSSIM_MIN_SIDE {
        return Err(MetricError::InsufficientScales {
            side,
            min: MSSSIM_MIN_SIDE,
        });
    }
    Ok(())
}

fn evaluate(reference: &ImageBatch, distorted: &ImageBatch, with_grad: bool) -> Result<MetricValue, MetricError> {
    check_shapes(reference, distorted)?;
    validate(reference)?;
    let (b, c) = (reference.batch_size(), 3);
    let scale = 1.0 / (b * c) as f64;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| Array4::zeros(distorted.data().raw_dim()));
    for i in 0..b {
        let r = reference.image(i);
        let d = distorted.image(i);
        for ch in 0..c {
            let (v, g) = plane(r.index_axis(Axis(0), ch), d.index_axis(Axis(0), ch), with_grad);
            total += v;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                let mut slot = acc.index_axis_mut(Axis(0), i);
                let mut slot = slot.index_axis_mut(Axis(0), ch);
                slot.zip_mut_with(&g, |a, &b| *a = b * scale);
            }
        }
    }
    if let Some(g) = &grad {
        ensure_finite(g.iter(), "ms_ssim")?;
    }
    Ok(MetricValue {
        value: total * scale,
        gradient: grad,
    })
}

/// MS-SSIM averaged over channels and batch elements.
pub fn ms_ssim(reference: &ImageBatch, distorted: &ImageBatch) -> Result<f64, MetricError> {
    Ok(evaluate(reference, distorted, false)?.value)
}

pub fn ms_ssim_with_grad(reference: &ImageBatch, distorted: &ImageBatch) -> Result<MetricValue, MetricError> {
    evaluate(reference, distorted, true)
}
