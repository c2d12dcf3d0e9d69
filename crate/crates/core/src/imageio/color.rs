//! Full-range BT.601 RGB <-> YCbCr conversion at 4:4:4.
//!
//! `Y = 0.299 R + 0.587 G + 0.114 B`, `U = (B - Y) / 1.772 + 0.5`,
//! `V = (R - Y) / 1.402 + 0.5`. Every report that quotes VMAF numbers assumes
//! this matrix.

use super::ImageBatch;
use ndarray::{Array2, Array3, ArrayView3, Zip};

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
const CB_SCALE: f64 = 1.772;
const CR_SCALE: f64 = 1.402;

/// Rows are (Y, U, V), columns (R, G, B).
pub const RGB_TO_YUV: [[f64; 3]; 3] = [
    [KR, KG, KB],
    [-KR / CB_SCALE, -KG / CB_SCALE, (1.0 - KB) / CB_SCALE],
    [(1.0 - KR) / CR_SCALE, -KG / CR_SCALE, -KB / CR_SCALE],
];

/// Full-resolution Y, U, V planes in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct YuvImage {
    pub y: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl YuvImage {
    pub fn planes(&self) -> [&Array2<f64>; 3] {
        [&self.y, &self.u, &self.v]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.y.dim()
    }
}

fn convert_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(RGB_TO_YUV.iter()) {
        *o = row[0] * r + row[1] * g + row[2] * b;
    }
    out[1] += 0.5;
    out[2] += 0.5;
    out
}

/// Converts one (3, H, W) RGB image.
pub fn rgb_to_yuv_image(rgb: ArrayView3<'_, f64>) -> YuvImage {
    let (_, h, w) = rgb.dim();
    let mut y = Array2::zeros((h, w));
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    Zip::from(&mut y)
        .and(&mut u)
        .and(&mut v)
        .and(rgb.index_axis(ndarray::Axis(0), 0))
        .and(rgb.index_axis(ndarray::Axis(0), 1))
        .and(rgb.index_axis(ndarray::Axis(0), 2))
        .for_each(|yo, uo, vo, &r, &g, &b| {
            let [yy, uu, vv] = convert_pixel(r, g, b);
            *yo = yy.clamp(0.0, 1.0);
            *uo = uu.clamp(0.0, 1.0);
            *vo = vv.clamp(0.0, 1.0);
        });
    YuvImage { y, u, v }
}

/// One [`YuvImage`] per batch element.
pub fn rgb_to_yuv(img: &ImageBatch) -> Vec<YuvImage> {
    (0..img.batch_size()).map(|i| rgb_to_yuv_image(img.image(i))).collect()
}

/// Inverse conversion; output is clamped to `[0, 1]`.
pub fn yuv_to_rgb(yuv: &YuvImage) -> Array3<f64> {
    let (h, w) = yuv.dim();
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let (y, u, v) = (yuv.y[[i, j]], yuv.u[[i, j]] - 0.5, yuv.v[[i, j]] - 0.5);
            let r = y + CR_SCALE * v;
            let b = y + CB_SCALE * u;
            let g = (y - KR * r - KB * b) / KG;
            out[[0, i, j]] = r.clamp(0.0, 1.0);
            out[[1, i, j]] = g.clamp(0.0, 1.0);
            out[[2, i, j]] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Pulls gradients on (Y, U, V) back to RGB through the linear matrix.
///
/// Clamping in [`rgb_to_yuv_image`] only triggers on rounding noise for
/// in-gamut input, so the clamp is treated as identity here.
pub fn yuv_grad_to_rgb(gy: &Array2<f64>, gu: &Array2<f64>, gv: &Array2<f64>) -> Array3<f64> {
    let (h, w) = gy.dim();
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        let (a, b, d) = (RGB_TO_YUV[0][c], RGB_TO_YUV[1][c], RGB_TO_YUV[2][c]);
        let mut plane = out.index_axis_mut(ndarray::Axis(0), c);
        Zip::from(&mut plane)
            .and(gy)
            .and(gu)
            .and(gv)
            .for_each(|o, &y, &u, &v| *o = a * y + b * u + d * v);
    }
    out
}
