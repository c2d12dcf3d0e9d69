use super::adm::AdmForward;
use super::model::VmafModel;
use super::vif::VifForward;
use super::{check_shapes, ensure_finite, MetricError, MIN_METRIC_SIDE};
use crate::imageio::{rgb_to_yuv_image, yuv_grad_to_rgb, ImageBatch};
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Features and fused score of one plane pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneScore {
    pub score: f64,
    pub adm2: f64,
    pub motion2: f64,
    pub vif: [f64; 4],
}

impl PlaneScore {
    pub fn features(&self) -> [f64; 6] {
        [self.adm2, self.motion2, self.vif[0], self.vif[1], self.vif[2], self.vif[3]]
    }
}

/// Per-channel VMAF scores and their unweighted mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VmafScores {
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub mean: f64,
}

impl VmafScores {
    pub fn from_channels(y: f64, u: f64, v: f64) -> Self {
        Self {
            y,
            u,
            v,
            mean: (y + u + v) / 3.0,
        }
    }
}

/// Fuses `[adm2, motion2, vif0, vif1, vif2, vif3]` into a clipped score.
pub fn fuse_vmaf(features: &[f64], model: &VmafModel) -> Result<f64, MetricError> {
    Ok(model.predict(features)?.0)
}

/// Scores one plane pair on the 0..255 scale; the gradient is with respect
/// to the distorted plane in the same units.
pub fn vmaf_plane(
    reference: ArrayView2<'_, f64>,
    distorted: ArrayView2<'_, f64>,
    model: &VmafModel,
    with_grad: bool,
) -> Result<(PlaneScore, Option<Array2<f64>>), MetricError> {
    let (h, w) = reference.dim();
    if h < MIN_METRIC_SIDE || w < MIN_METRIC_SIDE {
        return Err(MetricError::PlaneTooSmall {
            height: h,
            width: w,
            min: MIN_METRIC_SIDE,
        });
    }
    if reference.dim() != distorted.dim() {
        return Err(MetricError::ShapeMismatch {
            reference: reference.shape().to_vec(),
            distorted: distorted.shape().to_vec(),
        });
    }
    let vif = VifForward::new(reference, distorted, model.vif_gain_limit);
    let adm = AdmForward::new(reference, distorted, model.adm_gain_limit);
    let motion2 = super::motion_feature(reference);
    let vf = vif.features();
    let plane = PlaneScore {
        score: 0.0,
        adm2: adm.score(),
        motion2,
        vif: vf,
    };
    let (score, g) = model.predict(&plane.features())?;
    let plane = PlaneScore { score, ..plane };
    if !with_grad {
        return Ok((plane, None));
    }
    ensure_finite(g.iter(), "svr fusion")?;
    let mut grad = vif.backward([g[2], g[3], g[4], g[5]])?;
    grad += &adm.backward(g[0])?;
    Ok((plane, Some(grad)))
}

fn check_batch(reference: &ImageBatch, distorted: &ImageBatch) -> Result<(), MetricError> {
    check_shapes(reference, distorted)?;
    let (h, w) = (reference.height(), reference.width());
    if h < MIN_METRIC_SIDE || w < MIN_METRIC_SIDE {
        return Err(MetricError::PlaneTooSmall {
            height: h,
            width: w,
            min: MIN_METRIC_SIDE,
        });
    }
    Ok(())
}

/// Per-element, per-channel plane scores.
pub fn vmaf_planes(reference: &ImageBatch, distorted: &ImageBatch, model: &VmafModel) -> Result<Vec<[PlaneScore; 3]>, MetricError> {
    check_batch(reference, distorted)?;
    (0..reference.batch_size())
        .into_par_iter()
        .map(|i| {
            let r = rgb_to_yuv_image(reference.image(i));
            let d = rgb_to_yuv_image(distorted.image(i));
            let mut out = [PlaneScore {
                score: 0.0,
                adm2: 0.0,
                motion2: 0.0,
                vif: [0.0; 4],
            }; 3];
            for (c, (rp, dp)) in r.planes().into_iter().zip(d.planes()).enumerate() {
                let (rs, ds) = (rp.mapv(|v| v * 255.0), dp.mapv(|v| v * 255.0));
                out[c] = vmaf_plane(rs.view(), ds.view(), model, false)?.0;
            }
            Ok(out)
        })
        .collect()
}

/// VMAF scores per Y/U/V channel (batch means) and their mean.
pub fn vmaf_neg(reference: &ImageBatch, distorted: &ImageBatch, model: &VmafModel) -> Result<VmafScores, MetricError> {
    let planes = vmaf_planes(reference, distorted, model)?;
    let n = planes.len() as f64;
    let ch = |c: usize| planes.iter().map(|p| p[c].score).sum::<f64>() / n;
    Ok(VmafScores::from_channels(ch(0), ch(1), ch(2)))
}

/// Per-channel scores and Y, U, V plane gradients of one image.
type PlaneGrads = ([f64; 3], Array2<f64>, Array2<f64>, Array2<f64>);

/// Scores plus the gradient of the mean score with respect to the distorted RGB batch.
pub fn vmaf_neg_with_grad(
    reference: &ImageBatch,
    distorted: &ImageBatch,
    model: &VmafModel,
) -> Result<(VmafScores, Array4<f64>), MetricError> {
    check_batch(reference, distorted)?;
    let n = reference.batch_size();
    let per_image: Vec<PlaneGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = rgb_to_yuv_image(reference.image(i));
            let d = rgb_to_yuv_image(distorted.image(i));
            let mut scores = [0.0; 3];
            let mut grads = Vec::with_capacity(3);
            for (c, (rp, dp)) in r.planes().into_iter().zip(d.planes()).enumerate() {
                let (rs, ds) = (rp.mapv(|v| v * 255.0), dp.mapv(|v| v * 255.0));
                let (p, g) = vmaf_plane(rs.view(), ds.view(), model, true)?;
                scores[c] = p.score;
                grads.push(g.expect("gradient requested"));
            }
            let mut it = grads.into_iter();
            let (gy, gu, gv) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            Ok((scores, gy, gu, gv))
        })
        .collect::<Result<_, MetricError>>()?;

    // d mean / d plane_c = 1/3 per channel, 1/n per element; plane = 255 * yuv.
    let scale = 255.0 / (3.0 * n as f64);
    let mut grad = Array4::zeros(distorted.data().raw_dim());
    let mut sums = [0.0; 3];
    for (i, (scores, gy, gu, gv)) in per_image.into_iter().enumerate() {
        for c in 0..3 {
            sums[c] += scores[c];
        }
        let g = yuv_grad_to_rgb(&gy, &gu, &gv);
        grad.index_axis_mut(Axis(0), i).zip_mut_with(&g, |a, &b| *a = b * scale);
    }
    ensure_finite(grad.iter(), "yuv to rgb")?;
    let n = n as f64;
    Ok((VmafScores::from_channels(sums[0] / n, sums[1] / n, sums[2] / n), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mean_arithmetic() {
        let s = VmafScores::from_channels(79.78, 73.82, 66.06);
        assert!((s.mean - 73.22).abs() < 1e-9);
    }
}
