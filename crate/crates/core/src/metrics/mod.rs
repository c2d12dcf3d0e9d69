//! Full-reference quality metrics with analytic gradients.
//!
//! Every metric takes `(reference, distorted)` and differentiates with
//! respect to the distorted side only. Batch values are means over the batch.

mod adm;
mod basic;
pub mod filter;
mod model;
mod motion;
mod msssim;
mod vif;
mod vmaf;

pub use adm::{adm_feature, AdmForward};
pub use basic::{mse, mse_from_psnr, mse_value, psnr, psnr_from_mse, PSNR_CAP_DB};
pub use model::{FeatureKind, ModelError, VmafModel, DEFAULT_GAIN_LIMIT, NEG_GAIN_LIMIT};
pub use motion::{motion2_sequence, motion_feature};
pub use msssim::{ms_ssim, ms_ssim_with_grad, MSSSIM_MIN_SIDE, MSSSIM_WEIGHTS};
pub use vif::{vif_features, VifForward};
pub use vmaf::{fuse_vmaf, vmaf_neg, vmaf_neg_with_grad, vmaf_plane, vmaf_planes, PlaneScore, VmafScores};

use crate::imageio::ImageBatch;
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Smallest plane side accepted by the VIF/ADM pyramid.
pub const MIN_METRIC_SIDE: usize = 192;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: reference {reference:?} vs distorted {distorted:?}")]
    ShapeMismatch { reference: Vec<usize>, distorted: Vec<usize> },
    #[error("insufficient scales: smallest side {side} px, need at least {min}")]
    InsufficientScales { side: usize, min: usize },
    #[error("plane too small for the VMAF pyramid: {height}x{width}, need {min} on each side")]
    PlaneTooSmall { height: usize, width: usize, min: usize },
    #[error("non-finite gradient in {stage}")]
    NonFiniteGradient { stage: String },
    #[error("metric {0} is not differentiable")]
    NotDifferentiable(MetricId),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Mse,
    Psnr,
    MsSsim,
    VmafNeg,
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricId::Mse => "mse",
            MetricId::Psnr => "psnr",
            MetricId::MsSsim => "ms_ssim",
            MetricId::VmafNeg => "vmaf_neg",
        })
    }
}

/// A scalar metric and, optionally, its gradient with respect to the distorted batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub gradient: Option<Array4<f64>>,
}

impl MetricValue {
    pub fn scalar(value: f64) -> Self {
        Self { value, gradient: None }
    }
}

pub(crate) fn check_shapes(reference: &ImageBatch, distorted: &ImageBatch) -> Result<(), MetricError> {
    if reference.same_shape(distorted) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch {
            reference: reference.data().shape().to_vec(),
            distorted: distorted.data().shape().to_vec(),
        })
    }
}

pub(crate) fn ensure_finite<'a, I>(values: I, stage: &str) -> Result<(), MetricError>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NonFiniteGradient { stage: stage.to_owned() })
    }
}

/// Gradient of a differentiable metric with respect to `distorted`.
///
/// The VMAF NEG gradient is that of the Y/U/V mean score.
pub fn metric_gradient(
    metric: MetricId,
    reference: &ImageBatch,
    distorted: &ImageBatch,
    model: &VmafModel,
) -> Result<Array4<f64>, MetricError> {
    let grad = match metric {
        MetricId::Mse => mse(reference, distorted, true)?.gradient,
        MetricId::MsSsim => ms_ssim_with_grad(reference, distorted)?.gradient,
        MetricId::VmafNeg => Some(vmaf_neg_with_grad(reference, distorted, model)?.1),
        MetricId::Psnr => return Err(MetricError::NotDifferentiable(metric)),
    };
    let grad = grad.expect("differentiable metrics always return a gradient");
    ensure_finite(grad.iter(), &metric.to_string())?;
    Ok(grad)
}
