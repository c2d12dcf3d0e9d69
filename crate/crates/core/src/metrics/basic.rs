use super::{check_shapes, MetricError, MetricValue};
use crate::imageio::ImageBatch;

/// PSNR reported for a zero-error pair.
pub const PSNR_CAP_DB: f64 = 100.0;

const SCALE_SQ: f64 = 255.0 * 255.0;

/// Mean squared error on the 0..255 scale: `255^2 * mean((ref - dist)^2)`.
///
/// The gradient element is `2 * 255^2 * (dist - ref) / N`.
pub fn mse(reference: &ImageBatch, distorted: &ImageBatch, with_grad: bool) -> Result<MetricValue, MetricError> {
    check_shapes(reference, distorted)?;
    let diff = distorted.data() - reference.data();
    let n = diff.len() as f64;
    let value = SCALE_SQ * diff.iter().map(|d| d * d).sum::<f64>() / n;
    let gradient = with_grad.then(|| diff.mapv(|d| 2.0 * SCALE_SQ * d / n));
    Ok(MetricValue { value, gradient })
}

pub fn mse_value(reference: &ImageBatch, distorted: &ImageBatch) -> Result<f64, MetricError> {
    Ok(mse(reference, distorted, false)?.value)
}

/// `10 log10(255^2 / mse255)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse255: f64) -> f64 {
    if mse255 <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (SCALE_SQ / mse255).log10()).min(PSNR_CAP_DB)
}

/// Inverse of [`psnr_from_mse`] below the cap.
pub fn mse_from_psnr(psnr_db: f64) -> f64 {
    SCALE_SQ * 10f64.powf(-psnr_db / 10.0)
}

pub fn psnr(reference: &ImageBatch, distorted: &ImageBatch) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse_value(reference, distorted)?))
}
