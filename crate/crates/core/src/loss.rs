//! The mixed rate-distortion objective
//!
//! `L = bpp + lambda * (alpha * MSE + beta * (1 - MS-SSIM) * beta' + gamma * (100 - VMAF NEG) * gamma')`
//!
//! with MSE on the 0..255 scale and VMAF NEG the mean of the Y, U and V
//! scores, plus the rate term and calibration of `beta'` and `gamma'`.

use crate::codec::{code_image, CodecError, CodecModel};
use crate::imageio::{CorpusManifest, ImageBatch, ImageError};
use crate::metrics::{ms_ssim, ms_ssim_with_grad, mse, vmaf_neg, vmaf_neg_with_grad, MetricError, VmafModel};
use ndarray::{Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

/// Allowed deviation of `alpha + beta + gamma` from 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid likelihood {value} (must lie in (0, 1])")]
    InvalidLikelihood { value: f64 },
    #[error("invalid pixel count 0")]
    NoPixels,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("invalid scaling factors: {0}")]
    InvalidScaling(String),
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),
    #[error("empty validation corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// `(alpha, beta, gamma)` distortion weights and the trade-off `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, lambda: f64) -> Result<Self, LossError> {
        let w = Self {
            alpha,
            beta,
            gamma,
            lambda,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LossError::InvalidWeights(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(LossError::InvalidWeights(format!("α+β+γ must equal 1, got {sum}")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidWeights(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }
}

/// Per-codec factors aligning `1 - MS-SSIM` and `100 - VMAF NEG` with MSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingFactors {
    pub beta_prime: f64,
    pub gamma_prime: f64,
}

impl ScalingFactors {
    pub fn new(beta_prime: f64, gamma_prime: f64) -> Result<Self, LossError> {
        let s = Self { beta_prime, gamma_prime };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.beta_prime > 0.0 && self.gamma_prime > 0.0 && self.beta_prime.is_finite() && self.gamma_prime.is_finite() {
            Ok(())
        } else {
            Err(LossError::InvalidScaling(format!(
                "beta' = {}, gamma' = {} must both be positive",
                self.beta_prime, self.gamma_prime
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub total_bits: f64,
    pub num_pixels: usize,
    pub bpp: f64,
}

/// `-sum(log2 p) / num_pixels` over every symbol of every array.
pub fn rate_bpp<'a, I>(likelihoods: I, num_pixels: usize) -> Result<RateEstimate, LossError>
where
    I: IntoIterator<Item = &'a Array3<f64>>,
{
    if num_pixels == 0 {
        return Err(LossError::NoPixels);
    }
    let mut total_bits = 0.0;
    for arr in likelihoods {
        for &p in arr {
            if !(p > 0.0 && p <= 1.0) {
                return Err(LossError::InvalidLikelihood { value: p });
            }
            total_bits -= p.log2();
        }
    }
    // log2(1) is exactly zero, so the total never drifts below zero.
    let total_bits = total_bits.max(0.0);
    Ok(RateEstimate {
        total_bits,
        num_pixels,
        bpp: total_bits / num_pixels as f64,
    })
}

/// `d bpp / d p` for one likelihood.
pub fn rate_gradient(p: f64, num_pixels: usize) -> f64 {
    -1.0 / (p * LN_2 * num_pixels as f64)
}

/// Weighted and scaled terms of the objective, kept apart for audit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// bpp.
    pub rate: f64,
    /// `alpha * MSE`.
    pub d_mse: f64,
    /// `beta * (1 - MS-SSIM) * beta'`.
    pub d_msssim: f64,
    /// `gamma * (100 - VMAF NEG) * gamma'`.
    pub d_vmafneg: f64,
    pub total: f64,
    pub lambda: f64,
    /// Raw metric values; absent when the metric's weight was zero and it
    /// was not evaluated.
    pub mse255: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub vmaf_neg: Option<f64>,
}

impl LossBreakdown {
    fn assemble(rate: f64, w: &LossWeights, s: &ScalingFactors, mse255: Option<f64>, ms_ssim: Option<f64>, vmaf_neg: Option<f64>) -> Self {
        let d_mse = mse255.map_or(0.0, |m| w.alpha * m);
        let d_msssim = ms_ssim.map_or(0.0, |m| w.beta * (1.0 - m) * s.beta_prime);
        let d_vmafneg = vmaf_neg.map_or(0.0, |v| w.gamma * (100.0 - v) * s.gamma_prime);
        Self {
            rate,
            d_mse,
            d_msssim,
            d_vmafneg,
            total: rate + w.lambda * (d_mse + d_msssim + d_vmafneg),
            lambda: w.lambda,
            mse255,
            ms_ssim,
            vmaf_neg,
        }
    }

    /// Recomputes the total from the raw metrics, weights and scaling.
    pub fn recompute(&self, w: &LossWeights, s: &ScalingFactors) -> f64 {
        Self::assemble(self.rate, w, s, self.mse255, self.ms_ssim, self.vmaf_neg).total
    }

    /// Sum of the distortion terms, `(total - rate) / lambda` by construction.
    pub fn distortion(&self) -> f64 {
        self.d_mse + self.d_msssim + self.d_vmafneg
    }

    /// Name of the largest distortion term.
    pub fn dominant_term(&self) -> &'static str {
        let terms = [("mse", self.d_mse), ("ms_ssim", self.d_msssim), ("vmaf_neg", self.d_vmafneg)];
        let mut best = terms[0];
        for t in terms {
            // NaN compares false, so keep the first non-finite term found.
            if !t.1.is_finite() || t.1 > best.1 {
                best = t;
                if !t.1.is_finite() {
                    break;
                }
            }
        }
        if !self.rate.is_finite() {
            return "rate";
        }
        best.0
    }

    /// Element-wise mean of breakdowns of equal-sized samples.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let n = items.len() as f64;
        let first = items.first()?;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            items.iter().map(f).collect::<Option<Vec<_>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        Some(LossBreakdown {
            rate: avg(|b| b.rate),
            d_mse: avg(|b| b.d_mse),
            d_msssim: avg(|b| b.d_msssim),
            d_vmafneg: avg(|b| b.d_vmafneg),
            total: avg(|b| b.total),
            lambda: first.lambda,
            mse255: avg_opt(|b| b.mse255),
            ms_ssim: avg_opt(|b| b.ms_ssim),
            vmaf_neg: avg_opt(|b| b.vmaf_neg),
        })
    }
}

/// The objective with every metric evaluated.
pub fn mixed_loss(
    reference: &ImageBatch,
    distorted: &ImageBatch,
    rate: &RateEstimate,
    w: &LossWeights,
    s: &ScalingFactors,
    vmaf: &VmafModel,
) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    s.validate()?;
    let m = mse(reference, distorted, false)?.value;
    let ss = ms_ssim(reference, distorted)?;
    let v = vmaf_neg(reference, distorted, vmaf)?.mean;
    Ok(LossBreakdown::assemble(rate.bpp, w, s, Some(m), Some(ss), Some(v)))
}

/// The objective and its gradient with respect to `distorted`. Metrics with
/// zero weight are skipped. The rate part of the gradient flows through
/// likelihoods; see [`rate_gradient`].
pub fn mixed_loss_with_grad(
    reference: &ImageBatch,
    distorted: &ImageBatch,
    rate: &RateEstimate,
    w: &LossWeights,
    s: &ScalingFactors,
    vmaf: &VmafModel,
) -> Result<(LossBreakdown, Array4<f64>), LossError> {
    w.validate()?;
    s.validate()?;
    let mut grad = Array4::<f64>::zeros(distorted.data().raw_dim());
    let mut m = None;
    if w.alpha > 0.0 {
        let v = mse(reference, distorted, true)?;
        grad.scaled_add(w.lambda * w.alpha, v.gradient.as_ref().expect("requested"));
        m = Some(v.value);
    }
    let mut ss = None;
    if w.beta > 0.0 {
        let v = ms_ssim_with_grad(reference, distorted)?;
        grad.scaled_add(-w.lambda * w.beta * s.beta_prime, v.gradient.as_ref().expect("requested"));
        ss = Some(v.value);
    }
    let mut vn = None;
    if w.gamma > 0.0 {
        let (scores, g) = vmaf_neg_with_grad(reference, distorted, vmaf)?;
        grad.scaled_add(-w.lambda * w.gamma * s.gamma_prime, &g);
        vn = Some(scores.mean);
    }
    Ok((LossBreakdown::assemble(rate.bpp, w, s, m, ss, vn), grad))
}

/// Corpus means the scaling factors are derived from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub images: usize,
    pub mean_mse255: f64,
    pub mean_one_minus_ms_ssim: f64,
    pub mean_hundred_minus_vmaf: f64,
}

/// `beta' = mean MSE / mean (1 - MS-SSIM)`, `gamma' = mean MSE / mean (100 - VMAF NEG)`.
pub fn scaling_from_stats(stats: &CalibrationStats) -> Result<ScalingFactors, LossError> {
    let CalibrationStats {
        mean_mse255: m,
        mean_one_minus_ms_ssim: a,
        mean_hundred_minus_vmaf: b,
        ..
    } = *stats;
    if !(m > 0.0) {
        return Err(LossError::DegenerateCalibration(format!("mean MSE is {m}")));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(LossError::DegenerateCalibration(format!(
            "mean (1 - MS-SSIM) = {a}, mean (100 - VMAF NEG) = {b}"
        )));
    }
    ScalingFactors::new(m / a, m / b)
}

/// Codes every validation image with `codec` and averages the three
/// distortions. Images are evaluated in parallel and reduced in corpus order.
pub fn calibration_stats(validation: &CorpusManifest, codec: &CodecModel, vmaf: &VmafModel) -> Result<CalibrationStats, LossError> {
    if validation.is_empty() {
        return Err(LossError::EmptyCorpus);
    }
    let rows = (0..validation.len())
        .into_par_iter()
        .map(|i| -> Result<[f64; 3], LossError> {
            let img = validation.load(i)?;
            let coded = code_image(codec, &img)?;
            let rec = &coded.reconstruction;
            Ok([
                mse(&img, rec, false)?.value,
                1.0 - ms_ssim(&img, rec)?,
                100.0 - vmaf_neg(&img, rec, vmaf)?.mean,
            ])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = rows.len() as f64;
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(CalibrationStats {
        images: rows.len(),
        mean_mse255: mean(0),
        mean_one_minus_ms_ssim: mean(1),
        mean_hundred_minus_vmaf: mean(2),
    })
}

pub fn calibrate_scaling(validation: &CorpusManifest, codec: &CodecModel, vmaf: &VmafModel) -> Result<ScalingFactors, LossError> {
    scaling_from_stats(&calibration_stats(validation, codec, vmaf)?)
}
