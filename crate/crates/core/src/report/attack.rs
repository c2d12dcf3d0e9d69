//! Hand-crafted perturbations that raise VMAF-style scores while lowering
//! PSNR, and a sweep that flags where the two metrics diverge.

use super::ReportError;
use crate::imageio::{CorpusManifest, ImageBatch};
use crate::metrics::{psnr, vmaf_neg, VmafModel, VmafScores};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Largest unsharp amount, checkerboard/line amplitude and blur radius accepted.
pub const MAX_UNSHARP_AMOUNT: f64 = 5.0;
pub const MAX_RADIUS: f64 = 8.0;
pub const MAX_AMPLITUDE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    /// `x + amount * (x - blur(x, radius))`.
    Unsharp { amount: f64, radius: f64 },
    /// `+-amplitude` in squares of side `period`.
    Checkerboard { amplitude: f64, period: usize },
    /// `+amplitude` on every `spacing`-th row.
    Hline { amplitude: f64, spacing: usize },
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::Unsharp { .. } => "unsharp",
            Attack::Checkerboard { .. } => "checkerboard",
            Attack::Hline { .. } => "hline",
        }
    }

    /// The swept quantity: amount for unsharp, amplitude otherwise.
    pub fn strength(&self) -> f64 {
        match *self {
            Attack::Unsharp { amount, .. } => amount,
            Attack::Checkerboard { amplitude, .. } | Attack::Hline { amplitude, .. } => amplitude,
        }
    }

    pub fn with_strength(self, s: f64) -> Self {
        match self {
            Attack::Unsharp { radius, .. } => Attack::Unsharp { amount: s, radius },
            Attack::Checkerboard { period, .. } => Attack::Checkerboard { amplitude: s, period },
            Attack::Hline { spacing, .. } => Attack::Hline { amplitude: s, spacing },
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let ok = match *self {
            Attack::Unsharp { amount, radius } => (0.0..=MAX_UNSHARP_AMOUNT).contains(&amount) && radius > 0.0 && radius <= MAX_RADIUS,
            Attack::Checkerboard { amplitude, period } => (0.0..=MAX_AMPLITUDE).contains(&amplitude) && period >= 1,
            Attack::Hline { amplitude, spacing } => (0.0..=MAX_AMPLITUDE).contains(&amplitude) && spacing >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(ReportError::Input(format!("attack parameters out of range: {self}")))
        }
    }

    pub fn apply(&self, img: &ImageBatch) -> Result<ImageBatch, ReportError> {
        self.validate()?;
        let mut out = img.data().clone();
        match *self {
            Attack::Unsharp { amount, radius } => {
                if amount == 0.0 {
                    return Ok(img.clone());
                }
                let (b, c) = (out.len_of(Axis(0)), out.len_of(Axis(1)));
                for i in 0..b {
                    for ch in 0..c {
                        let plane = img.data().index_axis(Axis(0), i).index_axis(Axis(0), ch).to_owned();
                        let blurred = gaussian_blur(&plane, radius);
                        let mut dst = out.index_axis_mut(Axis(0), i);
                        let mut dst = dst.index_axis_mut(Axis(0), ch);
                        ndarray::Zip::from(&mut dst)
                            .and(&plane)
                            .and(&blurred)
                            .for_each(|d, &x, &bl| *d = x + amount * (x - bl));
                    }
                }
            }
            Attack::Checkerboard { amplitude, period } => {
                for ((_, _, y, x), v) in out.indexed_iter_mut() {
                    let sign = if (y / period + x / period) % 2 == 0 { 1.0 } else { -1.0 };
                    *v += sign * amplitude;
                }
            }
            Attack::Hline { amplitude, spacing } => {
                for ((_, _, y, _), v) in out.indexed_iter_mut() {
                    if y % spacing == 0 {
                        *v += amplitude;
                    }
                }
            }
        }
        Ok(ImageBatch::from_clamped(out)?)
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attack::Unsharp { amount, radius } => write!(f, "unsharp(amount={amount}, radius={radius})"),
            Attack::Checkerboard { amplitude, period } => write!(f, "checkerboard(amplitude={amplitude}, period={period})"),
            Attack::Hline { amplitude, spacing } => write!(f, "hline(amplitude={amplitude}, spacing={spacing})"),
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * plane[[y, reflect(x as isize + j as isize - half, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[[reflect(y as isize + j as isize - half, h), x]])
                .sum();
        }
    }
    out
}

/// One image at one attack strength, as differences against the clean image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub image_id: String,
    pub attack: String,
    pub strength: f64,
    pub psnr_db: f64,
    pub delta_psnr: f64,
    pub delta_vmafneg_y: f64,
    pub delta_vmafneg_u: f64,
    pub delta_vmafneg_v: f64,
    pub delta_vmafneg_mean: f64,
    /// Same SVR without the enhancement-gain clamp.
    pub delta_vmaf_plain_mean: f64,
    pub divergence_neg: bool,
    pub divergence_plain: bool,
}

pub const PROBE_CSV_HEADER: [&str; 12] = [
    "image_id",
    "attack",
    "strength",
    "psnr_db",
    "delta_psnr",
    "delta_vmafneg_y",
    "delta_vmafneg_u",
    "delta_vmafneg_v",
    "delta_vmafneg_mean",
    "delta_vmaf_plain_mean",
    "divergence_neg",
    "divergence_plain",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PROBE_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.attack.clone(),
                r.strength.to_string(),
                r.psnr_db.to_string(),
                r.delta_psnr.to_string(),
                r.delta_vmafneg_y.to_string(),
                r.delta_vmafneg_u.to_string(),
                r.delta_vmafneg_v.to_string(),
                r.delta_vmafneg_mean.to_string(),
                r.delta_vmaf_plain_mean.to_string(),
                r.divergence_neg.to_string(),
                r.divergence_plain.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn divergent_neg(&self) -> usize {
        self.rows.iter().filter(|r| r.divergence_neg).count()
    }

    pub fn divergent_plain(&self) -> usize {
        self.rows.iter().filter(|r| r.divergence_plain).count()
    }
}

/// A family of attacks swept over strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub attack: Attack,
    pub strengths: Vec<f64>,
}

fn diverges(d_psnr: f64, d_vmaf: f64) -> bool {
    d_vmaf > 0.0 && d_psnr < 0.0
}

/// Probes one image. `neg` must be a NEG model; the plain comparison uses
/// the same SVR with the gain clamp lifted.
pub fn probe_image(image_id: &str, img: &ImageBatch, sweeps: &[Sweep], neg: &VmafModel) -> Result<Vec<ProbeRow>, ReportError> {
    let plain = neg.without_gain_limit();
    let clean_psnr = psnr(img, img)?;
    let clean = vmaf_neg(img, img, neg)?;
    let clean_plain = vmaf_neg(img, img, &plain)?;
    let mut rows = Vec::new();
    for sweep in sweeps {
        for &s in &sweep.strengths {
            let attack = sweep.attack.with_strength(s);
            let attacked = attack.apply(img)?;
            let p = psnr(img, &attacked)?;
            let v: VmafScores = vmaf_neg(img, &attacked, neg)?;
            let vp = vmaf_neg(img, &attacked, &plain)?;
            let d_psnr = p - clean_psnr;
            let d_mean = v.mean - clean.mean;
            let d_plain = vp.mean - clean_plain.mean;
            rows.push(ProbeRow {
                image_id: image_id.to_owned(),
                attack: attack.name().to_owned(),
                strength: s,
                psnr_db: p,
                delta_psnr: d_psnr,
                delta_vmafneg_y: v.y - clean.y,
                delta_vmafneg_u: v.u - clean.u,
                delta_vmafneg_v: v.v - clean.v,
                delta_vmafneg_mean: d_mean,
                delta_vmaf_plain_mean: d_plain,
                divergence_neg: diverges(d_psnr, d_mean),
                divergence_plain: diverges(d_psnr, d_plain),
            });
        }
    }
    Ok(rows)
}

/// Every image of `corpus` under every sweep; rows ordered by image, then
/// sweep, then strength.
pub fn attack_probe(corpus: &CorpusManifest, sweeps: &[Sweep], neg: &VmafModel) -> Result<ProbeReport, ReportError> {
    for s in sweeps {
        for &v in &s.strengths {
            s.attack.with_strength(v).validate()?;
        }
    }
    let per_image = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let img = corpus.load(i)?;
            probe_image(&corpus.entries[i], &img, sweeps, neg)
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    Ok(ProbeReport {
        rows: per_image.into_iter().flatten().collect(),
    })
}
