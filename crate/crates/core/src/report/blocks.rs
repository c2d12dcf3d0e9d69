//! PSNR change per million trainable parameters for single-block runs.

use super::{MetricMeans, ReportError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRun {
    pub block: usize,
    pub means: MetricMeans,
    /// Trainable parameters of the block in millions, unrounded.
    pub params_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSensitivityRow {
    pub block: usize,
    pub psnr_db: f64,
    pub vmafneg_y: f64,
    pub params_m: f64,
    pub delta_psnr_per_mparam: f64,
}

impl BlockSensitivityRow {
    /// The ratio rounded half away from zero to two decimals.
    pub fn display_delta(&self) -> f64 {
        round2(self.delta_psnr_per_mparam)
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One row per block run, sorted by block index.
pub fn block_sensitivity(baseline: Option<&MetricMeans>, runs: &[BlockRun]) -> Result<Vec<BlockSensitivityRow>, ReportError> {
    let base = baseline.ok_or_else(|| ReportError::Input("missing baseline report".into()))?;
    let mut rows = runs
        .iter()
        .map(|r| {
            let delta = r.means.psnr_db - base.psnr_db;
            let per = if delta == 0.0 {
                0.0
            } else if r.params_m > 0.0 {
                delta / r.params_m
            } else {
                return Err(ReportError::Input(format!("block {} has no parameters", r.block)));
            };
            Ok(BlockSensitivityRow {
                block: r.block,
                psnr_db: r.means.psnr_db,
                vmafneg_y: r.means.vmafneg_y,
                params_m: r.params_m,
                delta_psnr_per_mparam: per,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|r| r.block);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn means(psnr: f64) -> MetricMeans {
        MetricMeans {
            psnr_db: psnr,
            ..MetricMeans::default()
        }
    }

    #[test]
    fn ratio_uses_unrounded_counts() {
        let base = means(31.55);
        let rows = block_sensitivity(
            Some(&base),
            &[
                BlockRun {
                    block: 1,
                    means: means(30.82),
                    params_m: 1.34,
                },
                BlockRun {
                    block: 0,
                    means: means(31.55),
                    params_m: 0.0,
                },
            ],
        )
        .unwrap();
        assert_eq!(rows[0].block, 0);
        assert_eq!(rows[0].delta_psnr_per_mparam, 0.0);
        assert!((rows[1].delta_psnr_per_mparam - (-0.73 / 1.34)).abs() < 1e-12);
        assert!(block_sensitivity(None, &[]).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round2(-0.805), -0.81);
        assert_eq!(round2(0.125), 0.13);
    }
}
