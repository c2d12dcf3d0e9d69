//! Corpus evaluation, metric tables, rank accumulation, block sensitivity
//! and the metric-attack probe.

mod attack;
mod blocks;
pub mod plot;
mod rank;

pub use attack::{attack_probe, gaussian_blur, probe_image, Attack, ProbeReport, ProbeRow, Sweep, PROBE_CSV_HEADER};
pub use blocks::{block_sensitivity, round2, BlockRun, BlockSensitivityRow};
pub use rank::{rank_accumulate, rank_column, reproduce_accumulated, Grid, RankTable, TiePolicy, TieSweep};

use crate::codec::{code_image, CodecError, CodecModel};
use crate::imageio::{center_crop, CorpusManifest, ImageBatch, ImageError};
use crate::metrics::{ms_ssim, psnr, vmaf_neg, MetricError, VmafModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

/// Column order of per-image metric CSVs.
pub const REPORT_CSV_HEADER: [&str; 8] = [
    "image_id",
    "psnr_db",
    "ms_ssim",
    "vmafneg_y",
    "vmafneg_u",
    "vmafneg_v",
    "vmafneg_mean",
    "bpp",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub vmafneg_y: f64,
    pub vmafneg_u: f64,
    pub vmafneg_v: f64,
    pub vmafneg_mean: f64,
    pub bpp: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 7] {
        [
            self.psnr_db,
            self.ms_ssim,
            self.vmafneg_y,
            self.vmafneg_u,
            self.vmafneg_v,
            self.vmafneg_mean,
            self.bpp,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub vmafneg_y: f64,
    pub vmafneg_u: f64,
    pub vmafneg_v: f64,
    pub vmafneg_mean: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Checkpoint id, weights, scaling, corpus and the like.
    pub provenance: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self, ReportError> {
        if rows.is_empty() {
            return Err(ReportError::Input("report has no rows".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.values().iter().any(|v| !v.is_finite())) {
            return Err(ReportError::Input(format!("non-finite metric for image {}", r.image_id)));
        }
        Ok(Self {
            rows,
            provenance: BTreeMap::new(),
        })
    }

    /// Arithmetic means of every column.
    pub fn means(&self) -> MetricMeans {
        let n = self.rows.len() as f64;
        let mut acc = [0.0; 7];
        for r in &self.rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [psnr_db, ms_ssim, vmafneg_y, vmafneg_u, vmafneg_v, vmafneg_mean, bpp] = acc.map(|a| a / n);
        MetricMeans {
            psnr_db,
            ms_ssim,
            vmafneg_y,
            vmafneg_u,
            vmafneg_v,
            vmafneg_mean,
            bpp,
        }
    }

    /// Per-image rows in [`REPORT_CSV_HEADER`] order. Values use the
    /// shortest representation that round-trips.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_CSV_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.image_id.clone()];
            rec.extend(r.values().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Self, ReportError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(REPORT_CSV_HEADER) {
            return Err(ReportError::Input(format!(
                "unexpected report columns {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let rows = rdr.deserialize().collect::<Result<Vec<MetricRow>, _>>()?;
        Self::new(rows)
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), ReportError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Corpus means as a single labelled grid row for ranking. Every column
    /// ranks higher-is-better except `bpp`.
    pub fn to_grid_row(&self, label: &str) -> Grid {
        let m = self.means();
        Grid {
            row_labels: vec![label.to_owned()],
            col_labels: REPORT_CSV_HEADER[1..].iter().map(|s| (*s).to_owned()).collect(),
            values: vec![vec![
                m.psnr_db,
                m.ms_ssim,
                m.vmafneg_y,
                m.vmafneg_u,
                m.vmafneg_v,
                m.vmafneg_mean,
                m.bpp,
            ]],
            higher_better: vec![true, true, true, true, true, true, false],
        }
    }

    /// True when the header matches [`REPORT_CSV_HEADER`].
    pub fn is_report_csv(text: &str) -> bool {
        text.lines().next().is_some_and(|h| h.trim() == REPORT_CSV_HEADER.join(","))
    }
}

/// What produces the reconstruction being scored.
#[derive(Clone, Copy, Debug)]
pub enum Coder<'a> {
    Model(&'a CodecModel),
    /// Reconstruction equals the input; rate is the raw 24 bpp.
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Centre-crop every image to this square side before coding.
    pub center_crop: Option<usize>,
}

/// Scores one image.
pub fn evaluate_image(coder: Coder<'_>, image_id: &str, img: &ImageBatch, vmaf: &VmafModel) -> Result<MetricRow, ReportError> {
    let (rec, bpp) = match coder {
        Coder::Model(m) => {
            let coded = code_image(m, img)?;
            (coded.reconstruction, coded.rate.bpp)
        }
        Coder::Identity => (img.clone(), 24.0),
    };
    let v = vmaf_neg(img, &rec, vmaf)?;
    Ok(MetricRow {
        image_id: image_id.to_owned(),
        psnr_db: psnr(img, &rec)?,
        ms_ssim: ms_ssim(img, &rec)?,
        vmafneg_y: v.y,
        vmafneg_u: v.u,
        vmafneg_v: v.v,
        vmafneg_mean: v.mean,
        bpp,
    })
}

/// Scores every image of `corpus`. Images fan out across threads and rows
/// come back in corpus order, so the report is deterministic.
pub fn evaluate_corpus(
    coder: Coder<'_>,
    corpus: &CorpusManifest,
    vmaf: &VmafModel,
    opts: EvalOptions,
) -> Result<MetricReport, ReportError> {
    let rows = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let mut img = corpus.load(i)?;
            if let Some(side) = opts.center_crop {
                img = center_crop(&img, side.min(img.height()), side.min(img.width()))?;
            }
            evaluate_image(coder, &corpus.entries[i], &img, vmaf)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = MetricReport::new(rows)?;
    report.provenance.insert("corpus".into(), corpus.root_path.display().to_string());
    report.provenance.insert("images".into(), corpus.len().to_string());
    if let Coder::Model(m) = coder {
        report.provenance.insert("config_hash".into(), m.config.architecture_hash());
    }
    Ok(report)
}
