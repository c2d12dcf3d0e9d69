//! Acceptance gate. Every criterion runs at its pinned tolerance and prints
//! exactly one `[PASS]` or `[FAIL]` line; the process exits non-zero when any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

use negtune_core::codec::{Checkpoint, CodecModel, FreezeSpec};
use negtune_core::finetune::{finetune, TrainConfig};
use negtune_core::imageio::{rgb_to_yuv_image, Split};
use negtune_core::loss::{calibrate_scaling, mixed_loss, scaling_from_stats, CalibrationStats, LossWeights, RateEstimate, ScalingFactors};
use negtune_core::metrics::{
    adm_feature, metric_gradient, ms_ssim, mse_from_psnr, mse_value, psnr, vif_features, vmaf_neg, MetricId, VmafModel, PSNR_CAP_DB,
};
use negtune_core::ratematch::{match_bitrate, RateDirection, RateMatchConfig};
use negtune_core::report::{
    block_sensitivity, evaluate_corpus, rank_accumulate, rank_column, Attack, BlockRun, Coder, EvalOptions, Grid, MetricMeans, TiePolicy,
};
use negtune_core::synth::{synth_image, write_corpus, SynthConfig};
use negtune_core::ImageBatch;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

// Pinned thresholds.
const RANK_RUNTIME: Duration = Duration::from_secs(1);
const BLOCK_TOL: f64 = 0.01;
const BLOCK_MIN_PARAMS_M: f64 = 0.3;
const BLOCK_RUNTIME: Duration = Duration::from_secs(1);
const BETA_PRIME_TARGET: f64 = 1600.0;
const BETA_PRIME_REL_TOL: f64 = 0.05;
const GAMMA_PRIME_TARGET: f64 = 1.6;
const GAMMA_PRIME_REL_TOL: f64 = 0.10;
const CALIBRATION_RUNTIME: Duration = Duration::from_secs(1);
const VMAF_SCORE_TOL: f64 = 0.2;
const MSSSIM_TOL: f64 = 1e-4;
const CONFORMANCE_RUNTIME: Duration = Duration::from_secs(60);
const GRAD_STEP: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_SAMPLES: usize = 20;
const GRADIENT_RUNTIME: Duration = Duration::from_secs(5 * 60);
const ATTACK_MIN_IMAGES: usize = 200;
const ATTACK_MIN_EPOCHS: usize = 2;
const TRAIN_RUNTIME: Duration = Duration::from_secs(2 * 3600);
const MIXED_PSNR_TOL_DB: f64 = 0.5;
const RATE_TOL: f64 = 0.01;
const RATE_MAX_BISECTIONS: usize = 12;
const FREEZE_RUNTIME: Duration = Duration::from_secs(10 * 60);
const PROPERTY_RUNTIME: Duration = Duration::from_secs(10 * 60);

const PUBLISHED_ENCODER_ACCUM: [f64; 8] = [39.0, 49.0, 45.0, 36.0, 33.0, 31.0, 29.0, 34.0];
const PUBLISHED_DECODER_ACCUM: [f64; 8] = [31.0, 40.0, 38.0, 25.0, 30.0, 30.0, 32.0, 36.0];

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixtures() -> PathBuf {
    manifest_dir().join("tests/fixtures")
}

fn conformance_dir() -> PathBuf {
    manifest_dir().join("../core/tests/fixtures/conformance")
}

fn baseline() -> CodecModel {
    Checkpoint::load(fixtures().join("baseline.ckpt")).unwrap().to_model(None).unwrap()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within_runtime(v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    let ok = elapsed < limit;
    let detail = format!("{}; runtime {:.2?} (limit {:.0?})", v.detail, elapsed, limit);
    verdict(v.pass && ok, detail)
}

fn negtune(out_root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_negtune"))
        .args(args)
        .env("NEGTUNE_OUTPUT_ROOT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn rank_segment(out_root: &Path, name: &str, expected: &[f64; 8]) -> (bool, String) {
    let csv = fixtures().join(format!("rank_grid_{name}.csv"));
    let expect = expected.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let o = negtune(
        out_root,
        &["rank", csv.to_str().unwrap(), "--expect", &expect, "--output-dir", name],
    );
    let sweep: serde_json::Value = serde_json::from_slice(&std::fs::read(out_root.join(name).join("tie_sweep.json")).unwrap()).unwrap();
    let matched = sweep["matched"].as_str().map(str::to_owned);
    let attempts: Vec<String> = sweep["attempts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| format!("{}={}", a[0].as_str().unwrap(), a[1]))
        .collect();
    let ok = o.status.success() && matched.is_some();
    let detail = match matched {
        Some(p) => format!("{name} reproduced under '{p}'"),
        None => format!("{name} not reproduced (expected {expected:?}; {})", attempts.join(", ")),
    };
    (ok, detail)
}

/// Published accumulated ranks through the rank command.
fn criterion_1() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let (enc_ok, enc) = rank_segment(dir.path(), "encoder", &PUBLISHED_ENCODER_ACCUM);
    let (dec_ok, dec) = rank_segment(dir.path(), "decoder", &PUBLISHED_DECODER_ACCUM);
    let elapsed = t.elapsed() / 2;
    within_runtime(verdict(enc_ok && dec_ok, format!("{enc}; {dec}")), elapsed, RANK_RUNTIME)
}

// Decoder block parameter counts derived from the published architectures.
fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}
fn gdn(c: usize) -> usize {
    c + c * c
}
fn residual_block(n: usize) -> usize {
    2 * conv(n, n, 3)
}
fn residual_block_upsample(i: usize, o: usize) -> usize {
    conv(i, 4 * o, 3) + gdn(o) + conv(o, o, 3) + conv(i, 4 * o, 3)
}
fn subpel_conv(i: usize, o: usize) -> usize {
    conv(i, 4 * o, 3)
}
/// Swin block: two layer norms, windowed attention with a relative
/// position table, and a 4x MLP.
fn swin_block(d: usize, head_dim: usize, window: usize) -> usize {
    let heads = d / head_dim;
    2 * 2 * d + (d * 3 * d + 3 * d) + (2 * window - 1).pow(2) * heads + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
}
fn conv_trans_block(half: usize) -> usize {
    2 * conv(2 * half, 2 * half, 1) + swin_block(half, 32, 8) + residual_block(half)
}

fn cheng2020_blocks() -> Vec<usize> {
    let n = 128;
    let (rb, up) = (residual_block(n), residual_block_upsample(n, n));
    vec![rb, up, rb, up, rb, up, rb, subpel_conv(n, 3)]
}
fn mbt2018_blocks() -> Vec<usize> {
    let n = 192;
    let deconv = |i: usize, o: usize| i * o * 25 + o;
    vec![deconv(n, n), gdn(n), deconv(n, n), gdn(n), deconv(n, n), gdn(n), deconv(n, 3)]
}
fn tcm_blocks() -> Vec<usize> {
    let (n, m) = (64, 320);
    let ctb = conv_trans_block(n);
    let up = residual_block_upsample(2 * n, 2 * n);
    vec![
        residual_block_upsample(m, 2 * n),
        ctb,
        ctb,
        up,
        ctb,
        ctb,
        up,
        ctb,
        ctb,
        subpel_conv(2 * n, 3),
    ]
}

struct BlockTable {
    codec: &'static str,
    base_psnr: f64,
    base_vmaf_y: f64,
    /// (psnr, vmaf_y, displayed params M, displayed delta per M)
    rows: &'static [(f64, f64, f64, f64)],
    counts: fn() -> Vec<usize>,
}

const BLOCK_TABLES: [BlockTable; 3] = [
    BlockTable {
        codec: "Cheng2020",
        base_psnr: 31.55,
        base_vmaf_y: 79.78,
        rows: &[
            (30.93, 80.19, 0.30, -2.13),
            (30.82, 81.23, 1.34, -0.55),
            (31.15, 81.11, 0.30, -1.35),
            (30.60, 81.66, 1.34, -0.71),
            (30.71, 81.29, 0.30, -2.87),
            (23.63, 82.34, 1.34, -5.90),
            (21.93, 82.36, 0.30, -32.61),
            (23.49, 81.85, 0.01, -582.69),
        ],
        counts: cheng2020_blocks,
    },
    BlockTable {
        codec: "Mbt2018",
        base_psnr: 31.68,
        base_vmaf_y: 78.75,
        rows: &[
            (30.94, 80.50, 0.92, -0.81),
            (30.92, 80.35, 0.04, -20.37),
            (30.67, 80.85, 0.92, -1.09),
            (30.96, 80.71, 0.04, -19.30),
            (24.34, 81.55, 0.92, -7.96),
            (30.86, 80.69, 0.04, -22.20),
            (27.29, 80.58, 0.01, -304.97),
        ],
        counts: mbt2018_blocks,
    },
    BlockTable {
        codec: "TCM",
        base_psnr: 35.20,
        base_vmaf_y: 87.23,
        rows: &[
            (34.43, 88.49, 3.11, -0.25),
            (34.41, 88.54, 0.16, -5.00),
            (34.40, 88.54, 0.16, -5.07),
            (34.30, 88.64, 1.34, -0.67),
            (34.21, 88.64, 0.16, -6.24),
            (34.14, 88.66, 0.16, -6.73),
            (29.40, 89.06, 1.34, -4.31),
            (24.04, 89.19, 0.16, -70.34),
            (22.88, 89.27, 0.16, -77.67),
            (25.80, 88.95, 0.01, -679.50),
        ],
        counts: tcm_blocks,
    },
];

fn means(psnr_db: f64, vmafneg_y: f64) -> MetricMeans {
    MetricMeans {
        psnr_db,
        vmafneg_y,
        ..MetricMeans::default()
    }
}

/// Published delta-PSNR per million parameters, from unrounded counts.
fn criterion_2() -> Verdict {
    let t = Instant::now();
    let (mut checked, mut misses, mut count_mismatch) = (0, Vec::new(), Vec::new());
    for table in &BLOCK_TABLES {
        let counts = (table.counts)();
        assert_eq!(counts.len(), table.rows.len());
        let runs: Vec<BlockRun> = table
            .rows
            .iter()
            .zip(&counts)
            .enumerate()
            .map(|(block, (r, &c))| BlockRun {
                block,
                means: means(r.0, r.1),
                params_m: c as f64 / 1e6,
            })
            .collect();
        let rows = block_sensitivity(Some(&means(table.base_psnr, table.base_vmaf_y)), &runs).unwrap();
        for (row, published) in rows.iter().zip(table.rows) {
            if ((row.params_m * 100.0).round() / 100.0 - published.2).abs() > 1e-9 {
                count_mismatch.push(format!("{} block {}: {:.6} M", table.codec, row.block, row.params_m));
            }
            if published.2 < BLOCK_MIN_PARAMS_M {
                continue;
            }
            checked += 1;
            let err = (row.delta_psnr_per_mparam - published.3).abs();
            if err > BLOCK_TOL {
                misses.push(format!(
                    "{} block {}: {:.4} vs {:.2}",
                    table.codec, row.block, row.delta_psnr_per_mparam, published.3
                ));
            }
        }
    }
    let ok = misses.is_empty() && count_mismatch.is_empty();
    let detail = if ok {
        format!("{checked} rows within ±{BLOCK_TOL}")
    } else {
        format!(
            "{}/{checked} rows within ±{BLOCK_TOL}; outside: {}{}",
            checked - misses.len(),
            misses.join(", "),
            if count_mismatch.is_empty() {
                String::new()
            } else {
                format!("; derived counts not matching display: {}", count_mismatch.join(", "))
            }
        )
    };
    within_runtime(verdict(ok, detail), t.elapsed(), BLOCK_RUNTIME)
}

/// Ratio-of-means calibration on the published baseline statistics.
fn criterion_3() -> Verdict {
    let t = Instant::now();
    let vmaf_mean = (79.78 + 73.82 + 66.06) / 3.0;
    let stats = CalibrationStats {
        images: 24,
        mean_mse255: mse_from_psnr(31.55),
        mean_one_minus_ms_ssim: 1.0 - 0.971,
        mean_hundred_minus_vmaf: 100.0 - vmaf_mean,
    };
    let s = scaling_from_stats(&stats).unwrap();
    let eb = (s.beta_prime - BETA_PRIME_TARGET).abs() / BETA_PRIME_TARGET;
    let eg = (s.gamma_prime - GAMMA_PRIME_TARGET).abs() / GAMMA_PRIME_TARGET;
    let ok = eb <= BETA_PRIME_REL_TOL && eg <= GAMMA_PRIME_REL_TOL;
    let detail = format!(
        "beta' {:.1} ({:.2}% off {BETA_PRIME_TARGET}), gamma' {:.4} ({:.2}% off {GAMMA_PRIME_TARGET})",
        s.beta_prime,
        100.0 * eb,
        s.gamma_prime,
        100.0 * eg
    );
    within_runtime(verdict(ok, detail), t.elapsed(), CALIBRATION_RUNTIME)
}

/// Bundled VMAF NEG and MS-SSIM against the reference-tool oracle.
fn criterion_4() -> Verdict {
    let t = Instant::now();
    let oracle: serde_json::Value = serde_json::from_slice(&std::fs::read(conformance_dir().join("oracle.json")).unwrap()).unwrap();
    let model = VmafModel::neg();
    let (mut worst_vmaf, mut worst_ms, mut pairs) = (0.0f64, 0.0f64, 0);
    for p in oracle["pairs"].as_array().unwrap() {
        let r = ImageBatch::open(conformance_dir().join(p["ref"].as_str().unwrap())).unwrap();
        let d = ImageBatch::open(conformance_dir().join(p["dist"].as_str().unwrap())).unwrap();
        let s = vmaf_neg(&r, &d, &model).unwrap();
        for (got, ch) in [s.y, s.u, s.v].iter().zip(["y", "u", "v"]) {
            worst_vmaf = worst_vmaf.max((got - p["neg"][ch]["score"].as_f64().unwrap()).abs());
        }
        worst_ms = worst_ms.max((ms_ssim(&r, &d).unwrap() - p["ms_ssim"].as_f64().unwrap()).abs());
        pairs += 1;
    }
    let ok = pairs == 10 && worst_vmaf <= VMAF_SCORE_TOL && worst_ms <= MSSSIM_TOL;
    let detail = format!("{pairs} pairs; worst VMAF NEG channel error {worst_vmaf:.4} (tol {VMAF_SCORE_TOL}), worst MS-SSIM error {worst_ms:.2e} (tol {MSSSIM_TOL:e})");
    within_runtime(verdict(ok, detail), t.elapsed(), CONFORMANCE_RUNTIME)
}

fn worst_gradient_error(metric: MetricId, f: &dyn Fn(&ImageBatch, &ImageBatch) -> f64, seed: u64) -> f64 {
    let r = ImageBatch::open(conformance_dir().join("pair00_ref.png")).unwrap();
    let d = ImageBatch::open(conformance_dir().join("pair00_dist.png")).unwrap();
    assert_eq!((r.height(), r.width()), (256, 256));
    let g = metric_gradient(metric, &r, &d, &VmafModel::neg()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut n) = (0.0f64, 0);
    while n < GRAD_SAMPLES {
        let idx = [0, rng.random_range(0..3), rng.random_range(0..256), rng.random_range(0..256)];
        let v = d.data()[idx];
        if !(GRAD_STEP..=1.0 - GRAD_STEP).contains(&v) {
            continue;
        }
        let mut plus = d.data().clone();
        plus[idx] += GRAD_STEP;
        let mut minus = d.data().clone();
        minus[idx] -= GRAD_STEP;
        let fd = (f(&r, &ImageBatch::new(plus).unwrap()) - f(&r, &ImageBatch::new(minus).unwrap())) / (2.0 * GRAD_STEP);
        worst = worst.max((fd - g[idx]).abs() / fd.abs().max(1e-12));
        n += 1;
    }
    worst
}

/// Analytic gradients against central differences at the pinned step.
fn criterion_5() -> Verdict {
    let t = Instant::now();
    let model = VmafModel::neg();
    let results = [
        ("MSE", worst_gradient_error(MetricId::Mse, &|r, d| mse_value(r, d).unwrap(), 1)),
        ("MS-SSIM", worst_gradient_error(MetricId::MsSsim, &|r, d| ms_ssim(r, d).unwrap(), 2)),
        (
            "VMAF NEG",
            worst_gradient_error(MetricId::VmafNeg, &|r, d| vmaf_neg(r, d, &model).unwrap().mean, 3),
        ),
    ];
    let ok = results.iter().all(|(_, e)| *e < GRAD_REL_TOL);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} worst rel err {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    within_runtime(
        verdict(ok, format!("{detail} (tol {GRAD_REL_TOL:e}, step {GRAD_STEP:e})")),
        t.elapsed(),
        GRADIENT_RUNTIME,
    )
}

struct DecoderRuns {
    control: MetricMeans,
    vmaf_only: MetricMeans,
    mixed: MetricMeans,
    epochs: usize,
    images: usize,
    times: [Duration; 3],
}

fn decoder_runs() -> DecoderRuns {
    let dir = tempfile::tempdir().unwrap();
    let side = 192;
    let train = write_corpus(
        dir.path(),
        Split::Train,
        SynthConfig {
            count: ATTACK_MIN_IMAGES,
            height: side,
            width: side,
            seed: 7001,
        },
    )
    .unwrap();
    let val = write_corpus(
        dir.path(),
        Split::Validation,
        SynthConfig {
            count: 16,
            height: side,
            width: side,
            seed: 7002,
        },
    )
    .unwrap();
    let start = baseline();
    let vmaf = VmafModel::neg();
    let scaling = calibrate_scaling(&val, &start, &vmaf).unwrap();
    let lambda = start.config.quality_lambda;
    let mut out = Vec::new();
    let mut times = [Duration::ZERO; 3];
    for (i, (a, b, g)) in [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.8, 0.1, 0.1)].into_iter().enumerate() {
        let mut cfg = TrainConfig::new(LossWeights::new(a, b, g, lambda).unwrap(), scaling, FreezeSpec::DecoderOnly);
        cfg.epochs = ATTACK_MIN_EPOCHS;
        cfg.crop = side;
        let t = Instant::now();
        let (_, history) = finetune(start.clone(), &train, &val, &cfg, &vmaf, None).unwrap();
        times[i] = t.elapsed();
        let last = history.last().unwrap();
        assert_eq!(last.epoch, ATTACK_MIN_EPOCHS);
        out.push(last.validation);
    }
    DecoderRuns {
        control: out[0],
        vmaf_only: out[1],
        mixed: out[2],
        epochs: ATTACK_MIN_EPOCHS,
        images: train.len(),
        times,
    }
}

/// VMAF-NEG-only decoder fine-tune against the MSE control.
fn criterion_6(runs: &DecoderRuns) -> Verdict {
    let dv = runs.vmaf_only.vmafneg_mean - runs.control.vmafneg_mean;
    let dp = runs.vmaf_only.psnr_db - runs.control.psnr_db;
    let ok = runs.images >= ATTACK_MIN_IMAGES && runs.epochs >= ATTACK_MIN_EPOCHS && dv > 0.0 && dp < 0.0;
    let detail = format!(
        "{} images x {} epochs; dVMAF NEG mean {dv:+.3}, dPSNR {dp:+.3} dB (control {:.3} dB / {:.3})",
        runs.images, runs.epochs, runs.control.psnr_db, runs.control.vmafneg_mean
    );
    within_runtime(verdict(ok, detail), runs.times[0] + runs.times[1], TRAIN_RUNTIME)
}

/// Mixed (0.8, 0.1, 0.1) decoder fine-tune against the MSE control.
fn criterion_7(runs: &DecoderRuns) -> Verdict {
    let dp = runs.mixed.psnr_db - runs.control.psnr_db;
    let dv = runs.mixed.vmafneg_mean - runs.control.vmafneg_mean;
    let ok = dp.abs() <= MIXED_PSNR_TOL_DB && dv >= 0.0;
    let detail = format!(
        "dPSNR {dp:+.3} dB (tol ±{MIXED_PSNR_TOL_DB}), dVMAF NEG mean {dv:+.3}, dVMAF NEG Y {:+.3}",
        runs.mixed.vmafneg_y - runs.control.vmafneg_y
    );
    within_runtime(verdict(ok, detail), runs.times[0] + runs.times[2], TRAIN_RUNTIME)
}

/// Bitrate matching: synthetic rate models, then the CLI on the toy codec.
fn criterion_8() -> Verdict {
    let t = Instant::now();
    let cfg = RateMatchConfig::default();
    let mut synthetic_ok = true;
    let mut worst_iters = 0;
    for (target, lambda0) in [(0.5, 0.3), (0.25, 10.0), (0.9, 0.01), (0.1, 1.0)] {
        let r = match_bitrate(|l: f64| Ok::<_, std::convert::Infallible>(1.0 / (1.0 + l)), target, lambda0, &cfg);
        match r {
            Ok(r) => {
                synthetic_ok &=
                    r.deviation.abs() <= RATE_TOL && r.iterations <= RATE_MAX_BISECTIONS && r.direction == Some(RateDirection::Decreasing);
                worst_iters = worst_iters.max(r.iterations);
            }
            Err(_) => synthetic_ok = false,
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let side = 192;
    for (split, count, seed) in [(Split::Train, 24, 8001), (Split::Validation, 4, 8002), (Split::Test, 8, 8003)] {
        write_corpus(
            &data,
            split,
            SynthConfig {
                count,
                height: side,
                width: side,
                seed,
            },
        )
        .unwrap();
    }
    let ckpt = fixtures().join("baseline.ckpt");
    let out_root = dir.path().join("out");
    let o = negtune(
        &out_root,
        &[
            "finetune",
            "--corpus-root",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--weights",
            "0.2",
            "0.4",
            "0.4",
            "--freeze",
            "encoder",
            "--match-rate",
            "--epochs",
            "1",
            "--crop",
            "192",
            "--batch-size",
            "4",
            "--learning-rate",
            "5e-4",
            "--output-dir",
            "rm",
        ],
    );
    let codec_detail;
    let mut codec_ok = false;
    if o.status.success() {
        let out = out_root.join("rm");
        let rm: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("rate_match.json")).unwrap()).unwrap();
        // The deviation is recomputed independently from the baseline and
        // the written report rather than taken from the search result.
        let test = negtune_core::imageio::load_corpus(&data, Split::Test).unwrap();
        let base_bpp = evaluate_corpus(Coder::Model(&baseline()), &test, &VmafModel::neg(), EvalOptions::default())
            .unwrap()
            .means()
            .bpp;
        let report = negtune_core::MetricReport::read_csv(std::fs::File::open(out.join("report.csv")).unwrap()).unwrap();
        let dev = (report.means().bpp - base_bpp) / base_bpp;
        codec_ok = dev.abs() <= RATE_TOL;
        codec_detail = format!(
            "toy codec lambda* {:.4e} after {} probes, bpp {:.5} vs baseline {:.5} ({:+.3}%)",
            rm["lambda_star"].as_f64().unwrap(),
            rm["trace"].as_array().unwrap().len(),
            report.means().bpp,
            base_bpp,
            100.0 * dev
        );
    } else {
        codec_detail = format!("toy codec run failed: {}", String::from_utf8_lossy(&o.stderr).trim());
    }
    let detail = format!(
        "synthetic model {} (max {worst_iters} bisections); {codec_detail}",
        if synthetic_ok { "converged" } else { "did not converge" }
    );
    within_runtime(verdict(synthetic_ok && codec_ok, detail), t.elapsed(), TRAIN_RUNTIME)
}

/// Frozen parameters are bit-identical after every fine-tune mode.
fn criterion_9() -> Verdict {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train = write_corpus(
        dir.path(),
        Split::Train,
        SynthConfig {
            count: 4,
            height: 192,
            width: 192,
            seed: 9001,
        },
    )
    .unwrap();
    let val = write_corpus(
        dir.path(),
        Split::Validation,
        SynthConfig {
            count: 1,
            height: 192,
            width: 192,
            seed: 9002,
        },
    )
    .unwrap();
    let start = baseline();
    let vmaf = VmafModel::neg();
    let mut modes = vec![FreezeSpec::EncoderOnly, FreezeSpec::DecoderOnly];
    modes.extend((0..start.decoder_block_count()).map(|index| FreezeSpec::SingleDecoderBlock { index }));
    let mut failures = Vec::new();
    for spec in &modes {
        let w = LossWeights::new(0.8, 0.1, 0.1, start.config.quality_lambda).unwrap();
        let mut cfg = TrainConfig::new(w, ScalingFactors::new(1500.0, 1.5).unwrap(), *spec);
        cfg.epochs = 1;
        cfg.crop = 192;
        cfg.batch_size = 2;
        cfg.learning_rate = 1e-3;
        let out = dir.path().join(spec.to_string().replace(':', "_"));
        std::fs::create_dir_all(&out).unwrap();
        let (trained, _) = finetune(start.clone(), &train, &val, &cfg, &vmaf, Some(&out)).unwrap();
        // Compare the in-memory result and the epoch checkpoint written to disk.
        let reloaded = Checkpoint::load(negtune_core::finetune::epoch_checkpoint(&out, 1))
            .unwrap()
            .to_model(None)
            .unwrap();
        for model in [&trained, &reloaded] {
            let (mut frozen_changed, mut trained_changed) = (0, 0);
            for ((part, before), (_, after)) in start.params().into_iter().zip(model.params()) {
                let same = before.value.iter().zip(&after.value).all(|(a, b)| a.to_bits() == b.to_bits());
                if !spec.trains(part) && !same {
                    frozen_changed += 1;
                }
                if spec.trains(part) && !same {
                    trained_changed += 1;
                }
            }
            if frozen_changed > 0 || trained_changed == 0 {
                failures.push(format!(
                    "{spec}: {frozen_changed} frozen tensors changed, {trained_changed} trainable changed"
                ));
            }
        }
    }
    let ok = failures.is_empty();
    let detail = if ok {
        format!("{} modes, frozen tensors byte-identical in memory and on disk", modes.len())
    } else {
        failures.join("; ")
    };
    within_runtime(verdict(ok, detail), t.elapsed(), FREEZE_RUNTIME)
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        PropConfig {
            cases,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

fn prop_self_identity() -> Result<(), String> {
    let vmaf = VmafModel::neg();
    runner(6)
        .run(&(0u64..1000), |seed| {
            let img = synth_image(seed, 0, 192, 192);
            prop_assert_eq!(mse_value(&img, &img).unwrap(), 0.0);
            prop_assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
            prop_assert!((ms_ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
            let s = vmaf_neg(&img, &img, &vmaf).unwrap();
            prop_assert!((0.0..=100.0).contains(&s.mean));
            Ok(())
        })
        .map_err(|e| format!("self-identity: {e}"))
}

fn prop_neg_dominance() -> Result<(), String> {
    runner(6)
        .run(&(0u64..1000, 0.5f64..4.0), |(seed, amount)| {
            let img = synth_image(seed, 1, 192, 192);
            let sharp = Attack::Unsharp { amount, radius: 1.5 }.apply(&img).unwrap();
            let (r, d) = (rgb_to_yuv_image(img.image(0)), rgb_to_yuv_image(sharp.image(0)));
            let (ry, dy) = (&r.y * 255.0, &d.y * 255.0);
            let neg = vif_features(ry.view(), dy.view(), 1.0);
            let plain = vif_features(ry.view(), dy.view(), 100.0);
            for s in 0..4 {
                prop_assert!(neg[s] <= plain[s] + 1e-12, "vif scale {}: {} > {}", s, neg[s], plain[s]);
            }
            prop_assert!(adm_feature(ry.view(), dy.view(), 1.0) <= adm_feature(ry.view(), dy.view(), 100.0) + 1e-12);
            Ok(())
        })
        .map_err(|e| format!("NEG dominance: {e}"))
}

fn prop_rank_permutation() -> Result<(), String> {
    let strategy = (2usize..9, 1usize..6).prop_flat_map(|(rows, cols)| {
        (
            proptest::collection::vec(proptest::collection::vec(0u8..5, cols), rows),
            Just((0..rows).collect::<Vec<usize>>()).prop_shuffle(),
        )
    });
    runner(256)
        .run(&strategy, |(values, perm)| {
            let cols = values[0].len();
            let v: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
            let labels: Vec<String> = (0..v.len()).map(|i| format!("r{i}")).collect();
            let col_labels: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
            let g = Grid::new(labels.clone(), col_labels.clone(), v.clone()).unwrap();
            let pg = Grid::new(
                perm.iter().map(|&i| labels[i].clone()).collect(),
                col_labels,
                perm.iter().map(|&i| v[i].clone()).collect(),
            )
            .unwrap();
            for policy in TiePolicy::ALL {
                let (a, b) = (rank_accumulate(&g, policy).unwrap(), rank_accumulate(&pg, policy).unwrap());
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(&b.ranks[k], &a.ranks[i]);
                    prop_assert_eq!(b.accumulated[k], a.accumulated[i]);
                }
            }
            let n = v.len() as f64;
            for c in 0..cols {
                let col: Vec<f64> = v.iter().map(|r| r[c]).collect();
                let sum: f64 = rank_column(&col, true, TiePolicy::Min).iter().sum();
                let mut distinct = col.clone();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                if distinct.len() == col.len() {
                    prop_assert_eq!(sum, n * (n + 1.0) / 2.0);
                } else {
                    prop_assert!(sum < n * (n + 1.0) / 2.0);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("rank permutation: {e}"))
}

fn prop_loss_reduction() -> Result<(), String> {
    let vmaf = VmafModel::neg();
    let r = synth_image(3, 2, 192, 192);
    let d = Attack::Checkerboard {
        amplitude: 0.03,
        period: 2,
    }
    .apply(&r)
    .unwrap();
    let rate = RateEstimate {
        total_bits: 1.0e4,
        num_pixels: 192 * 192,
        bpp: 1.0e4 / (192.0 * 192.0),
    };
    let s = ScalingFactors::new(1600.0, 1.6).unwrap();
    let all = mixed_loss(&r, &d, &rate, &LossWeights::new(0.4, 0.3, 0.3, 0.01).unwrap(), &s, &vmaf).unwrap();
    let (m, ms, v) = (all.mse255.unwrap(), all.ms_ssim.unwrap(), all.vmaf_neg.unwrap());
    // Single-metric weights reduce to the plain terms.
    let mse_only = mixed_loss(&r, &d, &rate, &LossWeights::new(1.0, 0.0, 0.0, 0.01).unwrap(), &s, &vmaf).unwrap();
    let n = r.data().len() as f64;
    let mse255 = 255.0 * 255.0 * r.data().iter().zip(d.data().iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if (mse_only.total - (rate.bpp + 0.01 * mse255)).abs() > 1e-9 {
        return Err(format!("loss reduction: MSE-only total {} is not R + lambda MSE", mse_only.total));
    }
    runner(256)
        .run(&(0.0f64..1.0, 0.0f64..1.0, 1e-4f64..1.0), |(u, t, lambda)| {
            let (a, b) = (u, (1.0 - u) * t);
            let w = LossWeights::new(a, b, 1.0 - a - b, lambda).unwrap();
            let want = rate.bpp + lambda * (a * m + b * (1.0 - ms) * s.beta_prime + (1.0 - a - b) * (100.0 - v) * s.gamma_prime);
            prop_assert!((all.recompute(&w, &s) - want).abs() <= 1e-9 * want.abs().max(1.0));
            Ok(())
        })
        .map_err(|e| format!("loss reduction: {e}"))
}

fn prop_probe_monotone() -> Result<(), String> {
    let strategy = (0u64..1000, 0usize..3, 0.01f64..0.2, 0.01f64..0.2);
    runner(12)
        .run(&strategy, |(seed, kind, s1, ds)| {
            let img = synth_image(seed, 3, 64, 64);
            let attack = match kind {
                0 => Attack::Unsharp { amount: 0.0, radius: 1.5 },
                1 => Attack::Checkerboard { amplitude: 0.0, period: 2 },
                _ => Attack::Hline {
                    amplitude: 0.0,
                    spacing: 3,
                },
            };
            // Unsharp amounts span a wider range than amplitudes.
            let scale = if kind == 0 { 10.0 } else { 1.0 };
            let p: Vec<f64> = [0.0, s1 * scale, (s1 + ds) * scale]
                .iter()
                .map(|&v| psnr(&img, &attack.with_strength(v).apply(&img).unwrap()).unwrap())
                .collect();
            prop_assert!(p[0] > p[1] && p[1] > p[2], "{:?}", p);
            Ok(())
        })
        .map_err(|e| format!("probe monotonicity: {e}"))
}

type PropSuite = fn() -> Result<(), String>;

/// Module invariants as property tests.
fn criterion_10() -> Verdict {
    let t = Instant::now();
    let suites: [(&str, PropSuite); 5] = [
        ("self-identity", prop_self_identity),
        ("NEG dominance", prop_neg_dominance),
        ("rank permutation", prop_rank_permutation),
        ("loss reduction", prop_loss_reduction),
        ("probe monotonicity", prop_probe_monotone),
    ];
    let failures: Vec<String> = suites.iter().filter_map(|(_, f)| f().err()).collect();
    let ok = failures.is_empty();
    let detail = if ok {
        format!("{} suites hold", suites.len())
    } else {
        failures.join("; ")
    };
    within_runtime(verdict(ok, detail), t.elapsed(), PROPERTY_RUNTIME)
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut record = |n: usize, v: Verdict| {
        println!("[{}] criterion {n}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v));
    };
    let simple: [(usize, fn() -> Verdict); 5] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
    ];
    for (n, f) in simple {
        if wants(n) {
            record(n, f());
        }
    }
    if wants(6) || wants(7) {
        let runs = decoder_runs();
        if wants(6) {
            record(6, criterion_6(&runs));
        }
        if wants(7) {
            record(7, criterion_7(&runs));
        }
    }
    let rest: [(usize, fn() -> Verdict); 3] = [(8, criterion_8), (9, criterion_9), (10, criterion_10)];
    for (n, f) in rest {
        if wants(n) {
            record(n, f());
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
