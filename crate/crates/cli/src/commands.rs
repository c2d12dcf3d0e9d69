use crate::config::{config_err, RunConfig, ScalingSetting, RESOLVED_CONFIG_FILE};
use anyhow::{Context, Result};
use negtune_core::codec::{Checkpoint, CodecModel, FreezeSpec};
use negtune_core::finetune::{finetune, TrainConfig, TrainHistory, HISTORY_FILE};
use negtune_core::imageio::{load_corpus, ImageError};
use negtune_core::loss::{calibration_stats, scaling_from_stats};
use negtune_core::ratematch::{match_bitrate, RateMatchError};
use negtune_core::report::{
    attack_probe, evaluate_corpus, plot, rank_accumulate, reproduce_accumulated, Coder, EvalOptions, Grid, MetricMeans, MetricReport,
};
use negtune_core::{CorpusManifest, LossWeights, ScalingFactors, Split, VmafModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SCALING_FILE: &str = "scaling.json";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_SUMMARY_FILE: &str = "report.json";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const RATE_MATCH_FILE: &str = "rate_match.json";
pub const RANK_FILE: &str = "rank.csv";
pub const TIE_SWEEP_FILE: &str = "tie_sweep.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_SUMMARY_FILE: &str = "probe.json";

/// Contents of [`SCALING_FILE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub beta_prime: f64,
    pub gamma_prime: f64,
    pub corpus_digest: String,
    pub images: usize,
    pub checkpoint_sha256: String,
    pub mean_mse255: f64,
    pub mean_one_minus_ms_ssim: f64,
    pub mean_hundred_minus_vmaf: f64,
}

/// Corpus means plus provenance, written beside every per-image report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub means: MetricMeans,
    pub provenance: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_output(cfg: &RunConfig, default_dir: &str) -> Result<PathBuf> {
    let out = cfg.output_path(default_dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(out.to_path_buf());
    std::fs::write(out.join(RESOLVED_CONFIG_FILE), resolved.to_toml()?)?;
    Ok(())
}

fn corpus(cfg: &RunConfig, split: Split) -> Result<CorpusManifest> {
    let dir = cfg.split_dir(split)?;
    load_corpus(&dir, split).map_err(|e| match e {
        ImageError::MissingDirectory(_) | ImageError::EmptyCorpus(_) => config_err(format!("{split} corpus: {e}")),
        other => anyhow::Error::new(other).context(format!("loading the {split} corpus")),
    })
}

fn load_model(cfg: &RunConfig) -> Result<(CodecModel, String)> {
    let path = cfg.checkpoint_path()?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ck.to_model(None)?;
    Ok((model, sha256_file(path)?))
}

fn weights(cfg: &RunConfig, model: &CodecModel) -> Result<LossWeights> {
    let [a, b, g] = cfg.loss.weights;
    let lambda = cfg.loss.lambda.unwrap_or(model.config.quality_lambda);
    LossWeights::new(a, b, g, lambda).map_err(|e| config_err(e.to_string()))
}

fn train_config(cfg: &RunConfig, weights: LossWeights, scaling: ScalingFactors) -> Result<TrainConfig> {
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        crop: t.crop,
        batch_size: t.batch_size,
        seed: cfg.seed,
        weights,
        scaling,
        freeze: t.freeze,
        clip_norm: t.clip_norm,
        validation_crop: t.validation_crop,
    };
    tc.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(tc)
}

fn calibrate_file(model: &CodecModel, checkpoint_sha256: String, val: &CorpusManifest, vmaf: &VmafModel) -> Result<CalibrationFile> {
    let stats = calibration_stats(val, model, vmaf)?;
    let s = scaling_from_stats(&stats)?;
    Ok(CalibrationFile {
        beta_prime: s.beta_prime,
        gamma_prime: s.gamma_prime,
        corpus_digest: val.digest()?,
        images: stats.images,
        checkpoint_sha256,
        mean_mse255: stats.mean_mse255,
        mean_one_minus_ms_ssim: stats.mean_one_minus_ms_ssim,
        mean_hundred_minus_vmaf: stats.mean_hundred_minus_vmaf,
    })
}

/// Resolves the scaling setting, calibrating when asked.
fn resolve_scaling(
    cfg: &RunConfig,
    w: &LossWeights,
    model: &CodecModel,
    sha: &str,
    vmaf: &VmafModel,
    out: &Path,
) -> Result<ScalingFactors> {
    let s = match &cfg.loss.scaling {
        ScalingSetting::Fixed(s) => *s,
        ScalingSetting::Keyword(k) if k == "calibrate" => {
            if w.beta == 0.0 && w.gamma == 0.0 {
                // Neither scaled term is active, so the factors are inert.
                ScalingFactors::new(1.0, 1.0)?
            } else {
                let file = calibrate_file(model, sha.to_owned(), &corpus(cfg, Split::Validation)?, vmaf)?;
                write_json(&out.join(SCALING_FILE), &file)?;
                ScalingFactors::new(file.beta_prime, file.gamma_prime)?
            }
        }
        ScalingSetting::Keyword(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read scaling file {path}: {e}")))?;
            let file: CalibrationFile = serde_json::from_str(&text).map_err(|e| config_err(format!("invalid scaling file {path}: {e}")))?;
            ScalingFactors {
                beta_prime: file.beta_prime,
                gamma_prime: file.gamma_prime,
            }
        }
    };
    s.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(s)
}

fn evaluate(cfg: &RunConfig, model: &CodecModel, test: &CorpusManifest, vmaf: &VmafModel) -> Result<MetricReport> {
    Ok(evaluate_corpus(
        Coder::Model(model),
        test,
        vmaf,
        EvalOptions {
            center_crop: cfg.eval.center_crop,
        },
    )?)
}

fn save_report(out: &Path, report: &MetricReport) -> Result<MetricMeans> {
    report.save_csv(out.join(REPORT_FILE))?;
    let means = report.means();
    write_json(
        &out.join(REPORT_SUMMARY_FILE),
        &ReportSummary {
            means,
            provenance: report.provenance.clone(),
        },
    )?;
    Ok(means)
}

fn print_means(label: &str, m: &MetricMeans) {
    println!(
        "{label}: PSNR {:.3} dB, MS-SSIM {:.5}, VMAF NEG Y/U/V {:.3}/{:.3}/{:.3} (mean {:.3}), {:.5} bpp",
        m.psnr_db, m.ms_ssim, m.vmafneg_y, m.vmafneg_u, m.vmafneg_v, m.vmafneg_mean, m.bpp
    );
}

pub fn calibrate(cfg: RunConfig) -> Result<()> {
    let (model, sha) = load_model(&cfg)?;
    let val = corpus(&cfg, Split::Validation)?;
    let out = prepare_output(&cfg, "calibrate")?;
    let file = calibrate_file(&model, sha, &val, &VmafModel::neg())?;
    write_json(&out.join(SCALING_FILE), &file)?;
    write_resolved(&cfg, &out)?;
    println!(
        "beta' = {:.6}, gamma' = {:.6} over {} images -> {}",
        file.beta_prime,
        file.gamma_prime,
        file.images,
        out.join(SCALING_FILE).display()
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: RunConfig) -> Result<()> {
    let (model, sha) = load_model(&cfg)?;
    let test = corpus(&cfg, Split::Test)?;
    let out = prepare_output(&cfg, "evaluate")?;
    let mut report = evaluate(&cfg, &model, &test, &VmafModel::neg())?;
    report.provenance.insert("checkpoint_sha256".into(), sha);
    let means = save_report(&out, &report)?;
    write_resolved(&cfg, &out)?;
    print_means("test", &means);
    Ok(())
}

struct Trained {
    model: CodecModel,
    history: TrainHistory,
    report: MetricReport,
}

pub fn finetune_cmd(mut cfg: RunConfig) -> Result<()> {
    let (start, sha) = load_model(&cfg)?;
    let w = weights(&cfg, &start)?;
    // Validate the training section before any expensive work.
    train_config(
        &cfg,
        w,
        ScalingFactors {
            beta_prime: 1.0,
            gamma_prime: 1.0,
        },
    )?;
    if cfg.rate_match.enabled && cfg.train.freeze != FreezeSpec::EncoderOnly {
        return Err(config_err(format!(
            "rate matching needs an encoder-only fine-tune, got freeze '{}'",
            cfg.train.freeze
        )));
    }
    if cfg.rate_match.enabled && !(cfg.rate_match.tol > 0.0) {
        return Err(config_err(RateMatchError::UnreachableTolerance(cfg.rate_match.tol).to_string()));
    }
    let train = corpus(&cfg, Split::Train)?;
    let val = corpus(&cfg, Split::Validation)?;
    let test = corpus(&cfg, Split::Test)?;
    let out = prepare_output(&cfg, "finetune")?;
    let vmaf = VmafModel::neg();

    let scaling = resolve_scaling(&cfg, &w, &start, &sha, &vmaf, &out)?;
    cfg.loss.lambda = Some(w.lambda);
    cfg.loss.scaling = ScalingSetting::Fixed(scaling);
    let tc = train_config(&cfg, w, scaling)?;

    let trained = if cfg.rate_match.enabled {
        let target = match cfg.rate_match.target_bpp {
            Some(t) => t,
            None => {
                let base = evaluate(&cfg, &start, &test, &vmaf)?;
                print_means("starting checkpoint", &base.means());
                base.means().bpp
            }
        };
        let lambda0 = cfg.rate_match.lambda0.unwrap_or(w.lambda);
        cfg.rate_match.target_bpp = Some(target);
        cfg.rate_match.lambda0 = Some(lambda0);
        write_resolved(&cfg, &out)?;

        let mut runs: BTreeMap<u64, Trained> = BTreeMap::new();
        let runner = |lambda: f64| -> Result<f64> {
            let mut probe_cfg = tc.clone();
            probe_cfg.weights = w.with_lambda(lambda);
            let (model, history) = finetune(start.clone(), &train, &val, &probe_cfg, &vmaf, None)?;
            let report = evaluate(&cfg, &model, &test, &vmaf)?;
            let bpp = report.means().bpp;
            runs.insert(lambda.to_bits(), Trained { model, history, report });
            Ok(bpp)
        };
        match match_bitrate(runner, target, lambda0, &cfg.rate_match.search_config()) {
            Ok(result) => {
                write_json(&out.join(RATE_MATCH_FILE), &result)?;
                println!(
                    "rate match: lambda* = {:.6e}, {:.5} bpp vs target {:.5} ({:+.3}%) after {} probes",
                    result.lambda_star,
                    result.achieved_bpp,
                    result.target_bpp,
                    100.0 * result.deviation,
                    result.trace.len()
                );
                let mut t = runs.remove(&result.lambda_star.to_bits()).expect("every probe is recorded");
                t.report.provenance.insert("lambda".into(), result.lambda_star.to_string());
                t
            }
            Err(e) => {
                let trace = match &e {
                    RateMatchError::NoBracket { trace }
                    | RateMatchError::NonMonotone { trace, .. }
                    | RateMatchError::NotConverged { trace, .. } => trace.clone(),
                    _ => Vec::new(),
                };
                write_json(
                    &out.join("rate_match_failed.json"),
                    &serde_json::json!({ "error": e.to_string(), "trace": trace }),
                )?;
                return Err(e.into());
            }
        }
    } else {
        write_resolved(&cfg, &out)?;
        let (model, history) = finetune(start, &train, &val, &tc, &vmaf, Some(&out))?;
        let report = evaluate(&cfg, &model, &test, &vmaf)?;
        Trained { model, history, report }
    };

    let mut report = trained.report;
    report.provenance.insert("start_checkpoint_sha256".into(), sha);
    report
        .provenance
        .insert("weights".into(), format!("{},{},{}", w.alpha, w.beta, w.gamma));
    report
        .provenance
        .insert("scaling".into(), format!("{},{}", scaling.beta_prime, scaling.gamma_prime));
    report.provenance.insert("freeze".into(), tc.freeze.to_string());
    trained.history.write_jsonl(std::fs::File::create(out.join(HISTORY_FILE))?)?;
    let final_path = out.join(FINAL_CHECKPOINT_FILE);
    let epochs = trained.history.last().map_or(0, |r| r.epoch);
    Checkpoint::from_model(&trained.model, epochs, report.provenance.clone(), None).save(&final_path)?;
    report.provenance.insert("checkpoint_sha256".into(), sha256_file(&final_path)?);
    let means = save_report(&out, &report)?;
    print_means("test", &means);
    println!("outputs in {}", out.display());
    Ok(())
}

fn read_grid(path: &Path, lower_better: &[String]) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut grid = if MetricReport::is_report_csv(&text) {
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        MetricReport::read_csv(text.as_bytes())
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?
            .to_grid_row(label)
    } else {
        Grid::read_csv(text.as_bytes()).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    };
    for (c, label) in grid.col_labels.iter().enumerate() {
        if lower_better.contains(label) {
            grid.higher_better[c] = false;
        }
    }
    Ok(grid)
}

pub fn rank(cfg: RunConfig) -> Result<()> {
    let r = &cfg.rank;
    if r.inputs.is_empty() {
        return Err(config_err("rank needs at least one input CSV"));
    }
    let mut grid = read_grid(&r.inputs[0], &r.lower_better)?;
    for p in &r.inputs[1..] {
        grid.extend(read_grid(p, &r.lower_better)?)
            .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
    }
    grid.validate().map_err(|e| config_err(e.to_string()))?;
    let out = prepare_output(&cfg, "rank")?;
    write_resolved(&cfg, &out)?;

    let table = rank_accumulate(&grid, r.tie_policy)?;
    table.write_csv(std::fs::File::create(out.join(RANK_FILE))?)?;
    for (label, acc) in table.row_labels().iter().zip(&table.accumulated) {
        println!("{label}\t{acc}");
    }
    if let Some(expected) = &r.expect {
        let sweep = reproduce_accumulated(&grid, expected, r.tie_policy)?;
        write_json(&out.join(TIE_SWEEP_FILE), &sweep)?;
        for (policy, acc) in &sweep.attempts {
            println!("tie policy {policy}: {acc:?}");
        }
        match sweep.matched {
            Some(p) => println!("expected accumulated ranks reproduced under tie policy '{p}'"),
            None => anyhow::bail!("no tie policy reproduces the expected accumulated ranks {expected:?}"),
        }
    }
    Ok(())
}

/// Divergence counts written beside the probe CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub rows: usize,
    pub divergent_neg: usize,
    pub divergent_plain: usize,
}

pub fn probe(cfg: RunConfig) -> Result<()> {
    for s in &cfg.probe.sweeps {
        if s.strengths.is_empty() {
            return Err(config_err(format!("{} sweep has no strengths", s.attack.name())));
        }
        for &v in &s.strengths {
            s.attack.with_strength(v).validate().map_err(|e| config_err(e.to_string()))?;
        }
    }
    let test = corpus(&cfg, Split::Test)?;
    let out = prepare_output(&cfg, "probe")?;
    write_resolved(&cfg, &out)?;
    let report = attack_probe(&test, &cfg.probe.sweeps, &VmafModel::neg())?;
    report.write_csv(std::fs::File::create(out.join(PROBE_FILE))?)?;
    plot::attack_sweep(&out, "probe", &report)?;
    let summary = ProbeSummary {
        rows: report.rows.len(),
        divergent_neg: report.divergent_neg(),
        divergent_plain: report.divergent_plain(),
    };
    write_json(&out.join(PROBE_SUMMARY_FILE), &summary)?;
    println!(
        "{} rows; divergence flagged {} times under VMAF NEG, {} times under plain VMAF",
        summary.rows, summary.divergent_neg, summary.divergent_plain
    );
    Ok(())
}
