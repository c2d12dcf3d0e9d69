//! Fine-tuning loop: masked Adam on the mixed objective over random crops,
//! validation after every epoch, checkpoints and a JSON-lines history.
//!
//! Batches are processed one image at a time with each image's loss scaled
//! by `1 / batch_len` and gradients accumulated. Every batch-level quantity
//! of the objective is a mean over images, so this equals the gradient of
//! the batched loss.
//!
//! Randomness for epoch `e` comes from a ChaCha8 stream keyed by
//! `(seed, e)`, so a run resumed from an epoch checkpoint continues exactly
//! as the uninterrupted run would have.

use crate::codec::layers::Param;
use crate::codec::{to_f32, CodecConfig, CodecError, CodecModel, FreezeSpec, Likelihoods};
use crate::codec::{Checkpoint, CheckpointError, Provenance};
use crate::imageio::{random_crop, CorpusManifest, ImageBatch, ImageError};
use crate::loss::{mixed_loss_with_grad, rate_bpp, rate_gradient, LossBreakdown, LossError, LossWeights, ScalingFactors};
use crate::metrics::{VmafModel, MIN_METRIC_SIDE};
use crate::optim::{clip_global_norm, Adam};
use crate::report::{evaluate_corpus, Coder, EvalOptions, MetricMeans, MetricReport, ReportError};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_CROP: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; dominant component: {component}{}", .last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    NonFinite {
        epoch: usize,
        step: u64,
        component: &'static str,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn d_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn d_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn d_crop() -> usize {
    DEFAULT_CROP
}
fn d_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn d_clip() -> f64 {
    DEFAULT_CLIP_NORM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs of the run, counting epochs done before a resume.
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_crop")]
    pub crop: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub weights: LossWeights,
    pub scaling: ScalingFactors,
    #[serde(default)]
    pub freeze: FreezeSpec,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    /// Centre-crop validation images to this side; `None` scores them whole.
    #[serde(default)]
    pub validation_crop: Option<usize>,
}

impl TrainConfig {
    pub fn new(weights: LossWeights, scaling: ScalingFactors, freeze: FreezeSpec) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            crop: DEFAULT_CROP,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            weights,
            scaling,
            freeze,
            clip_norm: DEFAULT_CLIP_NORM,
            validation_crop: None,
        }
    }

    /// Checks ranges; logs a warning when the learning rate is overridden.
    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        self.scaling.validate()?;
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(TrainError::Config("batch_size and crop must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        let needs_metrics = self.weights.beta > 0.0 || self.weights.gamma > 0.0;
        if needs_metrics && self.crop < MIN_METRIC_SIDE {
            return Err(TrainError::Config(format!(
                "crop {} is below the {MIN_METRIC_SIDE}-pixel minimum of MS-SSIM and VMAF",
                self.crop
            )));
        }
        if self.learning_rate != DEFAULT_LEARNING_RATE {
            log::warn!(
                "learning rate overridden to {} (default {DEFAULT_LEARNING_RATE})",
                self.learning_rate
            );
        }
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        let w = &self.weights;
        let mut p = Provenance::new();
        p.insert("weights".into(), format!("{},{},{}", w.alpha, w.beta, w.gamma));
        p.insert("lambda".into(), w.lambda.to_string());
        p.insert(
            "scaling".into(),
            format!("{},{}", self.scaling.beta_prime, self.scaling.gamma_prime),
        );
        p.insert("freeze".into(), self.freeze.to_string());
        p.insert("seed".into(), self.seed.to_string());
        p.insert("epochs".into(), self.epochs.to_string());
        p.insert("learning_rate".into(), self.learning_rate.to_string());
        p
    }
}

/// One optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Batch mean of the per-image breakdowns.
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One line of the history log. Epoch 0 holds the validation scores of the
/// starting model and has no training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    pub train: Option<LossBreakdown>,
    pub steps: Vec<StepRecord>,
    pub validation: MetricMeans,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Records of completed training epochs.
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.train.is_some())
    }

    pub fn initial(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == 0)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_jsonl(&self, writer: impl Write) -> Result<(), TrainError> {
        let mut w = std::io::BufWriter::new(writer);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, TrainError> {
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Model, optimizer and bookkeeping between epochs.
pub struct TrainState {
    pub model: CodecModel,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn param_sizes(model: &CodecModel) -> Vec<usize> {
    model.params().iter().map(|(_, p)| p.len()).collect()
}

/// Path of the checkpoint written after `epoch`.
pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Trains `model` from scratch state. See [`resume`] to continue a run.
pub fn finetune(
    model: CodecModel,
    train: &CorpusManifest,
    val: &CorpusManifest,
    cfg: &TrainConfig,
    vmaf: &VmafModel,
    out_dir: Option<&Path>,
) -> Result<(CodecModel, TrainHistory), TrainError> {
    let optimizer = Adam::new(cfg.learning_rate as f32, &param_sizes(&model));
    let state = TrainState {
        model,
        optimizer,
        epoch: 0,
        history: TrainHistory::default(),
    };
    let state = run(state, train, val, cfg, vmaf, out_dir)?;
    Ok((state.model, state.history))
}

/// Continues from an epoch checkpoint until `cfg.epochs` epochs are done,
/// appending to `history`. The checkpoint's architecture must match `expected`.
#[allow(clippy::too_many_arguments)]
pub fn resume(
    checkpoint: &Checkpoint,
    expected: &CodecConfig,
    history: TrainHistory,
    train: &CorpusManifest,
    val: &CorpusManifest,
    cfg: &TrainConfig,
    vmaf: &VmafModel,
    out_dir: Option<&Path>,
) -> Result<(CodecModel, TrainHistory), TrainError> {
    let model = checkpoint.to_model(Some(expected))?;
    let mut optimizer = match &checkpoint.optimizer {
        Some(opt) if opt.sizes() == param_sizes(&model) => opt.clone(),
        Some(_) => return Err(TrainError::Config("optimizer state does not match the model".into())),
        None => Adam::new(cfg.learning_rate as f32, &param_sizes(&model)),
    };
    optimizer.lr = cfg.learning_rate as f32;
    let state = TrainState {
        model,
        optimizer,
        epoch: checkpoint.epoch,
        history,
    };
    let state = run(state, train, val, cfg, vmaf, out_dir)?;
    Ok((state.model, state.history))
}

fn validate_model(model: &CodecModel, val: &CorpusManifest, cfg: &TrainConfig, vmaf: &VmafModel) -> Result<MetricReport, TrainError> {
    Ok(evaluate_corpus(
        Coder::Model(model),
        val,
        vmaf,
        EvalOptions {
            center_crop: cfg.validation_crop,
        },
    )?)
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`.
pub fn run(
    mut state: TrainState,
    train: &CorpusManifest,
    val: &CorpusManifest,
    cfg: &TrainConfig,
    vmaf: &VmafModel,
    out_dir: Option<&Path>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let mask = state.model.apply_freeze(cfg.freeze)?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let write_history = |h: &TrainHistory| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            h.write_jsonl(std::fs::File::create(dir.join(HISTORY_FILE))?)?;
        }
        Ok(())
    };
    if state.history.initial().is_none() && state.epoch == 0 {
        let t0 = Instant::now();
        let report = validate_model(&state.model, val, cfg, vmaf)?;
        state.history.records.push(EpochRecord {
            epoch: 0,
            seed: cfg.seed,
            train: None,
            steps: Vec::new(),
            validation: report.means(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        write_history(&state.history)?;
    }

    let provenance = cfg.provenance();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let step = state.optimizer.step + 1;
            let abort = |state: &TrainState, component: &'static str| -> Result<TrainError, TrainError> {
                let last_good = match out_dir {
                    Some(dir) => {
                        let p = dir.join(LAST_GOOD_FILE);
                        Checkpoint::from_model(&state.model, state.epoch, provenance.clone(), Some(&state.optimizer)).save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                Ok(TrainError::NonFinite {
                    epoch,
                    step,
                    component,
                    last_good,
                })
            };
            state.model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = train.load(i)?;
                let crop = random_crop(&img, cfg.crop, rng.random())?;
                let (recon, trace) = state.model.forward_train(&to_f32(crop.image(0)), rng.random())?;
                let (_, h, w) = recon.dim();
                let rate = rate_bpp(trace.likelihoods.arrays(), h * w)?;
                let rec = ImageBatch::new(recon.mapv(f64::from).insert_axis(Axis(0)))?;
                let (b, g) = mixed_loss_with_grad(&crop, &rec, &rate, &cfg.weights, &cfg.scaling, vmaf)?;
                if !b.total.is_finite() {
                    return Err(abort(&state, b.dominant_term())?);
                }
                let g_recon = g.index_axis(Axis(0), 0).mapv(|v| (v * scale) as f32);
                let g_lik = Likelihoods {
                    y: trace.likelihoods.y.mapv(|p| rate_gradient(p, h * w) * scale),
                    z: trace.likelihoods.z.mapv(|p| rate_gradient(p, h * w) * scale),
                };
                state.model.backward(trace, &g_recon, &g_lik, cfg.freeze);
                parts.push(b);
            }
            let loss = LossBreakdown::mean(&parts).expect("batch is non-empty");
            let mut params = state.model.params_mut();
            let (mut values, mut grads): (Vec<&mut [f32]>, Vec<&mut [f32]>) = params
                .iter_mut()
                .map(|(_, p)| {
                    let Param { value, grad, .. } = &mut **p;
                    (value.as_mut_slice(), grad.as_mut_slice())
                })
                .unzip();
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                drop(values);
                drop(grads);
                drop(params);
                return Err(abort(&state, loss.dominant_term())?);
            }
            let grads: Vec<&[f32]> = grads.into_iter().map(|g| &*g).collect();
            state.optimizer.update(&mut values, &grads, &mask.flags);
            log::debug!(
                "epoch {epoch} step {step}: loss {:.6} bpp {:.4} |g| {grad_norm:.4}",
                loss.total,
                loss.rate
            );
            steps.push(StepRecord { step, loss, grad_norm });
        }

        let report = validate_model(&state.model, val, cfg, vmaf)?;
        let means = report.means();
        let train_mean = LossBreakdown::mean(&steps.iter().map(|s| s.loss).collect::<Vec<_>>());
        log::info!(
            "epoch {epoch}/{}: train loss {:.5}, val PSNR {:.3} dB, VMAF NEG {:.3}",
            cfg.epochs,
            train_mean.map_or(f64::NAN, |l| l.total),
            means.psnr_db,
            means.vmafneg_mean
        );
        state.epoch = epoch;
        state.history.records.push(EpochRecord {
            epoch,
            seed: cfg.seed,
            train: train_mean,
            steps,
            validation: means,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            let ck = Checkpoint::from_model(&state.model, epoch, provenance.clone(), Some(&state.optimizer));
            ck.save(epoch_checkpoint(dir, epoch))?;
        }
        write_history(&state.history)?;
    }
    Ok(state)
}
