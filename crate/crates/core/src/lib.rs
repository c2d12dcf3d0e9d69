//! Fine-tuning toolkit for learned image codecs against a mixed
//! rate-distortion objective built from MSE, MS-SSIM and a differentiable
//! VMAF NEG, plus an evaluation harness for metric-attack analysis.
//!
//! Module map:
//!
//! - [`imageio`]: corpus manifests, PNG decoding, cropping, RGB/YUV conversion.
//! - [`metrics`]: MSE, PSNR, MS-SSIM and VMAF (VIF, ADM, motion, SVR fusion),
//!   each with an analytic gradient with respect to the distorted image.
//! - [`loss`]: the rate term, the mixed objective and scaling-factor calibration.
//! - [`codec`]: a toy scale-hyperprior codec with hand-written backpropagation,
//!   freeze masks and checkpoints.
//! - [`finetune`]: the training loop.
//! - [`ratematch`]: lambda search for bitrate matching.
//! - [`report`]: corpus evaluation, rank accumulation, block sensitivity and
//!   the attack probe.

pub mod codec;
pub mod finetune;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod ratematch;
pub mod report;
pub mod synth;

pub use codec::{Checkpoint, CodecConfig, CodecModel, FreezeSpec, TrainMask};
pub use finetune::{TrainConfig, TrainHistory};
pub use imageio::{CorpusManifest, ImageBatch, Split, YuvImage};
pub use loss::{LossBreakdown, LossWeights, RateEstimate, ScalingFactors};
pub use metrics::{MetricId, MetricValue, VmafModel, VmafScores};
pub use ratematch::RateMatchResult;
pub use report::{BlockSensitivityRow, MetricReport, RankTable, TiePolicy};
