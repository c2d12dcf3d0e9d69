//! A toy scale-hyperprior image codec with hand-written backpropagation.
//!
//! Analysis: `encoder_blocks` strided 5x5 convolutions with GDN between them.
//! Hyper analysis on `|y|`: 3x3 conv, two strided 5x5 convs (ReLU between).
//! Hyper synthesis mirrors it and yields Gaussian scales for `y`. Synthesis:
//! `decoder_blocks` strided transposed convolutions with inverse GDN, then a
//! sigmoid. Decoder block 0 consumes the latent; the last block emits RGB.
//!
//! Training quantizes with additive uniform noise, evaluation rounds.

mod checkpoint;
pub mod entropy;
pub mod layers;

pub use checkpoint::{Checkpoint, CheckpointError, Provenance, CHECKPOINT_VERSION};

use crate::imageio::ImageBatch;
use entropy::FactorizedPrior;
use layers::{relu_backward, relu_forward, Cache, Conv, Deconv, Gdn, Param};
use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("decoder block index {index} out of range 0..{blocks}")]
    BlockIndex { index: usize, blocks: usize },
    #[error("image side {height}x{width} is not a multiple of {multiple} and padding is disabled")]
    NotDivisible { height: usize, width: usize, multiple: usize },
    #[error("unknown freeze mode {0:?}; expected none, encoder, decoder or block:<k>")]
    UnknownFreeze(String),
    #[error(transparent)]
    Image(#[from] crate::imageio::ImageError),
}

fn default_channels() -> usize {
    32
}
fn default_latent() -> usize {
    48
}
fn default_hyper() -> usize {
    32
}
fn default_blocks() -> usize {
    4
}
fn default_lambda() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// Architecture and initialization of a [`CodecModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_latent")]
    pub latent_channels: usize,
    #[serde(default = "default_hyper")]
    pub hyper_channels: usize,
    #[serde(default = "default_blocks")]
    pub encoder_blocks: usize,
    #[serde(default = "default_blocks")]
    pub decoder_blocks: usize,
    /// Rate-distortion trade-off the weights were trained with.
    #[serde(default = "default_lambda")]
    pub quality_lambda: f64,
    #[serde(default)]
    pub seed: u64,
    /// Reflect-pad inputs to the downsampling multiple instead of rejecting them.
    #[serde(default = "default_true")]
    pub pad_input: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            latent_channels: default_latent(),
            hyper_channels: default_hyper(),
            encoder_blocks: default_blocks(),
            decoder_blocks: default_blocks(),
            quality_lambda: default_lambda(),
            seed: 0,
            pad_input: true,
        }
    }
}

pub const KERNEL: usize = 5;
pub const HYPER_ENTRY_KERNEL: usize = 3;

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: &str| Err(CodecError::InvalidConfig(m.to_owned()));
        if self.channels == 0 || self.latent_channels == 0 || self.hyper_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(4..=6).contains(&self.decoder_blocks) {
            return bad("decoder_blocks must be in 4..=6");
        }
        if self.encoder_blocks != self.decoder_blocks {
            return bad("encoder_blocks must equal decoder_blocks");
        }
        if !(self.quality_lambda > 0.0 && self.quality_lambda.is_finite()) {
            return bad("quality_lambda must be positive");
        }
        Ok(())
    }

    /// Spatial downsampling from image to main latent.
    pub fn latent_factor(&self) -> usize {
        1 << self.encoder_blocks
    }

    /// Side multiple an input needs so the hyper latent has integer size.
    pub fn pad_multiple(&self) -> usize {
        self.latent_factor() * 4
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Architecture-only hash: two configs differing only in seed or
    /// trained lambda instantiate interchangeable parameter sets.
    pub fn architecture_hash(&self) -> String {
        let arch = CodecConfig {
            seed: 0,
            quality_lambda: default_lambda(),
            ..self.clone()
        };
        arch.hash()
    }
}

/// Which architectural part a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Encoder(usize),
    HyperEncoder(usize),
    HyperDecoder(usize),
    Entropy,
    Decoder(usize),
}

/// Declarative choice of trainable parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FreezeSpec {
    /// Everything trains.
    #[default]
    None,
    /// Encoder and hyper-encoder train.
    EncoderOnly,
    /// Every decoder block trains.
    DecoderOnly,
    SingleDecoderBlock {
        index: usize,
    },
}

impl FreezeSpec {
    pub fn trains(&self, part: Part) -> bool {
        match (self, part) {
            (FreezeSpec::None, _) => true,
            (FreezeSpec::EncoderOnly, Part::Encoder(_) | Part::HyperEncoder(_)) => true,
            (FreezeSpec::DecoderOnly, Part::Decoder(_)) => true,
            (FreezeSpec::SingleDecoderBlock { index }, Part::Decoder(k)) => *index == k,
            _ => false,
        }
    }

    pub fn trains_encoder(&self) -> bool {
        matches!(self, FreezeSpec::None | FreezeSpec::EncoderOnly)
    }
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeSpec::None => f.write_str("none"),
            FreezeSpec::EncoderOnly => f.write_str("encoder"),
            FreezeSpec::DecoderOnly => f.write_str("decoder"),
            FreezeSpec::SingleDecoderBlock { index } => write!(f, "block:{index}"),
        }
    }
}

impl FromStr for FreezeSpec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FreezeSpec::None),
            "encoder" | "encoder_only" => Ok(FreezeSpec::EncoderOnly),
            "decoder" | "decoder_only" => Ok(FreezeSpec::DecoderOnly),
            other => other
                .strip_prefix("block:")
                .or_else(|| other.strip_prefix("single_decoder_block:"))
                .and_then(|k| k.parse().ok())
                .map(|index| FreezeSpec::SingleDecoderBlock { index })
                .ok_or_else(|| CodecError::UnknownFreeze(s.to_owned())),
        }
    }
}

/// Per-parameter trainability, in [`CodecModel::params`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub spec: FreezeSpec,
    pub flags: Vec<bool>,
    pub names: Vec<String>,
}

impl TrainMask {
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().zip(&self.flags).filter(|(_, &f)| f).map(|(n, _)| n.as_str())
    }

    pub fn trainable_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Parameter subsets for counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Encoder,
    HyperEncoder,
    HyperDecoder,
    Entropy,
    Decoder,
    DecoderBlock(usize),
    Trainable(FreezeSpec),
}

impl Scope {
    fn contains(&self, part: Part) -> bool {
        match (self, part) {
            (Scope::All, _) => true,
            (Scope::Encoder, Part::Encoder(_)) => true,
            (Scope::HyperEncoder, Part::HyperEncoder(_)) => true,
            (Scope::HyperDecoder, Part::HyperDecoder(_)) => true,
            (Scope::Entropy, Part::Entropy) => true,
            (Scope::Decoder, Part::Decoder(_)) => true,
            (Scope::DecoderBlock(k), Part::Decoder(j)) => *k == j,
            (Scope::Trainable(spec), p) => spec.trains(p),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv(Conv),
    Deconv(Deconv),
    Gdn(Gdn),
    Relu,
}

impl Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Deconv(d) => vec![&d.weight, &d.bias],
            Layer::Gdn(g) => vec![&g.beta, &g.gamma],
            Layer::Relu => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Deconv(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Gdn(g) => vec![&mut g.beta, &mut g.gamma],
            Layer::Relu => vec![],
        }
    }

    fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Cache) {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Deconv(d) => d.forward(x),
            Layer::Gdn(g) => g.forward(x),
            Layer::Relu => relu_forward(x),
        }
    }

    fn backward(&mut self, cache: Cache, g: &Array3<f32>, in_hw: (usize, usize), params: bool, input_grad: bool) -> Option<Array3<f32>> {
        match self {
            Layer::Conv(c) => c.backward(cache, g, in_hw, params, input_grad),
            Layer::Deconv(d) => d.backward(cache, g, params, input_grad),
            Layer::Gdn(gdn) => gdn.backward(cache, g, params, input_grad),
            Layer::Relu => input_grad.then(|| relu_backward(cache, g)),
        }
    }
}

/// An ordered group of layers addressed as one unit by freeze specs and reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    layers: Vec<Layer>,
}

struct LayerTrace {
    cache: Cache,
    in_hw: (usize, usize),
}

impl Block {
    fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Vec<LayerTrace>) {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let in_hw = (cur.dim().1, cur.dim().2);
            let (next, cache) = layer.forward(&cur);
            traces.push(LayerTrace { cache, in_hw });
            cur = next;
        }
        (cur, traces)
    }

    fn backward(&mut self, traces: Vec<LayerTrace>, g: Array3<f32>, params: bool, input_grad: bool) -> Option<Array3<f32>> {
        let mut g = Some(g);
        for (i, (layer, t)) in self.layers.iter_mut().zip(traces).enumerate().rev() {
            let need_in = i > 0 || input_grad;
            g = layer.backward(t.cache, g.as_ref().expect("gradient flows"), t.in_hw, params, need_in);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Likelihood tensors of one coded image.
#[derive(Clone, Debug, PartialEq)]
pub struct Likelihoods {
    pub y: Array3<f64>,
    pub z: Array3<f64>,
}

impl Likelihoods {
    pub fn arrays(&self) -> [&Array3<f64>; 2] {
        [&self.y, &self.z]
    }
}

/// Everything the backward pass needs from one training forward pass.
pub struct Trace {
    image_hw: (usize, usize),
    enc: Vec<Vec<LayerTrace>>,
    y: Array3<f32>,
    y_tilde: Array3<f32>,
    ha: Vec<Vec<LayerTrace>>,
    z_tilde: Array3<f32>,
    hs: Vec<Vec<LayerTrace>>,
    s_raw: Array3<f32>,
    scales: Array3<f64>,
    dec: Vec<Vec<LayerTrace>>,
    /// Sigmoid output over the padded extent.
    out: Array3<f32>,
    pub likelihoods: Likelihoods,
}

#[derive(Clone, Copy, Debug)]
enum Quantizer {
    Round,
    Noise(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub encoder: Vec<Block>,
    pub hyper_encoder: Vec<Block>,
    pub hyper_decoder: Vec<Block>,
    pub prior: FactorizedPrior,
    pub decoder: Vec<Block>,
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn reflect_pad(x: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, ih, iw) = x.dim();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        x[[ci, reflect_index(i as isize, ih), reflect_index(j as isize, iw)]]
    })
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

impl CodecModel {
    pub fn new(config: CodecConfig) -> Result<Self, CodecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, m, nh, blocks) = (
            config.channels,
            config.latent_channels,
            config.hyper_channels,
            config.decoder_blocks,
        );
        let encoder = (0..blocks)
            .map(|k| {
                let name = format!("encoder.{k}");
                let cin = if k == 0 { 3 } else { n };
                let cout = if k + 1 == blocks { m } else { n };
                let mut layers = vec![Layer::Conv(Conv::new(&format!("{name}.conv"), cin, cout, KERNEL, 2, &mut rng))];
                if k + 1 < blocks {
                    layers.push(Layer::Gdn(Gdn::new(&format!("{name}.gdn"), cout, false)));
                }
                Block { name, layers }
            })
            .collect();
        let hyper_encoder = (0..3)
            .map(|k| {
                let name = format!("hyper_encoder.{k}");
                let (cin, kernel, stride) = if k == 0 { (m, HYPER_ENTRY_KERNEL, 1) } else { (nh, KERNEL, 2) };
                let mut layers = vec![Layer::Conv(Conv::new(&format!("{name}.conv"), cin, nh, kernel, stride, &mut rng))];
                if k < 2 {
                    layers.push(Layer::Relu);
                }
                Block { name, layers }
            })
            .collect();
        let hyper_decoder = (0..3)
            .map(|k| {
                let name = format!("hyper_decoder.{k}");
                let layers = if k < 2 {
                    vec![
                        Layer::Deconv(Deconv::new(&format!("{name}.deconv"), nh, nh, KERNEL, 2, &mut rng)),
                        Layer::Relu,
                    ]
                } else {
                    vec![Layer::Conv(Conv::new(
                        &format!("{name}.conv"),
                        nh,
                        m,
                        HYPER_ENTRY_KERNEL,
                        1,
                        &mut rng,
                    ))]
                };
                Block { name, layers }
            })
            .collect();
        let decoder = (0..blocks)
            .map(|k| {
                let name = format!("decoder.{k}");
                let cin = if k == 0 { m } else { n };
                let cout = if k + 1 == blocks { 3 } else { n };
                let mut layers = vec![Layer::Deconv(Deconv::new(
                    &format!("{name}.deconv"),
                    cin,
                    cout,
                    KERNEL,
                    2,
                    &mut rng,
                ))];
                if k + 1 < blocks {
                    layers.push(Layer::Gdn(Gdn::new(&format!("{name}.igdn"), cout, true)));
                }
                Block { name, layers }
            })
            .collect();
        Ok(Self {
            prior: FactorizedPrior::new("entropy.prior", nh),
            config,
            encoder,
            hyper_encoder,
            hyper_decoder,
            decoder,
        })
    }

    /// Analytic parameter count of a configuration, derived from layer shapes.
    pub fn analytic_param_count(config: &CodecConfig, scope: Scope) -> usize {
        let (n, m, nh, b) = (
            config.channels,
            config.latent_channels,
            config.hyper_channels,
            config.decoder_blocks,
        );
        let k = KERNEL;
        let mut total = 0;
        for i in 0..b {
            let cin = if i == 0 { 3 } else { n };
            let cout = if i + 1 == b { m } else { n };
            let gdn = if i + 1 < b { Gdn::param_count(cout) } else { 0 };
            if scope.contains(Part::Encoder(i)) {
                total += Conv::param_count(cin, cout, k) + gdn;
            }
            let cin = if i == 0 { m } else { n };
            let cout = if i + 1 == b { 3 } else { n };
            let gdn = if i + 1 < b { Gdn::param_count(cout) } else { 0 };
            if scope.contains(Part::Decoder(i)) {
                total += Deconv::param_count(cin, cout, k) + gdn;
            }
        }
        let he = [
            Conv::param_count(m, nh, HYPER_ENTRY_KERNEL),
            Conv::param_count(nh, nh, k),
            Conv::param_count(nh, nh, k),
        ];
        let hd = [
            Deconv::param_count(nh, nh, k),
            Deconv::param_count(nh, nh, k),
            Conv::param_count(nh, m, HYPER_ENTRY_KERNEL),
        ];
        for i in 0..3 {
            if scope.contains(Part::HyperEncoder(i)) {
                total += he[i];
            }
            if scope.contains(Part::HyperDecoder(i)) {
                total += hd[i];
            }
        }
        if scope.contains(Part::Entropy) {
            total += FactorizedPrior::param_count(nh);
        }
        total
    }

    /// All parameters with their part, in a fixed order.
    pub fn params(&self) -> Vec<(Part, &Param)> {
        let mut out = Vec::new();
        for (k, b) in self.encoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|p| (Part::Encoder(k), p)));
        }
        for (k, b) in self.hyper_encoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|p| (Part::HyperEncoder(k), p)));
        }
        for (k, b) in self.hyper_decoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|p| (Part::HyperDecoder(k), p)));
        }
        out.push((Part::Entropy, &self.prior.loc));
        out.push((Part::Entropy, &self.prior.log_scale));
        for (k, b) in self.decoder.iter().enumerate() {
            out.extend(b.params().into_iter().map(|p| (Part::Decoder(k), p)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(Part, &mut Param)> {
        let mut out = Vec::new();
        for (k, b) in self.encoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|p| (Part::Encoder(k), p)));
        }
        for (k, b) in self.hyper_encoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|p| (Part::HyperEncoder(k), p)));
        }
        for (k, b) in self.hyper_decoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|p| (Part::HyperDecoder(k), p)));
        }
        out.push((Part::Entropy, &mut self.prior.loc));
        out.push((Part::Entropy, &mut self.prior.log_scale));
        for (k, b) in self.decoder.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|p| (Part::Decoder(k), p)));
        }
        out
    }

    pub fn count_params(&self, scope: Scope) -> usize {
        self.params()
            .into_iter()
            .filter(|(part, _)| scope.contains(*part))
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn decoder_block_count(&self) -> usize {
        self.decoder.len()
    }

    pub fn apply_freeze(&self, spec: FreezeSpec) -> Result<TrainMask, CodecError> {
        if let FreezeSpec::SingleDecoderBlock { index } = spec {
            if index >= self.decoder.len() {
                return Err(CodecError::BlockIndex {
                    index,
                    blocks: self.decoder.len(),
                });
            }
        }
        let params = self.params();
        Ok(TrainMask {
            spec,
            flags: params.iter().map(|(part, _)| spec.trains(*part)).collect(),
            names: params.iter().map(|(_, p)| p.name.clone()).collect(),
        })
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn padded_dim(&self, h: usize, w: usize) -> Result<(usize, usize), CodecError> {
        let m = self.config.pad_multiple();
        if !self.config.pad_input && (h % m != 0 || w % m != 0) {
            return Err(CodecError::NotDivisible {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok((round_up(h, m), round_up(w, m)))
    }

    fn quantize(x: &Array3<f32>, q: Quantizer) -> Array3<f32> {
        match q {
            Quantizer::Round => x.mapv(f32::round),
            Quantizer::Noise(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = Uniform::new(-0.5f32, 0.5).expect("valid range");
                x.mapv(|v| v + u.sample(&mut rng))
            }
        }
    }

    fn run(&self, x: &Array3<f32>, q: Quantizer) -> Result<(Array3<f32>, Trace), CodecError> {
        let (_, h, w) = x.dim();
        let (ph, pw) = self.padded_dim(h, w)?;
        let mut cur = reflect_pad(x, ph, pw);
        let mut enc = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let (next, t) = b.forward(&cur);
            enc.push(t);
            cur = next;
        }
        let y = cur;
        let (seed_y, seed_z) = match q {
            Quantizer::Round => (Quantizer::Round, Quantizer::Round),
            Quantizer::Noise(s) => (Quantizer::Noise(s), Quantizer::Noise(s ^ 0x9e37_79b9_7f4a_7c15)),
        };
        let mut cur = y.mapv(f32::abs);
        let mut ha = Vec::with_capacity(3);
        for b in &self.hyper_encoder {
            let (next, t) = b.forward(&cur);
            ha.push(t);
            cur = next;
        }
        let z_tilde = Self::quantize(&cur, seed_z);
        let mut cur = z_tilde.clone();
        let mut hs = Vec::with_capacity(3);
        for b in &self.hyper_decoder {
            let (next, t) = b.forward(&cur);
            hs.push(t);
            cur = next;
        }
        let s_raw = cur;
        let scales = entropy::scales_from_raw(&s_raw);
        let y_tilde = Self::quantize(&y, seed_y);
        let likelihoods = Likelihoods {
            y: entropy::gaussian_likelihood(&y_tilde, &scales),
            z: self.prior.likelihood(&z_tilde),
        };
        let mut cur = y_tilde.clone();
        let mut dec = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let (next, t) = b.forward(&cur);
            dec.push(t);
            cur = next;
        }
        let out = cur.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let recon = out.slice(s![.., ..h, ..w]).to_owned();
        Ok((
            recon,
            Trace {
                image_hw: (h, w),
                enc,
                y,
                y_tilde,
                ha,
                z_tilde,
                hs,
                s_raw,
                scales,
                dec,
                out,
                likelihoods,
            },
        ))
    }

    /// Training forward pass of one `(3, H, W)` image with uniform-noise
    /// quantization drawn from `noise_seed`.
    pub fn forward_train(&self, x: &Array3<f32>, noise_seed: u64) -> Result<(Array3<f32>, Trace), CodecError> {
        self.run(x, Quantizer::Noise(noise_seed))
    }

    /// Evaluation pass of one image with rounding.
    pub fn forward_eval(&self, x: &Array3<f32>) -> Result<(Array3<f32>, Likelihoods), CodecError> {
        let (recon, trace) = self.run(x, Quantizer::Round)?;
        Ok((recon, trace.likelihoods))
    }

    /// Accumulates parameter gradients for the parts `spec` trains, given
    /// the loss gradient with respect to the reconstruction and to each
    /// likelihood. Frozen parts receive no gradient and are not traversed
    /// when nothing upstream of them trains.
    pub fn backward(&mut self, trace: Trace, g_recon: &Array3<f32>, g_lik: &Likelihoods, spec: FreezeSpec) {
        let Trace {
            image_hw: (h, w),
            mut enc,
            y,
            y_tilde,
            mut ha,
            z_tilde,
            mut hs,
            s_raw,
            scales,
            mut dec,
            out,
            likelihoods: _,
        } = trace;
        let blocks = self.decoder.len();
        let need_latent = spec.trains_encoder();
        let lowest_dec = (0..blocks).find(|&k| spec.trains(Part::Decoder(k)));

        let mut g_y = Array3::<f32>::zeros(y.raw_dim());
        if need_latent || lowest_dec.is_some() {
            let mut g = Array3::<f32>::zeros(out.raw_dim());
            g.slice_mut(s![.., ..h, ..w]).assign(g_recon);
            g.zip_mut_with(&out, |gv, &o| *gv *= o * (1.0 - o));
            let stop = if need_latent { 0 } else { lowest_dec.unwrap_or(blocks) };
            let mut g = Some(g);
            for k in (stop..blocks).rev() {
                let t = dec.pop().expect("one trace per block");
                let input_grad = need_latent || k > stop;
                g = self.decoder[k].backward(t, g.expect("gradient flows"), spec.trains(Part::Decoder(k)), input_grad);
            }
            if let Some(gy) = g {
                g_y += &gy;
            }
        }

        let need_hyper = need_latent || (0..3).any(|k| spec.trains(Part::HyperDecoder(k))) || spec.trains(Part::Entropy);
        if !need_hyper {
            return;
        }
        let (gy_rate, g_scale) = entropy::gaussian_backward(&y_tilde, &scales, &g_lik.y);
        g_y += &gy_rate;
        let mut g = entropy::scales_backward(&s_raw, &g_scale);
        for k in (0..3).rev() {
            let t = hs.pop().expect("one trace per block");
            let input_grad = need_latent || k > 0;
            match self.hyper_decoder[k].backward(t, g, spec.trains(Part::HyperDecoder(k)), input_grad) {
                Some(next) => g = next,
                None => {
                    g = Array3::zeros(z_tilde.raw_dim());
                    break;
                }
            }
        }
        let g_z_prior = self.prior.backward(&z_tilde, &g_lik.z, spec.trains(Part::Entropy));
        if !need_latent {
            return;
        }
        let mut g = g + &g_z_prior;
        for k in (0..3).rev() {
            let t = ha.pop().expect("one trace per block");
            g = self.hyper_encoder[k]
                .backward(t, g, spec.trains(Part::HyperEncoder(k)), true)
                .expect("input gradient requested");
        }
        // h_a consumed |y|.
        g.zip_mut_with(&y, |gv, &yv| {
            *gv *= if yv > 0.0 {
                1.0
            } else if yv < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        g_y += &g;
        let mut g = g_y;
        for k in (0..self.encoder.len()).rev() {
            let t = enc.pop().expect("one trace per block");
            match self.encoder[k].backward(t, g, spec.trains(Part::Encoder(k)), k > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

/// Output of [`code_image`].
#[derive(Clone, Debug)]
pub struct Coded {
    pub reconstruction: ImageBatch,
    pub likelihoods: Vec<Likelihoods>,
    pub rate: crate::loss::RateEstimate,
}

pub(crate) fn to_f32(img: ndarray::ArrayView3<'_, f64>) -> Array3<f32> {
    img.mapv(|v| v as f32)
}

/// Evaluation coding of every image in `img`, rate summed over the batch.
pub fn code_image(model: &CodecModel, img: &ImageBatch) -> Result<Coded, CodecError> {
    let (b, _, h, w) = img.data().dim();
    let mut recon = Array4::<f64>::zeros((b, 3, h, w));
    let mut liks = Vec::with_capacity(b);
    for i in 0..b {
        let (r, l) = model.forward_eval(&to_f32(img.image(i)))?;
        recon.index_axis_mut(Axis(0), i).assign(&r.mapv(f64::from));
        liks.push(l);
    }
    let arrays: Vec<&Array3<f64>> = liks.iter().flat_map(|l| l.arrays()).collect();
    let rate = crate::loss::rate_bpp(arrays.iter().copied(), b * h * w).expect("bounded likelihoods are valid");
    let reconstruction = ImageBatch::new(recon)?;
    Ok(Coded {
        reconstruction,
        likelihoods: liks,
        rate,
    })
}

/// Draws a seed for the noise of one training sample.
pub fn noise_seed(rng: &mut impl Rng) -> u64 {
    rng.random()
}
