//! Deterministic procedural image corpus for desk-scale training.
//!
//! Each image layers a smooth colour ramp, random flat shapes with hard
//! edges, oriented sinusoidal texture patches and mild grain, so the codec
//! sees the mix of flat regions, edges and fine detail that natural photos
//! have. Image `i` of a corpus depends only on `(seed, i)`.

use crate::imageio::{load_corpus, CorpusManifest, ImageBatch, ImageError, Split};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Band { ny: f64, nx: f64, offset: f64, half: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Band { ny, nx, offset, half } => (y * ny + x * nx - offset).abs() <= half,
        }
    }
}

struct Texture {
    cy: f64,
    cx: f64,
    radius: f64,
    ky: f64,
    kx: f64,
    phase: f64,
    amp: [f64; 3],
}

/// One procedural `(1, 3, height, width)` image in `[0, 1]`.
pub fn synth_image(seed: u64, index: usize, height: usize, width: usize) -> ImageBatch {
    let mut rng = image_rng(seed, index);
    let (hf, wf) = (height as f64, width as f64);
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());

    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(4..10))
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc {
                    cy: rng.random_range(0.0..hf),
                    cx: rng.random_range(0.0..wf),
                    r: rng.random_range(0.05..0.3) * hf.min(wf),
                },
                1 => {
                    let (y0, x0) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                    let (sh, sw) = (rng.random_range(0.1..0.5) * hf, rng.random_range(0.1..0.5) * wf);
                    Shape::Rect {
                        y0,
                        x0,
                        y1: y0 + sh,
                        x1: x0 + sw,
                    }
                }
                _ => {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    Shape::Band {
                        ny: a.sin(),
                        nx: a.cos(),
                        offset: rng.random_range(-0.5..1.5) * hf.max(wf),
                        half: rng.random_range(1.0..(0.08 * hf.max(wf)).max(2.0)),
                    }
                }
            };
            (shape, colour(&mut rng))
        })
        .collect();

    let textures: Vec<Texture> = (0..rng.random_range(1..4))
        .map(|_| {
            let period: f64 = rng.random_range(2.5..14.0);
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let k = std::f64::consts::TAU / period;
            let amp = rng.random_range(0.04..0.18);
            Texture {
                cy: rng.random_range(0.0..hf),
                cx: rng.random_range(0.0..wf),
                radius: rng.random_range(0.15..0.45) * hf.max(wf),
                ky: k * a.sin(),
                kx: k * a.cos(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [amp, amp * rng.random_range(0.3..1.0), amp * rng.random_range(0.3..1.0)],
            }
        })
        .collect();

    let grain_sd = rng.random_range(0.0..0.02);
    let grain = Normal::new(0.0, grain_sd).expect("finite deviation");
    let diag = hf.hypot(wf);

    let mut data = Array4::<f64>::zeros((1, 3, height, width));
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f64, x as f64);
            let t = ((yf * dy + xf * dx) / diag + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for (shape, col) in &shapes {
                if shape.contains(yf, xf) {
                    px = *col;
                }
            }
            for tex in &textures {
                let d2 = ((yf - tex.cy).powi(2) + (xf - tex.cx).powi(2)) / (tex.radius * tex.radius);
                if d2 < 1.0 {
                    let env = 1.0 - d2;
                    let wave = (yf * tex.ky + xf * tex.kx + tex.phase).sin();
                    for c in 0..3 {
                        px[c] += tex.amp[c] * env * wave;
                    }
                }
            }
            for (c, v) in px.iter().enumerate() {
                data[[0, c, y, x]] = v + grain.sample(&mut rng);
            }
        }
    }
    ImageBatch::from_clamped(data).expect("shape is valid")
}

/// Writes `cfg.count` PNGs to `root/<split>/` and returns the manifest.
/// Existing files with the same names are overwritten.
pub fn write_corpus(root: impl AsRef<Path>, split: Split, cfg: SynthConfig) -> Result<CorpusManifest, ImageError> {
    let dir = root.as_ref().join(split.as_str());
    std::fs::create_dir_all(&dir)?;
    for i in 0..cfg.count {
        synth_image(cfg.seed, i, cfg.height, cfg.width).save_png(0, dir.join(format!("synth_{i:05}.png")))?;
    }
    load_corpus(root, split)
}
