//! Analytic metric gradients against central finite differences on a
//! 256x256 JPEG pair, 20 random pixels, relative error < 1e-3.
//!
//! VMAF is piecewise smooth with kinks dense enough that a 1e-3 stencil
//! routinely straddles one, so its check here uses a step small enough to
//! stay on one piece. The 1e-3 check lives in the acceptance suite.

use negtune_core::metrics::{metric_gradient, ms_ssim, mse_value, vmaf_neg, MetricId, VmafModel};
use negtune_core::ImageBatch;
use rand::{Rng, SeedableRng};
use std::path::PathBuf;

const STEP: f64 = 1e-3;
const VMAF_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;
const SAMPLES: usize = 20;

fn fixture(name: &str) -> ImageBatch {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/conformance");
    ImageBatch::open(dir.join(name)).unwrap()
}

fn model() -> VmafModel {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/conformance");
    VmafModel::from_path(dir.join("vmaf_v0.6.1neg.json")).unwrap()
}

fn check(metric: MetricId, step: f64, f: impl Fn(&ImageBatch, &ImageBatch) -> f64, seed: u64) {
    let r = fixture("pair00_ref.png");
    let d = fixture("pair00_dist.png");
    assert_eq!((r.height(), r.width()), (256, 256));
    let g = metric_gradient(metric, &r, &d, &model()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < SAMPLES {
        let idx = [0, rng.random_range(0..3), rng.random_range(0..256), rng.random_range(0..256)];
        let v = d.data()[idx];
        if v < step || v > 1.0 - step {
            continue;
        }
        let mut plus = d.data().clone();
        plus[idx] += step;
        let mut minus = d.data().clone();
        minus[idx] -= step;
        let fp = f(&r, &ImageBatch::new(plus).unwrap());
        let fm = f(&r, &ImageBatch::new(minus).unwrap());
        let fd = (fp - fm) / (2.0 * step);
        let rel = (fd - g[idx]).abs() / fd.abs().max(1e-12);
        worst = worst.max(rel);
        n += 1;
    }
    assert!(worst < REL_TOL, "{metric}: worst relative error {worst}");
}

#[test]
fn mse_gradient() {
    check(MetricId::Mse, STEP, |r, d| mse_value(r, d).unwrap(), 1);
}

#[test]
fn ms_ssim_gradient() {
    check(MetricId::MsSsim, STEP, |r, d| ms_ssim(r, d).unwrap(), 2);
}

#[test]
fn vmaf_neg_gradient() {
    let m = model();
    check(MetricId::VmafNeg, VMAF_STEP, |r, d| vmaf_neg(r, d, &m).unwrap().mean, 3);
}

#[test]
fn psnr_is_not_differentiable() {
    let r = fixture("pair00_ref.png");
    assert!(metric_gradient(MetricId::Psnr, &r, &r, &model()).is_err());
}
