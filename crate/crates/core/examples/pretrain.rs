//! Trains the toy codec from scratch on a procedural corpus with the plain
//! rate + MSE objective and writes the resulting checkpoint.
//!
//! ```text
//! cargo run --release -p negtune-core --example pretrain -- OUT.ckpt [EPOCHS] [IMAGES] [INIT.ckpt]
//! ```
//!
//! Runs a high learning rate for the first three quarters of the epochs and
//! a fifth of it for the rest.

use negtune_core::codec::{Checkpoint, CodecConfig, CodecModel, FreezeSpec, Provenance};
use negtune_core::finetune::{finetune, TrainConfig};
use negtune_core::imageio::Split;
use negtune_core::loss::{LossWeights, ScalingFactors};
use negtune_core::synth::{write_corpus, SynthConfig};
use negtune_core::VmafModel;
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().ok_or("usage: pretrain OUT.ckpt [EPOCHS] [IMAGES] [INIT.ckpt]")?;
    let epochs: usize = args.get(1).map_or(Ok(40), |s| s.parse())?;
    let images: usize = args.get(2).map_or(Ok(400), |s| s.parse())?;

    let data = tempfile::tempdir()?;
    let train = write_corpus(
        data.path(),
        Split::Train,
        SynthConfig {
            count: images,
            height: 256,
            width: 256,
            seed: 1000,
        },
    )?;
    let val = write_corpus(
        data.path(),
        Split::Validation,
        SynthConfig {
            count: 8,
            height: 256,
            width: 256,
            seed: 2000,
        },
    )?;

    let config = CodecConfig::default();
    let mut model = match args.get(3) {
        Some(init) => Checkpoint::load(init)?.to_model(Some(&config))?,
        None => CodecModel::new(config.clone())?,
    };
    let weights = LossWeights::new(1.0, 0.0, 0.0, config.quality_lambda)?;
    let scaling = ScalingFactors::new(1.0, 1.0)?;
    let vmaf = VmafModel::neg();

    let fast = (epochs * 3).div_ceil(4);
    for (n, lr) in [(fast, 1e-3), (epochs - fast, 2e-4)] {
        if n == 0 {
            continue;
        }
        let mut cfg = TrainConfig::new(weights, scaling, FreezeSpec::None);
        cfg.epochs = n;
        cfg.learning_rate = lr;
        cfg.crop = 128;
        cfg.batch_size = 2;
        cfg.seed = lr.to_bits();
        let (trained, history) = finetune(model, &train, &val, &cfg, &vmaf, None)?;
        model = trained;
        for r in history.epochs() {
            let v = &r.validation;
            println!(
                "lr {lr:e} epoch {:>3}: psnr {:.3} ms-ssim {:.4} vmafneg_y {:.2} bpp {:.4}",
                r.epoch, v.psnr_db, v.ms_ssim, v.vmafneg_y, v.bpp
            );
        }
    }

    let mut prov = Provenance::new();
    prov.insert(
        "origin".into(),
        format!("pretrain example, {epochs} epochs on {images} procedural images"),
    );
    Checkpoint::from_model(&model, 0, prov, None).save(out)?;
    println!("wrote {out}");
    Ok(())
}
