//! Linear-probe AA of PixEF pretrained on both modalities, on optical only
//! and on SAR only, over cloudy synthetic scenes.
//!
//! Usage: `fusion_comparison [n_scenes] [epochs] [cloud_fraction] [seed]`.

use pixfuse::fusionnet::{FusionMode, Modality};
use pixfuse::pipeline::data::Splits;
use pixfuse::pipeline::{linear_probe, pretrain, RunConfig};
use pixfuse::scenedata::ClassScheme;

fn main() -> pixfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mut cfg = RunConfig::desk();
    cfg.data.n_scenes = arg(1, "64").parse().expect("scene count");
    cfg.train.pretrain.epochs = arg(2, "15").parse().expect("epoch count");
    cfg.data.cloud_fraction = arg(3, "0.3").parse().expect("cloud fraction");
    cfg.seed = arg(4, "0").parse().expect("seed");
    cfg.network.fusion_mode = FusionMode::PixEF;
    cfg.validate()?;

    let splits = Splits::load(&cfg)?;
    let scheme = ClassScheme::six_class();
    for (name, modality) in [("S1S2", Modality::Both), ("S2", Modality::Optical), ("S1", Modality::Sar)] {
        cfg.network.modality = modality;
        let ck = pretrain(&splits.train, &cfg, None)?.checkpoint;
        let t = linear_probe(&ck, splits.probe(&cfg), &splits.test, &cfg, &scheme)?.test_report.expect("held-out scenes");
        println!("{name:<5} test AA {:.4}  mIoU {:.4}", t.aa, t.miou);
    }
    Ok(())
}
