//! Two-step self-training on pseudo labels: a linear classifier over the
//! frozen pretrained backbone, then fine-tuning of the whole network.
//!
//! Usage: `self_training [n_scenes] [epochs] [fusion_mode] [seed]`.

use pixfuse::fusionnet::FusionMode;
use pixfuse::pipeline::data::Splits;
use pixfuse::pipeline::{evaluate, pretrain, selftrain, RunConfig};
use pixfuse::scenedata::ClassScheme;

fn main() -> pixfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mut cfg = RunConfig::desk();
    cfg.data.n_scenes = arg(1, "64").parse().expect("scene count");
    cfg.train.pretrain.epochs = arg(2, "15").parse().expect("epoch count");
    cfg.network.fusion_mode = arg(3, "pixif").parse::<FusionMode>()?;
    cfg.seed = arg(4, "0").parse().expect("seed");
    cfg.validate()?;

    let splits = Splits::load(&cfg)?;
    let scheme = ClassScheme::six_class();
    let ck = pretrain(&splits.train, &cfg, None)?.checkpoint;
    let r = selftrain(&ck, &splits.train, &cfg, &scheme)?;
    let labelled: usize = r.pseudo.iter().map(|m| m.labels.iter().filter(|&&l| l != pixfuse::scenedata::UNLABELED).count()).sum();
    println!("{labelled} pseudo labels over {} scenes", splits.train.len());
    let gts: Vec<Vec<u8>> = splits.train.iter().map(|s| s.gt.clone().expect("ground truth")).collect();
    for (step, maps) in [("step 1", &r.step1_maps), ("step 2", &r.step2_maps)] {
        let e = evaluate(maps, &gts, &scheme)?;
        println!("{step}: AA {:.4}  mIoU {:.4}", e.aa, e.miou);
    }
    Ok(())
}
