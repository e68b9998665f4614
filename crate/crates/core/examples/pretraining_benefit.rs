//! Linear-probe mIoU of a contrastively pretrained backbone against the same
//! architecture left at its random initialisation.
//!
//! Usage: `pretraining_benefit [n_scenes] [epochs] [fusion_mode] [seed]`,
//! defaulting to the desk-scale run (200 scenes, 50 epochs, pixif).

use pixfuse::fusionnet::FusionMode;
use pixfuse::pipeline::data::Splits;
use pixfuse::pipeline::{initial_checkpoint, linear_probe, pretrain, RunConfig};
use pixfuse::scenedata::ClassScheme;

fn main() -> pixfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mut cfg = RunConfig::desk();
    cfg.data.n_scenes = arg(1, "200").parse().expect("scene count");
    cfg.train.pretrain.epochs = arg(2, "50").parse().expect("epoch count");
    cfg.network.fusion_mode = arg(3, "pixif").parse::<FusionMode>()?;
    cfg.seed = arg(4, "0").parse().expect("seed");
    cfg.validate()?;

    let splits = Splits::load(&cfg)?;
    let scheme = ClassScheme::six_class();
    let start = std::time::Instant::now();
    let trained = pretrain(&splits.train, &cfg, None)?;
    let losses: Vec<String> = trained.history.iter().map(|h| format!("{:.3}", h.loss)).collect();
    println!("pretraining took {:.0?}; loss per epoch: {}", start.elapsed(), losses.join(" "));

    for (name, ck) in [("pretrained", trained.checkpoint), ("random init", initial_checkpoint(&splits.train, &cfg)?)] {
        let r = linear_probe(&ck, splits.probe(&cfg), &splits.test, &cfg, &scheme)?;
        let t = r.test_report.expect("held-out scenes");
        println!("{name:<12} test AA {:.4}  mIoU {:.4}", t.aa, t.miou);
    }
    Ok(())
}
