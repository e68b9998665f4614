//! Command-line entry point: one subcommand per pipeline phase.
//!
//! Every command resolves a run config (file, preset, or the `config.toml`
//! saved next to a checkpoint), applies flag overrides, validates it, and
//! only then touches data. Logs go to stderr, artifacts to `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::error::{config_err, Error, Result};
use crate::fusionnet::{Checkpoint, FusionMode, Modality};
use crate::pipeline::data::{predict, Prepared, Splits};
use crate::pipeline::gradcheck::composite_grad_check;
use crate::pipeline::report::{write_metrics_csv, RunReport};
use crate::pipeline::{evaluate, linear_probe, pretrain, selftrain, RunConfig};
use crate::pseudolabel::save_pseudo;
use crate::scenedata::{generate_synthetic, legend_text, load_scene, save_scene, write_json, write_label_ppm, Scene, UNLABELED};

/// Name of the effective run config written next to training artifacts.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "pixfuse", version, about = "Self-supervised SAR/optical fusion and land-cover mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic six-class scenes, one directory each.
    Synth(SynthArgs),
    /// Contrastive pretraining of a fusion network.
    Pretrain(PretrainArgs),
    /// Rule-based pseudo labels for every scene.
    Pseudolabel(PseudoArgs),
    /// Linear probe on frozen features, scored on the held-out scenes.
    Probe(ProbeArgs),
    /// Two-step self-training on pseudo labels.
    Selftrain(SelftrainArgs),
    /// Score a checkpoint that carries a classifier.
    Eval(EvalArgs),
    /// Render a label map as a palette PPM with a legend file.
    ExportMap(ExportArgs),
    /// Finite-difference check of the composite loss gradients.
    Gradcheck(GradArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Run config file: TOML, or JSON with a .json extension.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Seed of every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-scene work.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory of scene directories; synthetic scenes are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic scenes.
    #[arg(long)]
    n_scenes: Option<usize>,
    /// Synthetic tile size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Share of synthetic scenes with an optical cloud.
    #[arg(long, allow_negative_numbers = true)]
    cloud_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    /// Tile size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Share of scenes with an optical cloud.
    #[arg(long, allow_negative_numbers = true)]
    cloud_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Fusion mode: pixef, pixif, pixlf or mcl.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Inputs of an early-fusion network: both, sar or optical.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    /// Width multiplier of every layer.
    #[arg(long, allow_negative_numbers = true)]
    width_mult: Option<f64>,
    /// Pretraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Scenes per pretraining batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pretraining learning rate.
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Keep exactly `cap` random labels per class and scene.
    #[arg(long)]
    sparsify: bool,
    /// Labels kept per class when sparsifying.
    #[arg(long)]
    cap: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Pretrained checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of labelled training scenes.
    #[arg(long)]
    labels: Option<usize>,
    /// Keep at most this many labelled pixels per class and scene.
    #[arg(long)]
    label_cap: Option<usize>,
    /// Classifier training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory; defaults to the checkpoint's parent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Pretrained checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Epochs of the classifier step.
    #[arg(long)]
    step1_epochs: Option<usize>,
    /// Epochs of the fine-tuning step.
    #[arg(long)]
    step2_epochs: Option<usize>,
    /// Sparsify the pseudo labels before training.
    #[arg(long)]
    sparsify: bool,
    /// Output directory; defaults to the checkpoint's parent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory with a classifier.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scenes to score: test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory; defaults to the checkpoint's parent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Scene directory giving the size and class scheme.
    #[arg(long)]
    scene: PathBuf,
    /// Raw label map, one byte per pixel in row-major order.
    #[arg(long)]
    labels: PathBuf,
    /// Output PPM path; the legend goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradArgs {
    /// Fusion mode to check; all four when absent.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Parameter entries compared per mode.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seed of the scenes, weights and sampled entries.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for gradcheck.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown modality {s:?}"))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage or validation errors, 2 on
/// runtime failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Pseudolabel(a) => run_pseudolabel(a),
        Command::Probe(a) => run_probe(a),
        Command::Selftrain(a) => run_selftrain(a),
        Command::Eval(a) => run_eval(a),
        Command::ExportMap(a) => export_map(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Config file, else preset, else the config saved in `run_dir`, else the
/// desk defaults; then the common overrides.
fn resolve(common: &Common, run_dir: Option<&Path>) -> Result<RunConfig> {
    let saved = run_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut cfg = match (&common.config, &common.preset, saved) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(name), _) => RunConfig::preset(name)?,
        (None, None, Some(path)) => RunConfig::load(&path)?,
        (None, None, None) => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(root) = &d.data {
        cfg.data.root = Some(root.clone());
    }
    if let Some(n) = d.n_scenes {
        cfg.data.n_scenes = n;
    }
    if let Some(s) = d.size {
        cfg.data.size = s;
    }
    if let Some(c) = d.cloud_fraction {
        cfg.data.cloud_fraction = c;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    info!("loading checkpoint {}", dir.display());
    Checkpoint::load(dir)
}

/// The directory holding a checkpoint, where its run config lives.
fn run_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn write_maps(dir: &Path, scenes: &[Scene], maps: &[Vec<u8>]) -> Result<()> {
    create_dir(dir)?;
    for (s, m) in scenes.iter().zip(maps) {
        let path = dir.join(format!("{}.bin", s.id));
        fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn scheme_of(scenes: &[Scene]) -> Result<crate::scenedata::ClassScheme> {
    let scheme = scenes[0].class_scheme.clone();
    if scenes.iter().any(|s| s.class_scheme != scheme) {
        return Err(Error::Shape("scenes disagree on the class scheme".into()));
    }
    Ok(scheme)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    cfg.data.n_scenes = a.n.unwrap_or(cfg.data.n_scenes);
    cfg.data.size = a.size.unwrap_or(cfg.data.size);
    cfg.data.cloud_fraction = a.cloud_fraction.unwrap_or(cfg.data.cloud_fraction);
    cfg.validate()?;
    let d = &cfg.data;
    let scenes = generate_synthetic(cfg.seed, d.n_scenes, d.size, d.cloud_fraction)?;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(s, &a.out.join(format!("s{i}")))?;
    }
    info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    apply_data(&mut cfg, &a.data);
    let net = &mut cfg.network;
    net.fusion_mode = a.fusion.unwrap_or(net.fusion_mode);
    net.modality = a.modality.unwrap_or(net.modality);
    net.width_mult = a.width_mult.unwrap_or(net.width_mult);
    let tc = &mut cfg.train.pretrain;
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr = a.lr.unwrap_or(tc.lr);
    cfg.validate()?;
    let splits = Splits::load(&cfg)?;
    create_dir(&a.out)?;
    save_config(&cfg, &a.out)?;
    info!("pretraining {:?} on {} scenes", cfg.network.fusion_mode, splits.train.len());
    let result = pretrain(&splits.train, &cfg, Some(&a.out))?;
    write_metrics_csv(&a.out.join("pretrain_metrics.csv"), &result.history)
}

fn run_pseudolabel(a: PseudoArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    apply_data(&mut cfg, &a.data);
    cfg.pseudolabel.sparsify |= a.sparsify;
    cfg.pseudolabel.cap = a.cap.unwrap_or(cfg.pseudolabel.cap);
    cfg.validate()?;
    let scenes = crate::pipeline::data::load_scenes(&cfg)?;
    let maps = crate::pipeline::selftrain::pseudo_labels(&scenes, &cfg)?;
    create_dir(&a.out)?;
    let (mut labelled, mut correct) = (0usize, 0usize);
    for (s, m) in scenes.iter().zip(&maps) {
        let dir = a.out.join(&s.id);
        save_pseudo(m, &dir)?;
        write_label_ppm(&m.labels, m.height, m.width, &s.class_scheme, &dir.join("pseudo.ppm"))?;
        if let Some(gt) = &s.gt {
            for (&l, &t) in m.labels.iter().zip(gt) {
                if l != UNLABELED && t != UNLABELED {
                    labelled += 1;
                    correct += usize::from(l == t);
                }
            }
        }
    }
    let precision = (labelled > 0).then(|| correct as f64 / labelled as f64);
    if let Some(p) = precision {
        info!("pseudo-label precision {p:.4} over {labelled} pixels");
    }
    let summary = serde_json::json!({ "scenes": scenes.len(), "labelled_pixels": labelled, "precision": precision });
    write_json(&a.out.join("pseudolabel_report.json"), &summary)
}

fn run_probe(a: ProbeArgs) -> Result<()> {
    let rd = run_dir(&a.checkpoint);
    let mut cfg = resolve(&a.common, Some(&rd))?;
    apply_data(&mut cfg, &a.data);
    cfg.data.probe_scenes = a.labels.unwrap_or(cfg.data.probe_scenes);
    if a.label_cap.is_some() {
        cfg.eval.probe_label_cap = a.label_cap;
    }
    cfg.train.linear.epochs = a.epochs.unwrap_or(cfg.train.linear.epochs);
    cfg.validate()?;
    let out = a.out.unwrap_or(rd);
    let ck = load_checkpoint(&a.checkpoint)?;
    let splits = Splits::load(&cfg)?;
    let scheme = scheme_of(&splits.train)?;
    let train = splits.probe(&cfg);
    info!("linear probe on {} labelled scenes, {} test scenes", train.len(), splits.test.len());
    let mut r = linear_probe(&ck, train, &splits.test, &cfg, &scheme)?;
    create_dir(&out)?;
    let mut report = RunReport::new("probe", ck.net.cfg.fusion_mode, cfg.seed);
    report.push("linear_train", r.train_report.clone());
    if let Some(test) = &r.test_report {
        info!("probe test AA {:.4} mIoU {:.4}", test.aa, test.miou);
        if let Some(last) = r.history.last_mut() {
            last.aa = Some(test.aa);
            last.miou = Some(test.miou);
        }
        report.push("linear_test", test.clone());
        write_maps(&out.join("probe_pred"), &splits.test, &r.test_predictions)?;
    }
    write_metrics_csv(&out.join("probe_metrics.csv"), &r.history)?;
    report.save(&out.join("probe_report.json"))?;
    let mut net = ck.net.clone();
    r.classifier.install(&mut net, cfg.seed)?;
    Checkpoint { net, ..ck }.save(&out.join("probe_ckpt"))
}

fn run_selftrain(a: SelftrainArgs) -> Result<()> {
    let rd = run_dir(&a.checkpoint);
    let mut cfg = resolve(&a.common, Some(&rd))?;
    apply_data(&mut cfg, &a.data);
    cfg.train.selftrain1.epochs = a.step1_epochs.unwrap_or(cfg.train.selftrain1.epochs);
    cfg.train.selftrain2.epochs = a.step2_epochs.unwrap_or(cfg.train.selftrain2.epochs);
    cfg.pseudolabel.sparsify |= a.sparsify;
    cfg.validate()?;
    let out = a.out.unwrap_or(rd);
    let ck = load_checkpoint(&a.checkpoint)?;
    let splits = Splits::load(&cfg)?;
    let scheme = scheme_of(&splits.train)?;
    let mut r = selftrain(&ck, &splits.train, &cfg, &scheme)?;
    create_dir(&out)?;
    let mut report = RunReport::new("selftrain", ck.net.cfg.fusion_mode, cfg.seed);
    if let Some(s1) = r.step1_report.take() {
        report.push("step1_train", s1);
    }
    if let Some(s2) = r.step2_report.take() {
        report.push("step2_train", s2);
    }
    if let Some(test) = score(&r.checkpoint, &splits.test, &cfg)? {
        info!("self-training test AA {:.4} mIoU {:.4}", test.aa, test.miou);
        report.push("step2_test", test);
    }
    write_maps(&out.join("selftrain_pred"), &splits.train, &r.step2_maps)?;
    write_metrics_csv(&out.join("selftrain_metrics.csv"), &r.history)?;
    report.save(&out.join("selftrain_report.json"))?;
    r.checkpoint.save(&out.join("selftrain_ckpt"))
}

/// Predictions and, when every scene has ground truth, their scores.
fn predict_scenes(ck: &Checkpoint, scenes: &[Scene], cfg: &RunConfig) -> Result<(Vec<Vec<u8>>, Option<crate::pipeline::EvalReport>)> {
    if !ck.net.has_classifier() {
        return Err(Error::Pipeline("the checkpoint has no classifier; run probe or selftrain first".into()));
    }
    let prepared: Vec<Prepared> = scenes.iter().map(|s| Prepared::new(s, &ck.input_norm)).collect::<Result<_>>()?;
    let maps = predict(&ck.net, &prepared, cfg.eval.batch_size)?;
    let gts: Option<Vec<Vec<u8>>> = scenes.iter().map(|s| s.gt.clone()).collect();
    let report = gts.map(|g| evaluate(&maps, &g, &scheme_of(scenes)?)).transpose()?;
    Ok((maps, report))
}

fn score(ck: &Checkpoint, scenes: &[Scene], cfg: &RunConfig) -> Result<Option<crate::pipeline::EvalReport>> {
    if scenes.is_empty() {
        return Ok(None);
    }
    Ok(predict_scenes(ck, scenes, cfg)?.1)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let rd = run_dir(&a.checkpoint);
    let mut cfg = resolve(&a.common, Some(&rd))?;
    apply_data(&mut cfg, &a.data);
    cfg.validate()?;
    let out = a.out.unwrap_or(rd);
    let ck = load_checkpoint(&a.checkpoint)?;
    let scenes = match a.split.as_str() {
        "all" => crate::pipeline::data::load_scenes(&cfg)?,
        "train" => Splits::load(&cfg)?.train,
        "test" => Splits::load(&cfg)?.test,
        other => return Err(config_err!("unknown split {other:?} (expected test, train or all)")),
    };
    if scenes.is_empty() {
        return Err(Error::Pipeline(format!("the {} split is empty", a.split)));
    }
    let (maps, report) = predict_scenes(&ck, &scenes, &cfg)?;
    create_dir(&out)?;
    write_maps(&out.join("eval_pred"), &scenes, &maps)?;
    let mut run = RunReport::new("eval", ck.net.cfg.fusion_mode, cfg.seed);
    if let Some(r) = report {
        info!("eval AA {:.4} mIoU {:.4}", r.aa, r.miou);
        run.push(&format!("eval_{}", a.split), r);
    }
    run.save(&out.join("eval_report.json"))
}

fn export_map(a: ExportArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let labels = fs::read(&a.labels).map_err(|e| Error::io(&a.labels, e))?;
    let (h, w) = (scene.height(), scene.width());
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} holds {} labels, the scene has {} pixels", a.labels.display(), labels.len(), h * w)));
    }
    write_label_ppm(&labels, h, w, &scene.class_scheme, &a.out)?;
    let legend = a.out.with_extension("legend.txt");
    fs::write(&legend, legend_text(&scene.class_scheme)).map_err(|e| Error::io(&legend, e))?;
    info!("wrote {} and {}", a.out.display(), legend.display());
    Ok(())
}

fn gradcheck(a: GradArgs) -> Result<()> {
    let modes = match a.fusion {
        Some(m) => vec![m],
        None => vec![FusionMode::PixEF, FusionMode::PixIF, FusionMode::PixLF, FusionMode::Mcl],
    };
    if a.samples == 0 || !(a.eps > 0.0) || !(a.tol > 0.0) {
        return Err(config_err!("samples, eps and tol must be positive"));
    }
    let mut reports = Vec::new();
    for m in modes {
        let r = composite_grad_check(m, a.samples, a.eps, a.tol, a.seed)?;
        println!("{m:?}: max relative error {:.3e} over {} entries (worst {}) {}", r.max_rel_error, r.checked, r.worst, if r.passed { "ok" } else { "FAILED" });
        reports.push((m, r));
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let rows: Vec<_> = reports.iter().map(|(m, r)| serde_json::json!({ "fusion_mode": m, "report": r })).collect();
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    match reports.iter().find(|(_, r)| !r.passed) {
        Some((m, r)) => Err(Error::Numerical(format!("{m:?} gradients off by {:.3e} at {}", r.max_rel_error, r.worst))),
        None => Ok(()),
    }
}
