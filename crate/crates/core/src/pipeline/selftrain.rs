//! Two-step self-training on rule-based pseudo labels.
//!
//! Step one fits a linear classifier on frozen features using only the
//! sparse pseudo-labelled pixels and predicts every pixel. Step two
//! fine-tunes the whole network on those dense predictions, with a smaller
//! learning rate on the encoders.

use log::{info, warn};
use pixfuse_nn::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{batch_inputs, extract_features, predict, Prepared};
use super::metrics::{evaluate, EvalReport};
use super::probe::train_linear;
use super::{par_map, EpochLog};
use crate::error::{Error, Result};
use crate::fusionnet::{Checkpoint, Network};
use crate::pseudolabel::{pseudo_label_scene, sparsify, SparseLabelMap};
use crate::scenedata::{derive_seed, ClassScheme, Scene};

const STEP1_STREAM: u64 = 0x57E1;
const STEP2_STREAM: u64 = 0x57E2;
const SPARSIFY_STREAM: u64 = 0x5A45;
const CLASSIFIER_STREAM: u64 = 0xC1A5;

#[derive(Debug, Clone)]
pub struct SelftrainResult {
    /// Fine-tuned network with its classifier.
    pub checkpoint: Checkpoint,
    pub pseudo: Vec<SparseLabelMap>,
    pub step1_maps: Vec<Vec<u8>>,
    pub step2_maps: Vec<Vec<u8>>,
    /// Scores against ground truth, when every scene has it.
    pub step1_report: Option<EvalReport>,
    pub step2_report: Option<EvalReport>,
    pub history: Vec<EpochLog>,
}

/// Pseudo labels of every scene, capped per class when configured.
pub fn pseudo_labels(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<SparseLabelMap>> {
    let maps: Vec<SparseLabelMap> = par_map(cfg.workers, scenes, |s| pseudo_label_scene(s, &cfg.cluster, &cfg.pseudolabel).map(|(m, _)| m))
        .into_iter()
        .collect::<Result<_>>()?;
    if !cfg.pseudolabel.sparsify {
        return Ok(maps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.pseudolabel.seed, SPARSIFY_STREAM));
    Ok(maps.iter().map(|m| sparsify(m, cfg.pseudolabel.cap, &mut rng)).collect())
}

fn score(maps: &[Vec<u8>], scenes: &[Scene], scheme: &ClassScheme) -> Result<Option<EvalReport>> {
    let gts: Option<Vec<Vec<u8>>> = scenes.iter().map(|s| s.gt.clone()).collect();
    gts.map(|g| evaluate(maps, &g, scheme)).transpose()
}

/// Runs both self-training steps from a pretrained checkpoint. Ground truth,
/// when present, is used only for the reports.
pub fn selftrain(ck: &Checkpoint, scenes: &[Scene], cfg: &RunConfig, scheme: &ClassScheme) -> Result<SelftrainResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Pipeline("self-training needs scenes".into()));
    }
    let pseudo = pseudo_labels(scenes, cfg)?;
    let prepared: Vec<Prepared> = scenes.iter().map(|s| Prepared::new(s, &ck.input_norm)).collect::<Result<_>>()?;
    let labelled: Vec<usize> = (0..scenes.len()).filter(|&i| pseudo[i].labeled() > 0).collect();
    if labelled.is_empty() {
        return Err(Error::Pipeline("no scene received any pseudo label".into()));
    }
    for i in (0..scenes.len()).filter(|i| !labelled.contains(i)) {
        warn!("scene {} has no pseudo labels and only takes part in inference", scenes[i].id);
    }
    let k = scheme.num_classes();

    // step one: linear classifier on frozen features
    let train_items: Vec<Prepared> = labelled.iter().map(|&i| prepared[i].clone()).collect();
    let feats = extract_features(&ck.net, &train_items, cfg.eval.batch_size)?;
    let labels: Vec<Vec<u8>> = labelled.iter().map(|&i| pseudo[i].labels.clone()).collect();
    let (classifier, mut history) = train_linear(&feats, &labels, k, &cfg.train.selftrain1, derive_seed(cfg.seed, STEP1_STREAM), "selftrain1")?;
    drop(feats);
    let mut net = ck.net.clone();
    classifier.install(&mut net, derive_seed(cfg.seed, CLASSIFIER_STREAM))?;
    let step1_maps = predict(&net, &prepared, cfg.eval.batch_size)?;
    let step1_report = score(&step1_maps, scenes, scheme)?;
    if let Some(r) = &step1_report {
        info!("self-training step 1: AA {:.4} mIoU {:.4}", r.aa, r.miou);
    }

    // step two: every parameter on the dense predictions
    let tc = &cfg.train.selftrain2;
    let mut opt = tc.optimizer::<f32>();
    let schedule = tc.lr_schedule.schedule(tc.epochs);
    let encoder: Vec<bool> = net.store.entries().map(|(_, e)| Network::<f32>::is_encoder_param(&e.name)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP2_STREAM));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let (cs, co) = (net.cfg.in_channels_sar, net.cfg.in_channels_opt);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let factor = schedule.factor(epoch);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(tc.batch_size) {
            let refs: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (s, o) = batch_inputs::<f32>(&refs, cs, co);
            let targets: Vec<u8> = chunk.iter().flat_map(|&i| step1_maps[i].iter().copied()).collect();
            let mut g = Graph::new(true);
            let (sv, ov) = (g.constant(s), g.constant(o));
            let dense = net.forward(&mut g, sv, ov, true)?.dense.expect("dense requested");
            let logits = net.classify(&mut g, dense)?;
            let loss = g.masked_cross_entropy(logits, &targets);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("fine-tuning loss became {value} at epoch {epoch}")));
            }
            let grads = g.backward(loss).params();
            opt.step(&mut net.store, &grads, |id| factor * if encoder[id.index()] { cfg.train.selftrain_encoder_lr } else { tc.lr });
            g.apply_bn_updates(&mut net.store, cfg.train.bn_momentum as f32);
            total += value;
            steps += 1;
        }
        history.push(EpochLog { epoch: epoch + 1, phase: "selftrain2", loss: total / steps.max(1) as f64, aa: None, miou: None });
    }
    let step2_maps = predict(&net, &prepared, cfg.eval.batch_size)?;
    let step2_report = score(&step2_maps, scenes, scheme)?;
    if let Some(r) = &step2_report {
        info!("self-training step 2: AA {:.4} mIoU {:.4}", r.aa, r.miou);
    }
    let checkpoint = Checkpoint { net, seed: cfg.seed, epoch: ck.epoch, input_norm: ck.input_norm.clone() };
    Ok(SelftrainResult { checkpoint, pseudo, step1_maps, step2_maps, step1_report, step2_report, history })
}
