//! Self-supervised pretraining with the superpixel and image-level
//! contrastive objective.
//!
//! Each step stacks the original views and their transformed copies into
//! one batch, runs the network once, replays every transform on the
//! original view's dense features and pools both sides over the scene's
//! superpixels before the InfoNCE terms.

use std::path::Path;

use log::{info, warn};
use pixfuse_nn::{Float, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::data::{batch_inputs, compute_norm, Prepared};
use super::{par_map, EpochLog};
use crate::augment::TransformRecord;
use crate::contrastive::{composite_loss, segment_superpixels, DensePair, GlobalPairs, LossConfig, LossTerms, PoolPlan, SuperpixelMap};
use crate::error::{Error, Result};
use crate::fusionnet::{Checkpoint, FusionMode, InputNorm, Network};
use crate::scenedata::{derive_seed, write_json, Scene};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5EED;

/// A scene ready for pretraining: normalised inputs and cached segments.
#[derive(Debug, Clone)]
pub struct PretrainScene {
    pub id: String,
    pub prepared: Prepared,
    pub superpixels: SuperpixelMap,
}

/// Segments every scene's optical bands once.
pub fn prepare_scenes(scenes: &[Scene], norm: &InputNorm, loss: &LossConfig, workers: usize) -> Result<Vec<PretrainScene>> {
    par_map(workers, scenes, |s| {
        Ok(PretrainScene {
            id: s.id.clone(),
            prepared: Prepared::new(s, norm)?,
            superpixels: segment_superpixels(&s.optical, loss.superpixels_per_tile, loss.slic_compactness, loss.slic_iterations)?,
        })
    })
    .into_iter()
    .collect()
}

/// Both views of a batch: samples `0..n` are originals, `n..2n` their
/// transformed copies.
#[derive(Debug, Clone)]
pub struct ViewBatch<T> {
    pub n: usize,
    pub sar: Tensor<T>,
    pub opt: Tensor<T>,
    /// Transformed-frame pixel to original pixel, per scene.
    pub source_maps: Vec<Vec<Option<u32>>>,
    /// Superpixel rows in the transformed frame; absent for image-level
    /// only training.
    pub plan: Option<PoolPlan>,
}

pub fn make_view_batch<T: Float>(
    items: &[&PretrainScene],
    records: &[TransformRecord],
    mode: FusionMode,
    loss: &LossConfig,
    c_sar: usize,
    c_opt: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBatch<T>> {
    let n = items.len();
    let (h, w) = (items[0].prepared.height, items[0].prepared.width);
    let mut views: Vec<Prepared> = items.iter().map(|s| s.prepared.clone()).collect();
    let mut source_maps = Vec::with_capacity(n);
    for (s, r) in items.iter().zip(records) {
        // fill with the normalised mean
        let sar = r.apply_input(&s.prepared.sar, h, w, 0.0, rng)?;
        let opt = r.apply_input(&s.prepared.opt, h, w, 0.0, rng)?;
        views.push(Prepared { height: h, width: w, sar, opt });
        source_maps.push(r.source_map(h, w)?);
    }
    let refs: Vec<&Prepared> = views.iter().collect();
    let (sar, opt) = batch_inputs(&refs, c_sar, c_opt);
    let plan = if mode == FusionMode::Mcl {
        None
    } else {
        let sps: Vec<&SuperpixelMap> = items.iter().map(|s| &s.superpixels).collect();
        Some(PoolPlan::new(&sps, &source_maps, loss.segment_overlap_min_frac)?)
    };
    Ok(ViewBatch { n, sar, opt, source_maps, plan })
}

/// Composite loss of one view batch for the network's fusion mode.
pub fn batch_loss<T: Float>(g: &mut Graph<T>, net: &Network<T>, batch: &ViewBatch<T>, loss: &LossConfig) -> Result<LossTerms> {
    let mode = net.cfg.fusion_mode;
    let n = batch.n;
    let sar = g.constant(batch.sar.clone());
    let opt = g.constant(batch.opt.clone());
    let out = net.forward(g, sar, opt, mode != FusionMode::Mcl)?;
    let dense = if mode == FusionMode::Mcl {
        None
    } else {
        let (first, second) = match mode {
            FusionMode::PixLF => (out.dense_sar.expect("late fusion branch"), out.dense_opt.expect("late fusion branch")),
            _ => {
                let d = out.dense.expect("dense requested");
                (d, d)
            }
        };
        let v1 = g.slice_batch(first, 0, n);
        let v2 = g.slice_batch(second, n, 2 * n);
        let map: Vec<Option<u32>> = batch.source_maps.concat();
        let anchor = g.spatial_gather(v1, map, 0.0);
        Some(DensePair { anchor, positive: v2 })
    };
    let rows = |g: &mut Graph<T>, v: Option<pixfuse_nn::Var>, second: bool| {
        let v = v.expect("embedding for this fusion mode");
        if second {
            g.slice_rows(v, n, 2 * n)
        } else {
            g.slice_rows(v, 0, n)
        }
    };
    let global = match mode {
        FusionMode::PixEF => GlobalPairs { main: Some((rows(g, out.emb_fused, false), rows(g, out.emb_fused, true))), fused: None },
        FusionMode::PixIF => GlobalPairs {
            main: Some((rows(g, out.emb_sar, false), rows(g, out.emb_opt, true))),
            fused: Some((rows(g, out.emb_fused, false), rows(g, out.emb_fused, true))),
        },
        FusionMode::PixLF | FusionMode::Mcl => {
            GlobalPairs { main: Some((rows(g, out.emb_sar, false), rows(g, out.emb_opt, true))), fused: None }
        }
    };
    composite_loss(g, mode, dense, batch.plan.as_ref(), global, loss)
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub skipped_batches: usize,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    step: usize,
    scenes: Vec<&'a str>,
    transforms: &'a [TransformRecord],
    loss: f64,
}

/// The untrained network `pretrain` starts from, with the input
/// normalisation of `scenes`: the random-initialisation baseline.
pub fn initial_checkpoint(scenes: &[Scene], cfg: &RunConfig) -> Result<Checkpoint> {
    let net = Network::<f32>::build(&cfg.network, derive_seed(cfg.seed, INIT_STREAM))?;
    Ok(Checkpoint { net, seed: cfg.seed, epoch: 0, input_norm: compute_norm(scenes)? })
}

/// Trains the configured fusion network on unlabelled scenes. With `out`,
/// checkpoints go to `out/ckpt` at the configured interval and after the
/// last epoch.
pub fn pretrain(scenes: &[Scene], cfg: &RunConfig, out: Option<&Path>) -> Result<PretrainResult> {
    cfg.validate()?;
    let tc = &cfg.train.pretrain;
    if scenes.len() < 2 {
        return Err(Error::Pipeline("pretraining needs at least two scenes".into()));
    }
    let (h, w) = (scenes[0].height(), scenes[0].width());
    if scenes.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::Shape("pretraining scenes must share one tile size".into()));
    }
    cfg.augment.validate(h, w)?;
    let norm = compute_norm(scenes)?;
    let items = prepare_scenes(scenes, &norm, &cfg.loss, cfg.workers)?;
    let mut net = Network::<f32>::build(&cfg.network, derive_seed(cfg.seed, INIT_STREAM))?;
    let mut optimizer = tc.optimizer::<f32>();
    let schedule = tc.lr_schedule.schedule(tc.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut history = Vec::with_capacity(tc.epochs);
    let mut skipped = 0;
    let bn_momentum = cfg.train.bn_momentum as f32;
    let (cs, co) = (cfg.network.in_channels_sar, cfg.network.in_channels_opt);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let lr = tc.lr * schedule.factor(epoch);
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch_items: Vec<&PretrainScene> = chunk.iter().map(|&i| &items[i]).collect();
            let records: Vec<TransformRecord> = batch_items.iter().map(|_| TransformRecord::sample(&mut rng, &cfg.augment, h, w)).collect();
            let batch = match make_view_batch::<f32>(&batch_items, &records, net.cfg.fusion_mode, &cfg.loss, cs, co, &mut rng) {
                Ok(b) => b,
                Err(Error::DegenerateBatch(msg)) => {
                    warn!("epoch {epoch} step {step}: skipped batch ({msg})");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut g = Graph::new(true);
            let terms = batch_loss(&mut g, &net, &batch, &cfg.loss)?;
            let value = g.value(terms.total).item().as_f64();
            if !value.is_finite() {
                if let Some(dir) = out {
                    let dump = DivergenceDump {
                        epoch,
                        step,
                        scenes: batch_items.iter().map(|s| s.id.as_str()).collect(),
                        transforms: &records,
                        loss: value,
                    };
                    write_json(&dir.join("divergence.json"), &dump)?;
                }
                return Err(Error::Numerical(format!("pretraining loss became {value} at epoch {epoch}, step {step}")));
            }
            let grads = g.backward(terms.total).params();
            optimizer.step(&mut net.store, &grads, |_| lr);
            g.apply_bn_updates(&mut net.store, bn_momentum);
            total += value;
            steps += 1;
        }
        let loss = if steps > 0 { total / steps as f64 } else { f64::NAN };
        info!("pretrain epoch {} loss {loss:.5}", epoch + 1);
        history.push(EpochLog { epoch: epoch + 1, phase: "pretrain", loss, aa: None, miou: None });
        let last = epoch + 1 == tc.epochs;
        if let Some(dir) = out {
            if last || (tc.checkpoint_interval > 0 && (epoch + 1) % tc.checkpoint_interval == 0) {
                let ck = Checkpoint { net: net.clone(), seed: cfg.seed, epoch: epoch + 1, input_norm: norm.clone() };
                ck.save(&dir.join("ckpt"))?;
            }
        }
    }
    if history.iter().all(|h| h.loss.is_nan()) {
        return Err(Error::Pipeline("no pretraining batch could be formed".into()));
    }
    Ok(PretrainResult { checkpoint: Checkpoint { net, seed: cfg.seed, epoch: tc.epochs, input_norm: norm }, history, skipped_batches: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ShiftSpec;
    use crate::scenedata::generate_synthetic;

    fn tiny(mode: FusionMode) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.network.fusion_mode = mode;
        cfg.network.width_mult = 0.125;
        cfg.data.size = 16;
        cfg.loss.superpixels_per_tile = 8;
        cfg.train.pretrain.batch_size = 2;
        cfg.train.pretrain.epochs = 1;
        cfg
    }

    #[test]
    fn zero_shift_aligns_positive_pairs_exactly() {
        for mode in [FusionMode::PixEF, FusionMode::PixIF] {
            let cfg = tiny(mode);
            let scenes = generate_synthetic(1, 2, 16, 0.0).unwrap();
            let norm = compute_norm(&scenes).unwrap();
            let items = prepare_scenes(&scenes, &norm, &cfg.loss, 1).unwrap();
            let refs: Vec<&PretrainScene> = items.iter().collect();
            let net = Network::<f64>::build(&cfg.network, 0).unwrap();
            let records = [TransformRecord::IDENTITY; 2];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let batch = make_view_batch::<f64>(&refs, &records, mode, &cfg.loss, 2, 5, &mut rng).unwrap();
            let mut g = Graph::new(false);
            let (s, o) = (g.constant(batch.sar.clone()), g.constant(batch.opt.clone()));
            let d = net.forward(&mut g, s, o, true).unwrap().dense.unwrap();
            let v1 = g.slice_batch(d, 0, 2);
            let v2 = g.slice_batch(d, 2, 4);
            let a = g.spatial_gather(v1, batch.source_maps.concat(), 0.0);
            let (a, p) = (g.value(a), g.value(v2));
            assert_eq!(a.data(), p.data(), "{mode:?}");
            let f = a.dim(0);
            let np = 2 * 256;
            for q in 0..np {
                let dot: f64 = (0..f).map(|c| a.data()[c * np + q] * p.data()[c * np + q]).sum();
                let na: f64 = (0..f).map(|c| a.data()[c * np + q].powi(2)).sum::<f64>().sqrt();
                let nb: f64 = (0..f).map(|c| p.data()[c * np + q].powi(2)).sum::<f64>().sqrt();
                assert!((dot / (na * nb) - 1.0).abs() <= 4.0 * f64::EPSILON, "{mode:?} pixel {q}");
            }
        }
    }

    #[test]
    fn replayed_shift_matches_shifted_input_away_from_borders() {
        // a one-pixel translation of the input moves the first-stage
        // features of the late-fusion branch only through padding effects;
        // the replay must line up the interior exactly for a per-pixel map
        let scenes = generate_synthetic(2, 2, 16, 0.0).unwrap();
        let cfg = tiny(FusionMode::PixEF);
        let norm = compute_norm(&scenes).unwrap();
        let items = prepare_scenes(&scenes, &norm, &cfg.loss, 1).unwrap();
        let refs: Vec<&PretrainScene> = items.iter().collect();
        let rec = TransformRecord { shift: ShiftSpec::translation(2, -1), affine: None, photometric: None };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_view_batch::<f64>(&refs, &[rec; 2], FusionMode::PixEF, &cfg.loss, 2, 5, &mut rng).unwrap();
        // input planes of the shifted copy equal the replayed originals
        let mut g = Graph::new(false);
        let x = g.constant(batch.opt.clone());
        let v1 = g.slice_batch(x, 0, 2);
        let v2 = g.slice_batch(x, 2, 4);
        let replay = g.spatial_gather(v1, batch.source_maps.concat(), 0.0);
        assert_eq!(g.value(replay), g.value(v2));
    }

    #[test]
    fn smoke_each_mode_and_determinism() {
        let scenes = generate_synthetic(5, 4, 16, 0.0).unwrap();
        for mode in [FusionMode::PixEF, FusionMode::PixIF, FusionMode::PixLF, FusionMode::Mcl] {
            let cfg = tiny(mode);
            let dir = tempfile::tempdir().unwrap();
            let a = pretrain(&scenes, &cfg, Some(dir.path())).unwrap();
            assert!(a.history[0].loss.is_finite(), "{mode:?}");
            assert!(dir.path().join("ckpt/manifest.json").is_file());
            let b = pretrain(&scenes, &cfg, None).unwrap();
            assert_eq!(a.history, b.history);
            let vals = |r: &PretrainResult| r.checkpoint.net.store.entries().map(|(_, e)| e.value.clone()).collect::<Vec<_>>();
            assert_eq!(vals(&a), vals(&b));
        }
    }

    #[test]
    fn every_trainable_parameter_gets_gradient() {
        let scenes = generate_synthetic(6, 3, 16, 0.0).unwrap();
        for mode in [FusionMode::PixEF, FusionMode::PixIF, FusionMode::PixLF, FusionMode::Mcl] {
            let cfg = tiny(mode);
            let norm = compute_norm(&scenes).unwrap();
            let items = prepare_scenes(&scenes, &norm, &cfg.loss, 1).unwrap();
            let refs: Vec<&PretrainScene> = items.iter().collect();
            let net = Network::<f64>::build(&cfg.network, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let records: Vec<TransformRecord> = (0..3).map(|_| TransformRecord::sample(&mut rng, &cfg.augment, 16, 16)).collect();
            let batch = make_view_batch::<f64>(&refs, &records, mode, &cfg.loss, 2, 5, &mut rng).unwrap();
            let mut g = Graph::new(true);
            let terms = batch_loss(&mut g, &net, &batch, &cfg.loss).unwrap();
            let grads = g.backward(terms.total);
            for id in net.store.trainable() {
                let gr = grads.param(id).unwrap_or_else(|| panic!("{mode:?}: no gradient for {}", net.store.entry(id).name));
                assert!(gr.data().iter().any(|&v| v != 0.0), "{mode:?}: zero gradient for {}", net.store.entry(id).name);
            }
        }
    }
}
