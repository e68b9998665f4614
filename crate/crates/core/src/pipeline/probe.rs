//! Linear evaluation of frozen dense features.
//!
//! Features are extracted once in inference mode, standardised per channel
//! with training-set statistics and fed to a per-pixel linear classifier.
//! The standardisation folds into the classifier when it is attached to a
//! network, so the network's own prediction path gives the same labels.

use log::warn;
use pixfuse_nn::{Graph, ParamKind, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TrainConfig};
use super::data::{argmax_channels, extract_features, Prepared};
use super::metrics::{evaluate, EvalReport};
use super::EpochLog;
use crate::error::{Error, Result};
use crate::fusionnet::{Checkpoint, Network};
use crate::pseudolabel::{sparsify, SparseLabelMap};
use crate::scenedata::{derive_seed, ClassScheme, Scene, UNLABELED};

const PROBE_STREAM: u64 = 0x9B0BE;
const CAP_STREAM: u64 = 0xCA9;

/// Per-pixel linear map on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub num_classes: usize,
    pub dim: usize,
    /// `[K, F]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LinearClassifier {
    /// Labels of a `[F, P]` feature map.
    pub fn predict(&self, features: &[f32]) -> Vec<u8> {
        let p = features.len() / self.dim;
        let mut logits = vec![0.0f32; self.num_classes * p];
        for k in 0..self.num_classes {
            let row = &mut logits[k * p..(k + 1) * p];
            row.fill(self.bias[k]);
            for c in 0..self.dim {
                let wk = self.weight[k * self.dim + c] / self.std[c];
                let mu = self.mean[c];
                for (l, &x) in row.iter_mut().zip(&features[c * p..(c + 1) * p]) {
                    *l += wk * (x - mu);
                }
            }
        }
        argmax_channels(&logits, p)
    }

    /// Writes the classifier, with the standardisation folded in, into the
    /// network's 1x1 classification layer.
    pub fn install(&self, net: &mut Network<f32>, seed: u64) -> Result<()> {
        if net.cfg.out_channels() != self.dim {
            return Err(Error::Shape(format!("classifier expects {} features, network has {}", self.dim, net.cfg.out_channels())));
        }
        net.ensure_classifier(self.num_classes, seed);
        let (wid, bid) = net.classifier_ids().expect("classifier just added");
        if net.store.get(bid).numel() != self.num_classes {
            return Err(Error::Shape("network classifier has a different class count".into()));
        }
        let mut w = vec![0.0f32; self.num_classes * self.dim];
        let mut b = self.bias.clone();
        for k in 0..self.num_classes {
            for c in 0..self.dim {
                let scaled = self.weight[k * self.dim + c] / self.std[c];
                w[k * self.dim + c] = scaled;
                b[k] -= scaled * self.mean[c];
            }
        }
        *net.store.get_mut(wid) = Tensor::new(vec![self.num_classes, self.dim, 1, 1], w);
        *net.store.get_mut(bid) = Tensor::new(vec![self.num_classes], b);
        Ok(())
    }
}

/// Mean cross-entropy of a 1x1 classifier over labelled pixels of
/// `x: [F, N, 1, P]`.
pub fn classifier_loss(g: &mut Graph<f32>, x: Var, w: Var, b: Var, labels: &[u8]) -> Var {
    let logits = g.conv2d(x, w, Some(b), 1, 0);
    g.masked_cross_entropy(logits, labels)
}

/// Fits a classifier on `[F, P]` feature maps and their labels; sentinel
/// pixels carry no loss.
pub fn train_linear(
    features: &[Vec<f32>],
    labels: &[Vec<u8>],
    num_classes: usize,
    tc: &TrainConfig,
    seed: u64,
    phase: &'static str,
) -> Result<(LinearClassifier, Vec<EpochLog>)> {
    let first = features.first().ok_or_else(|| Error::Pipeline("no scenes to train the classifier on".into()))?;
    let pixels = labels[0].len();
    let dim = first.len() / pixels;
    if labels.iter().all(|l| l.iter().all(|&v| v == UNLABELED)) {
        return Err(Error::Pipeline("no labelled pixels to train the classifier on".into()));
    }
    // channel statistics over every training pixel
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for f in features {
        for c in 0..dim {
            for &v in &f[c * pixels..(c + 1) * pixels] {
                mean[c] += v as f64;
                sq[c] += v as f64 * v as f64;
            }
        }
    }
    let n = (features.len() * pixels) as f64;
    let mean: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
    let std: Vec<f32> = sq.iter().zip(&mean).map(|(q, &m)| ((q / n - (m as f64).powi(2)).max(0.0).sqrt().max(1e-6)) as f32).collect();
    let standardised: Vec<Vec<f32>> = features
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for c in 0..dim {
                out[c * pixels..(c + 1) * pixels].iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
            }
            out
        })
        .collect();

    let mut store = ParamStore::<f32>::new();
    let wid = store.add("weight", Tensor::zeros(&[num_classes, dim, 1, 1]), ParamKind::Weight);
    let bid = store.add("bias", Tensor::zeros(&[num_classes]), ParamKind::Weight);
    let mut opt = tc.optimizer::<f32>();
    let schedule = tc.lr_schedule.schedule(tc.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usable: Vec<usize> = (0..features.len()).filter(|&i| labels[i].iter().any(|&l| l != UNLABELED)).collect();
    let mut order = usable.clone();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let lr = tc.lr * schedule.factor(epoch);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(tc.batch_size) {
            let nb = chunk.len();
            let mut data = Vec::with_capacity(dim * nb * pixels);
            for c in 0..dim {
                for &i in chunk {
                    data.extend_from_slice(&standardised[i][c * pixels..(c + 1) * pixels]);
                }
            }
            let batch_labels: Vec<u8> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let mut g = Graph::new(true);
            let x = g.constant(Tensor::new(vec![dim, nb, 1, pixels], data));
            let (w, b) = (g.param(&store, wid), g.param(&store, bid));
            let loss = classifier_loss(&mut g, x, w, b, &batch_labels);
            let grads = g.backward(loss).params();
            opt.step(&mut store, &grads, |_| lr);
            total += g.value(loss).item() as f64;
            steps += 1;
        }
        history.push(EpochLog { epoch: epoch + 1, phase, loss: total / steps.max(1) as f64, aa: None, miou: None });
    }
    let classifier = LinearClassifier {
        num_classes,
        dim,
        weight: store.get(wid).data().to_vec(),
        bias: store.get(bid).data().to_vec(),
        mean,
        std,
    };
    Ok((classifier, history))
}

/// Keeps `cap` random ground-truth pixels per class, dropping classes with
/// fewer.
pub fn cap_labels(labels: &[u8], height: usize, width: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let map = SparseLabelMap { height, width, labels: labels.to_vec(), provenance: vec![None; labels.len()], thresholds: None };
    sparsify(&map, cap, rng).labels
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub classifier: LinearClassifier,
    pub train_report: EvalReport,
    /// Absent when no held-out scenes were given.
    pub test_report: Option<EvalReport>,
    pub test_predictions: Vec<Vec<u8>>,
    pub history: Vec<EpochLog>,
}

fn ground_truth(scenes: &[Scene]) -> Result<Vec<Vec<u8>>> {
    scenes
        .iter()
        .map(|s| s.gt.clone().ok_or_else(|| Error::Pipeline(format!("scene {} has no ground truth", s.id))))
        .collect()
}

/// Trains a linear classifier on frozen features of `train` and scores it
/// on `test`. The checkpoint is only read.
pub fn linear_probe(ck: &Checkpoint, train: &[Scene], test: &[Scene], cfg: &RunConfig, scheme: &ClassScheme) -> Result<ProbeResult> {
    let mut gts = ground_truth(train)?;
    if let Some(cap) = cfg.eval.probe_label_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CAP_STREAM));
        for (gt, s) in gts.iter_mut().zip(train) {
            *gt = cap_labels(gt, s.height(), s.width(), cap, &mut rng);
        }
    }
    let k = scheme.num_classes();
    for c in 0..k {
        if !gts.iter().any(|g| g.contains(&(c as u8))) {
            warn!("class {} is absent from the probe training labels", scheme.names[c]);
        }
    }
    let prepare = |scenes: &[Scene]| -> Result<Vec<Prepared>> { scenes.iter().map(|s| Prepared::new(s, &ck.input_norm)).collect() };
    let train_feats = extract_features(&ck.net, &prepare(train)?, cfg.eval.batch_size)?;
    let (classifier, history) = train_linear(&train_feats, &gts, k, &cfg.train.linear, derive_seed(cfg.seed, PROBE_STREAM), "linear")?;
    let train_pred: Vec<Vec<u8>> = train_feats.iter().map(|f| classifier.predict(f)).collect();
    let train_report = evaluate(&train_pred, &gts, scheme)?;
    drop(train_feats);
    let (test_report, test_predictions) = if test.is_empty() {
        (None, Vec::new())
    } else {
        let feats = extract_features(&ck.net, &prepare(test)?, cfg.eval.batch_size)?;
        let pred: Vec<Vec<u8>> = feats.iter().map(|f| classifier.predict(f)).collect();
        (Some(evaluate(&pred, &ground_truth(test)?, scheme)?), pred)
    };
    Ok(ProbeResult { classifier, train_report, test_report, test_predictions, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusionnet::{FusionMode, NetworkConfig};
    use crate::pipeline::data::{compute_norm, predict};
    use crate::scenedata::generate_synthetic;

    fn linear_cfg() -> TrainConfig {
        RunConfig::desk().train.linear
    }

    #[test]
    fn separable_features_reach_perfect_training_accuracy() {
        // three classes whose features sit on distinct corners
        let pixels = 64;
        let labels: Vec<u8> = (0..pixels).map(|p| (p % 3) as u8).collect();
        let mut f = vec![0.0f32; 2 * pixels];
        for p in 0..pixels {
            let (a, b) = [(1.0, 0.0), (0.0, 1.0), (-1.0, -1.0)][p % 3];
            f[p] = a + 0.01 * (p as f32).sin();
            f[pixels + p] = b;
        }
        let (clf, _) = train_linear(&[f.clone()], &[labels.clone()], 3, &linear_cfg(), 0, "linear").unwrap();
        assert_eq!(clf.predict(&f), labels);
    }

    #[test]
    fn sentinel_pixels_carry_no_gradient() {
        let (dim, pixels) = (3, 10);
        let mut g = Graph::<f32>::new(true);
        let x = g.variable(Tensor::new(vec![dim, 1, 1, pixels], (0..dim * pixels).map(|v| (v as f32 * 0.37).sin()).collect()));
        let w = g.variable(Tensor::new(vec![2, dim, 1, 1], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]));
        let b = g.variable(Tensor::new(vec![2], vec![0.0, 0.1]));
        let labels: Vec<u8> = (0..pixels).map(|p| if p % 3 == 0 { UNLABELED } else { (p % 2) as u8 }).collect();
        let loss = classifier_loss(&mut g, x, w, b, &labels);
        let grads = g.backward(loss);
        let dx = grads.wrt(x).unwrap();
        for p in 0..pixels {
            let touched = (0..dim).any(|c| dx.data()[c * pixels + p] != 0.0);
            assert_eq!(touched, labels[p] != UNLABELED, "pixel {p}");
        }
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_is_deterministic() {
        let scenes = generate_synthetic(4, 6, 16, 0.0).unwrap();
        let mut cfg = RunConfig::desk();
        cfg.train.linear.epochs = 3;
        let net_cfg = NetworkConfig { fusion_mode: FusionMode::PixIF, width_mult: 0.125, ..Default::default() };
        let ck = Checkpoint { net: Network::build(&net_cfg, 1).unwrap(), seed: 1, epoch: 0, input_norm: compute_norm(&scenes).unwrap() };
        let before: Vec<Vec<u8>> = ck.net.store.entries().map(|(_, e)| e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
        let scheme = ClassScheme::six_class();
        let a = linear_probe(&ck, &scenes[..4], &scenes[4..], &cfg, &scheme).unwrap();
        let after: Vec<Vec<u8>> = ck.net.store.entries().map(|(_, e)| e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
        assert_eq!(before, after);
        let b = linear_probe(&ck, &scenes[..4], &scenes[4..], &cfg, &scheme).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.test_report, b.test_report);
    }

    #[test]
    fn installed_classifier_predicts_like_the_probe() {
        let scenes = generate_synthetic(8, 3, 16, 0.0).unwrap();
        let mut cfg = RunConfig::desk();
        cfg.train.linear.epochs = 5;
        let net_cfg = NetworkConfig { fusion_mode: FusionMode::PixEF, width_mult: 0.125, ..Default::default() };
        let mut ck = Checkpoint { net: Network::build(&net_cfg, 2).unwrap(), seed: 2, epoch: 0, input_norm: compute_norm(&scenes).unwrap() };
        let scheme = ClassScheme::six_class();
        let r = linear_probe(&ck, &scenes, &[], &cfg, &scheme).unwrap();
        r.classifier.install(&mut ck.net, 0).unwrap();
        let prepared: Vec<Prepared> = scenes.iter().map(|s| Prepared::new(s, &ck.input_norm).unwrap()).collect();
        let feats = extract_features(&ck.net, &prepared, 4).unwrap();
        let direct: Vec<Vec<u8>> = feats.iter().map(|f| r.classifier.predict(f)).collect();
        let through_net = predict(&ck.net, &prepared, 4).unwrap();
        let agree: usize = direct.iter().zip(&through_net).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count()).sum();
        // the folded weights only reorder float roundings
        assert!(agree as f64 >= 0.999 * (3 * 256) as f64, "{agree}");
    }

    #[test]
    fn capped_labels_keep_cap_per_class() {
        let labels: Vec<u8> = (0..100).map(|p| if p < 60 { 0 } else if p < 95 { 1 } else { 2 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let capped = cap_labels(&labels, 10, 10, 10, &mut rng);
        let count = |c: u8| capped.iter().filter(|&&v| v == c).count();
        assert_eq!((count(0), count(1), count(2)), (10, 10, 0));
    }
}
