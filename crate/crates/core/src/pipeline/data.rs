//! Input normalisation, batch assembly and batched inference.

use pixfuse_nn::{Float, Graph, Tensor};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusionnet::{InputNorm, Network};
use crate::scenedata::{derive_seed, generate_synthetic, load_dataset, split_dataset, Raster, Scene};

const DATA_STREAM: u64 = 0xDA7A;
const SPLIT_STREAM: u64 = 0x5917;

/// Scenes of `data.root`, or a synthetic set derived from the run seed.
pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let d = &cfg.data;
    let scenes = match &d.root {
        Some(root) => load_dataset(root)?,
        None => generate_synthetic(derive_seed(cfg.seed, DATA_STREAM), d.n_scenes, d.size, d.cloud_fraction)?,
    };
    if scenes.is_empty() {
        return Err(Error::Pipeline("the dataset holds no scenes".into()));
    }
    Ok(scenes)
}

/// Training scenes and held-out test scenes. Probe and self-training
/// scenes are drawn from the training part; the test part is never seen
/// during training.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Splits {
    pub fn new(scenes: &[Scene], cfg: &RunConfig) -> Result<Self> {
        let f = cfg.data.test_fraction;
        let mut parts = split_dataset(scenes, derive_seed(cfg.seed, SPLIT_STREAM), &[1.0 - f, f])?;
        let test = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        if train.len() < 2 {
            return Err(Error::Pipeline(format!("only {} training scenes after the split", train.len())));
        }
        Ok(Self { train, test })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Self::new(&load_scenes(cfg)?, cfg)
    }

    /// The labelled scenes of the linear probe.
    pub fn probe(&self, cfg: &RunConfig) -> &[Scene] {
        &self.train[..cfg.data.probe_scenes.min(self.train.len())]
    }
}

/// Per-channel mean and standard deviation of a raster set.
fn channel_stats<'a>(rasters: impl Iterator<Item = &'a Raster>, channels: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for r in rasters {
        for c in 0..channels {
            for &v in r.plane(c) {
                sum[c] += v as f64;
                sq[c] += v as f64 * v as f64;
            }
        }
        count += r.pixels();
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

/// Normalisation statistics of a training set.
pub fn compute_norm(scenes: &[Scene]) -> Result<InputNorm> {
    let first = scenes.first().ok_or_else(|| Error::Pipeline("no scenes to normalise".into()))?;
    let (cs, co) = (first.sar.channels, first.optical.channels);
    if scenes.iter().any(|s| s.sar.channels != cs || s.optical.channels != co) {
        return Err(Error::Shape("scenes disagree on channel counts".into()));
    }
    let (sar_mean, sar_std) = channel_stats(scenes.iter().map(|s| &s.sar), cs);
    let (opt_mean, opt_std) = channel_stats(scenes.iter().map(|s| &s.optical), co);
    Ok(InputNorm { sar_mean, sar_std, opt_mean, opt_std })
}

/// Normalised planes of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub height: usize,
    pub width: usize,
    /// `[C_sar, H, W]`.
    pub sar: Vec<f32>,
    /// `[C_opt, H, W]`.
    pub opt: Vec<f32>,
}

impl Prepared {
    pub fn new(scene: &Scene, norm: &InputNorm) -> Result<Self> {
        if scene.sar.channels != norm.sar_mean.len() || scene.optical.channels != norm.opt_mean.len() {
            return Err(Error::Shape(format!("scene {} does not match the normalisation channels", scene.id)));
        }
        let apply = |r: &Raster, mean: &[f32], std: &[f32]| {
            let mut out = Vec::with_capacity(r.data.len());
            for c in 0..r.channels {
                out.extend(r.plane(c).iter().map(|&v| (v - mean[c]) / std[c]));
            }
            out
        };
        Ok(Self {
            height: scene.height(),
            width: scene.width(),
            sar: apply(&scene.sar, &norm.sar_mean, &norm.sar_std),
            opt: apply(&scene.optical, &norm.opt_mean, &norm.opt_std),
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Stacks `[C, H, W]` images into a `[C, N, H, W]` tensor.
pub fn stack<T: Float>(images: &[&[f32]], channels: usize, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let n = images.len();
    let mut data = Vec::with_capacity(channels * n * plane);
    for c in 0..channels {
        for img in images {
            data.extend(img[c * plane..(c + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(vec![channels, n, h, w], data)
}

/// Splits a `[C, N, H, W]` tensor into per-sample `[C, H*W]` vectors.
pub fn unstack<T: Float>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    let s = t.shape();
    let (c, n, plane) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    (0..n)
        .map(|b| {
            let mut out = Vec::with_capacity(c * plane);
            for ch in 0..c {
                out.extend(d[(ch * n + b) * plane..(ch * n + b + 1) * plane].iter().map(|v| v.as_f64() as f32));
            }
            out
        })
        .collect()
}

/// Input tensors of a batch of prepared scenes.
pub fn batch_inputs<T: Float>(items: &[&Prepared], c_sar: usize, c_opt: usize) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (items[0].height, items[0].width);
    let sar: Vec<&[f32]> = items.iter().map(|p| p.sar.as_slice()).collect();
    let opt: Vec<&[f32]> = items.iter().map(|p| p.opt.as_slice()).collect();
    (stack(&sar, c_sar, h, w), stack(&opt, c_opt, h, w))
}

/// Inference-mode dense features, `[F, H*W]` per scene.
pub fn extract_features(net: &Network<f32>, items: &[Prepared], batch: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let (s, o) = batch_inputs(&refs, net.cfg.in_channels_sar, net.cfg.in_channels_opt);
        out.extend(unstack(&net.forward_dense(s, o)?));
    }
    Ok(out)
}

/// Per-pixel arg-max of the network's classifier.
pub fn predict(net: &Network<f32>, items: &[Prepared], batch: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let (s, o) = batch_inputs::<f32>(&refs, net.cfg.in_channels_sar, net.cfg.in_channels_opt);
        let mut g = Graph::new(false);
        let (sv, ov) = (g.constant(s), g.constant(o));
        let feats = net.forward(&mut g, sv, ov, true)?.dense.expect("dense requested");
        let logits = net.classify(&mut g, feats)?;
        out.extend(unstack(g.value(logits)).into_iter().map(|l| argmax_channels(&l, refs[0].pixels())));
    }
    Ok(out)
}

/// Class index of the largest value per pixel of a `[K, P]` map; ties take
/// the lower class.
pub fn argmax_channels(logits: &[f32], pixels: usize) -> Vec<u8> {
    let k = logits.len() / pixels;
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if logits[c * pixels + p] > logits[best * pixels + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenedata::generate_synthetic;

    #[test]
    fn normalised_training_set_is_standard() {
        let scenes = generate_synthetic(3, 4, 16, 0.0).unwrap();
        let norm = compute_norm(&scenes).unwrap();
        let prepared: Vec<Prepared> = scenes.iter().map(|s| Prepared::new(s, &norm).unwrap()).collect();
        for c in 0..5 {
            let vals: Vec<f64> = prepared.iter().flat_map(|p| p.opt[c * 256..(c + 1) * 256].iter().map(|&v| v as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3, "channel {c}: {mean} {var}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_repeatable() {
        let mut cfg = RunConfig::desk();
        cfg.data.n_scenes = 12;
        cfg.data.size = 16;
        cfg.data.probe_scenes = 4;
        let a = Splits::load(&cfg).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (9, 3));
        assert!(a.test.iter().all(|t| a.train.iter().all(|s| s.id != t.id)));
        assert_eq!(a.probe(&cfg).len(), 4);
        let b = Splits::load(&cfg).unwrap();
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn stack_unstack_round_trip() {
        let a: Vec<f32> = (0..2 * 64).map(|v| v as f32).collect();
        let b: Vec<f32> = (0..2 * 64).map(|v| -(v as f32)).collect();
        let t = stack::<f64>(&[&a, &b], 2, 8, 8);
        assert_eq!(t.shape(), &[2, 2, 8, 8]);
        assert_eq!(t.data()[64], b[0] as f64);
        assert_eq!(unstack(&t), vec![a, b]);
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        assert_eq!(argmax_channels(&[1.0, 0.0, 1.0, 2.0], 2), vec![0, 1]);
    }
}
