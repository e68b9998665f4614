//! ResUnet backbones for early, intermediate and late SAR/optical fusion,
//! the 1x1 projector, image-level heads, and checkpoints.
//!
//! Activations are `[C, N, H, W]`. The encoder is a ResNet-18 stem (7x7,
//! stride 2) followed by three residual stages of two basic blocks; the
//! decoder upsamples three times, concatenating the stage-2 and stage-1
//! outputs on the way, so dense features come out at input resolution.
//! The image-level baseline has no decoder; its dense features are the
//! stem and stage outputs upsampled to input resolution and concatenated.

use std::fs;
use std::path::Path;

use pixfuse_nn::{kaiming_normal, uniform_fan_in, Float, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scenedata::{read_f32_le, write_f32_le, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Early fusion: one network on the stacked SAR and optical bands.
    PixEF,
    /// Intermediate fusion: separate SAR and optical encoder groups with a
    /// shared decoder.
    PixIF,
    /// Late fusion: independent SAR and optical networks.
    PixLF,
    /// Image-level cross-modal baseline on the intermediate-fusion encoders.
    Mcl,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pixef" => Ok(FusionMode::PixEF),
            "pixif" => Ok(FusionMode::PixIF),
            "pixlf" => Ok(FusionMode::PixLF),
            "mcl" => Ok(FusionMode::Mcl),
            other => Err(config_err!("unknown fusion mode {other:?}")),
        }
    }
}

/// Inputs an early-fusion network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Both,
    Sar,
    Optical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub fusion_mode: FusionMode,
    pub width_mult: f64,
    pub in_channels_sar: usize,
    pub in_channels_opt: usize,
    /// Projected feature channels at width 1.
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub modality: Modality,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            fusion_mode: FusionMode::PixIF,
            width_mult: 0.25,
            in_channels_sar: 2,
            in_channels_opt: 5,
            feature_dim: 256,
            proj_dim: 64,
            modality: Modality::Both,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(config_err!("width_mult must be positive"));
        }
        if self.in_channels_sar == 0 || self.in_channels_opt == 0 || self.proj_dim == 0 || self.feature_dim == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.modality != Modality::Both && self.fusion_mode != FusionMode::PixEF {
            return Err(config_err!("single-modality input is only defined for early fusion"));
        }
        Ok(())
    }

    /// Full-width channel count for a width-1 count, rounded to an even
    /// number so that half-width branches split it exactly.
    pub fn width(&self, base: usize) -> usize {
        2 * ((base as f64 * self.width_mult / 2.0).round() as usize).max(1)
    }

    /// Channels of the dense feature map used downstream.
    pub fn out_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Mcl => ENC_WIDTHS.iter().map(|&c| self.width(c)).sum(),
            _ => self.width(self.feature_dim),
        }
    }
}

/// Conv (no bias) followed by batch normalisation.
#[derive(Debug, Clone)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    stride: usize,
    pad: usize,
}

const BN_EPS: f64 = 1e-5;

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Builder<'_, T> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let w = self.store.add(format!("{name}.conv.weight"), kaiming_normal(&[cout, cin, k, k], cin * k * k, &mut self.rng), ParamKind::Weight);
        let (gamma, beta, mean, var) = self.bn(name, cout);
        ConvBn { w, gamma, beta, mean, var, stride, pad: k / 2 }
    }

    fn bn(&mut self, name: &str, c: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let s = &mut self.store;
        (
            s.add(format!("{name}.bn.weight"), Tensor::full(&[c], T::one()), ParamKind::Weight),
            s.add(format!("{name}.bn.bias"), Tensor::zeros(&[c]), ParamKind::Weight),
            s.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            s.add(format!("{name}.bn.running_var"), Tensor::full(&[c], T::one()), ParamKind::Buffer),
        )
    }

    /// Weight `[out, in]` plus bias, both uniform in `+-1/sqrt(in)`.
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.store.add(format!("{name}.weight"), uniform_fan_in(&[dout, din], din, &mut self.rng), ParamKind::Weight);
        let b = self.store.add(format!("{name}.bias"), uniform_fan_in(&[dout], din, &mut self.rng), ParamKind::Weight);
        Linear { w, b }
    }

    fn conv1x1(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.store.add(format!("{name}.weight"), uniform_fan_in(&[dout, din, 1, 1], din, &mut self.rng), ParamKind::Weight);
        let b = self.store.add(format!("{name}.bias"), uniform_fan_in(&[dout], din, &mut self.rng), ParamKind::Weight);
        Linear { w, b }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> BasicBlock {
        BasicBlock {
            c1: self.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride),
            c2: self.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1),
            down: (stride != 1 || cin != cout).then(|| self.conv_bn(&format!("{name}.downsample"), cin, cout, 1, stride)),
        }
    }

    fn encoder(&mut self, name: &str, cin: usize, widths: [usize; 4]) -> Encoder {
        let stem = self.conv_bn(&format!("{name}.stem"), cin, widths[0], 7, 2);
        let mut stages = Vec::new();
        let mut c = widths[0];
        for (s, &(cout, stride)) in [(widths[1], 1), (widths[2], 2), (widths[3], 2)].iter().enumerate() {
            let b0 = self.block(&format!("{name}.layer{}.0", s + 1), c, cout, stride);
            let b1 = self.block(&format!("{name}.layer{}.1", s + 1), cout, cout, 1);
            stages.push([b0, b1]);
            c = cout;
        }
        Encoder { stem, stages }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    c1: ConvBn,
    c2: ConvBn,
    down: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: ConvBn,
    stages: Vec<[BasicBlock; 2]>,
}

/// Which raw inputs feed an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Sar,
    Optical,
    Both,
}

#[derive(Debug, Clone)]
struct Unet {
    encoders: Vec<(Encoder, Source)>,
    decoder: Option<([ConvBn; 3], Linear)>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Heads {
    fused: Option<Linear>,
    sar: Option<Linear>,
    opt: Option<Linear>,
}

/// Parameters plus the layer wiring of one fusion architecture.
#[derive(Debug, Clone)]
pub struct Network<T: Float> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    unets: Vec<Unet>,
    heads: Heads,
    classifier: Option<Linear>,
}

/// Everything a forward pass can produce; absent entries do not apply to
/// the fusion mode or were not requested.
#[derive(Debug, Clone, Default)]
pub struct NetOutput {
    /// Dense features `[F, N, H, W]` used downstream.
    pub dense: Option<Var>,
    /// Late fusion: the SAR and optical branch features before concatenation.
    pub dense_sar: Option<Var>,
    pub dense_opt: Option<Var>,
    /// `[N, proj_dim]` embedding of the whole encoder.
    pub emb_fused: Option<Var>,
    pub emb_sar: Option<Var>,
    pub emb_opt: Option<Var>,
}

/// Stage widths of the encoder at width 1.
const ENC_WIDTHS: [usize; 4] = [64, 64, 128, 256];
/// Decoder block widths at width 1.
const DEC_WIDTHS: [usize; 3] = [128, 64, 64];

impl<T: Float> Network<T> {
    /// Deterministic initialisation from `seed`.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let full = ENC_WIDTHS.map(|c| cfg.width(c));
        let half = full.map(|c| c / 2);
        let dec_full = DEC_WIDTHS.map(|c| cfg.width(c));
        let (cs, co) = (cfg.in_channels_sar, cfg.in_channels_opt);
        let fd = cfg.out_channels();
        let mut heads = Heads::default();
        let unets = match cfg.fusion_mode {
            FusionMode::PixEF => {
                let (cin, src) = match cfg.modality {
                    Modality::Both => (cs + co, Source::Both),
                    Modality::Sar => (cs, Source::Sar),
                    Modality::Optical => (co, Source::Optical),
                };
                let enc = b.encoder("enc", cin, full);
                let unet = unet(&mut b, "", vec![(enc, src)], full, dec_full, fd);
                heads.fused = Some(b.linear("head.fused", full[3], cfg.proj_dim));
                vec![unet]
            }
            FusionMode::PixIF | FusionMode::Mcl => {
                let sar = b.encoder("enc.sar", cs, half);
                let opt = b.encoder("enc.opt", co, half);
                let encoders = vec![(sar, Source::Sar), (opt, Source::Optical)];
                let unet = if cfg.fusion_mode == FusionMode::Mcl {
                    Unet { encoders, decoder: None }
                } else {
                    unet(&mut b, "", encoders, full, dec_full, fd)
                };
                heads.sar = Some(b.linear("head.sar", half[3], cfg.proj_dim));
                heads.opt = Some(b.linear("head.opt", half[3], cfg.proj_dim));
                if cfg.fusion_mode == FusionMode::PixIF {
                    heads.fused = Some(b.linear("head.fused", full[3], cfg.proj_dim));
                }
                vec![unet]
            }
            FusionMode::PixLF => {
                let dec_half = dec_full.map(|c| c / 2);
                let sar_enc = b.encoder("sar.enc", cs, half);
                let sar = unet(&mut b, "sar.", vec![(sar_enc, Source::Sar)], half, dec_half, fd / 2);
                let opt_enc = b.encoder("opt.enc", co, half);
                let opt = unet(&mut b, "opt.", vec![(opt_enc, Source::Optical)], half, dec_half, fd / 2);
                heads.sar = Some(b.linear("head.sar", half[3], cfg.proj_dim));
                heads.opt = Some(b.linear("head.opt", half[3], cfg.proj_dim));
                vec![sar, opt]
            }
        };
        Ok(Network { cfg: *cfg, store, unets, heads, classifier: None })
    }

    /// Adds (or replaces nothing if present) a per-pixel linear classifier.
    pub fn ensure_classifier(&mut self, num_classes: usize, seed: u64) {
        if self.classifier.is_some() {
            return;
        }
        let fd = self.cfg.out_channels();
        let mut b = Builder { store: &mut self.store, rng: ChaCha8Rng::seed_from_u64(seed) };
        self.classifier = Some(b.conv1x1("classifier", fd, num_classes));
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    pub fn classifier_ids(&self) -> Option<(ParamId, ParamId)> {
        self.classifier.map(|c| (c.w, c.b))
    }

    /// Parameter names of the encoders.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("sar.enc.") || name.starts_with("opt.enc.")
    }

    /// Feature extractor parameters, i.e. everything but the classifier.
    pub fn is_backbone_param(name: &str) -> bool {
        !name.starts_with("classifier.")
    }

    fn conv_bn(&self, g: &mut Graph<T>, x: Var, l: &ConvBn) -> Var {
        let w = g.param(&self.store, l.w);
        let y = g.conv2d(x, w, None, l.stride, l.pad);
        let gamma = g.param(&self.store, l.gamma);
        let beta = g.param(&self.store, l.beta);
        g.batch_norm(y, gamma, beta, &self.store, l.mean, l.var, BN_EPS)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, b: &BasicBlock) -> Var {
        let y = self.conv_bn(g, x, &b.c1);
        let y = g.relu(y);
        let y = self.conv_bn(g, y, &b.c2);
        let shortcut = match &b.down {
            Some(d) => self.conv_bn(g, x, d),
            None => x,
        };
        let s = g.add(y, shortcut);
        g.relu(s)
    }

    /// Stem, stage-1, stage-2 and stage-3 outputs.
    fn encode(&self, g: &mut Graph<T>, x: Var, e: &Encoder) -> [Var; 4] {
        let y = self.conv_bn(g, x, &e.stem);
        let mut y = g.relu(y);
        let mut out = vec![y];
        for stage in &e.stages {
            for b in stage {
                y = self.block(g, y, b);
            }
            out.push(y);
        }
        [out[0], out[1], out[2], out[3]]
    }

    fn decode(&self, g: &mut Graph<T>, levels: [Var; 4], decoder: &[ConvBn; 3], projector: &Linear) -> Var {
        let [_, s1, s2, bottom] = levels;
        let up = g.upsample2x(bottom);
        let x = g.concat_channels(&[up, s2]);
        let x = self.conv_bn(g, x, &decoder[0]);
        let x = g.relu(x);
        let up = g.upsample2x(x);
        let x = g.concat_channels(&[up, s1]);
        let x = self.conv_bn(g, x, &decoder[1]);
        let x = g.relu(x);
        let up = g.upsample2x(x);
        let x = self.conv_bn(g, up, &decoder[2]);
        let x = g.relu(x);
        let w = g.param(&self.store, projector.w);
        let b = g.param(&self.store, projector.b);
        g.conv2d(x, w, Some(b), 1, 0)
    }

    /// Every level brought to input resolution and stacked on channels.
    fn multilevel(&self, g: &mut Graph<T>, levels: [Var; 4]) -> Var {
        let mut parts = Vec::with_capacity(4);
        for (k, mut v) in levels.into_iter().enumerate() {
            // stem and stage 1 run at half resolution, each later stage halves again
            for _ in 0..k.max(1) {
                v = g.upsample2x(v);
            }
            parts.push(v);
        }
        g.concat_channels(&parts)
    }

    fn head(&self, g: &mut Graph<T>, x: Var, h: &Linear) -> Var {
        let pooled = g.global_avg_pool(x);
        let w = g.param(&self.store, h.w);
        let b = g.param(&self.store, h.b);
        g.linear(pooled, w, Some(b))
    }

    fn check_input(&self, g: &Graph<T>, sar: Var, opt: Var) -> Result<()> {
        let (s, o) = (g.shape(sar), g.shape(opt));
        if s.len() != 4 || o.len() != 4 || s[1..] != o[1..] {
            return Err(Error::Shape(format!("SAR {s:?} and optical {o:?} inputs must be [C, N, H, W] with equal N, H, W")));
        }
        if s[0] != self.cfg.in_channels_sar || o[0] != self.cfg.in_channels_opt {
            return Err(Error::Shape(format!("expected {} SAR and {} optical channels", self.cfg.in_channels_sar, self.cfg.in_channels_opt)));
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} must be divisible by 8")));
        }
        Ok(())
    }

    /// Runs the network on normalised `[C, N, H, W]` SAR and optical inputs.
    /// `dense` selects the decoder path; without it only embeddings are
    /// computed.
    pub fn forward(&self, g: &mut Graph<T>, sar: Var, opt: Var, dense: bool) -> Result<NetOutput> {
        self.check_input(g, sar, opt)?;
        let mut out = NetOutput::default();
        let mut branch_dense = Vec::new();
        for u in &self.unets {
            let mut levels: Vec<[Var; 4]> = Vec::new();
            for (enc, src) in &u.encoders {
                let x = match src {
                    Source::Sar => sar,
                    Source::Optical => opt,
                    Source::Both => g.concat_channels(&[sar, opt]),
                };
                let l = self.encode(g, x, enc);
                match (src, self.unets.len()) {
                    (Source::Sar, _) => out.emb_sar = self.heads.sar.map(|h| self.head(g, l[3], &h)),
                    (Source::Optical, _) => out.emb_opt = self.heads.opt.map(|h| self.head(g, l[3], &h)),
                    (Source::Both, _) => {}
                }
                levels.push(l);
            }
            let merged: [Var; 4] = if levels.len() == 1 {
                levels[0]
            } else {
                std::array::from_fn(|k| {
                    let parts: Vec<Var> = levels.iter().map(|l| l[k]).collect();
                    g.concat_channels(&parts)
                })
            };
            if let Some(h) = self.heads.fused {
                out.emb_fused = Some(self.head(g, merged[3], &h));
            }
            if dense {
                let d = match &u.decoder {
                    Some((dec, proj)) => self.decode(g, merged, dec, proj),
                    None => self.multilevel(g, merged),
                };
                branch_dense.push(d);
            }
        }
        if dense {
            if branch_dense.len() == 2 {
                out.dense_sar = Some(branch_dense[0]);
                out.dense_opt = Some(branch_dense[1]);
                out.dense = Some(g.concat_channels(&branch_dense));
            } else {
                out.dense = Some(branch_dense[0]);
            }
        }
        Ok(out)
    }

    /// Per-pixel class logits `[K, N, H, W]` from dense features.
    pub fn classify(&self, g: &mut Graph<T>, dense: Var) -> Result<Var> {
        let c = self.classifier.ok_or_else(|| Error::Pipeline("network has no classifier".into()))?;
        let w = g.param(&self.store, c.w);
        let b = g.param(&self.store, c.b);
        Ok(g.conv2d(dense, w, Some(b), 1, 0))
    }

    /// Inference-mode dense features of a batch, `[F, N, H, W]`.
    pub fn forward_dense(&self, sar: Tensor<T>, opt: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(false);
        let (s, o) = (g.constant(sar), g.constant(opt));
        let out = self.forward(&mut g, s, o, true)?;
        Ok(g.value(out.dense.expect("dense requested")).clone())
    }

    /// Inference-mode embeddings of a batch: (fused, SAR, optical).
    pub fn forward_global(&self, sar: Tensor<T>, opt: Tensor<T>) -> Result<[Option<Tensor<T>>; 3]> {
        let mut g = Graph::new(false);
        let (s, o) = (g.constant(sar), g.constant(opt));
        let out = self.forward(&mut g, s, o, false)?;
        Ok([out.emb_fused, out.emb_sar, out.emb_opt].map(|v| v.map(|v| g.value(v).clone())))
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network { cfg: self.cfg, store: self.store.cast(), unets: self.unets.clone(), heads: self.heads, classifier: self.classifier }
    }
}

fn unet<T: Float>(
    b: &mut Builder<'_, T>,
    prefix: &str,
    encoders: Vec<(Encoder, Source)>,
    enc: [usize; 4],
    dec: [usize; 3],
    feature_dim: usize,
) -> Unet {
    let decoder = [
        b.conv_bn(&format!("{prefix}dec.block1"), enc[3] + enc[2], dec[0], 3, 1),
        b.conv_bn(&format!("{prefix}dec.block2"), dec[0] + enc[1], dec[1], 3, 1),
        b.conv_bn(&format!("{prefix}dec.block3"), dec[1], dec[2], 3, 1),
    ];
    let projector = b.conv1x1(&format!("{prefix}proj"), dec[2], feature_dim);
    Unet { encoders, decoder: Some((decoder, projector)) }
}

/// Per-channel input normalisation stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub sar_mean: Vec<f32>,
    pub sar_std: Vec<f32>,
    pub opt_mean: Vec<f32>,
    pub opt_std: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: NetworkConfig,
    seed: u64,
    epoch: usize,
    num_classes: Option<usize>,
    input_norm: InputNorm,
    params: Vec<ParamRecord>,
}

/// A network with the metadata needed to resume or reuse it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub seed: u64,
    pub epoch: usize,
    pub input_norm: InputNorm,
}

impl Checkpoint {
    /// Writes `manifest.json` and one little-endian f32 blob per parameter
    /// under `params/`, named after the parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut params = Vec::new();
        for (_, entry) in self.net.store.entries() {
            let file = format!("params/{}.bin", entry.name);
            write_f32_le(&dir.join(&file), entry.value.data())?;
            params.push(ParamRecord {
                name: entry.name.clone(),
                shape: entry.value.shape().to_vec(),
                buffer: entry.kind == ParamKind::Buffer,
                file,
            });
        }
        let manifest = CheckpointManifest {
            format_version: 1,
            config: self.net.cfg,
            seed: self.seed,
            epoch: self.epoch,
            num_classes: self.net.classifier.map(|c| self.net.store.get(c.b).numel()),
            input_norm: self.input_norm.clone(),
            params,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if m.format_version != 1 {
            return Err(Error::format(&mpath, format!("unsupported format_version {}", m.format_version)));
        }
        let mut net = Network::<f32>::build(&m.config, m.seed)?;
        if let Some(k) = m.num_classes {
            net.ensure_classifier(k, m.seed);
        }
        if m.params.len() != net.store.len() {
            return Err(Error::format(&mpath, format!("{} parameters listed, architecture has {}", m.params.len(), net.store.len())));
        }
        for rec in &m.params {
            let id = net.store.id(&rec.name).ok_or_else(|| Error::format(&mpath, format!("unknown parameter {}", rec.name)))?;
            if net.store.get(id).shape() != rec.shape.as_slice() {
                return Err(Error::format(&mpath, format!("parameter {} has shape {:?}", rec.name, rec.shape)));
            }
            let data = read_f32_le(&dir.join(&rec.file), rec.shape.iter().product())?;
            *net.store.get_mut(id) = Tensor::new(rec.shape.clone(), data);
        }
        Ok(Checkpoint { net, seed: m.seed, epoch: m.epoch, input_norm: m.input_norm })
    }
}
