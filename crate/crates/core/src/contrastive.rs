//! Contrastive objectives: the temperature-scaled cosine score, InfoNCE over
//! matched rows, SLIC superpixels with overlap-restricted pooling, and the
//! composite losses of the three fusion modes.

use pixfuse_nn::{Float, Function, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fusionnet::FusionMode;
use crate::scenedata::Raster;

/// Which rows act as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativesScope {
    /// Every other row of the batch.
    #[default]
    Batch,
    /// Only rows from the anchor's own image.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Superpixel-level term.
    pub pixel: f64,
    /// Image-level term between the two views or branches.
    pub image: f64,
    /// Intermediate-fusion term on the concatenated group embeddings.
    pub image_fused: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pixel: 1.0, image: 1.0, image_fused: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub superpixels_per_tile: usize,
    /// Fraction of a segment that must lie in the overlap for it to count.
    pub segment_overlap_min_frac: f64,
    pub negatives_scope: NegativesScope,
    pub loss_weights: LossWeights,
    /// Weight of the spatial term in SLIC, in reflectance units.
    pub slic_compactness: f64,
    pub slic_iterations: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            superpixels_per_tile: 64,
            segment_overlap_min_frac: 0.5,
            negatives_scope: NegativesScope::Batch,
            loss_weights: LossWeights::default(),
            slic_compactness: 0.05,
            slic_iterations: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("tau must be positive"));
        }
        if self.superpixels_per_tile < 2 {
            return Err(config_err!("superpixels_per_tile must be at least 2"));
        }
        if !(self.segment_overlap_min_frac > 0.0 && self.segment_overlap_min_frac <= 1.0) {
            return Err(config_err!("segment_overlap_min_frac must lie in (0, 1]"));
        }
        let w = self.loss_weights;
        if [w.pixel, w.image, w.image_fused].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(config_err!("loss weights must be finite and non-negative"));
        }
        if self.slic_compactness <= 0.0 || self.slic_iterations == 0 {
            return Err(config_err!("SLIC needs positive compactness and iterations"));
        }
        Ok(())
    }
}

/// `exp(cos(f1, f2) / tau)`.
pub fn pair_score(f1: &[f64], f2: &[f64], tau: f64) -> Result<f64> {
    let n1 = f1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = f2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Numerical("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = f1.iter().zip(f2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2) / tau).exp())
}

/// Forward state of one InfoNCE evaluation, reused by the backward pass.
struct NceState<T> {
    loss: T,
    /// Unit-normalised anchors and positives, `[n, d]`.
    a_hat: Vec<T>,
    p_hat: Vec<T>,
    a_norm: Vec<T>,
    p_norm: Vec<T>,
    /// Softmax over candidates per anchor, `[n, n]`, zero outside the scope.
    probs: Vec<T>,
}

fn normalise_rows<T: Float>(x: &[T], d: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut hat = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in hat.chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::Numerical("cosine of a zero-norm or non-finite vector".into()));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((hat, norms))
}

fn nce_forward<T: Float>(a: &[T], p: &[T], d: usize, tau: f64, groups: Option<&[u32]>) -> Result<NceState<T>> {
    let n = a.len() / d;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("InfoNCE needs at least 2 rows, got {n}")));
    }
    let (a_hat, a_norm) = normalise_rows(a, d)?;
    let (p_hat, p_norm) = normalise_rows(p, d)?;
    let inv_tau = T::from_f64(1.0 / tau);
    let mut probs = vec![T::zero(); n * n];
    let mut total = 0.0f64;
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        let ai = &a_hat[i * d..(i + 1) * d];
        let mut max = T::neg_infinity();
        for j in 0..n {
            if groups.is_some_and(|g| g[j] != g[i]) {
                continue;
            }
            let s = ai.iter().zip(&p_hat[j * d..(j + 1) * d]).map(|(&x, &y)| x * y).sum::<T>() * inv_tau;
            logits[j] = s;
            max = max.max(s);
        }
        let mut z = T::zero();
        for j in 0..n {
            if groups.is_some_and(|g| g[j] != g[i]) {
                continue;
            }
            let e = (logits[j] - max).exp();
            probs[i * n + j] = e;
            z += e;
        }
        for j in 0..n {
            probs[i * n + j] /= z;
        }
        // -log softmax of the matched pair
        total += (max + z.ln() - logits[i]).as_f64();
    }
    Ok(NceState { loss: T::from_f64(total / n as f64), a_hat, p_hat, a_norm, p_norm, probs })
}

/// Mean over anchors of `-log(score(a_i, p_i) / sum_j score(a_i, p_j))` on
/// `n x d` row-major inputs, stabilised by the row maximum.
pub fn info_nce(anchors: &[f64], positives: &[f64], d: usize, tau: f64) -> Result<f64> {
    check_nce_inputs(anchors.len(), positives.len(), d, tau)?;
    Ok(nce_forward(anchors, positives, d, tau, None)?.loss)
}

fn check_nce_inputs(na: usize, np: usize, d: usize, tau: f64) -> Result<()> {
    if d == 0 || na != np || na % d != 0 {
        return Err(Error::Shape("anchors and positives must both be [n, d]".into()));
    }
    if !(tau > 0.0) {
        return Err(config_err!("tau must be positive"));
    }
    Ok(())
}

struct InfoNce<T> {
    state: NceState<T>,
    n: usize,
    d: usize,
    tau: f64,
}

impl<T: Float> Function<T> for InfoNce<T> {
    fn name(&self) -> &'static str {
        "info_nce"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (n, d) = (self.n, self.d);
        let s = &self.state;
        // dL/dlogit_ij = (softmax_ij - [i == j]) / n, chained through 1 / tau
        let scale = grad.item() / T::from_f64(n as f64 * self.tau);
        let mut g = s.probs.clone();
        for i in 0..n {
            g[i * n + i] -= T::one();
        }
        for v in &mut g {
            *v *= scale;
        }
        let mut da_hat = vec![T::zero(); n * d];
        let mut dp_hat = vec![T::zero(); n * d];
        pixfuse_nn::gemm(false, false, n, d, n, T::one(), &g, &s.p_hat, T::zero(), &mut da_hat);
        pixfuse_nn::gemm(true, false, n, d, n, T::one(), &g, &s.a_hat, T::zero(), &mut dp_hat);
        let through_norm = |hat: &[T], dhat: &[T], norms: &[T]| -> Vec<T> {
            let mut out = vec![T::zero(); n * d];
            for r in 0..n {
                let h = &hat[r * d..(r + 1) * d];
                let gh = &dhat[r * d..(r + 1) * d];
                let dot = h.iter().zip(gh).map(|(&x, &y)| x * y).sum::<T>();
                for k in 0..d {
                    out[r * d + k] = (gh[k] - h[k] * dot) / norms[r];
                }
            }
            out
        };
        vec![
            needs[0].then(|| Tensor::new(vec![n, d], through_norm(&s.a_hat, &da_hat, &s.a_norm))),
            needs[1].then(|| Tensor::new(vec![n, d], through_norm(&s.p_hat, &dp_hat, &s.p_norm))),
        ]
    }
}

/// InfoNCE on `[n, d]` graph values. With `groups`, anchor `i` only
/// competes against rows of the same group.
pub fn info_nce_var<T: Float>(g: &mut Graph<T>, anchors: Var, positives: Var, tau: f64, groups: Option<&[u32]>) -> Result<Var> {
    let shape = g.shape(anchors).to_vec();
    if shape.len() != 2 || g.shape(positives) != shape.as_slice() {
        return Err(Error::Shape(format!("InfoNCE inputs {:?} and {:?}", shape, g.shape(positives))));
    }
    let (n, d) = (shape[0], shape[1]);
    check_nce_inputs(n * d, n * d, d, tau)?;
    if let Some(gr) = groups {
        if gr.len() != n {
            return Err(Error::Shape("one group id per row is required".into()));
        }
    }
    let state = nce_forward(g.value(anchors).data(), g.value(positives).data(), d, tau, groups)?;
    let out = Tensor::scalar(state.loss);
    Ok(g.apply(&[anchors, positives], out, Box::new(InfoNce { state, n, d, tau })))
}

/// Superpixel segmentation of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    /// Segment id per pixel, ids cover `0..num_segments`.
    pub ids: Vec<u32>,
    pub num_segments: usize,
}

impl SuperpixelMap {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_segments];
        for &id in &self.ids {
            s[id as usize] += 1;
        }
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_segments];
        for (p, &id) in self.ids.iter().enumerate() {
            m[id as usize].push(p);
        }
        m
    }
}

/// SLIC on the bands of `raster`: local k-means in band + position space
/// from a regular grid of about `k` centres, followed by connectivity
/// enforcement. The returned segment count is close to, not exactly, `k`.
pub fn segment_superpixels(raster: &Raster, k: usize, compactness: f64, iterations: usize) -> Result<SuperpixelMap> {
    let (h, w, c) = (raster.height, raster.width, raster.channels);
    let n = h * w;
    if k == 0 || k > n {
        return Err(config_err!("{k} superpixels requested for a {h}x{w} tile"));
    }
    let gx = ((k as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let gy = ((k as f64 / gx as f64).round() as usize).clamp(1, h);
    let step = (n as f64 / (gx * gy) as f64).sqrt();
    let feature = |p: usize, ch: usize| raster.data[ch * n + p] as f64;

    // centre = [y, x, band...]
    let dim = 2 + c;
    let mut centres = Vec::with_capacity(gx * gy * dim);
    for iy in 0..gy {
        for ix in 0..gx {
            let y = (iy as f64 + 0.5) * h as f64 / gy as f64;
            let x = (ix as f64 + 0.5) * w as f64 / gx as f64;
            let p = (y.floor() as usize).min(h - 1) * w + (x.floor() as usize).min(w - 1);
            centres.push(y);
            centres.push(x);
            centres.extend((0..c).map(|ch| feature(p, ch)));
        }
    }
    let nc = gx * gy;
    let spatial = (compactness / step).powi(2);
    let mut labels = vec![0u32; n];
    let mut best = vec![f64::INFINITY; n];
    let radius = (2.0 * step).ceil() as i64;
    for _ in 0..iterations {
        best.fill(f64::INFINITY);
        for ci in 0..nc {
            let ctr = &centres[ci * dim..(ci + 1) * dim];
            let (cy, cx) = (ctr[0], ctr[1]);
            let (i0, i1) = ((cy as i64 - radius).max(0), (cy as i64 + radius).min(h as i64 - 1));
            let (j0, j1) = ((cx as i64 - radius).max(0), (cx as i64 + radius).min(w as i64 - 1));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let p = i as usize * w + j as usize;
                    let dy = i as f64 + 0.5 - cy;
                    let dx = j as f64 + 0.5 - cx;
                    let mut dc = 0.0;
                    for ch in 0..c {
                        let v = feature(p, ch) - ctr[2 + ch];
                        dc += v * v;
                    }
                    let dist = dc + spatial * (dy * dy + dx * dx);
                    if dist < best[p] {
                        best[p] = dist;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![0.0; nc * dim];
        let mut counts = vec![0usize; nc];
        for p in 0..n {
            let l = labels[p] as usize;
            counts[l] += 1;
            let s = &mut sums[l * dim..(l + 1) * dim];
            s[0] += (p / w) as f64 + 0.5;
            s[1] += (p % w) as f64 + 0.5;
            for ch in 0..c {
                s[2 + ch] += feature(p, ch);
            }
        }
        for ci in 0..nc {
            if counts[ci] > 0 {
                for v in 0..dim {
                    centres[ci * dim + v] = sums[ci * dim + v] / counts[ci] as f64;
                }
            }
        }
    }
    let min_size = ((n / nc) / 4).max(1);
    Ok(enforce_connectivity(&labels, h, w, min_size))
}

/// Relabels 4-connected components, merging those smaller than `min_size`
/// into the neighbouring segment met first in scan order.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> SuperpixelMap {
    let n = h * w;
    let mut out = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..n {
        if out[start] != u32::MAX {
            continue;
        }
        // a labelled neighbour to absorb a small component
        let (si, sj) = (start / w, start % w);
        let adjacent = [(si > 0).then(|| start - w), (sj > 0).then(|| start - 1)]
            .into_iter()
            .flatten()
            .find(|&q| out[q] != u32::MAX)
            .map(|q| out[q]);
        component.clear();
        stack.push(start);
        out[start] = next;
        while let Some(p) = stack.pop() {
            component.push(p);
            let (i, j) = (p / w, p % w);
            let neighbours = [
                (i > 0).then(|| p - w),
                (i + 1 < h).then(|| p + w),
                (j > 0).then(|| p - 1),
                (j + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if out[q] == u32::MAX && labels[q] == labels[start] {
                    out[q] = next;
                    stack.push(q);
                }
            }
        }
        match adjacent {
            Some(a) if component.len() < min_size => {
                for &p in &component {
                    out[p] = a;
                }
            }
            _ => next += 1,
        }
    }
    SuperpixelMap { height: h, width: w, ids: out, num_segments: next as usize }
}

/// Mean features of the superpixels that survive the overlap mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    /// Retained segment ids, ascending.
    pub segments: Vec<u32>,
    /// `[segments.len(), d]`, rows unit-normalised.
    pub rows: Vec<f64>,
    pub dim: usize,
}

/// Segments with at least `min_frac` of their pixels inside `mask`.
pub fn retained_segments(sp: &SuperpixelMap, mask: &[bool], min_frac: f64) -> Vec<u32> {
    let sizes = sp.sizes();
    let mut inside = vec![0usize; sp.num_segments];
    for (p, &id) in sp.ids.iter().enumerate() {
        if mask[p] {
            inside[id as usize] += 1;
        }
    }
    (0..sp.num_segments as u32)
        .filter(|&s| inside[s as usize] > 0 && inside[s as usize] as f64 >= min_frac * sizes[s as usize] as f64)
        .collect()
}

/// Per-segment mean of a `[d, H, W]` feature map over in-mask pixels,
/// then L2-normalised.
pub fn pool_over_superpixels(fm: &[f32], dim: usize, sp: &SuperpixelMap, mask: &[bool], min_frac: f64) -> Result<PooledFeatures> {
    let n = sp.height * sp.width;
    if fm.len() != dim * n || mask.len() != n {
        return Err(Error::Shape("feature map, superpixels and mask disagree".into()));
    }
    let segments = retained_segments(sp, mask, min_frac);
    if segments.is_empty() {
        return Err(Error::DegenerateBatch("no superpixel survives the overlap mask".into()));
    }
    let mut row_of = vec![usize::MAX; sp.num_segments];
    for (r, &s) in segments.iter().enumerate() {
        row_of[s as usize] = r;
    }
    let mut rows = vec![0.0f64; segments.len() * dim];
    let mut counts = vec![0usize; segments.len()];
    for p in 0..n {
        let r = row_of[sp.ids[p] as usize];
        if r == usize::MAX || !mask[p] {
            continue;
        }
        counts[r] += 1;
        for k in 0..dim {
            rows[r * dim + k] += fm[k * n + p] as f64;
        }
    }
    for (r, row) in rows.chunks_mut(dim).enumerate() {
        let inv = 1.0 / counts[r] as f64;
        row.iter_mut().for_each(|v| *v *= inv);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical(format!("segment {} pools to a zero vector", segments[r])));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(PooledFeatures { segments, rows, dim })
}

/// Row assignment for pooling a batch of `[d, N, H, W]` maps in the frame
/// of the transformed view.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    /// Output row per pixel of the batch (`N * H * W`), if any.
    pub row_of_pixel: Vec<Option<u32>>,
    pub counts: Vec<usize>,
    /// Image index of every row.
    pub image_of_row: Vec<u32>,
}

impl PoolPlan {
    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    /// Builds the plan from each image's superpixels and the source map of
    /// its transform (output pixel to original pixel). A segment is kept
    /// when enough of its pixels survive the transform.
    pub fn new(superpixels: &[&SuperpixelMap], source_maps: &[Vec<Option<u32>>], min_frac: f64) -> Result<Self> {
        let mut row_of_pixel = Vec::new();
        let mut counts = Vec::new();
        let mut image_of_row = Vec::new();
        for (img, (sp, map)) in superpixels.iter().zip(source_maps).enumerate() {
            let n = sp.height * sp.width;
            if map.len() != n {
                return Err(Error::Shape("source map and superpixels disagree".into()));
            }
            // segment of every output pixel, in the transformed frame
            let moved: Vec<Option<u32>> = map.iter().map(|s| s.map(|s| sp.ids[s as usize])).collect();
            let sizes = sp.sizes();
            let mut inside = vec![0usize; sp.num_segments];
            for s in moved.iter().flatten() {
                inside[*s as usize] += 1;
            }
            let mut row_of_segment = vec![None; sp.num_segments];
            for s in 0..sp.num_segments {
                if inside[s] > 0 && inside[s] as f64 >= min_frac * sizes[s] as f64 {
                    row_of_segment[s] = Some(counts.len() as u32);
                    counts.push(inside[s]);
                    image_of_row.push(img as u32);
                }
            }
            row_of_pixel.extend(moved.iter().map(|s| s.and_then(|s| row_of_segment[s as usize])));
        }
        if counts.is_empty() {
            return Err(Error::DegenerateBatch("no superpixel survives the overlap mask".into()));
        }
        Ok(Self { row_of_pixel, counts, image_of_row })
    }
}

struct SegmentMean {
    row_of_pixel: Vec<Option<u32>>,
    counts: Vec<usize>,
}

impl<T: Float> Function<T> for SegmentMean {
    fn name(&self) -> &'static str {
        "segment_mean"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let d = x.dim(0);
        let np = self.row_of_pixel.len();
        let gd = grad.data();
        let mut dx = vec![T::zero(); x.numel()];
        for (p, r) in self.row_of_pixel.iter().enumerate() {
            if let Some(r) = r {
                let r = *r as usize;
                let inv = T::one() / T::from_f64(self.counts[r] as f64);
                for k in 0..d {
                    dx[k * np + p] = gd[r * d + k] * inv;
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

/// Segment means of a `[d, N, H, W]` map as a `[rows, d]` matrix.
pub fn segment_mean<T: Float>(g: &mut Graph<T>, x: Var, plan: &PoolPlan) -> Var {
    let d = g.shape(x)[0];
    let np = plan.row_of_pixel.len();
    assert_eq!(g.value(x).numel(), d * np, "pool plan does not match feature batch");
    let xd = g.value(x).data();
    let rows = plan.rows();
    let mut out = vec![T::zero(); rows * d];
    for (p, r) in plan.row_of_pixel.iter().enumerate() {
        if let Some(r) = r {
            let r = *r as usize;
            for k in 0..d {
                out[r * d + k] += xd[k * np + p];
            }
        }
    }
    for (r, row) in out.chunks_mut(d).enumerate() {
        let inv = T::one() / T::from_f64(plan.counts[r] as f64);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let func = SegmentMean { row_of_pixel: plan.row_of_pixel.clone(), counts: plan.counts.clone() };
    g.apply(&[x], Tensor::new(vec![rows, d], out), Box::new(func))
}

/// Dense features of both views, aligned in the transformed frame.
#[derive(Debug, Clone, Copy)]
pub struct DensePair {
    /// Features of the untransformed view with the transform replayed.
    pub anchor: Var,
    pub positive: Var,
}

/// Image-level embeddings `[N, proj_dim]` of the two sides of each term.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalPairs {
    pub main: Option<(Var, Var)>,
    /// Intermediate fusion only: the concatenated group embeddings.
    pub fused: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub pixel: Option<Var>,
    pub image: Option<Var>,
    pub image_fused: Option<Var>,
    pub total: Var,
}

/// Weighted sum of the InfoNCE terms a fusion mode trains with.
pub fn composite_loss<T: Float>(
    g: &mut Graph<T>,
    mode: FusionMode,
    dense: Option<DensePair>,
    plan: Option<&PoolPlan>,
    global: GlobalPairs,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let w = cfg.loss_weights;
    let needs_dense = mode != FusionMode::Mcl;
    let needs_fused = mode == FusionMode::PixIF;
    let pixel = if needs_dense {
        let (Some(dense), Some(plan)) = (dense, plan) else {
            return Err(config_err!("{mode:?} needs the superpixel term"));
        };
        let a = segment_mean(g, dense.anchor, plan);
        let p = segment_mean(g, dense.positive, plan);
        let groups = (cfg.negatives_scope == NegativesScope::Image).then_some(plan.image_of_row.as_slice());
        Some(info_nce_var(g, a, p, cfg.tau, groups)?)
    } else {
        None
    };
    let Some((ga, gp)) = global.main else {
        return Err(config_err!("{mode:?} needs the image-level term"));
    };
    let image = Some(info_nce_var(g, ga, gp, cfg.tau, None)?);
    let image_fused = if needs_fused {
        let Some((fa, fp)) = global.fused else {
            return Err(config_err!("{mode:?} needs the fused image-level term"));
        };
        Some(info_nce_var(g, fa, fp, cfg.tau, None)?)
    } else {
        None
    };
    let mut total: Option<Var> = None;
    for (term, weight) in [(pixel, w.pixel), (image, w.image), (image_fused, w.image_fused)] {
        let Some(term) = term else { continue };
        let scaled = g.scale(term, weight);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    Ok(LossTerms { pixel, image, image_fused, total: total.expect("at least one term") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Softmax over all candidates without any stabilisation.
    fn naive_nce(a: &[f64], p: &[f64], d: usize, tau: f64) -> f64 {
        let n = a.len() / d;
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            dot / (x.iter().map(|u| u * u).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let mut total = 0.0;
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cos(ai, &p[j * d..(j + 1) * d]) / tau).exp();
            }
            total += -((cos(ai, &p[i * d..(i + 1) * d]) / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn pair_score_cases() {
        assert_abs_diff_eq!(pair_score(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), std::f64::consts::E, epsilon = 1e-12);
        assert_abs_diff_eq!(pair_score(&[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pair_score(&[0.5, 0.5], &[0.5, 0.5], 0.1).unwrap(), 10f64.exp(), epsilon = 1e-8);
        assert!(matches!(pair_score(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(Error::Numerical(_))));
        assert_abs_diff_eq!(
            pair_score(&[2.0, -1.0, 0.5], &[0.3, 0.1, 4.0], 0.2).unwrap(),
            pair_score(&[6.0, -3.0, 1.5], &[0.03, 0.01, 0.4], 0.2).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn info_nce_hand_cases() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let p = [1.0, 0.0, 0.0, 1.0];
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert_abs_diff_eq!(info_nce(&a, &p, 2, 1.0).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.313262, epsilon = 1e-6);
        let same = [0.3, -0.2, 0.3, -0.2, 0.3, -0.2];
        assert_abs_diff_eq!(info_nce(&same, &same, 2, 0.1).unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(matches!(info_nce(&[1.0, 0.0], &[1.0, 0.0], 2, 1.0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn info_nce_survives_small_tau() {
        let a = [1.0, 0.0, 0.0, 1.0, 0.7, 0.7];
        let v = info_nce(&a, &a, 2, 0.001).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        let v32 = nce_forward::<f32>(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 0.01, None).unwrap().loss;
        assert!(v32.is_finite());
    }

    proptest! {
        #[test]
        fn info_nce_matches_naive(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=16);
            let d = rng.random_range(1..=8);
            let tau = [0.07, 0.1, 1.0][rng.random_range(0..3)];
            let a: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = info_nce(&a, &p, d, tau).unwrap();
            prop_assert!((got - naive_nce(&a, &p, d, tau)).abs() < 1e-6);
            prop_assert!(got > 0.0);
        }
    }

    #[test]
    fn info_nce_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (5, 3);
        let a: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let groups = [0u32, 0, 1, 1, 1];
        for grp in [None, Some(&groups[..])] {
            let mut g = Graph::<f64>::new(true);
            let av = g.variable(Tensor::new(vec![n, d], a.clone()));
            let pv = g.variable(Tensor::new(vec![n, d], p.clone()));
            let loss = info_nce_var(&mut g, av, pv, 0.5, grp).unwrap();
            let grads = g.backward(loss);
            let f = |a: &[f64], p: &[f64]| nce_forward(a, p, d, 0.5, grp).unwrap().loss;
            let eps = 1e-6;
            for k in 0..n * d {
                let mut ap = a.clone();
                ap[k] += eps;
                let mut am = a.clone();
                am[k] -= eps;
                let num = (f(&ap, &p) - f(&am, &p)) / (2.0 * eps);
                assert_abs_diff_eq!(grads.wrt(av).unwrap().data()[k], num, epsilon = 1e-7);
                let mut pp = p.clone();
                pp[k] += eps;
                let mut pm = p.clone();
                pm[k] -= eps;
                let num = (f(&a, &pp) - f(&a, &pm)) / (2.0 * eps);
                assert_abs_diff_eq!(grads.wrt(pv).unwrap().data()[k], num, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn image_scope_restricts_candidates() {
        // two groups, each a perfect 2x2 identity block
        let a = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let grouped = nce_forward(&a, &a, 2, 1.0, Some(&[0, 0, 1, 1])).unwrap().loss;
        assert_abs_diff_eq!(grouped, info_nce(&a[..4], &a[..4], 2, 1.0).unwrap(), epsilon = 1e-12);
    }

    fn constant_raster(h: usize, w: usize) -> Raster {
        Raster::new(5, h, w, vec![0.3; 5 * h * w])
    }

    #[test]
    fn slic_degenerate_and_partition() {
        let r = constant_raster(4, 4);
        let sp = segment_superpixels(&r, 16, 0.05, 5).unwrap();
        assert_eq!(sp.num_segments, 16);
        assert!(sp.sizes().iter().all(|&s| s == 1));
        assert!(segment_superpixels(&r, 17, 0.05, 5).is_err());
    }

    #[test]
    fn slic_on_constant_tile_is_grid_like() {
        let (h, w, k) = (64, 64, 64);
        let sp = segment_superpixels(&constant_raster(h, w), k, 0.05, 10).unwrap();
        let target = (h * w) as f64 / k as f64;
        for s in sp.sizes() {
            assert!((s as f64 - target).abs() <= 0.5 * target, "segment of {s} pixels");
        }
        let mut seen = vec![false; sp.num_segments];
        for &id in &sp.ids {
            seen[id as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn slic_segments_are_connected() {
        let scene = crate::scenedata::generate_synthetic(3, 1, 64, 0.0).unwrap().remove(0);
        let sp = segment_superpixels(&scene.optical, 64, 0.05, 10).unwrap();
        let again = enforce_connectivity(&sp.ids, 64, 64, 1);
        assert_eq!(again.num_segments, sp.num_segments);
        assert!(sp.num_segments > 32 && sp.num_segments < 128, "{} segments", sp.num_segments);
    }

    fn random_segments(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> SuperpixelMap {
        let ids: Vec<u32> = (0..h * w).map(|p| if p < k { p as u32 } else { rng.random_range(0..k as u32) }).collect();
        SuperpixelMap { height: h, width: w, ids, num_segments: k }
    }

    #[test]
    fn pooling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, d) = (6, 6, 3);
        let n = h * w;
        let c = [0.5f32, -1.0, 2.0];
        let fm: Vec<f32> = (0..d * n).map(|i| c[i / n]).collect();
        let sp = random_segments(&mut rng, h, w, 5);
        let pooled = pool_over_superpixels(&fm, d, &sp, &vec![true; n], 0.5).unwrap();
        let norm = c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        for row in pooled.rows.chunks(d) {
            for k in 0..d {
                assert_abs_diff_eq!(row[k], c[k] as f64 / norm, epsilon = 1e-7);
            }
        }
        let single = SuperpixelMap { height: h, width: w, ids: (0..n as u32).collect(), num_segments: n };
        let fm: Vec<f32> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pooled = pool_over_superpixels(&fm, d, &single, &vec![true; n], 0.5).unwrap();
        for p in 0..n {
            let v: Vec<f64> = (0..d).map(|k| fm[k * n + p] as f64).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..d {
                assert_abs_diff_eq!(pooled.rows[p * d + k], v[k] / nv, epsilon = 1e-7);
            }
        }
        assert!(matches!(
            pool_over_superpixels(&fm, d, &single, &vec![false; n], 0.5),
            Err(Error::DegenerateBatch(_))
        ));
    }

    proptest! {
        #[test]
        fn pooling_matches_accumulation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w, d, k) = (8, 8, 4, 6);
            let n = h * w;
            let sp = random_segments(&mut rng, h, w, k);
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let fm: Vec<f32> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let Ok(pooled) = pool_over_superpixels(&fm, d, &sp, &mask, 0.5) else { return Ok(()) };
            for (r, &s) in pooled.segments.iter().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&p| sp.ids[p] == s && mask[p]).collect();
                let total = (0..n).filter(|&p| sp.ids[p] == s).count();
                prop_assert!(members.len() * 2 >= total);
                let mean: Vec<f64> = (0..d).map(|c| members.iter().map(|&p| fm[c * n + p] as f64).sum::<f64>() / members.len() as f64).collect();
                let nm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
                for c in 0..d {
                    prop_assert!((pooled.rows[r * d + c] - mean[c] / nm).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn pooling_commutes_with_linear_maps(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w, d, k) = (8, 8, 3, 5);
            let n = h * w;
            let sp = random_segments(&mut rng, h, w, k);
            let plan = PoolPlan::new(&[&sp], &[(0..n as u32).map(Some).collect()], 0.5).unwrap();
            let x: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::<f64>::new(false);
            let xv = g.constant(Tensor::new(vec![d, 1, h, w], x.clone()));
            let sm = segment_mean(&mut g, xv, &plan);
            let pooled = g.value(sm).data().to_vec();
            // map, then pool
            let mapped: Vec<f64> = (0..2).flat_map(|o| (0..n).map({ let x = &x; let m = &m; move |p| (0..d).map(|c| m[o * d + c] * x[c * n + p]).sum::<f64>() })).collect();
            let mv = g.constant(Tensor::new(vec![2, 1, h, w], mapped));
            let sm = segment_mean(&mut g, mv, &plan);
            let pooled_mapped = g.value(sm).data().to_vec();
            for r in 0..plan.rows() {
                for o in 0..2 {
                    let direct: f64 = (0..d).map(|c| m[o * d + c] * pooled[r * d + c]).sum();
                    prop_assert!((direct - pooled_mapped[r * 2 + o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn plan_agrees_with_pooling_on_shifted_view() {
        use crate::augment::ShiftSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, d) = (8, 8, 2);
        let n = h * w;
        let sp = random_segments(&mut rng, h, w, 6);
        let spec = ShiftSpec { dx: 2, dy: -1, flip_h: true, flip_v: false };
        let map = spec.source_map(h, w).unwrap();
        let plan = PoolPlan::new(&[&sp], &[map.clone()], 0.5).unwrap();
        // segments in the shifted frame, pooled with the old API
        let moved = SuperpixelMap {
            height: h,
            width: w,
            ids: map.iter().map(|s| s.map_or(0, |s| sp.ids[s as usize])).collect(),
            num_segments: 6,
        };
        let fm: Vec<f32> = (0..d * n).map(|_| rng.random_range(0.1..1.0)).collect();
        let mask: Vec<bool> = map.iter().map(Option::is_some).collect();
        let mut g = Graph::<f64>::new(false);
        let xv = g.constant(Tensor::new(vec![d, 1, h, w], fm.iter().map(|&v| v as f64).collect()));
        let sm = segment_mean(&mut g, xv, &plan);
            let rows = g.value(sm).data().to_vec();
        let retained: Vec<u32> = (0..6u32)
            .filter(|&s| {
                let total = sp.ids.iter().filter(|&&i| i == s).count();
                let kept = (0..n).filter(|&p| mask[p] && moved.ids[p] == s).count();
                kept > 0 && kept as f64 >= 0.5 * total as f64
            })
            .collect();
        assert_eq!(plan.rows(), retained.len());
        for (r, &s) in retained.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&p| mask[p] && moved.ids[p] == s).collect();
            for c in 0..d {
                let mean = members.iter().map(|&p| fm[c * n + p] as f64).sum::<f64>() / members.len() as f64;
                assert_abs_diff_eq!(rows[r * d + c], mean, epsilon = 1e-12);
            }
        }
    }
}
