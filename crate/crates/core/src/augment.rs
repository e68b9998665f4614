//! Second-view transforms and their replay on feature maps.
//!
//! Geometric transforms are expressed as a per-pixel source map: output
//! pixel `p` of the transformed view reads pixel `map[p]` of the original,
//! or is filled when `map[p]` is `None`. The same map aligns the features of
//! the untransformed view with the transformed one.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Flips followed by an integer translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dx: i32,
    pub dy: i32,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec { dx: 0, dy: 0, flip_h: false, flip_v: false };

    pub fn translation(dx: i32, dy: i32) -> Self {
        Self { dx, dy, ..Self::IDENTITY }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.dx.unsigned_abs() as usize >= w || self.dy.unsigned_abs() as usize >= h {
            return Err(config_err!("shift ({}, {}) out of range for {h}x{w}", self.dx, self.dy));
        }
        Ok(())
    }

    /// Source pixel for output `(i, j)`.
    #[inline]
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let a = i as i64 - self.dy as i64;
        let b = j as i64 - self.dx as i64;
        if a < 0 || b < 0 || a >= h as i64 || b >= w as i64 {
            return None;
        }
        let (a, b) = (a as usize, b as usize);
        Some((if self.flip_v { h - 1 - a } else { a }, if self.flip_h { w - 1 - b } else { b }))
    }

    /// Source map over an `h x w` plane.
    pub fn source_map(&self, h: usize, w: usize) -> Result<Vec<Option<u32>>> {
        self.check(h, w)?;
        let mut map = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                map.push(self.source(i, j, h, w).map(|(a, b)| (a * w + b) as u32));
            }
        }
        Ok(map)
    }
}

pub fn sample_shift<R: Rng + ?Sized>(rng: &mut R, max_shift: usize, enable_flips: bool) -> ShiftSpec {
    let m = max_shift as i32;
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    let (flip_h, flip_v) = if enable_flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
    ShiftSpec { dx, dy, flip_h, flip_v }
}

/// Applies a source map to every `h x w` plane of `x`.
pub fn gather_planes<T: Copy>(x: &[T], map: &[Option<u32>], fill: T) -> Vec<T> {
    let plane = map.len();
    assert_eq!(x.len() % plane, 0, "tensor is not a stack of planes");
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(plane) {
        out.extend(map.iter().map(|s| s.map_or(fill, |s| chunk[s as usize])));
    }
    out
}

/// `out[c, i, j] = flip(x)[c, i - dy, j - dx]`, or `fill` outside the source.
pub fn apply_shift(x: &[f32], h: usize, w: usize, spec: &ShiftSpec, fill: f32) -> Result<Vec<f32>> {
    Ok(gather_planes(x, &spec.source_map(h, w)?, fill))
}

/// True where the transformed view holds an original pixel.
pub fn overlap_mask(spec: &ShiftSpec, h: usize, w: usize) -> Result<Vec<bool>> {
    Ok(spec.source_map(h, w)?.iter().map(Option::is_some).collect())
}

/// Rotation, scale and shear about the tile centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub angle: f32,
    pub scale: f32,
    pub shear: f32,
    pub tx: f32,
    pub ty: f32,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { angle: 0.0, scale: 1.0, shear: 0.0, tx: 0.0, ty: 0.0 };

    /// Forward matrix acting on `(x, y)` offsets from the centre.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = (self.angle as f64).sin_cos();
        let k = self.scale as f64;
        let sh = self.shear as f64;
        // R * Shear * Scale, shear along x
        [[k * c, k * (c * sh - s)], [k * s, k * (s * sh + c)]]
    }

    fn inverse(&self) -> Result<[[f64; 2]; 2]> {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-8 || !det.is_finite() {
            return Err(config_err!("affine transform is singular"));
        }
        Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
    }

    /// Continuous source coordinate `(row, col)` of output pixel `(i, j)`.
    fn source_coords(inv: &[[f64; 2]; 2], p: &AffineParams, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let x = j as f64 - cx - p.tx as f64;
        let y = i as f64 - cy - p.ty as f64;
        (inv[1][0] * x + inv[1][1] * y + cy, inv[0][0] * x + inv[0][1] * y + cx)
    }

    /// Nearest-neighbour source map, used to replay the transform on features.
    pub fn source_map(&self, h: usize, w: usize) -> Result<Vec<Option<u32>>> {
        let inv = self.inverse()?;
        let mut map = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (r, c) = Self::source_coords(&inv, self, i, j, h, w);
                let (r, c) = (r.round(), c.round());
                let inside = r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64;
                map.push(inside.then(|| (r as usize * w + c as usize) as u32));
            }
        }
        Ok(map)
    }
}

/// Bilinear resampling of every plane of `x` under `params`.
pub fn apply_affine(x: &[f32], h: usize, w: usize, params: &AffineParams, fill: f32) -> Result<Vec<f32>> {
    let inv = params.inverse()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(plane) {
        for i in 0..h {
            for j in 0..w {
                let (r, c) = AffineParams::source_coords(&inv, params, i, j, h, w);
                out.push(bilinear(chunk, h, w, r, c).unwrap_or(fill));
            }
        }
    }
    Ok(out)
}

fn bilinear(plane: &[f32], h: usize, w: usize, r: f64, c: f64) -> Option<f32> {
    const SLACK: f64 = 1e-9;
    if r < -SLACK || c < -SLACK || r > h as f64 - 1.0 + SLACK || c > w as f64 - 1.0 + SLACK {
        return None;
    }
    let r = r.clamp(0.0, h as f64 - 1.0);
    let c = c.clamp(0.0, w as f64 - 1.0);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let at = |a: usize, b: usize| plane[a * w + b] as f64;
    let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
    let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
    Some((top * (1.0 - fr) + bottom * fr) as f32)
}

/// Gaussian blur followed by additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub blur_sigma: f32,
    pub noise_std: f32,
}

pub fn apply_photometric<R: Rng + ?Sized>(
    x: &[f32],
    h: usize,
    w: usize,
    params: &PhotometricParams,
    rng: &mut R,
) -> Vec<f32> {
    let mut out = x.to_vec();
    if params.blur_sigma > 0.0 {
        let sigma = params.blur_sigma as f64;
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        for plane in out.chunks_mut(h * w) {
            blur_axis(plane, h, w, &kernel, radius, true);
            blur_axis(plane, h, w, &kernel, radius, false);
        }
    }
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, params.noise_std).unwrap();
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    out
}

// Separable pass with clamped borders.
fn blur_axis(plane: &mut [f32], h: usize, w: usize, kernel: &[f64], radius: i64, along_rows: bool) {
    let src = plane.to_vec();
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let d = k as i64 - radius;
                let (a, b) = if along_rows {
                    (i as i64, (j as i64 + d).clamp(0, w as i64 - 1))
                } else {
                    ((i as i64 + d).clamp(0, h as i64 - 1), j as i64)
                };
                acc += kv * src[a as usize * w + b as usize] as f64;
            }
            plane[i * w + j] = acc as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Flips and integer shift.
    #[default]
    Shift,
    /// Flips, then rotation, scale, shear and translation.
    Affine,
    /// Flips and shift, plus blur and noise on the shifted view.
    Photometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Defaults to a quarter of the tile size when absent.
    pub max_shift: Option<usize>,
    pub enable_flips: bool,
    pub mode: AugmentMode,
    pub max_rotation: f32,
    pub max_scale_delta: f32,
    pub max_shear: f32,
    pub max_blur_sigma: f32,
    pub max_noise_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: None,
            enable_flips: true,
            mode: AugmentMode::Shift,
            max_rotation: 0.3,
            max_scale_delta: 0.15,
            max_shear: 0.15,
            max_blur_sigma: 1.0,
            max_noise_std: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn max_shift_for(&self, size: usize) -> usize {
        self.max_shift.unwrap_or(size / 4)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.max_shift_for(h.min(w)) >= h.min(w) {
            return Err(config_err!("max_shift must be below the tile size"));
        }
        if !(0.0..1.0).contains(&self.max_scale_delta) {
            return Err(config_err!("max_scale_delta must lie in [0, 1)"));
        }
        if self.max_blur_sigma < 0.0 || self.max_noise_std < 0.0 || self.max_rotation < 0.0 || self.max_shear < 0.0 {
            return Err(config_err!("augmentation ranges must be non-negative"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a second view and to replay it on features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub shift: ShiftSpec,
    pub affine: Option<AffineParams>,
    pub photometric: Option<PhotometricParams>,
}

impl TransformRecord {
    pub const IDENTITY: TransformRecord = TransformRecord { shift: ShiftSpec::IDENTITY, affine: None, photometric: None };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, h: usize, w: usize) -> Self {
        let shift = sample_shift(rng, cfg.max_shift_for(h.min(w)), cfg.enable_flips);
        match cfg.mode {
            AugmentMode::Shift => Self { shift, affine: None, photometric: None },
            AugmentMode::Affine => {
                let sym = |rng: &mut R, m: f32| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
                let affine = AffineParams {
                    angle: sym(rng, cfg.max_rotation),
                    scale: 1.0 + sym(rng, cfg.max_scale_delta),
                    shear: sym(rng, cfg.max_shear),
                    tx: shift.dx as f32,
                    ty: shift.dy as f32,
                };
                let flips = ShiftSpec { dx: 0, dy: 0, ..shift };
                Self { shift: flips, affine: Some(affine), photometric: None }
            }
            AugmentMode::Photometric => {
                let up = |rng: &mut R, m: f32| if m > 0.0 { rng.random_range(0.0..=m) } else { 0.0 };
                let photometric =
                    PhotometricParams { blur_sigma: up(rng, cfg.max_blur_sigma), noise_std: up(rng, cfg.max_noise_std) };
                Self { shift, affine: None, photometric: Some(photometric) }
            }
        }
    }

    /// Nearest source map of the geometric part, composed over flips.
    pub fn source_map(&self, h: usize, w: usize) -> Result<Vec<Option<u32>>> {
        let outer = self.shift.source_map(h, w)?;
        let Some(affine) = &self.affine else { return Ok(outer) };
        let inner = affine.source_map(h, w)?;
        // flips are applied first, so the affine map reads the flipped image
        Ok(inner.iter().map(|s| s.and_then(|s| outer[s as usize])).collect())
    }

    /// Builds the transformed view of a `[C, H, W]` input.
    pub fn apply_input<R: Rng + ?Sized>(&self, x: &[f32], h: usize, w: usize, fill: f32, rng: &mut R) -> Result<Vec<f32>> {
        let geometric = match &self.affine {
            None => apply_shift(x, h, w, &self.shift, fill)?,
            Some(a) => {
                let flipped = apply_shift(x, h, w, &ShiftSpec { dx: 0, dy: 0, ..self.shift }, fill)?;
                apply_affine(&flipped, h, w, a, fill)?
            }
        };
        Ok(match &self.photometric {
            Some(p) => apply_photometric(&geometric, h, w, p, rng),
            None => geometric,
        })
    }
}
