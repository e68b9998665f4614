//! Scene model, the on-disk scene directory format, dataset splits and the
//! synthetic scene generator.
//!
//! A scene directory holds `manifest.json` plus one raw array per field
//! (`sar.bin`, `optical.bin`, optionally `gt.bin`): little-endian values in
//! C order (channel, row, column) with no header or padding.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Label value for "no class".
pub const UNLABELED: u8 = 255;

pub const FORMAT_VERSION: u32 = 1;

/// Channel-first `[C, H, W]` float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "raster size mismatch");
        Self { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Indices of the optical bands the spectral indices need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandMap {
    pub blue: usize,
    pub green: usize,
    pub red: usize,
    pub nir: usize,
    pub swir: usize,
}

impl BandMap {
    /// Layout produced by the synthetic generator: B, G, R, NIR, SWIR.
    pub const SYNTHETIC: BandMap = BandMap { blue: 0, green: 1, red: 2, nir: 3, swir: 4 };

    pub fn validate(&self, channels: usize) -> Result<()> {
        let idx = [self.blue, self.green, self.red, self.nir, self.swir];
        for (i, &a) in idx.iter().enumerate() {
            if a >= channels {
                return Err(config_err!("band index {a} out of range for {channels} optical channels"));
            }
            if idx[..i].contains(&a) {
                return Err(config_err!("band index {a} used twice in band map"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

impl ClassScheme {
    /// Forest, Grassland, Water, Urban, Bare land, Sparse vegetation.
    pub fn six_class() -> Self {
        Self {
            names: ["Forest", "Grassland", "Water", "Urban", "Bare land", "Sparse vegetation"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            palette: vec![[0, 100, 0], [124, 252, 0], [0, 90, 255], [220, 20, 60], [210, 180, 140], [189, 183, 107]],
        }
    }

    /// The eight-class DFC2020 legend.
    pub fn dfc2020() -> Self {
        Self {
            names: ["Forest", "Shrubland", "Grassland", "Wetlands", "Croplands", "Urban/built-up", "Barren", "Water"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            palette: vec![
                [0, 153, 0],
                [198, 176, 68],
                [251, 255, 19],
                [39, 255, 135],
                [194, 79, 68],
                [165, 165, 165],
                [105, 255, 248],
                [28, 13, 255],
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }
}

/// Six-class ids, in [`ClassScheme::six_class`] order.
pub mod class {
    pub const FOREST: u8 = 0;
    pub const GRASSLAND: u8 = 1;
    pub const WATER: u8 = 2;
    pub const URBAN: u8 = 3;
    pub const BARE: u8 = 4;
    pub const SPARSE: u8 = 5;
}

/// One co-registered SAR/optical tile pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `[2, H, W]` backscatter in dB, channels VV then VH.
    pub sar: Raster,
    /// `[C, H, W]` surface reflectance in `[0, 1]`.
    pub optical: Raster,
    pub band_map: BandMap,
    pub class_scheme: ClassScheme,
    /// `[H, W]` class ids or [`UNLABELED`].
    pub gt: Option<Vec<u8>>,
    pub image_label: Option<u8>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.sar.height
    }

    pub fn width(&self) -> usize {
        self.sar.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("scene {}: {h}x{w} must be at least 16 and divisible by 8", self.id)));
        }
        if self.sar.channels != 2 {
            return Err(Error::Shape(format!("scene {}: SAR must have 2 channels", self.id)));
        }
        if self.optical.height != h || self.optical.width != w {
            return Err(Error::Shape(format!("scene {}: SAR and optical sizes differ", self.id)));
        }
        self.band_map.validate(self.optical.channels)?;
        if let Some(v) = self.optical.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("scene {}: optical value {v} outside [0, 1]", self.id)));
        }
        if let Some(gt) = &self.gt {
            if gt.len() != h * w {
                return Err(Error::Shape(format!("scene {}: ground truth size mismatch", self.id)));
            }
            let k = self.class_scheme.num_classes();
            if let Some(v) = gt.iter().find(|&&v| v != UNLABELED && v as usize >= k) {
                return Err(Error::Shape(format!("scene {}: ground truth class {v} out of range", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    id: String,
    height: usize,
    width: usize,
    arrays: Vec<ArraySpec>,
    band_map: BandMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_label: Option<u8>,
    class_scheme: ClassScheme,
}

pub(crate) fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, declared shape needs {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, declared shape needs {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (scene.height(), scene.width());
    let mut arrays = vec![
        ArraySpec { name: "sar".into(), dtype: "f32".into(), shape: vec![2, h, w] },
        ArraySpec { name: "optical".into(), dtype: "f32".into(), shape: vec![scene.optical.channels, h, w] },
    ];
    write_f32_le(&dir.join("sar.bin"), &scene.sar.data)?;
    write_f32_le(&dir.join("optical.bin"), &scene.optical.data)?;
    if let Some(gt) = &scene.gt {
        arrays.push(ArraySpec { name: "gt".into(), dtype: "u8".into(), shape: vec![h, w] });
        fs::write(dir.join("gt.bin"), gt).map_err(|e| Error::io(dir.join("gt.bin"), e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        id: scene.id.clone(),
        height: h,
        width: w,
        arrays,
        band_map: scene.band_map,
        image_label: scene.image_label,
        class_scheme: scene.class_scheme.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&mpath, "manifest missing"),
        _ => Error::io(&mpath, e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, format!("corrupt manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported format_version {}", manifest.format_version)));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut sar = None;
    let mut optical = None;
    let mut gt = None;
    for a in &manifest.arrays {
        let path = dir.join(format!("{}.bin", a.name));
        let numel: usize = a.shape.iter().product();
        match (a.name.as_str(), a.dtype.as_str()) {
            ("sar" | "optical", "f32") => {
                if a.shape.len() != 3 || a.shape[1] != h || a.shape[2] != w {
                    return Err(Error::format(&mpath, format!("array {} has shape {:?}", a.name, a.shape)));
                }
                let r = Raster::new(a.shape[0], h, w, read_f32_le(&path, numel)?);
                if a.name == "sar" {
                    sar = Some(r);
                } else {
                    optical = Some(r);
                }
            }
            ("gt", "u8") => {
                if a.shape != [h, w] {
                    return Err(Error::format(&mpath, format!("gt has shape {:?}", a.shape)));
                }
                gt = Some(read_u8(&path, numel)?);
            }
            (name, dtype) => return Err(Error::format(&mpath, format!("unexpected array {name} of dtype {dtype}"))),
        }
    }
    let scene = Scene {
        id: manifest.id,
        sar: sar.ok_or_else(|| Error::format(&mpath, "no sar array"))?,
        optical: optical.ok_or_else(|| Error::format(&mpath, "no optical array"))?,
        band_map: manifest.band_map,
        class_scheme: manifest.class_scheme,
        gt,
        image_label: manifest.image_label,
    };
    scene.validate().map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok(scene)
}

/// Loads every scene directory directly below `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

/// Writes a label map as a binary PPM using the scheme palette; unlabeled
/// pixels are black.
pub fn write_label_ppm(labels: &[u8], height: usize, width: usize, scheme: &ClassScheme, path: &Path) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Shape(format!("label map has {} pixels, expected {}", labels.len(), height * width)));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        let rgb = if l == UNLABELED {
            [0, 0, 0]
        } else {
            *scheme.palette.get(l as usize).ok_or_else(|| config_err!("label {l} has no palette color"))?
        };
        bytes.extend_from_slice(&rgb);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Legend text next to an exported map.
pub fn legend_text(scheme: &ClassScheme) -> String {
    let mut s = String::new();
    for (i, (name, c)) in scheme.names.iter().zip(&scheme.palette).enumerate() {
        s.push_str(&format!("{i}\t{name}\t#{:02x}{:02x}{:02x}\n", c[0], c[1], c[2]));
    }
    s.push_str("255\tunlabeled\t#000000\n");
    s
}

/// Writes a single-band grayscale PGM, mapping `[lo, hi]` onto `0..=255`.
pub fn write_pgm(values: &[f32], height: usize, width: usize, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        bytes.push((t * 255.0).round() as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits `items` into disjoint groups with the given fractions. Groups keep
/// the input order; membership is a deterministic function of `seed`.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64, fractions: &[f64]) -> Result<Vec<Vec<T>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(config_err!("split fractions must each lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(config_err!("split fractions sum to {total}, expected 1"));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        let mut idx: Vec<usize> = order[start..end.max(start)].to_vec();
        idx.sort_unstable();
        groups.push(idx.into_iter().map(|k| items[k].clone()).collect());
        start = end.max(start);
    }
    Ok(groups)
}

/// Mixes a seed with a stream index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CLOUD_STREAM: u64 = 0xC10D;

// Reflectance of dense vegetation and of bare soil in (B, G, R, NIR, SWIR).
const VEGETATION: [f32; 5] = [0.03, 0.06, 0.04, 0.41, 0.17];
const SOIL: [f32; 5] = [0.10, 0.15, 0.24, 0.26, 0.42];
const WATER: [f32; 5] = [0.08, 0.07, 0.05, 0.02, 0.01];
const BUILT_UP: [f32; 5] = [0.12, 0.13, 0.16, 0.18, 0.30];
const GRASS_TINT: [f32; 5] = [1.1, 1.1, 1.15, 0.96, 1.1];
const CLOUD: [f32; 5] = [0.62, 0.64, 0.66, 0.68, 0.55];

/// Mean (VV, VH) backscatter in dB per six-class id.
const SAR_DB: [[f32; 2]; 6] = [[-7.0, -13.0], [-16.0, -23.0], [-18.0, -25.0], [-1.0, -6.0], [-16.0, -23.0], [-12.0, -19.0]];

/// Synthetic generator knobs. Defaults match the desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub min_regions: usize,
    pub max_regions: usize,
    /// Per-pixel multiplicative reflectance noise.
    pub optical_noise: f32,
    /// Per-pixel additive SAR noise in dB.
    pub sar_noise_db: f32,
    /// Per-region SAR offset in dB.
    pub sar_region_db: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { min_regions: 8, max_regions: 14, optical_noise: 0.05, sar_noise_db: 1.3, sar_region_db: 0.7 }
    }
}

/// Generates `n_scenes` six-class scenes of `size x size` pixels.
///
/// Every scene is a Voronoi partition containing each class at least once.
/// Optical signatures are ordered so that water has the highest NDWI, the
/// vegetated classes the highest NDVI and bare land the highest BI; urban
/// has the highest backscatter. With probability `cloud_fraction` a scene
/// gets an opaque cloud on the optical bands only, drawn from a separate
/// random stream so SAR, ground truth and cloud-free optical pixels are
/// identical to the cloud-free generation.
pub fn generate_synthetic(seed: u64, n_scenes: usize, size: usize, cloud_fraction: f64) -> Result<Vec<Scene>> {
    generate_synthetic_with(seed, n_scenes, size, cloud_fraction, &SynthParams::default())
}

pub fn generate_synthetic_with(
    seed: u64,
    n_scenes: usize,
    size: usize,
    cloud_fraction: f64,
    params: &SynthParams,
) -> Result<Vec<Scene>> {
    if size < 16 || size % 8 != 0 {
        return Err(config_err!("tile size {size} must be at least 16 and divisible by 8"));
    }
    if !(0.0..=1.0).contains(&cloud_fraction) {
        return Err(config_err!("cloud_fraction {cloud_fraction} outside [0, 1]"));
    }
    if params.min_regions < 6 || params.max_regions < params.min_regions {
        return Err(config_err!("need at least 6 regions per scene"));
    }
    Ok((0..n_scenes).map(|i| synth_scene(seed, i, size, cloud_fraction, params)).collect())
}

fn synth_scene(seed: u64, index: usize, size: usize, cloud_fraction: f64, p: &SynthParams) -> Scene {
    let scene_seed = derive_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let std_normal = Normal::new(0.0f32, 1.0).unwrap();
    let gauss = |rng: &mut ChaCha8Rng| std_normal.sample(rng);

    let n_regions = rng.random_range(p.min_regions..=p.max_regions);
    let mut classes: Vec<u8> = (0..6).collect();
    classes.shuffle(&mut rng);
    for _ in 6..n_regions {
        classes.push(rng.random_range(0..6));
    }
    let sites: Vec<(f32, f32)> =
        (0..n_regions).map(|_| (rng.random::<f32>() * size as f32, rng.random::<f32>() * size as f32)).collect();

    let npix = size * size;
    let mut region = vec![0usize; npix];
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f32 + 0.5, j as f32 + 0.5);
            let mut best = (f32::INFINITY, 0);
            for (r, &(sy, sx)) in sites.iter().enumerate() {
                // built-up areas occupy smaller cells
                let weight = if classes[r] == class::URBAN { 0.6 } else { 1.0 };
                let d = ((y - sy).powi(2) + (x - sx).powi(2)) / (weight * weight);
                if d < best.0 {
                    best = (d, r);
                }
            }
            region[i * size + j] = best.1;
        }
    }
    let gt: Vec<u8> = region.iter().map(|&r| classes[r]).collect();

    // per-region parameters
    struct RegionParams {
        optical: [f32; 5],
        cover: f32,
        sar_offset: f32,
    }
    let regions: Vec<RegionParams> = classes
        .iter()
        .map(|&c| {
            let jitter = match c {
                class::FOREST | class::GRASSLAND => 0.06,
                _ => 0.02,
            };
            let scale = 1.0 + jitter * gauss(&mut rng);
            let base = match c {
                class::FOREST => VEGETATION,
                class::GRASSLAND => std::array::from_fn(|b| VEGETATION[b] * GRASS_TINT[b]),
                class::WATER => WATER,
                class::URBAN => BUILT_UP,
                class::BARE => SOIL,
                _ => VEGETATION,
            };
            let cover = rng.random_range(0.3f32..0.75);
            let sar_offset = p.sar_region_db * gauss(&mut rng);
            RegionParams { optical: std::array::from_fn(|b| base[b] * scale), cover, sar_offset }
        })
        .collect();

    let mut optical = Raster::zeros(5, size, size);
    let mut sar = Raster::zeros(2, size, size);
    for px in 0..npix {
        let r = region[px];
        let c = classes[r];
        let rp = &regions[r];
        let signature: [f32; 5] = if c == class::SPARSE {
            let f = (rp.cover + 0.1 * gauss(&mut rng)).clamp(0.0, 1.0);
            std::array::from_fn(|b| f * VEGETATION[b] + (1.0 - f) * SOIL[b])
        } else {
            rp.optical
        };
        for (b, &s) in signature.iter().enumerate() {
            let v = s * (1.0 + p.optical_noise * gauss(&mut rng));
            optical.data[b * npix + px] = v.clamp(0.0, 1.0);
        }
        for ch in 0..2 {
            sar.data[ch * npix + px] = SAR_DB[c as usize][ch] + rp.sar_offset + p.sar_noise_db * gauss(&mut rng);
        }
    }

    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, CLOUD_STREAM));
    let cloudy = crng.random::<f64>() < cloud_fraction;
    let (cy, cx) = (crng.random::<f32>() * size as f32, crng.random::<f32>() * size as f32);
    let ry = crng.random_range(size as f32 / 6.0..size as f32 / 3.0);
    let rx = crng.random_range(size as f32 / 6.0..size as f32 / 3.0);
    if cloudy {
        for i in 0..size {
            for j in 0..size {
                let dy = (i as f32 + 0.5 - cy) / ry;
                let dx = (j as f32 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    for (b, &v) in CLOUD.iter().enumerate() {
                        let noisy = v * (1.0 + 0.02 * std_normal.sample(&mut crng));
                        optical.data[b * npix + i * size + j] = noisy.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let mut counts = [0usize; 6];
    for &g in &gt {
        counts[g as usize] += 1;
    }
    let majority = (0..6).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap() as u8;

    Scene {
        id: format!("synth-{seed}-{index:05}"),
        sar,
        optical,
        band_map: BandMap::SYNTHETIC,
        class_scheme: ClassScheme::six_class(),
        gt: Some(gt),
        image_label: Some(majority),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene() -> Scene {
        generate_synthetic(3, 1, 16, 0.0).unwrap().remove(0)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene();
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn absent_gt_stays_absent() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = small_scene();
        scene.gt = None;
        scene.image_label = None;
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert!(back.gt.is_none());
        assert!(back.image_label.is_none());
        assert!(!dir.path().join("gt.bin").exists());
    }

    #[test]
    fn short_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(&small_scene(), dir.path()).unwrap();
        // [2, 16, 16] f32 needs 2048 bytes
        fs::write(dir.path().join("sar.bin"), vec![0u8; 1000]).unwrap();
        match load_scene(dir.path()) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("2048"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_or_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Format { .. })));
        fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_scene(&small_scene(), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn generator_rejects_bad_size() {
        assert!(matches!(generate_synthetic(1, 1, 20, 0.0), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(1, 1, 8, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let a = generate_synthetic(7, 3, 64, 0.0).unwrap();
        let b = generate_synthetic(7, 3, 64, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for s in &a {
            s.validate().unwrap();
            let gt = s.gt.as_ref().unwrap();
            for c in 0..6u8 {
                assert!(gt.contains(&c), "class {c} missing from {}", s.id);
            }
        }
        assert_ne!(a[0].optical, a[1].optical);
    }

    #[test]
    fn clouds_touch_optical_only() {
        let clear = generate_synthetic(11, 4, 32, 0.0).unwrap();
        let cloudy = generate_synthetic(11, 4, 32, 1.0).unwrap();
        for (c, k) in clear.iter().zip(&cloudy) {
            assert_eq!(c.sar, k.sar);
            assert_eq!(c.gt, k.gt);
            assert_ne!(c.optical, k.optical);
            let bright = k.optical.plane(0).iter().filter(|&&v| v > 0.5).count();
            assert!(bright > 0);
        }
    }

    #[test]
    fn split_contracts() {
        let items: Vec<u32> = (0..10).collect();
        let g = split_dataset(&items, 5, &[0.5, 0.5]).unwrap();
        assert_eq!(g[0].len(), 5);
        assert_eq!(g[1].len(), 5);
        assert!(g[0].iter().all(|x| !g[1].contains(x)));
        assert_eq!(split_dataset(&items, 5, &[1.0]).unwrap(), vec![items.clone()]);
        assert_eq!(split_dataset(&items, 9, &[0.3, 0.7]).unwrap(), split_dataset(&items, 9, &[0.3, 0.7]).unwrap());
        assert!(matches!(split_dataset(&items, 1, &[0.5, 0.6]), Err(Error::Config(_))));
    }

    #[test]
    fn ppm_has_header_and_palette() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ppm");
        let scheme = ClassScheme::six_class();
        write_label_ppm(&[0, 1, 2, 3], 2, 2, &scheme, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &scheme.palette[3]);
    }
}
