//! Spectral index images and the per-pixel backscatter summary.

use crate::error::Result;
use crate::scenedata::Scene;

/// Per-pixel index images of one scene, each `[H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMaps {
    pub height: usize,
    pub width: usize,
    pub ndvi: Vec<f32>,
    pub ndwi: Vec<f32>,
    pub bi: Vec<f32>,
    /// Mean of VV and VH in dB.
    pub bs: Vec<f32>,
    /// Pixels where at least one ratio had a zero denominator.
    pub zero_denominators: usize,
}

/// `(a - b) / (a + b)`, or 0 when the denominator vanishes.
#[inline]
pub fn normalized_difference(a: f32, b: f32) -> f32 {
    let d = a + b;
    if d == 0.0 {
        0.0
    } else {
        (a - b) / d
    }
}

pub fn ndvi(nir: f32, red: f32) -> f32 {
    normalized_difference(nir, red)
}

pub fn ndwi(green: f32, nir: f32) -> f32 {
    normalized_difference(green, nir)
}

pub fn bare_soil_index(blue: f32, red: f32, nir: f32, swir: f32) -> f32 {
    normalized_difference(swir + red, nir + blue)
}

pub fn compute_indices(scene: &Scene) -> Result<IndexMaps> {
    let opt = &scene.optical;
    scene.band_map.validate(opt.channels)?;
    let bm = scene.band_map;
    let n = opt.pixels();
    let (blue, green, red, nir, swir) =
        (opt.plane(bm.blue), opt.plane(bm.green), opt.plane(bm.red), opt.plane(bm.nir), opt.plane(bm.swir));
    let (vv, vh) = (scene.sar.plane(0), scene.sar.plane(1));
    let mut maps = IndexMaps {
        height: opt.height,
        width: opt.width,
        ndvi: Vec::with_capacity(n),
        ndwi: Vec::with_capacity(n),
        bi: Vec::with_capacity(n),
        bs: Vec::with_capacity(n),
        zero_denominators: 0,
    };
    for p in 0..n {
        if nir[p] + red[p] == 0.0 || green[p] + nir[p] == 0.0 || swir[p] + red[p] + nir[p] + blue[p] == 0.0 {
            maps.zero_denominators += 1;
        }
        maps.ndvi.push(ndvi(nir[p], red[p]));
        maps.ndwi.push(ndwi(green[p], nir[p]));
        maps.bi.push(bare_soil_index(blue[p], red[p], nir[p], swir[p]));
        maps.bs.push(0.5 * (vv[p] + vh[p]));
    }
    if maps.zero_denominators > 0 {
        log::debug!("scene {}: {} pixels with zero index denominators", scene.id, maps.zero_denominators);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenedata::{class, generate_synthetic, BandMap};
    use approx::assert_abs_diff_eq;

    #[test]
    fn formula_cases() {
        assert_eq!(ndvi(0.4, 0.4), 0.0);
        assert_abs_diff_eq!(ndvi(0.8, 0.2), 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(ndwi(0.1, 0.8), -7.0 / 9.0, epsilon = 1e-7);
        assert_eq!(ndvi(0.0, 0.0), 0.0);
        // ((0.3 + 0.2) - (0.1 + 0.1)) / 0.7
        assert_abs_diff_eq!(bare_soil_index(0.1, 0.2, 0.1, 0.3), 3.0 / 7.0, epsilon = 1e-7);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let scene = generate_synthetic(21, 1, 32, 0.5).unwrap().remove(0);
        let idx = compute_indices(&scene).unwrap();
        let o = &scene.optical;
        for i in 0..32 {
            for j in 0..32 {
                let p = i * 32 + j;
                let (b, g, r, n, s) =
                    (o.at(0, i, j) as f64, o.at(1, i, j) as f64, o.at(2, i, j) as f64, o.at(3, i, j) as f64, o.at(4, i, j) as f64);
                assert_abs_diff_eq!(idx.ndvi[p] as f64, (n - r) / (n + r), epsilon = 1e-6);
                assert_abs_diff_eq!(idx.ndwi[p] as f64, (g - n) / (g + n), epsilon = 1e-6);
                assert_abs_diff_eq!(idx.bi[p] as f64, ((s + r) - (n + b)) / ((s + r) + (n + b)), epsilon = 1e-6);
                let bs = (scene.sar.at(0, i, j) as f64 + scene.sar.at(1, i, j) as f64) / 2.0;
                assert_abs_diff_eq!(idx.bs[p] as f64, bs, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn band_map_is_respected() {
        let mut scene = generate_synthetic(2, 1, 16, 0.0).unwrap().remove(0);
        let before = compute_indices(&scene).unwrap();
        // swap red and nir planes and the map together
        let (r, n) = (scene.optical.plane(2).to_vec(), scene.optical.plane(3).to_vec());
        scene.optical.plane_mut(2).copy_from_slice(&n);
        scene.optical.plane_mut(3).copy_from_slice(&r);
        scene.band_map = BandMap { red: 3, nir: 2, ..BandMap::SYNTHETIC };
        assert_eq!(compute_indices(&scene).unwrap(), before);
        scene.band_map.nir = 9;
        assert!(compute_indices(&scene).is_err());
    }

    /// Per-class index means over a cloud-free corpus, accumulated on the
    /// ground-truth masks.
    fn class_means(seed: u64) -> [[f64; 4]; 6] {
        let mut sums = [[0.0f64; 4]; 6];
        let mut counts = [0usize; 6];
        for scene in generate_synthetic(seed, 12, 64, 0.0).unwrap() {
            let idx = compute_indices(&scene).unwrap();
            for (p, &c) in scene.gt.as_ref().unwrap().iter().enumerate() {
                let c = c as usize;
                counts[c] += 1;
                for (k, v) in [idx.ndvi[p], idx.ndwi[p], idx.bi[p], idx.bs[p]].into_iter().enumerate() {
                    sums[c][k] += v as f64;
                }
            }
        }
        std::array::from_fn(|c| std::array::from_fn(|k| sums[c][k] / counts[c] as f64))
    }

    #[test]
    fn synthetic_class_orderings() {
        let m = class_means(5);
        let (ndvi_i, ndwi_i, bi_i, bs_i) = (0, 1, 2, 3);
        let w = class::WATER as usize;
        let u = class::URBAN as usize;
        let b = class::BARE as usize;
        for c in 0..6 {
            if c != w {
                assert!(m[w][ndwi_i] > m[c][ndwi_i], "ndwi water vs {c}: {m:?}");
            }
            if c != u {
                assert!(m[u][bs_i] > m[c][bs_i], "bs urban vs {c}");
            }
            if c != b {
                assert!(m[b][bi_i] > m[c][bi_i], "bi bare vs {c}");
            }
        }
        for veg in [class::FOREST as usize, class::GRASSLAND as usize] {
            for non in [w, u, b] {
                assert!(m[veg][ndvi_i] > m[non][ndvi_i]);
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let mut scene = generate_synthetic(4, 1, 16, 0.0).unwrap().remove(0);
        let a = compute_indices(&scene).unwrap();
        for v in &mut scene.optical.data {
            *v *= 0.5;
        }
        let b = compute_indices(&scene).unwrap();
        for (x, y) in a.ndvi.iter().zip(&b.ndvi).chain(a.bi.iter().zip(&b.bi)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }
}
