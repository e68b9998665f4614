//! Generates a few synthetic scenes, round-trips them through the on-disk
//! format, and writes ground-truth and superpixel maps as PPM images.
//!
//! Usage: `synthetic_scenes [out_dir]`, defaulting to `synthetic_out`.

use std::path::PathBuf;

use pixfuse::contrastive::{segment_superpixels, LossConfig};
use pixfuse::scenedata::{generate_synthetic, load_scene, save_scene, write_label_ppm, ClassScheme};
use pixfuse::spectral::compute_indices;

fn mean(v: &[f32]) -> f32 {
    v.iter().sum::<f32>() / v.len() as f32
}

fn main() -> pixfuse::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic_out".into()));
    let scenes = generate_synthetic(1, 4, 64, 0.3)?;
    let loss = LossConfig::default();
    for (i, scene) in scenes.iter().enumerate() {
        let dir = out.join(format!("s{i}"));
        save_scene(scene, &dir)?;
        let back = load_scene(&dir)?;
        assert_eq!(&back, scene);

        let idx = compute_indices(scene)?;
        let (h, w) = (scene.optical.height, scene.optical.width);
        write_label_ppm(scene.gt.as_ref().expect("ground truth"), h, w, &scene.class_scheme, &dir.join("gt.ppm"))?;

        let sp = segment_superpixels(&scene.optical, loss.superpixels_per_tile, loss.slic_compactness, loss.slic_iterations)?;
        // cycle the six palette colours over segment ids
        let ids: Vec<u8> = sp.ids.iter().map(|&s| (s % 6) as u8).collect();
        write_label_ppm(&ids, h, w, &ClassScheme::six_class(), &dir.join("superpixels.ppm"))?;

        println!(
            "{}: mean NDVI {:.3} NDWI {:.3} BI {:.3} BS {:.1} dB, {} superpixels",
            scene.id,
            mean(&idx.ndvi),
            mean(&idx.ndwi),
            mean(&idx.bi),
            mean(&idx.bs),
            sp.num_segments
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
