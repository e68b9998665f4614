//! Pseudo-labels a synthetic corpus and reports per-rule precision against
//! the generator's ground truth.

use pixfuse::cluster::ClusterConfig;
use pixfuse::pseudolabel::{pseudo_label_scene, PseudoConfig, Rule};
use pixfuse::scenedata::{generate_synthetic, UNLABELED};

fn main() -> pixfuse::Result<()> {
    let scenes = generate_synthetic(42, 40, 64, 0.0)?;
    let mut hits = [0usize; 6];
    let mut totals = [0usize; 6];
    let mut worst = 1.0f64;
    for scene in &scenes {
        let (map, _) = pseudo_label_scene(scene, &ClusterConfig::default(), &PseudoConfig::default())?;
        let gt = scene.gt.as_ref().expect("synthetic scenes carry ground truth");
        let (mut ok, mut n) = (0, 0);
        for (p, &l) in map.labels.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            totals[l as usize] += 1;
            n += 1;
            if gt[p] == l {
                hits[l as usize] += 1;
                ok += 1;
            }
        }
        if n > 0 {
            worst = worst.min(ok as f64 / n as f64);
        }
    }
    for rule in Rule::ALL {
        let c = rule.class() as usize;
        let precision = if totals[c] > 0 { hits[c] as f64 / totals[c] as f64 } else { f64::NAN };
        println!("{:<18} {:>7} labels  precision {:.3}", format!("{rule:?}"), totals[c], precision);
    }
    let all = hits.iter().sum::<usize>() as f64 / totals.iter().sum::<usize>() as f64;
    println!("overall precision {all:.3}, worst scene {worst:.3}");
    Ok(())
}
