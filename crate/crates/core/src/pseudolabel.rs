//! Rule-based collection of sparse, high-confidence training samples from
//! spectral indices and per-scene clusters, and the per-class label cap.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_scene, ClusterConfig, ClusterStats, MarkerClusters, SceneClusters};
use crate::error::{config_err, Error, Result};
use crate::scenedata::{class, read_u8, write_json, Scene, UNLABELED};
use crate::spectral::{compute_indices, IndexMaps};

/// The rule that labelled a pixel, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Water,
    Forest,
    Grassland,
    Urban,
    BareLand,
    SparseVegetation,
}

impl Rule {
    pub const ALL: [Rule; 6] = [Rule::Water, Rule::Forest, Rule::Grassland, Rule::Urban, Rule::BareLand, Rule::SparseVegetation];

    pub fn class(self) -> u8 {
        match self {
            Rule::Water => class::WATER,
            Rule::Forest => class::FOREST,
            Rule::Grassland => class::GRASSLAND,
            Rule::Urban => class::URBAN,
            Rule::BareLand => class::BARE,
            Rule::SparseVegetation => class::SPARSE,
        }
    }

    pub fn from_class(c: u8) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.class() == c)
    }
}

/// How the sparse-vegetation rule reads "in M_bi and M_ndvi".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseMembership {
    /// The optical cluster is either medium cluster.
    #[default]
    Either,
    /// The optical cluster is both medium clusters at once.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub sparse_membership: SparseMembership,
    /// Labels kept per class and scene in the sparse-label regime.
    pub cap: usize,
    /// Apply the cap when collecting labels for self-training.
    pub sparsify: bool,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { sparse_membership: SparseMembership::Either, cap: 10, sparsify: false, seed: 0 }
    }
}

/// Cluster-mean thresholds of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Mean NDWI of the max-NDWI cluster.
    pub v_ndwi: f64,
    /// Mean NDVI of the max-NDVI cluster.
    pub v_ndvi: f64,
    /// Mean BS of the max-BS SAR cluster.
    pub v_bs: f64,
    /// Mean BI of the max-BI cluster.
    pub v_bi: f64,
    /// Mean NDVI of the medium-NDVI cluster.
    pub v_ndvi_medium: f64,
}

impl Thresholds {
    pub fn from_stats(markers: &MarkerClusters, s2: &ClusterStats, s1: &ClusterStats) -> Self {
        let o = |c: u32| &s2.clusters[c as usize];
        Self {
            v_ndwi: o(markers.h_ndwi).mean_ndwi,
            v_ndvi: o(markers.h_ndvi).mean_ndvi,
            v_bs: s1.clusters[markers.h_bs as usize].mean_bs,
            v_bi: o(markers.h_bi).mean_bi,
            v_ndvi_medium: o(markers.m_ndvi).mean_ndvi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabelMap {
    pub height: usize,
    pub width: usize,
    /// Class id per pixel or [`UNLABELED`].
    pub labels: Vec<u8>,
    /// Rule that fired per pixel.
    pub provenance: Vec<Option<Rule>>,
    pub thresholds: Option<Thresholds>,
}

impl SparseLabelMap {
    pub fn count(&self, rule: Rule) -> usize {
        self.provenance.iter().filter(|p| **p == Some(rule)).count()
    }

    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

/// Labels every pixel by the first rule whose predicate holds.
pub fn collect_samples(
    idx: &IndexMaps,
    s2_labels: &[u32],
    s1_labels: &[u32],
    markers: &MarkerClusters,
    thresholds: &Thresholds,
    membership: SparseMembership,
) -> Result<SparseLabelMap> {
    let n = idx.height * idx.width;
    if s2_labels.len() != n || s1_labels.len() != n || idx.ndvi.len() != n {
        return Err(config_err!("cluster maps and index maps disagree in size"));
    }
    let m = markers;
    let t = thresholds;
    let mut provenance = Vec::with_capacity(n);
    for p in 0..n {
        let (a, b) = (s2_labels[p], s1_labels[p]);
        let (ndvi, ndwi, bi, bs) = (idx.ndvi[p] as f64, idx.ndwi[p] as f64, idx.bi[p] as f64, idx.bs[p] as f64);
        let medium = match membership {
            SparseMembership::Either => a == m.m_bi || a == m.m_ndvi,
            SparseMembership::Both => a == m.m_bi && a == m.m_ndvi,
        };
        let rule = if a == m.h_ndwi && b == m.l_bs && ndwi > t.v_ndwi {
            Some(Rule::Water)
        } else if a == m.h_ndvi && b == m.h_bs && ndvi > t.v_ndvi {
            Some(Rule::Forest)
        } else if a == m.h_ndvi && b == m.l_bs && ndvi > t.v_ndvi {
            Some(Rule::Grassland)
        } else if b == m.h_bs && bs > t.v_bs {
            Some(Rule::Urban)
        } else if a == m.h_bi && b == m.l_bs && bi > t.v_bi {
            Some(Rule::BareLand)
        } else if medium && ndvi < t.v_ndvi_medium {
            Some(Rule::SparseVegetation)
        } else {
            None
        };
        provenance.push(rule);
    }
    Ok(SparseLabelMap {
        height: idx.height,
        width: idx.width,
        labels: provenance.iter().map(|r| r.map_or(UNLABELED, Rule::class)).collect(),
        provenance,
        thresholds: Some(*thresholds),
    })
}

/// Indices, clustering and rule evaluation for one scene.
pub fn pseudo_label_scene(scene: &Scene, cluster_cfg: &ClusterConfig, cfg: &PseudoConfig) -> Result<(SparseLabelMap, SceneClusters)> {
    let idx = compute_indices(scene)?;
    let clusters = cluster_scene(scene, &idx, cluster_cfg)?;
    let thresholds = Thresholds::from_stats(&clusters.markers, &clusters.stats_s2, &clusters.stats_s1);
    let map = collect_samples(&idx, &clusters.s2.labels, &clusters.s1.labels, &clusters.markers, &thresholds, cfg.sparse_membership)?;
    Ok((map, clusters))
}

/// Keeps exactly `cap` uniformly drawn pixels of every class that has at
/// least `cap`, and drops classes with fewer.
pub fn sparsify<R: Rng + ?Sized>(labels: &SparseLabelMap, cap: usize, rng: &mut R) -> SparseLabelMap {
    assert!(cap >= 1, "cap must be positive");
    let mut out = labels.clone();
    for c in 0..=u8::MAX - 1 {
        let members: Vec<usize> = (0..labels.labels.len()).filter(|&p| labels.labels[p] == c).collect();
        if members.is_empty() {
            continue;
        }
        let keep: Vec<usize> = if members.len() < cap {
            Vec::new()
        } else {
            rand::seq::index::sample(rng, members.len(), cap).into_iter().map(|i| members[i]).collect()
        };
        for &p in &members {
            out.labels[p] = UNLABELED;
            out.provenance[p] = None;
        }
        for p in keep {
            out.labels[p] = c;
            out.provenance[p] = labels.provenance[p];
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PseudoMeta {
    height: usize,
    width: usize,
    rule_counts: std::collections::BTreeMap<String, usize>,
    #[serde(default)]
    thresholds: Option<Thresholds>,
}

fn rule_name(r: Rule) -> String {
    serde_json::to_value(r).unwrap().as_str().unwrap().to_string()
}

/// Writes `pseudo.bin` and `pseudo_meta.json` into a scene directory.
pub fn save_pseudo(map: &SparseLabelMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("pseudo.bin");
    fs::write(&path, &map.labels).map_err(|e| Error::io(&path, e))?;
    let meta = PseudoMeta {
        height: map.height,
        width: map.width,
        rule_counts: Rule::ALL.iter().map(|&r| (rule_name(r), map.count(r))).collect(),
        thresholds: map.thresholds,
    };
    write_json(&dir.join("pseudo_meta.json"), &meta)
}

/// Reads labels back; provenance is rebuilt from class ids.
pub fn load_pseudo(dir: &Path) -> Result<SparseLabelMap> {
    let mpath = dir.join("pseudo_meta.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let meta: PseudoMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let labels = read_u8(&dir.join("pseudo.bin"), meta.height * meta.width)?;
    let provenance = labels.iter().map(|&l| Rule::from_class(l)).collect();
    Ok(SparseLabelMap { height: meta.height, width: meta.width, labels, provenance, thresholds: meta.thresholds })
}
