//! Metric files written by the training and evaluation phases.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::EvalReport;
use super::EpochLog;
use crate::error::{Error, Result};
use crate::fusionnet::FusionMode;
use crate::scenedata::write_json;

pub const METRICS_HEADER: &str = "epoch,phase,loss,aa,miou";

/// CSV text of a training history. Missing scores are empty fields.
pub fn metrics_csv(history: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for e in history {
        let _ = writeln!(out, "{},{},{:.6},{},{}", e.epoch, e.phase, e.loss, opt(e.aa), opt(e.miou));
    }
    out
}

pub fn write_metrics_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    std::fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}

/// One scored method, e.g. a linear probe or a self-training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Final report of a run: one row per scored method with per-class
/// accuracy and IoU, AA and mIoU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub phase: String,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    pub results: Vec<ResultRow>,
}

impl RunReport {
    pub fn new(phase: &str, fusion_mode: FusionMode, seed: u64) -> Self {
        Self { phase: phase.into(), fusion_mode, seed, results: Vec::new() }
    }

    pub fn push(&mut self, method: &str, report: EvalReport) {
        self.results.push(ResultRow { method: method.into(), report });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::ConfusionMatrix;
    use crate::scenedata::ClassScheme;

    #[test]
    fn csv_leaves_missing_scores_empty() {
        let h = [
            EpochLog { epoch: 1, phase: "pretrain", loss: 2.5, aa: None, miou: None },
            EpochLog { epoch: 1, phase: "linear", loss: 0.25, aa: Some(0.5), miou: Some(0.125) },
        ];
        assert_eq!(metrics_csv(&h), "epoch,phase,loss,aa,miou\n1,pretrain,2.500000,,\n1,linear,0.250000,0.500000,0.125000\n");
    }

    #[test]
    fn report_lists_class_rows() {
        let scheme = ClassScheme { names: vec!["a".into(), "b".into()], palette: vec![[0, 0, 0], [255, 255, 255]] };
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 0, 1, 0, 1, 1, 1], &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let mut r = RunReport::new("probe", FusionMode::PixIF, 3);
        r.push("linear", EvalReport::from_confusion(cm, &scheme).unwrap());
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["fusion_mode"], "pixif");
        assert_eq!(v["results"][0]["method"], "linear");
        assert_eq!(v["results"][0]["aa"], 0.75);
        assert_eq!(v["results"][0]["classes"][1]["name"], "b");
    }
}
