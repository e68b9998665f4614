//! Confusion matrix, average class accuracy and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenedata::{ClassScheme, UNLABELED};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one map; ground-truth pixels equal to the sentinel are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNLABELED {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Eval(format!("class id {} outside the {k}-class scheme", g.max(p))));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub pixels: u64,
    /// Recall; absent when the class has no ground-truth pixels.
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassRow>,
    /// Mean per-class accuracy over classes present in the ground truth.
    pub aa: f64,
    /// Mean IoU over the same classes.
    pub miou: f64,
    pub overall_accuracy: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, scheme: &ClassScheme) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::Eval("no labelled ground-truth pixels".into()));
        }
        let mut classes = Vec::with_capacity(confusion.num_classes);
        let (mut acc_sum, mut iou_sum, mut present, mut correct) = (0.0, 0.0, 0usize, 0u64);
        for c in 0..confusion.num_classes {
            let tp = confusion.get(c, c);
            let row = confusion.row_sum(c);
            correct += tp;
            let (accuracy, iou) = if row > 0 {
                let union = row + confusion.col_sum(c) - tp;
                let acc = tp as f64 / row as f64;
                let iou = tp as f64 / union as f64;
                acc_sum += acc;
                iou_sum += iou;
                present += 1;
                (Some(acc), Some(iou))
            } else {
                (None, None)
            };
            let name = scheme.names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
            classes.push(ClassRow { name, pixels: row, accuracy, iou });
        }
        Ok(Self {
            aa: acc_sum / present as f64,
            miou: iou_sum / present as f64,
            overall_accuracy: correct as f64 / total as f64,
            classes,
            confusion,
        })
    }
}

/// Scores predicted label maps against ground truth.
pub fn evaluate(preds: &[Vec<u8>], gts: &[Vec<u8>], scheme: &ClassScheme) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth maps", preds.len(), gts.len())));
    }
    let mut cm = ConfusionMatrix::new(scheme.num_classes());
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    EvalReport::from_confusion(cm, scheme)
}
