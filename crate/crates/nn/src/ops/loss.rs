use crate::float::Float;
use crate::graph::{Function, Graph, Var};
use crate::tensor::Tensor;

/// Label value excluded from the loss.
pub const IGNORE_LABEL: u8 = 255;

struct MaskedCrossEntropy<T> {
    /// Softmax probabilities, `[K, M]`.
    probs: Vec<T>,
    labels: Vec<u8>,
    count: usize,
}

impl<T: Float> Function<T> for MaskedCrossEntropy<T> {
    fn name(&self) -> &'static str {
        "masked_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let k = logits.dim(0);
        let m = logits.numel() / k;
        let mut d = vec![T::zero(); logits.numel()];
        if self.count > 0 {
            let scale = grad.item() / T::from_f64(self.count as f64);
            for (p, &lab) in self.labels.iter().enumerate() {
                if lab == IGNORE_LABEL {
                    continue;
                }
                for c in 0..k {
                    let target = if c == lab as usize { T::one() } else { T::zero() };
                    d[c * m + p] = (self.probs[c * m + p] - target) * scale;
                }
            }
        }
        vec![Some(Tensor::new(logits.shape().to_vec(), d))]
    }
}

impl<T: Float> Graph<T> {
    /// Mean softmax cross-entropy over pixels whose label is not
    /// [`IGNORE_LABEL`]. `logits` is `[K, N, H, W]` (or any `[K, M]`),
    /// `labels` holds one class id per column. Returns 0 when nothing is
    /// labelled.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let lv = self.value(logits);
        let k = lv.dim(0);
        let m = lv.numel() / k;
        assert_eq!(labels.len(), m, "masked_cross_entropy label count");
        let ld = lv.data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for p in 0..m {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(ld[c * m + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (ld[c * m + p] - mx).exp();
                probs[c * m + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * m + p] /= z;
            }
            let lab = labels[p];
            if lab != IGNORE_LABEL {
                assert!((lab as usize) < k, "label {lab} out of range for {k} classes");
                total += z.ln() + mx - ld[lab as usize * m + p];
                count += 1;
            }
        }
        let loss = if count > 0 { total / T::from_f64(count as f64) } else { T::zero() };
        self.apply(
            &[logits],
            Tensor::scalar(loss),
            Box::new(MaskedCrossEntropy { probs, labels: labels.to_vec(), count }),
        )
    }
}
