use crate::float::Float;
use crate::graph::{BnUpdate, Function, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

struct BatchNorm<T> {
    /// Normalised input, same layout as the input.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Whether batch statistics were used (their gradient path is then live).
    batch_stats: bool,
}

impl<T: Float> Function<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let gamma = inputs[1].data();
        let c = x.dim(0);
        let m = x.numel() / c;
        let dy = grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for (&g, &xh) in dy[ch * m..(ch + 1) * m].iter().zip(&self.xhat[ch * m..(ch + 1) * m]) {
                sg += g * xh;
                sb += g;
            }
            dgamma[ch] = sg;
            dbeta[ch] = sb;
        }
        let dx = if needs[0] {
            let mut dx = vec![T::zero(); x.numel()];
            let mf = T::from_f64(m as f64);
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                let range = ch * m..(ch + 1) * m;
                if self.batch_stats {
                    let (sb, sg) = (dbeta[ch], dgamma[ch]);
                    for ((d, &g), &xh) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&self.xhat[range.clone()]) {
                        *d = scale * (g - (sb + xh * sg) / mf);
                    }
                } else {
                    for (d, &g) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]) {
                        *d = scale * g;
                    }
                }
            }
            Some(Tensor::new(x.shape().to_vec(), dx))
        } else {
            None
        };
        vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], dgamma)),
            needs[2].then(|| Tensor::new(vec![c], dbeta)),
        ]
    }
}

impl<T: Float> Graph<T> {
    /// Per-channel batch normalisation over the `N, H, W` axes of a
    /// `[C, N, H, W]` input. Training graphs normalise with batch statistics
    /// and queue a running-stat update; inference graphs use the stored
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let m = self.value(x).numel() / c;
        assert_eq!(self.shape(gamma), &[c], "batch_norm gamma shape");
        assert_eq!(self.shape(beta), &[c], "batch_norm beta shape");
        let eps = T::from_f64(eps);
        let training = self.is_training();
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            assert!(m > 1, "batch_norm in training mode needs more than one value per channel");
            let mf = T::from_f64(m as f64);
            for ch in 0..c {
                let row = &xd[ch * m..(ch + 1) * m];
                let mu = row.iter().copied().sum::<T>() / mf;
                let v = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
                mean[ch] = mu;
                var[ch] = v;
            }
        } else {
            mean.copy_from_slice(store.get(running_mean).data());
            var.copy_from_slice(store.get(running_var).data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            for i in ch * m..(ch + 1) * m {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + b[ch];
            }
        }
        if training {
            let corr = T::from_f64(m as f64 / (m as f64 - 1.0));
            self.record_bn_update(BnUpdate {
                running_mean,
                running_var,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|&v| v * corr).collect(),
            });
        }
        let value = Tensor::new(shape, out);
        self.apply(&[x, gamma, beta], value, Box::new(BatchNorm { xhat, inv_std, batch_stats: training }))
    }
}
