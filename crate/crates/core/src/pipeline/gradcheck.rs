//! Central finite-difference checks of analytic gradients.

use pixfuse_nn::{Graph, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::compute_norm;
use super::pretrain::{batch_loss, make_view_batch, prepare_scenes, PretrainScene};
use crate::augment::{ShiftSpec, TransformRecord};
use crate::contrastive::LossConfig;
use crate::error::{Error, Result};
use crate::fusionnet::{FusionMode, Network, NetworkConfig};
use crate::scenedata::generate_synthetic;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: String,
    pub eps: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `loss` with central differences on
/// `samples` entries: one per trainable tensor, the rest drawn uniformly.
/// `store` gives access to the parameters the loss reads.
pub fn grad_check<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M, &mut Graph<f64>) -> Result<Var>,
    samples: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new(true);
    let l = loss(model, &mut g)?;
    let grads = g.backward(l);
    let trainable: Vec<ParamId> = store(model).trainable().collect();
    if trainable.is_empty() {
        return Err(Error::Pipeline("nothing to check: no trainable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(ParamId, usize)> = trainable.iter().map(|&id| (id, rng.random_range(0..store(model).get(id).numel()))).collect();
    let sizes: Vec<usize> = trainable.iter().map(|&id| store(model).get(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    while picks.len() < samples {
        let mut r = rng.random_range(0..total);
        let mut t = 0;
        while r >= sizes[t] {
            r -= sizes[t];
            t += 1;
        }
        picks.push((trainable[t], r));
    }
    let value = |m: &M| -> Result<f64> {
        let mut g = Graph::new(true);
        let l = loss(m, &mut g)?;
        Ok(g.value(l).item())
    };
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for &(id, i) in &picks {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let orig = store(model).get(id).data()[i];
        store(model).get_mut(id).data_mut()[i] = orig + eps;
        let plus = value(model)?;
        store(model).get_mut(id).data_mut()[i] = orig - eps;
        let minus = value(model)?;
        store(model).get_mut(id).data_mut()[i] = orig;
        let err = relative_error(analytic, (plus - minus) / (2.0 * eps));
        if !(err <= worst) {
            worst = err;
            worst_name = format!("{}[{i}]", store(model).entry(id).name);
        }
    }
    Ok(GradCheckReport { checked: picks.len(), max_rel_error: worst, worst: worst_name, eps, tol, passed: worst < tol })
}

/// A fixed two-view batch for checking one fusion mode in 64-bit.
pub struct CompositeCase {
    pub net: Network<f64>,
    pub items: Vec<PretrainScene>,
    pub records: Vec<TransformRecord>,
    pub loss: LossConfig,
}

impl CompositeCase {
    /// Two synthetic `size x size` scenes, width 0.125, a shifted and flipped
    /// second view.
    pub fn new(mode: FusionMode, size: usize, seed: u64) -> Result<Self> {
        let scenes = generate_synthetic(seed, 2, size, 0.0)?;
        let loss = LossConfig { superpixels_per_tile: 8, ..Default::default() };
        let norm = compute_norm(&scenes)?;
        let items = prepare_scenes(&scenes, &norm, &loss, 1)?;
        let cfg = NetworkConfig { fusion_mode: mode, width_mult: 0.125, proj_dim: 16, ..Default::default() };
        let net = Network::<f64>::build(&cfg, seed)?;
        let records = vec![
            TransformRecord { shift: ShiftSpec { dx: 2, dy: -1, flip_h: true, flip_v: false }, affine: None, photometric: None },
            TransformRecord { shift: ShiftSpec { dx: -3, dy: 2, flip_h: false, flip_v: true }, affine: None, photometric: None },
        ];
        Ok(Self { net, items, records, loss })
    }

    pub fn loss(&self, g: &mut Graph<f64>) -> Result<Var> {
        let refs: Vec<&PretrainScene> = self.items.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = &self.net.cfg;
        let batch = make_view_batch::<f64>(&refs, &self.records, c.fusion_mode, &self.loss, c.in_channels_sar, c.in_channels_opt, &mut rng)?;
        Ok(batch_loss(g, &self.net, &batch, &self.loss)?.total)
    }

    pub fn check(&mut self, samples: usize, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
        grad_check(self, |c| &mut c.net.store, |c, g| c.loss(g), samples, eps, tol, seed)
    }
}

/// Composite-loss gradient check of one fusion mode on two 16x16 scenes.
pub fn composite_grad_check(mode: FusionMode, samples: usize, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    CompositeCase::new(mode, 16, seed)?.check(samples, eps, tol, seed)
}

/// Largest relative error of the composite check at each step size.
pub fn eps_sweep(mode: FusionMode, eps: &[f64], samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mut case = CompositeCase::new(mode, 16, seed)?;
    eps.iter().map(|&e| case.check(samples, e, f64::INFINITY, seed).map(|r| r.max_rel_error)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pixfuse_nn::{Function, ParamKind, Tensor};

    /// `f(p) = sum_i a_i p_i^2 / 2` with gradient `a_i p_i`.
    struct Quadratic(Vec<f64>);

    impl Function<f64> for Quadratic {
        fn name(&self) -> &'static str {
            "quadratic"
        }

        fn backward(&self, inputs: &[&Tensor<f64>], _out: &Tensor<f64>, grad: &Tensor<f64>, _needs: &[bool]) -> Vec<Option<Tensor<f64>>> {
            let p = inputs[0];
            let d = p.data().iter().zip(&self.0).map(|(v, a)| a * v * grad.item()).collect();
            vec![Some(Tensor::new(p.shape().to_vec(), d))]
        }
    }

    struct Toy {
        store: ParamStore<f64>,
        a: Vec<f64>,
    }

    impl Toy {
        fn loss(&self, g: &mut Graph<f64>) -> Result<Var> {
            let p = g.param(&self.store, self.store.id("p").unwrap());
            let v: f64 = g.value(p).data().iter().zip(&self.a).map(|(x, a)| a * x * x / 2.0).sum();
            Ok(g.apply(&[p], Tensor::scalar(v), Box::new(Quadratic(self.a.clone()))))
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new(vec![5], vec![0.5, -1.5, 2.0, 0.25, 3.0]), ParamKind::Weight);
        let mut toy = Toy { store, a: vec![1.0, 2.0, 3.0, 4.0, 0.5] };
        let r = grad_check(&mut toy, |t| &mut t.store, |t, g| t.loss(g), 200, 1e-3, 1e-8, 0).unwrap();
        assert_eq!(r.checked, 200);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]), ParamKind::Weight);
        let mut toy = Toy { store, a: vec![1.0, 1.0] };
        // the value uses a = 1 but the gradient claims a = 2
        let r = grad_check(
            &mut toy,
            |t| &mut t.store,
            |t, g| {
                let p = g.param(&t.store, t.store.id("p").unwrap());
                let v: f64 = g.value(p).data().iter().map(|x| x * x / 2.0).sum();
                Ok(g.apply(&[p], Tensor::scalar(v), Box::new(Quadratic(vec![2.0, 2.0]))))
            },
            10,
            1e-4,
            1e-4,
            0,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 1e-9), 1e-3);
    }
}
