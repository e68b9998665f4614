use std::collections::BTreeMap;

use crate::float::Float;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learning-rate policy evaluated per epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `interval` epochs.
    Step { gamma: f64, interval: usize },
    /// Multiply by `gamma` at each listed epoch.
    MultiStep { gamma: f64, milestones: Vec<usize> },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { gamma, interval } => gamma.powi((epoch / (*interval).max(1)) as i32),
            LrSchedule::MultiStep { gamma, milestones } => {
                gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
            }
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamId, (Vec<T>, Vec<T>, u64)>,
}

impl<T: Float> Adam<T> {
    pub fn new(beta1: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2: 0.999, eps: 1e-8, weight_decay, state: BTreeMap::new() }
    }

    /// One update; `lr` gives the learning rate for each parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: impl Fn(ParamId) -> f64) {
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, eps, wd) = (T::one(), T::from_f64(self.eps), T::from_f64(self.weight_decay));
        for (id, g) in grads {
            if !store.requires_grad(*id) {
                continue;
            }
            let p = store.get_mut(*id).data_mut();
            let (m, v, t) = self.state.entry(*id).or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()], 0));
            *t += 1;
            let bc1 = T::from_f64(1.0 - self.beta1.powi(*t as i32));
            let bc2 = T::from_f64(1.0 - self.beta2.powi(*t as i32));
            let step = T::from_f64(lr(*id));
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= step * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: impl Fn(ParamId) -> f64) {
        let (mu, wd) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for (id, g) in grads {
            if !store.requires_grad(*id) {
                continue;
            }
            let step = T::from_f64(lr(*id));
            let p = store.get_mut(*id).data_mut();
            if self.momentum == 0.0 {
                for (pi, &gi) in p.iter_mut().zip(g.data()) {
                    *pi -= step * (gi + wd * *pi);
                }
                continue;
            }
            let vel = self.velocity.entry(*id).or_insert_with(|| vec![T::zero(); p.len()]);
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                vel[i] = mu * vel[i] + gi;
                p[i] -= step * vel[i];
            }
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Float> Optimizer<T> {
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: impl Fn(ParamId) -> f64) {
        match self {
            Optimizer::Adam(a) => a.step(store, grads, lr),
            Optimizer::Sgd(s) => s.step(store, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn sgd_step_on_quadratic_is_exact() {
        // f(p) = 0.5 * |p|^2, grad = p
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]), ParamKind::Weight);
        let grad = store.get(id).clone();
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(&mut store, &[(id, grad.clone())], |_| 0.1);
        for (p, g) in store.get(id).data().iter().zip(grad.data()) {
            assert_eq!(*p, g - 0.1 * g);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(vec![2], vec![1.0, -1.0]), ParamKind::Weight);
        let mut opt = Adam::new(0.9, 0.0);
        opt.step(&mut store, &[(id, Tensor::new(vec![2], vec![4.0, -0.01]))], |_| 0.01);
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 0.99).abs() < 1e-4);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("enc.w", Tensor::new(vec![1], vec![1.0]), ParamKind::Weight);
        store.set_frozen_prefix("enc.", true);
        let mut opt = Optimizer::Sgd(Sgd::new(0.9, 0.0));
        opt.step(&mut store, &[(id, Tensor::new(vec![1], vec![1.0]))], |_| 1.0);
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.factor(99), 1.0);
        assert_eq!(LrSchedule::Step { gamma: 0.5, interval: 10 }.factor(25), 0.25);
        let ms = LrSchedule::MultiStep { gamma: 0.5, milestones: vec![30, 42] };
        assert_eq!(ms.factor(29), 1.0);
        assert_eq!(ms.factor(30), 0.5);
        assert_eq!(ms.factor(49), 0.25);
    }
}
