use crate::float::Float;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries for inputs
/// that do not may be `None`.
pub trait Function<T: Float> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers once the step is done.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

/// Define-by-run tape. Every op evaluates eagerly and records enough state
/// for [`Graph::backward`].
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Float> Graph<T> {
    /// `training` selects batch statistics in normalisation layers.
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false, None)
    }

    /// Leaf that collects a gradient (used for input-gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true, None)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let requires = store.requires_grad(id);
        self.push(store.get(id).clone(), Vec::new(), None, requires, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of a custom operation.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor<T>, func: Box<dyn Function<T>>) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires {
            self.push(output, inputs.to_vec(), Some(func), true, None)
        } else {
            self.push(output, Vec::new(), None, false, None)
        }
    }

    pub(crate) fn record_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Folds observed batch statistics into running buffers.
    pub fn apply_bn_updates(&self, store: &mut ParamStore<T>, momentum: T) {
        let keep = T::one() - momentum;
        for u in &self.bn_updates {
            for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var_unbiased) {
                *r = keep * *r + momentum * b;
            }
        }
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        func: Option<Box<dyn Function<T>>>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node { value, inputs, func, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.func {
                None => leaf_grads[idx] = Some(g),
                Some(func) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = func.backward(&inputs, &node.value, &g, &needs);
                    assert_eq!(input_grads.len(), node.inputs.len(), "{} returned wrong gradient count", func.name());
                    for ((var, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                        if !need {
                            continue;
                        }
                        let Some(ig) = ig else { continue };
                        debug_assert_eq!(ig.shape(), self.nodes[var.0].value.shape(), "{} gradient shape", func.name());
                        match &mut grads[var.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| node.param.map(|p| (p, i)))
            .collect();
        Gradients { leaf: leaf_grads, params }
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients<T> {
    leaf: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients summed over every node bound to the same id.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(pid, node) in &self.params {
            let Some(g) = &self.leaf[node] else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.leaf[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}
