//! Central-difference checks for every differentiable op, in f64.

use pixfuse_nn::{Graph, ParamKind, ParamStore, Tensor, Var, IGNORE_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Builds `sum(op(inputs) * probe)` for a fixed random probe so the check
/// covers the whole Jacobian, not just its column sums.
fn check(shapes: &[&[usize]], training: bool, seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let probe_seed = rng.random::<u64>();

    let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new(training);
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars);
        // contract explicitly through a linear layer: [1, n] x [1, n]^T
        let n = g.value(out).numel();
        let flat = reshape_var(&mut g, out, n);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let w = g.constant(random(&[1, n], &mut prng));
        let s = g.linear(flat, w, None);
        let loss = g.sum(s);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        (value, vars.iter().map(|v| grads.wrt(*v).cloned()).collect())
    };

    let (_, analytic) = eval(&inputs);
    let eps = 1e-6;
    for (i, inp) in inputs.iter().enumerate() {
        let a = analytic[i].as_ref().expect("missing gradient");
        for j in 0..inp.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= eps;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let an = a.data()[j];
            let err = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {an} numeric {num}");
        }
    }
}

/// Flattens any var to `[1, n]` through an identity op with a reshape.
fn reshape_var(g: &mut Graph<f64>, v: Var, n: usize) -> Var {
    struct Reshape(Vec<usize>);
    impl pixfuse_nn::Function<f64> for Reshape {
        fn name(&self) -> &'static str {
            "reshape"
        }
        fn backward(&self, _i: &[&Tensor<f64>], _o: &Tensor<f64>, grad: &Tensor<f64>, _n: &[bool]) -> Vec<Option<Tensor<f64>>> {
            vec![Some(grad.clone().reshape(&self.0))]
        }
    }
    let shape = g.shape(v).to_vec();
    let value = g.value(v).clone().reshape(&[1, n]);
    g.apply(&[v], value, Box::new(Reshape(shape)))
}

#[test]
fn conv2d_gradients() {
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
        check(&[&[2, 2, 6, 6], &[3, 2, k, k], &[3]], false, 1, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    for &training in &[true, false] {
        check(&[&[3, 2, 3, 3], &[3], &[3]], training, 2, |g, v| {
            let mut store = ParamStore::<f64>::new();
            let rm = store.add("rm", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]), ParamKind::Buffer);
            let rv = store.add("rv", Tensor::new(vec![3], vec![1.5, 0.5, 2.0]), ParamKind::Buffer);
            g.batch_norm(v[0], v[1], v[2], &store, rm, rv, 1e-5)
        });
    }
}

#[test]
fn structural_op_gradients() {
    check(&[&[2, 3, 2, 2], &[1, 3, 2, 2]], false, 3, |g, v| g.concat_channels(&[v[0], v[1]]));
    check(&[&[2, 4, 2, 3]], false, 4, |g, v| g.slice_batch(v[0], 1, 3));
    check(&[&[5, 3]], false, 5, |g, v| g.slice_rows(v[0], 1, 4));
    check(&[&[2, 1, 2, 3], &[2, 2, 2, 3]], false, 5, |g, v| g.concat_batch(&[v[0], v[1]]));
    check(&[&[2, 2, 3, 2]], false, 6, |g, v| g.upsample2x(v[0]));
    check(&[&[3, 2, 2, 2]], false, 7, |g, v| g.global_avg_pool(v[0]));
    check(&[&[4, 3], &[2, 3], &[2]], false, 8, |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(&[&[2, 3]], false, 9, |g, v| g.scale(v[0], -2.5));
    check(&[&[2, 3], &[2, 3]], false, 10, |g, v| g.add(v[0], v[1]));
}

#[test]
fn relu_gradient_away_from_kink() {
    check(&[&[2, 5]], false, 11, |g, v| g.relu(v[0]));
}

#[test]
fn spatial_gather_gradient() {
    // shift right by one column with fill, per sample different maps
    let map: Vec<Option<u32>> = (0..2 * 6)
        .map(|p| {
            let (b, q) = (p / 6, p % 6);
            let (i, j) = (q / 3, q % 3);
            if b == 0 {
                (j >= 1).then(|| (i * 3 + j - 1) as u32)
            } else {
                Some(((1 - i) * 3 + j) as u32)
            }
        })
        .collect();
    check(&[&[2, 2, 2, 3]], false, 12, move |g, v| g.spatial_gather(v[0], map.clone(), 0.0));
}

#[test]
fn masked_cross_entropy_gradient_and_mask() {
    let labels = vec![0u8, 2, IGNORE_LABEL, 1, 1, IGNORE_LABEL];
    check(&[&[3, 6]], false, 13, move |g, v| g.masked_cross_entropy(v[0], &labels));

    let mut g = Graph::<f64>::new(false);
    let x = g.variable(Tensor::new(vec![2, 2], vec![1.0, 5.0, -1.0, 3.0]));
    let loss = g.masked_cross_entropy(x, &[0, IGNORE_LABEL]);
    let grads = g.backward(loss);
    let d = grads.wrt(x).unwrap();
    // column 1 is ignored: zero gradient
    assert_eq!(d.data()[1], 0.0);
    assert_eq!(d.data()[3], 0.0);
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn batch_norm_training_records_running_update() {
    let mut store = ParamStore::<f64>::new();
    let rm = store.add("rm", Tensor::zeros(&[1]), ParamKind::Buffer);
    let rv = store.add("rv", Tensor::full(&[1], 1.0), ParamKind::Buffer);
    let mut g = Graph::new(true);
    let x = g.constant(Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let _ = g.batch_norm(x, gamma, beta, &store, rm, rv, 1e-5);
    g.apply_bn_updates(&mut store, 0.1);
    assert!((store.get(rm).item() - 0.25).abs() < 1e-12);
    // unbiased var of 1..4 is 5/3
    assert!((store.get(rv).item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}
