use crate::float::{gemm, Float};
use crate::graph::{Function, Graph, Var};
use crate::tensor::Tensor;

struct Relu;

impl<T: Float> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(Tensor::new(output.shape().to_vec(), d))]
    }
}

struct Add;

impl<T: Float> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

struct Scale<T>(T);

impl<T: Float> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.0;
        vec![Some(grad.map(|g| g * s))]
    }
}

/// Splits a gradient along axis 0 into pieces of the given sizes.
struct ConcatChannels {
    sizes: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Function<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for ((&len, shape), &need) in self.sizes.iter().zip(&self.shapes).zip(needs) {
            out.push(need.then(|| Tensor::new(shape.clone(), grad.data()[offset..offset + len].to_vec())));
            offset += len;
        }
        out
    }
}

/// Batch slice `[.., n0..n1, ..]` of a `[C, N, H, W]` tensor.
struct SliceBatch {
    n_total: usize,
    n0: usize,
    n1: usize,
    plane: usize,
}

impl<T: Float> Function<T> for SliceBatch {
    fn name(&self) -> &'static str {
        "slice_batch"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let c = x.dim(0);
        let span = (self.n1 - self.n0) * self.plane;
        let mut dx = vec![T::zero(); x.numel()];
        for ch in 0..c {
            let dst = (ch * self.n_total + self.n0) * self.plane;
            dx[dst..dst + span].copy_from_slice(&grad.data()[ch * span..(ch + 1) * span]);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

/// Leading-axis slice `[r0..r1, ..]`.
struct SliceRows {
    start: usize,
}

impl<T: Float> Function<T> for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let row = x.numel() / x.dim(0);
        let mut dx = vec![T::zero(); x.numel()];
        dx[self.start * row..self.start * row + grad.numel()].copy_from_slice(grad.data());
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

struct ConcatBatch {
    counts: Vec<usize>,
    plane: usize,
}

impl<T: Float> Function<T> for ConcatBatch {
    fn name(&self) -> &'static str {
        "concat_batch"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = output.dim(0);
        let total: usize = self.counts.iter().sum();
        let mut out = Vec::new();
        let mut n0 = 0;
        for ((&cnt, &need), inp) in self.counts.iter().zip(needs).zip(inputs) {
            if need {
                let span = cnt * self.plane;
                let mut d = vec![T::zero(); inp.numel()];
                for ch in 0..c {
                    let src = (ch * total + n0) * self.plane;
                    d[ch * span..(ch + 1) * span].copy_from_slice(&grad.data()[src..src + span]);
                }
                out.push(Some(Tensor::new(inp.shape().to_vec(), d)));
            } else {
                out.push(None);
            }
            n0 += cnt;
        }
        out
    }
}

struct Upsample2x;

impl<T: Float> Function<T> for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let planes = x.dim(0) * x.dim(1);
        let g = grad.data();
        let mut dx = vec![T::zero(); x.numel()];
        for p in 0..planes {
            let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let r0 = 2 * i * 2 * w + 2 * j;
                    let r1 = r0 + 2 * w;
                    dst[i * w + j] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

/// `[C, N, H, W] -> [N, C]` spatial mean.
struct GlobalAvgPool;

impl<T: Float> Function<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (c, n, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let inv = T::one() / T::from_f64(plane as f64);
        let mut dx = vec![T::zero(); x.numel()];
        for ch in 0..c {
            for b in 0..n {
                let g = grad.data()[b * c + ch] * inv;
                dx[(ch * n + b) * plane..(ch * n + b + 1) * plane].fill(g);
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

/// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
struct Linear {
    has_bias: bool,
}

impl<T: Float> Function<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, din) = (x.dim(0), x.dim(1));
        let dout = w.dim(0);
        let dy = grad.data();
        let dx = needs[0].then(|| {
            let mut d = vec![T::zero(); n * din];
            gemm(false, false, n, din, dout, T::one(), dy, w.data(), T::zero(), &mut d);
            Tensor::new(vec![n, din], d)
        });
        let dw = needs[1].then(|| {
            let mut d = vec![T::zero(); dout * din];
            gemm(true, false, dout, din, n, T::one(), dy, x.data(), T::zero(), &mut d);
            Tensor::new(vec![dout, din], d)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut d = vec![T::zero(); dout];
                for row in dy.chunks(dout) {
                    for (a, &b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::new(vec![dout], d)
            }));
        }
        out
    }
}

/// Per-sample spatial gather: `out[c, n, p] = x[c, n, map[n*HW + p]]`,
/// or `fill` where the map entry is `None`.
struct SpatialGather {
    map: Vec<Option<u32>>,
}

impl<T: Float> Function<T> for SpatialGather {
    fn name(&self) -> &'static str {
        "spatial_gather"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (c, n, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let mut dx = vec![T::zero(); x.numel()];
        for ch in 0..c {
            for b in 0..n {
                let base = (ch * n + b) * plane;
                let g = &grad.data()[base..base + plane];
                let d = &mut dx[base..base + plane];
                for (p, src) in self.map[b * plane..(b + 1) * plane].iter().enumerate() {
                    if let Some(s) = src {
                        d[*s as usize] += g[p];
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx))]
    }
}

struct SumAll;

impl<T: Float> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

impl<T: Float> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.apply(&[x], v, Box::new(Relu))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.apply(&[a, b], v, Box::new(Add))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.value(x).map(|v| v * s);
        self.apply(&[x], v, Box::new(Scale(s)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.apply(&[x], v, Box::new(SumAll))
    }

    /// Concatenates along axis 0 (channels in `[C, N, H, W]`).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]).to_vec();
        let mut c = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        let mut shapes = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[1..], &first[1..], "concat_channels trailing shape mismatch");
            c += s[0];
            shapes.push(s.to_vec());
            sizes.push(self.value(x).numel());
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = c;
        self.apply(xs, Tensor::new(shape, data), Box::new(ConcatChannels { sizes, shapes }))
    }

    /// Selects samples `n0..n1` of a `[C, N, H, W]` tensor.
    pub fn slice_batch(&mut self, x: Var, n0: usize, n1: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(n0 < n1 && n1 <= s[1], "slice_batch range out of bounds");
        let plane = s[2] * s[3];
        let span = (n1 - n0) * plane;
        let mut data = Vec::with_capacity(s[0] * span);
        for ch in 0..s[0] {
            let src = (ch * s[1] + n0) * plane;
            data.extend_from_slice(&self.value(x).data()[src..src + span]);
        }
        let out = Tensor::new(vec![s[0], n1 - n0, s[2], s[3]], data);
        self.apply(&[x], out, Box::new(SliceBatch { n_total: s[1], n0, n1, plane }))
    }

    /// Selects rows `r0..r1` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        assert!(r0 < r1 && r1 <= shape[0], "slice_rows range out of bounds");
        let row = self.value(x).numel() / shape[0];
        let data = self.value(x).data()[r0 * row..r1 * row].to_vec();
        shape[0] = r1 - r0;
        self.apply(&[x], Tensor::new(shape, data), Box::new(SliceRows { start: r0 }))
    }

    /// Concatenates along the batch axis of `[C, N, H, W]` tensors.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let plane = first[2] * first[3];
        let counts: Vec<usize> = xs.iter().map(|&x| self.shape(x)[1]).collect();
        for &x in xs {
            let s = self.shape(x);
            assert!(s[0] == first[0] && s[2] == first[2] && s[3] == first[3], "concat_batch shape mismatch");
        }
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(first[0] * total * plane);
        for ch in 0..first[0] {
            for (&x, &cnt) in xs.iter().zip(&counts) {
                let span = cnt * plane;
                data.extend_from_slice(&self.value(x).data()[ch * span..(ch + 1) * span]);
            }
        }
        let out = Tensor::new(vec![first[0], total, first[2], first[3]], data);
        self.apply(xs, out, Box::new(ConcatBatch { counts, plane }))
    }

    /// Nearest-neighbour 2x upsampling of `[C, N, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dp[i * 2 * w + j] = sp[(i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out);
        self.apply(&[x], v, Box::new(Upsample2x))
    }

    /// Spatial mean of `[C, N, H, W]`, returned as `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, n, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_f64(plane as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for ch in 0..c {
            for b in 0..n {
                let sum: T = xd[(ch * n + b) * plane..(ch * n + b + 1) * plane].iter().copied().sum();
                out[b * c + ch] = sum * inv;
            }
        }
        self.apply(&[x], Tensor::new(vec![n, c], out), Box::new(GlobalAvgPool))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
        let dout = self.shape(w)[0];
        assert_eq!(self.shape(w), &[dout, din], "linear weight shape");
        let mut out = vec![T::zero(); n * dout];
        gemm(false, true, n, dout, din, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
            inputs.push(b);
        }
        self.apply(&inputs, Tensor::new(vec![n, dout], out), Box::new(Linear { has_bias: b.is_some() }))
    }

    /// Gathers pixels per sample through `map` (length `N*H*W`, indices into
    /// the same sample's `H*W` plane); `None` entries take `fill`.
    pub fn spatial_gather(&mut self, x: Var, map: Vec<Option<u32>>, fill: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (c, n, plane) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(map.len(), n * plane, "spatial_gather map length");
        let fill = T::from_f64(fill);
        let xd = self.value(x).data();
        let mut out = vec![fill; xd.len()];
        for ch in 0..c {
            for b in 0..n {
                let base = (ch * n + b) * plane;
                for (p, src) in map[b * plane..(b + 1) * plane].iter().enumerate() {
                    if let Some(sidx) = src {
                        out[base + p] = xd[base + *sidx as usize];
                    }
                }
            }
        }
        self.apply(&[x], Tensor::new(s, out), Box::new(SpatialGather { map }))
    }
}
