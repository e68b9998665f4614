use crate::float::{gemm, Float};
use crate::graph::{Function, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    n: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn m(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kj` at stride 1.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let shift = kj as isize - g.pad as isize;
    let lo = (-shift).clamp(0, g.wo as isize) as usize;
    let hi = (g.w as isize - shift).clamp(lo as isize, g.wo as isize) as usize;
    (lo, hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let m = g.m();
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * m..(row + 1) * m];
                for n in 0..g.n {
                    let src = &x[(c * g.n + n) * plane..(c * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let d = &mut dst[(n * g.ho + oy) * g.wo..(n * g.ho + oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(g, kj);
                            d[..lo].fill(T::zero());
                            if hi > lo {
                                let s0 = (lo as isize + kj as isize - g.pad as isize) as usize;
                                d[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                            }
                            d[hi..].fill(T::zero());
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                *v = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let m = g.m();
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * m..(row + 1) * m];
                for n in 0..g.n {
                    let dst = &mut dx[(c * g.n + n) * plane..(c * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let s = &src[(n * g.ho + oy) * g.wo..(n * g.ho + oy + 1) * g.wo];
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(g, kj);
                            if hi > lo {
                                let d0 = (lo as isize + kj as isize - g.pad as isize) as usize;
                                for (d, &v) in drow[d0..d0 + hi - lo].iter_mut().zip(&s[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ox, &v) in s.iter().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, T: Float>(x: &'a [T], g: &ConvGeom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        x
    } else {
        buf.resize(g.k() * g.m(), T::zero());
        im2col(x, g, buf);
        buf
    }
}

struct Conv2d {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Float> Function<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (k, m) = (g.k(), g.m());
        let dy = grad.data();

        let dw = if needs[1] {
            let mut buf = Vec::new();
            let cols = columns(x.data(), g, &mut buf);
            let mut dw = vec![T::zero(); g.cout * k];
            gemm(false, true, g.cout, k, m, T::one(), dy, cols, T::zero(), &mut dw);
            Some(Tensor::new(w.shape().to_vec(), dw))
        } else {
            None
        };

        let dx = if needs[0] {
            let mut dcols = vec![T::zero(); k * m];
            gemm(true, false, k, m, g.cout, T::one(), w.data(), dy, T::zero(), &mut dcols);
            if g.is_pointwise() {
                Some(Tensor::new(x.shape().to_vec(), dcols))
            } else {
                let mut dx = vec![T::zero(); x.numel()];
                col2im(&dcols, g, &mut dx);
                Some(Tensor::new(x.shape().to_vec(), dx))
            }
        } else {
            None
        };

        let mut out = vec![dx, dw];
        if self.has_bias {
            let db = if needs[2] {
                let db: Vec<T> = dy.chunks(m).map(|row| row.iter().copied().sum()).collect();
                Some(Tensor::new(vec![g.cout], db))
            } else {
                None
            };
            out.push(db);
        }
        out
    }
}

impl<T: Float> Graph<T> {
    /// 2-D cross-correlation. `x` is `[Cin, N, H, W]`, `w` is
    /// `[Cout, Cin, kh, kw]`, optional `b` is `[Cout]`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [C, N, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch: input {:?}, weight {:?}", xs, ws);
        assert!(stride >= 1);
        let (h, wd) = (xs[2], xs[3]);
        assert!(h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[3], "conv2d kernel larger than padded input");
        let geom = ConvGeom {
            cin: xs[0],
            n: xs[1],
            h,
            w: wd,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h + 2 * pad - ws[2]) / stride + 1,
            wo: (wd + 2 * pad - ws[3]) / stride + 1,
        };
        let m = geom.m();
        let mut out = vec![T::zero(); geom.cout * m];
        {
            let mut buf = Vec::new();
            let cols = columns(self.value(x).data(), &geom, &mut buf);
            gemm(false, false, geom.cout, m, geom.k(), T::one(), self.value(w).data(), cols, T::zero(), &mut out);
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[geom.cout], "conv2d bias shape");
            let bias = self.value(b).data().to_vec();
            for (row, &bv) in out.chunks_mut(m).zip(&bias) {
                for v in row {
                    *v += bv;
                }
            }
            inputs.push(b);
        }
        let value = Tensor::new(vec![geom.cout, geom.n, geom.ho, geom.wo], out);
        self.apply(&inputs, value, Box::new(Conv2d { geom, has_bias: b.is_some() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution over `[C, N, H, W]`, kept separate from the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, n, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[cout, n, ho, wo]);
        for co in 0..cout {
            for b in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((ci * n + b) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((co * n + b) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0), (5, 1, 2)] {
            let x = pseudo(&[3, 2, 8, 6], 0.731);
            let w = pseudo(&[4, 3, k, k], 1.37);
            let mut g = Graph::new(false);
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_keeps_resolution() {
        let mut g = Graph::<f32>::new(false);
        let x = g.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let w = g.constant(Tensor::zeros(&[5, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1);
        assert_eq!(g.shape(y), &[5, 1, 16, 16]);
        let w7 = g.constant(Tensor::zeros(&[5, 2, 7, 7]));
        let y2 = g.conv2d(x, w7, None, 2, 3);
        assert_eq!(g.shape(y2), &[5, 1, 8, 8]);
    }
}
