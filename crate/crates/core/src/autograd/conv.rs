//! 2-D convolution (NCHW, square kernels) through im2col and GEMM.

use rayon::prelude::*;

use super::{Backward, Graph, Var};
use crate::error::{MonetError, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Samples are reduced in this many fixed chunks so weight gradients sum in
/// the same order whatever the thread count.
const REDUCE_CHUNKS: usize = 8;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let (hw_o, k) = (g.col_cols(), g.k);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * hw_o..][..hw_o];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let (hw_o, k) = (g.col_cols(), g.k);
    dx.fill(T::zero());
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * hw_o..][..hw_o];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in row[oh * g.wo..(oh + 1) * g.wo].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    geom: Geometry,
}

impl<T: Scalar> Backward<T> for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = self.geom;
        let n = x.dim(0);
        let cout = w.dim(0);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_len = g.cin * g.h * g.w;
        let out_len = cout * cols;

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            dx.data_mut().par_chunks_mut(in_len).enumerate().for_each(|(i, dxi)| {
                let gi = &grad.data()[i * out_len..(i + 1) * out_len];
                if g.is_pointwise() {
                    matmul_into(w.data(), true, gi, false, rows, cout, cols, T::zero(), dxi);
                } else {
                    let mut dcol = vec![T::zero(); rows * cols];
                    matmul_into(w.data(), true, gi, false, rows, cout, cols, T::zero(), &mut dcol);
                    col2im(&g, &dcol, dxi);
                }
            });
            dx
        });

        let dw = needs[1].then(|| {
            let chunk = n.div_ceil(REDUCE_CHUNKS).max(1);
            let partials: Vec<Vec<T>> = (0..n)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let mut acc = vec![T::zero(); cout * rows];
                    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
                    for i in start..(start + chunk).min(n) {
                        let xi = &x.data()[i * in_len..(i + 1) * in_len];
                        let gi = &grad.data()[i * out_len..(i + 1) * out_len];
                        let col_ref = if g.is_pointwise() {
                            xi
                        } else {
                            im2col(&g, xi, &mut col);
                            &col
                        };
                        matmul_into(gi, false, col_ref, true, cout, cols, rows, T::one(), &mut acc);
                    }
                    acc
                })
                .collect();
            let mut dw = Tensor::zeros(w.shape());
            for p in partials {
                for (a, b) in dw.data_mut().iter_mut().zip(p) {
                    *a = *a + b;
                }
            }
            dw
        });
        vec![dx, dw]
    }
}

impl<T: Scalar> Graph<T> {
    /// Bias-free convolution. `x`: (N, Cin, H, W); `w`: (Cout, Cin, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(MonetError::Shape(format!(
                "conv2d input {xs:?} incompatible with kernel {ws:?} (stride {stride})"
            )));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (Some(ho), Some(wo)) = (conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)) else {
            return Err(MonetError::Shape(format!("conv2d kernel {k} larger than padded input {xs:?}")));
        };
        let geom = Geometry { cin, h, w: wd, k, stride, pad, ho, wo };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = cin * h * wd;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        out.data_mut().par_chunks_mut(cout * cols).enumerate().for_each(|(i, oi)| {
            let xi = &xv.data()[i * in_len..(i + 1) * in_len];
            if geom.is_pointwise() {
                matmul_into(wv.data(), false, xi, false, cout, rows, cols, T::zero(), oi);
            } else {
                let mut col = vec![T::zero(); rows * cols];
                im2col(&geom, xi, &mut col);
                matmul_into(wv.data(), false, &col, false, cout, rows, cols, T::zero(), oi);
            }
        });
        Ok(self.push(out, &[x, w], Conv2dRule { geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * cin + ci) * h + ih as usize) * wd + iw as usize]
                                        * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oh) * wo + ow] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, ho, wo], out).unwrap()
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect()).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        for &(k, stride, pad, h) in &[(3, 1, 0, 7), (3, 2, 1, 8), (3, 1, 1, 5), (1, 1, 0, 4), (3, 2, 1, 7)] {
            let x = pseudo(&[2, 3, h, h + 1], 0.3);
            let w = pseudo(&[4, 3, k, k], 1.9);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for &(k, stride, pad) in &[(3, 2, 1), (3, 1, 0), (1, 1, 0)] {
            let x = pseudo(&[2, 2, 6, 5], 0.1);
            let w = pseudo(&[3, 2, k, k], 2.2);
            let probe = pseudo(naive_conv(&x, &w, stride, pad).shape(), 5.0);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
                naive_conv(x, w, stride, pad).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            let rule = Conv2dRule {
                geom: Geometry { cin: 2, h: 6, w: 5, k, stride, pad, ho: g.shape(y)[2], wo: g.shape(y)[3] },
            };
            let grads = rule.backward(&[&x, &w], g.value(y), &probe, &[true, true]);
            let eps = 1e-6;
            for (ti, t) in [&x, &w].into_iter().enumerate() {
                let analytic = grads[ti].as_ref().unwrap();
                for i in 0..t.numel() {
                    let (mut p, mut m) = ((*t).clone(), (*t).clone());
                    p.data_mut()[i] += eps;
                    m.data_mut()[i] -= eps;
                    let fd =
                        if ti == 0 { loss(&p, &w) - loss(&m, &w) } else { loss(&x, &p) - loss(&x, &m) } / (2.0 * eps);
                    assert!(
                        (fd - analytic.data()[i]).abs() < 1e-6,
                        "input {ti} entry {i}: {fd} vs {}",
                        analytic.data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, w, 1, 0).is_err());
    }
}
