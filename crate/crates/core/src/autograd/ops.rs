//! Elementwise, shape and normalisation operations.

use super::{Backward, Graph, Var};
use crate::error::{MonetError, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(MonetError::Shape(msg))
}

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

struct ChannelBiasRule;

impl<T: Scalar> Backward<T> for ChannelBiasRule {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let c = inputs[1].numel();
        let db = needs[1].then(|| {
            let (_, _, inner) = split_at_axis(grad.shape(), 1);
            let mut db = vec![T::zero(); c];
            for (i, chunk) in grad.data().chunks(inner).enumerate() {
                db[i % c] = db[i % c] + chunk.iter().copied().sum();
            }
            Tensor::new(inputs[1].shape(), db).expect("bias shape")
        });
        vec![needs[0].then(|| grad.clone()), db]
    }
}

struct ReluRule;

impl<T: Scalar> Backward<T> for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data =
            out.data().iter().zip(grad.data()).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

struct InstanceNormRule<T> {
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for InstanceNormRule<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let bias = inputs[1];
        let c = bias.numel();
        let (_, _, inner) = split_at_axis(out.shape(), 1);
        let count = T::of(inner as f64);
        let mut db = vec![T::zero(); c];
        let mut dx = needs[0].then(|| Tensor::zeros(out.shape()));
        for (plane, (y, g)) in out.data().chunks(inner).zip(grad.data().chunks(inner)).enumerate() {
            let ch = plane % c;
            let b = bias.data()[ch];
            let sum_g: T = g.iter().copied().sum();
            db[ch] = db[ch] + sum_g;
            if let Some(dx) = dx.as_mut() {
                let sum_gx: T = y.iter().zip(g).map(|(&y, &g)| g * (y - b)).sum();
                let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
                let inv = self.inv_std[plane];
                for ((d, &y), &g) in dx.data_mut()[plane * inner..(plane + 1) * inner].iter_mut().zip(y).zip(g) {
                    *d = inv * (g - mean_g - (y - b) * mean_gx);
                }
            }
        }
        vec![dx, needs[1].then(|| Tensor::new(bias.shape(), db).expect("bias shape"))]
    }
}

struct LinearRule;

impl<T: Scalar> Backward<T> for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, fan_in, fan_out) = (x.dim(0), w.dim(0), w.dim(1));
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            matmul_into(grad.data(), false, w.data(), true, n, fan_out, fan_in, T::zero(), dx.data_mut());
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            matmul_into(x.data(), true, grad.data(), false, fan_in, n, fan_out, T::zero(), dw.data_mut());
            dw
        });
        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(inputs[2].shape());
            for row in grad.data().chunks(fan_out) {
                for (d, &g) in db.data_mut().iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct ReshapeRule;

impl<T: Scalar> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshape(inputs[0].shape()).expect("reshape back"))]
    }
}

struct ConcatRule {
    axis: usize,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (outer, total, inner) = split_at_axis(out.shape(), self.axis);
        let mut offset = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(inp, &need)| {
                let len = inp.dim(self.axis);
                let piece = need.then(|| {
                    let mut data = Vec::with_capacity(inp.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&grad.data()[start..start + len * inner]);
                    }
                    Tensor::new(inp.shape(), data).expect("concat piece")
                });
                offset += len;
                piece
            })
            .collect()
    }
}

struct NarrowRule {
    axis: usize,
    start: usize,
}

impl<T: Scalar> Backward<T> for NarrowRule {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, total, inner) = split_at_axis(inputs[0].shape(), self.axis);
        let len = out.dim(self.axis);
        let mut dx = Tensor::zeros(inputs[0].shape());
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            dx.data_mut()[dst..dst + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(dx)]
    }
}

struct Downsample2Rule;

impl<T: Scalar> Backward<T> for Downsample2Rule {
    fn name(&self) -> &'static str {
        "downsample2"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let (ho, wo) = (out.dim(2), out.dim(3));
        let mut dx = Tensor::zeros(x.shape());
        for (p, g) in grad.data().chunks(ho * wo).enumerate() {
            let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    plane[2 * i * w + 2 * j] = g[i * wo + j];
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Upsample2Rule;

impl<T: Scalar> Backward<T> for Upsample2Rule {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let wo = out.dim(3);
        let mut dx = Tensor::zeros(x.shape());
        for (p, g) in grad.data().chunks(4 * h * w).enumerate() {
            let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for (idx, &v) in g.iter().enumerate() {
                let (i, j) = (idx / wo, idx % wo);
                let d = &mut plane[(i / 2) * w + j / 2];
                *d = *d + v;
            }
        }
        vec![Some(dx)]
    }
}

struct LogSigmoidRule<T> {
    sign: T,
    floor: T,
}

impl<T: Scalar> Backward<T> for LogSigmoidRule<T> {
    fn name(&self) -> &'static str {
        "log_sigmoid"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(grad.data())
            .map(|((&l, &y), &g)| {
                if y <= self.floor {
                    T::zero()
                } else {
                    // d/dl log σ(s·l) = s·σ(−s·l)
                    g * self.sign * sigmoid(-self.sign * l)
                }
            })
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

struct ClampRule<T> {
    lo: T,
    hi: T,
}

impl<T: Scalar> Backward<T> for ClampRule<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x < self.lo || x > self.hi { T::zero() } else { g })
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

struct WeightedSumRule<T> {
    weights: Vec<T>,
}

impl<T: Scalar> Backward<T> for WeightedSumRule<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        self.weights.iter().zip(needs).map(|(&w, &n)| n.then(|| Tensor::scalar(g * w))).collect()
    }
}

struct LogSoftmax0Rule;

impl<T: Scalar> Backward<T> for LogSoftmax0Rule {
    fn name(&self) -> &'static str {
        "log_softmax0"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let k = out.dim(0);
        let inner = out.numel() / k;
        let mut dx = grad.clone();
        for p in 0..inner {
            let total: T = (0..k).map(|s| grad.data()[s * inner + p]).sum();
            for s in 0..k {
                let idx = s * inner + p;
                dx.data_mut()[idx] = grad.data()[idx] - out.data()[idx].exp() * total;
            }
        }
        vec![Some(dx)]
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = −softplus(−x)`, stable for large |x|.
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, &[a, b], AddRule))
    }

    /// Adds a per-channel bias (`bias`: (C,)) along axis 1.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let c = self.value(bias).numel();
        if xs.len() < 2 || xs[1] != c {
            return shape_err(format!("channel bias of {c} for input {xs:?}"));
        }
        let (_, _, inner) = split_at_axis(xs, 1);
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bi = b[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bi);
        }
        Ok(self.push(out, &[x, bias], ChannelBiasRule))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, &[x], ReluRule)
    }

    /// Per-sample per-channel normalisation over the spatial axes, plus a learned bias.
    pub fn instance_norm(&mut self, x: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = self.value(bias).numel();
        if xs.len() != 4 || xs[1] != c {
            return shape_err(format!("instance norm with {c} channels for input {xs:?}"));
        }
        let inner = xs[2] * xs[3];
        let count = T::of(inner as f64);
        let eps = T::of(eps);
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xs[0] * c);
        for (plane, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            let bi = b[plane % c];
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv + bi);
            inv_std.push(inv);
        }
        Ok(self.push(out, &[x, bias], InstanceNormRule { inv_std }))
    }

    /// `x·w + b` with `x`: (N, in), `w`: (in, out), `b`: (out,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return shape_err(format!("linear input {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let (n, fan_in, fan_out) = (xs[0], ws[0], ws[1]);
        let mut out = Tensor::zeros(&[n, fan_out]);
        for row in out.data_mut().chunks_mut(fan_out) {
            row.copy_from_slice(self.value(b).data());
        }
        matmul_into(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            n,
            fan_in,
            fan_out,
            T::one(),
            out.data_mut(),
        );
        Ok(self.push(out, &[x, w, b], LinearRule))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], ReshapeRule))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err(format!("concat along {axis} of {first:?} and {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, parts, ConcatRule { axis }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return shape_err(format!("narrow [{start}, {}) on axis {axis} of {xs:?}", start + len));
        }
        let (outer, total, inner) = split_at_axis(&xs, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&self.value(x).data()[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, &[x], NarrowRule { axis, start }))
    }

    /// Nearest-neighbour halving: output pixel (i, j) reads input (2i, 2j).
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return shape_err(format!("downsample2 needs even spatial size, got {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[xs[0], xs[1], ho, wo]);
        for (p, o) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let plane = &self.nodes[x.0].value.data()[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    o[i * wo + j] = plane[2 * i * w + 2 * j];
                }
            }
        }
        Ok(self.push(out, &[x], Downsample2Rule))
    }

    /// Nearest-neighbour doubling: output pixel (i, j) reads input (i/2, j/2).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("upsample2 needs a 4-d input, got {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[xs[0], xs[1], ho, wo]);
        for (p, o) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let plane = &self.nodes[x.0].value.data()[p * h * w..(p + 1) * h * w];
            for (idx, v) in o.iter_mut().enumerate() {
                *v = plane[(idx / wo / 2) * w + (idx % wo) / 2];
            }
        }
        Ok(self.push(out, &[x], Upsample2Rule))
    }

    /// `max(log σ(sign·x), floor)`; with `sign = ±1` this gives `log α` and
    /// `log(1 − α)` of a two-way softmax over `[x, 0]`.
    pub fn log_sigmoid(&mut self, x: Var, positive: bool, floor: f64) -> Var {
        let sign = if positive { T::one() } else { -T::one() };
        let floor = T::of(floor);
        let out = self.value(x).map(|v| log_sigmoid(sign * v).max(floor));
        self.push(out, &[x], LogSigmoidRule { sign, floor })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, &[x], ClampRule { lo, hi })
    }

    /// Log-softmax across the leading axis (the slot axis of slot-major stacks).
    pub fn log_softmax0(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] == 0 {
            return shape_err(format!("log_softmax0 of {xs:?}"));
        }
        let k = xs[0];
        let inner = self.value(x).numel() / k;
        let src = self.value(x);
        let mut out = src.clone();
        let mut column = vec![T::zero(); k];
        for p in 0..inner {
            for (s, c) in column.iter_mut().enumerate() {
                *c = src.data()[s * inner + p];
            }
            let lse = crate::objective::logsumexp(&column);
            for (s, &c) in column.iter().enumerate() {
                out.data_mut()[s * inner + p] = c - lse;
            }
        }
        Ok(self.push(out, &[x], LogSoftmax0Rule))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        let mut weights = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return shape_err(format!("weighted_sum term of shape {:?}", self.shape(v)));
            }
            let w = T::of(w);
            total = total + w * self.value(v).item();
            weights.push(w);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), &vars, WeightedSumRule { weights }))
    }
}
