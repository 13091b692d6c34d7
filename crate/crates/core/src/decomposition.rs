//! Recurrent attention: a U-Net proposes, at every step, the fraction of the
//! remaining scope claimed by the current slot. Everything is kept in log space.
//!
//! ```text
//! log m_k = log s_{k-1} + log α_k
//! log s_k = log s_{k-1} + log(1 − α_k)
//! log s_0 = 0,   log m_K = log s_{K-1}
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MonetError, Result};
use crate::nn::{Bound, ParamSpec};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to `log α` and `log(1 − α)` before they enter the
/// recursion. Masses below `e^-14 ≈ 8e-7` are treated as empty.
pub const LOG_FLOOR: f64 = -14.0;

const PREFIX: &str = "attention";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionArch {
    /// RGB plus the log scope.
    pub in_channels: usize,
    /// Output channels of each downsampling block; the upsampling path mirrors them.
    pub channels: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub norm_eps: f64,
}

impl AttentionArch {
    /// Five blocks for 64×64 inputs; six blocks (an extra 64-channel block) otherwise.
    pub fn new(height: usize, width: usize, blocks: usize) -> Self {
        let mut channels = vec![32, 32, 64, 64, 64];
        channels.resize(blocks, 64);
        Self { in_channels: 4, channels, mlp_hidden: vec![128, 128], height, width, norm_eps: 1e-5 }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    fn up_channels(&self) -> Vec<usize> {
        self.channels.iter().rev().copied().collect()
    }

    /// Walks the resize plan; fails when the input cannot be halved `blocks − 1` times exactly.
    pub fn plan(&self) -> Result<UNetPlan> {
        let n = self.blocks();
        if n == 0 {
            return Err(MonetError::Config("attention network needs at least one block".into()));
        }
        let factor = 1usize << (n - 1);
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(factor)
            || !self.width.is_multiple_of(factor)
        {
            return Err(MonetError::Config(format!(
                "{}x{} input is not divisible by 2^{} = {factor} required by a {n}-block U-Net",
                self.height,
                self.width,
                n - 1
            )));
        }
        let down: Vec<BlockShape> = (0..n)
            .map(|i| BlockShape { height: self.height >> i, width: self.width >> i, channels: self.channels[i] })
            .collect();
        let bottleneck = *down.last().expect("non-empty");
        if bottleneck.height * bottleneck.width < 2 {
            return Err(MonetError::Config(format!(
                "{}x{} input leaves a 1x1 bottleneck after {n} blocks; instance norm would zero it",
                self.height, self.width
            )));
        }
        let up = self
            .up_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockShape { height: bottleneck.height << i, width: bottleneck.width << i, channels: c })
            .collect();
        Ok(UNetPlan {
            down,
            bottleneck,
            up,
            output: BlockShape { height: self.height, width: self.width, channels: 1 },
        })
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let plan = self.plan()?;
        let n = self.blocks();
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.channels.iter().enumerate() {
            specs.push(ParamSpec::weight(format!("{PREFIX}.down{i}.conv.weight"), &[c, cin, 3, 3], cin * 9));
            specs.push(ParamSpec::bias(format!("{PREFIX}.down{i}.norm.bias"), c));
            cin = c;
        }
        let flat = plan.bottleneck.numel();
        let mut fan_in = flat;
        for (j, &h) in self.mlp_hidden.iter().chain(std::iter::once(&flat)).enumerate() {
            specs.push(ParamSpec::weight(format!("{PREFIX}.mlp{j}.weight"), &[fan_in, h], fan_in));
            specs.push(ParamSpec::bias(format!("{PREFIX}.mlp{j}.bias"), h));
            fan_in = h;
        }
        let mut prev = self.channels[n - 1];
        for (i, &c) in self.up_channels().iter().enumerate() {
            let cin = prev + self.channels[n - 1 - i];
            specs.push(ParamSpec::weight(format!("{PREFIX}.up{i}.conv.weight"), &[c, cin, 3, 3], cin * 9));
            specs.push(ParamSpec::bias(format!("{PREFIX}.up{i}.norm.bias"), c));
            prev = c;
        }
        specs.push(ParamSpec::weight(format!("{PREFIX}.out.weight"), &[1, prev, 1, 1], prev));
        specs.push(ParamSpec::bias(format!("{PREFIX}.out.bias"), 1));
        Ok(specs)
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut Bound<T>,
        name: &str,
        x: Var,
        cout: usize,
    ) -> Result<Var> {
        let cin = g.shape(x)[1];
        let w = params.get(g, &format!("{PREFIX}.{name}.conv.weight"), &[cout, cin, 3, 3])?;
        let b = params.get(g, &format!("{PREFIX}.{name}.norm.bias"), &[cout])?;
        let h = g.conv2d(x, w, 1, 1)?;
        let h = g.instance_norm(h, b, self.norm_eps)?;
        Ok(g.relu(h))
    }

    /// U-Net from a (B, 4, H, W) input to (B, 1, H, W) logits.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, params: &mut Bound<T>, input: Var) -> Result<Var> {
        let plan = self.plan()?;
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] != self.height || shape[3] != self.width {
            return Err(MonetError::Shape(format!(
                "attention input {shape:?}, expected (B, {}, {}, {})",
                self.in_channels, self.height, self.width
            )));
        }
        let batch = shape[0];
        let n = self.blocks();

        let mut skips = Vec::with_capacity(n);
        let mut h = input;
        for (i, &c) in self.channels.iter().enumerate() {
            h = self.block(g, params, &format!("down{i}"), h, c)?;
            skips.push(h);
            if i + 1 < n {
                h = g.downsample2(h)?;
            }
        }

        let last = *skips.last().expect("non-empty");
        let flat = plan.bottleneck.numel();
        let mut m = g.reshape(last, &[batch, flat])?;
        let mut fan_in = flat;
        for (j, &width) in self.mlp_hidden.iter().chain(std::iter::once(&flat)).enumerate() {
            let w = params.get(g, &format!("{PREFIX}.mlp{j}.weight"), &[fan_in, width])?;
            let b = params.get(g, &format!("{PREFIX}.mlp{j}.bias"), &[width])?;
            m = g.linear(m, w, b)?;
            m = g.relu(m);
            fan_in = width;
        }
        let bshape = g.shape(last).to_vec();
        h = g.reshape(m, &bshape)?;

        for (i, &c) in self.up_channels().iter().enumerate() {
            let skip = skips[n - 1 - i];
            let joined = g.concat(&[h, skip], 1)?;
            h = self.block(g, params, &format!("up{i}"), joined, c)?;
            if i + 1 < n {
                h = g.upsample2(h)?;
            }
        }

        let c = g.shape(h)[1];
        let w = params.get(g, &format!("{PREFIX}.out.weight"), &[1, c, 1, 1])?;
        let b = params.get(g, &format!("{PREFIX}.out.bias"), &[1])?;
        let logits = g.conv2d(h, w, 1, 0)?;
        g.channel_bias(logits, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl BlockShape {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Per-block output sizes of the U-Net, as produced by [`AttentionArch::plan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetPlan {
    pub down: Vec<BlockShape>,
    pub bottleneck: BlockShape,
    pub up: Vec<BlockShape>,
    pub output: BlockShape,
}

fn cat_image_scope<T: Scalar>(g: &mut Graph<T>, x: Var, log_scope: Var) -> Result<Var> {
    let (xs, ss) = (g.shape(x), g.shape(log_scope));
    if xs.len() != 4 || ss.len() != 4 || xs[0] != ss[0] || xs[2..] != ss[2..] || ss[1] != 1 {
        return Err(MonetError::Shape(format!("image {xs:?} and log scope {ss:?} do not align")));
    }
    g.concat(&[x, log_scope], 1)
}

/// `(log α, log(1 − α))` for one attention step, from the U-Net logits through a
/// two-way log-softmax over `[logit, 0]`. No floor is applied here.
pub fn attention_forward<T: Scalar>(
    arch: &AttentionArch,
    g: &mut Graph<T>,
    params: &mut Bound<T>,
    x: Var,
    log_scope: Var,
) -> Result<(Var, Var)> {
    let input = cat_image_scope(g, x, log_scope)?;
    let logits = arch.apply(g, params, input)?;
    Ok((g.log_sigmoid(logits, true, f64::NEG_INFINITY), g.log_sigmoid(logits, false, f64::NEG_INFINITY)))
}

/// Output of the recursion: `K` log masks and the `K` scopes `s_0 … s_{K-1}`, each (B, 1, H, W).
pub struct Decomposition {
    pub log_masks: Vec<Var>,
    pub log_scopes: Vec<Var>,
    pub network_calls: usize,
}

/// Runs the recursion with an arbitrary source of per-step logits.
pub fn decompose_with<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    slots: usize,
    mut logits_for: impl FnMut(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<Decomposition> {
    if slots < 2 {
        return Err(MonetError::Argument(format!("need at least 2 slots, got {slots}")));
    }
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(MonetError::Shape(format!("image batch must be (B, C, H, W), got {xs:?}")));
    }
    let mut log_scope = g.constant(Tensor::zeros(&[xs[0], 1, xs[2], xs[3]]));
    let mut log_masks = Vec::with_capacity(slots);
    let mut log_scopes = Vec::with_capacity(slots);
    let mut calls = 0;
    for _ in 0..slots - 1 {
        log_scopes.push(log_scope);
        let logits = logits_for(g, x, log_scope)?;
        calls += 1;
        let log_alpha = g.log_sigmoid(logits, true, LOG_FLOOR);
        let log_rest = g.log_sigmoid(logits, false, LOG_FLOOR);
        log_masks.push(g.add(log_scope, log_alpha)?);
        log_scope = g.add(log_scope, log_rest)?;
    }
    log_scopes.push(log_scope);
    log_masks.push(log_scope);
    Ok(Decomposition { log_masks, log_scopes, network_calls: calls })
}

/// `K` attention masks for a (B, 3, H, W) image batch.
pub fn decompose<T: Scalar>(
    arch: &AttentionArch,
    g: &mut Graph<T>,
    params: &mut Bound<T>,
    x: Var,
    slots: usize,
) -> Result<Decomposition> {
    decompose_with(g, x, slots, |g, x, log_scope| {
        let input = cat_image_scope(g, x, log_scope)?;
        arch.apply(g, params, input)
    })
}

/// Same network, different number of steps. The attention network is
/// recurrent, so parameters trained at one slot count apply at any other.
pub fn extend_slots<T: Scalar>(
    arch: &AttentionArch,
    g: &mut Graph<T>,
    params: &mut Bound<T>,
    x: Var,
    slots: usize,
) -> Result<Decomposition> {
    decompose(arch, g, params, x, slots)
}

/// Attention log masks laid out (B, K, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct LogMaskStack<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> LogMaskStack<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 4 || tensor.dim(1) < 1 {
            return Err(MonetError::Shape(format!("log mask stack must be (B, K, H, W), got {:?}", tensor.shape())));
        }
        Ok(Self { tensor })
    }

    /// Gathers per-slot (B, 1, H, W) values from a graph.
    pub fn from_slots(g: &Graph<T>, slots: &[Var]) -> Result<Self> {
        let parts: Vec<&Tensor<T>> = slots.iter().map(|&v| g.value(v)).collect();
        Self::from_slot_major(&Tensor::stack0(&parts)?)
    }

    /// From a slot-major (K, B, …, H, W) tensor with a single channel.
    pub fn from_slot_major(t: &Tensor<T>) -> Result<Self> {
        let k = t.dim(0);
        let b = t.dim(1);
        let (h, w) = (t.dim(t.rank() - 2), t.dim(t.rank() - 1));
        let plane = h * w;
        if t.numel() != k * b * plane {
            return Err(MonetError::Shape(format!("slot-major stack {:?} is not single-channel", t.shape())));
        }
        let mut data = vec![T::zero(); t.numel()];
        for s in 0..k {
            for i in 0..b {
                let src = &t.data()[(s * b + i) * plane..][..plane];
                data[(i * k + s) * plane..][..plane].copy_from_slice(src);
            }
        }
        Self::new(Tensor::new(&[b, k, h, w], data)?)
    }

    /// Slot-major (K, B, 1, H, W) copy.
    pub fn to_slot_major(&self) -> Tensor<T> {
        let (b, k, h, w) = self.dims();
        let plane = h * w;
        let mut data = vec![T::zero(); self.tensor.numel()];
        for i in 0..b {
            for s in 0..k {
                data[(s * b + i) * plane..][..plane]
                    .copy_from_slice(&self.tensor.data()[(i * k + s) * plane..][..plane]);
            }
        }
        Tensor::new(&[k, b, 1, h, w], data).expect("same numel")
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn slots(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn log_mask(&self, b: usize, k: usize, y: usize, x: usize) -> T {
        let (_, kk, h, w) = self.dims();
        self.tensor.data()[((b * kk + k) * h + y) * w + x]
    }

    /// Largest `|logsumexp_k log m_k|` over all pixels.
    pub fn normalization_error(&self) -> f64 {
        let (b, k, h, w) = self.dims();
        let mut worst = 0.0f64;
        for i in 0..b {
            for p in 0..h * w {
                let vals: Vec<f64> = (0..k).map(|s| self.tensor.data()[(i * k + s) * h * w + p].as_f64()).collect();
                worst = worst.max(crate::objective::logsumexp(&vals).abs());
            }
        }
        worst
    }

    /// Per-pixel index of the most probable slot for sample `b` (row-major H×W).
    pub fn argmax(&self, b: usize) -> Vec<usize> {
        let (_, k, h, w) = self.dims();
        (0..h * w)
            .map(|p| {
                (0..k)
                    .max_by(|&a, &c| {
                        let (va, vc) =
                            (self.tensor.data()[(b * k + a) * h * w + p], self.tensor.data()[(b * k + c) * h * w + p]);
                        va.partial_cmp(&vc).unwrap_or(std::cmp::Ordering::Equal).then(c.cmp(&a))
                    })
                    .expect("k >= 1")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_logits(value: f64) -> impl FnMut(&mut Graph<f64>, Var, Var) -> Result<Var> {
        move |g: &mut Graph<f64>, _x, s| {
            let shape = g.shape(s).to_vec();
            Ok(g.constant(Tensor::full(&shape, value)))
        }
    }

    fn masks(g: &Graph<f64>, d: &Decomposition) -> Vec<f64> {
        d.log_masks.iter().map(|&v| g.value(v).data()[0].exp()).collect()
    }

    #[test]
    fn half_alpha_telescopes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let d = decompose_with(&mut g, x, 3, constant_logits(0.0)).unwrap();
        let m = masks(&g, &d);
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.25).abs() < 1e-12 && (m[2] - 0.25).abs() < 1e-12);
        assert_eq!(d.network_calls, 2);
    }

    #[test]
    fn saturated_first_step_absorbs_the_scope() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let d = decompose_with(&mut g, x, 4, constant_logits(1e3)).unwrap();
        let m = masks(&g, &d);
        assert!((m[0] - 1.0).abs() < 1e-9);
        for &later in &m[1..] {
            assert!(later < 1e-6);
        }
        for &v in &d.log_masks {
            assert!(g.value(v).is_finite());
        }
    }

    #[test]
    fn fewer_than_two_slots_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(decompose_with(&mut g, x, 1, constant_logits(0.0)), Err(MonetError::Argument(_))));
    }

    #[test]
    fn plan_for_64_and_128() {
        let p = AttentionArch::new(64, 64, 5).plan().unwrap();
        let sizes: Vec<usize> = p.down.iter().map(|b| b.height).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
        assert_eq!((p.bottleneck.height, p.bottleneck.width), (4, 4));
        assert_eq!(p.up.last().unwrap().height, 64);
        let p6 = AttentionArch::new(128, 128, 6).plan().unwrap();
        assert_eq!((p6.bottleneck.height, p6.bottleneck.width), (4, 4));
        assert!(matches!(AttentionArch::new(40, 40, 5).plan(), Err(MonetError::Config(_))));
        assert!(matches!(AttentionArch::new(16, 16, 5).plan(), Err(MonetError::Config(_))));
    }

    #[test]
    fn unet_runs_and_keeps_size() {
        let arch = AttentionArch { channels: vec![4, 4, 8], mlp_hidden: vec![8, 8], ..AttentionArch::new(8, 8, 3) };
        let store = ParamStore::<f64>::init(&arch.param_specs().unwrap(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let mut p = Bound::frozen(&store);
        let x = g.constant(Tensor::full(&[2, 4, 8, 8], 0.3));
        let y = arch.apply(&mut g, &mut p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 8, 8]);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let arch = AttentionArch { channels: vec![4, 4], mlp_hidden: vec![8], ..AttentionArch::new(4, 4, 2) };
        let store = ParamStore::<f64>::zeros(&arch.param_specs().unwrap());
        let mut g = Graph::new();
        let mut p = Bound::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let y = arch.apply(&mut g, &mut p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_parameter_shape_names_the_block() {
        let arch = AttentionArch { channels: vec![4, 4], mlp_hidden: vec![8], ..AttentionArch::new(4, 4, 2) };
        let mut store = ParamStore::<f64>::zeros(&arch.param_specs().unwrap());
        store.insert("attention.up1.conv.weight".into(), Tensor::zeros(&[4, 3, 3, 3]));
        let mut g = Graph::new();
        let mut p = Bound::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        match arch.apply(&mut g, &mut p, x) {
            Err(MonetError::BlockShape { block, .. }) => assert_eq!(block, "attention.up1.conv"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn slot_major_round_trip() {
        let t = Tensor::<f64>::new(&[3, 2, 1, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let stack = LogMaskStack::from_slot_major(&t).unwrap();
        assert_eq!(stack.log_mask(1, 2, 0, 1), t.data()[(2 * 2 + 1) * 4 + 1]);
        assert_eq!(stack.to_slot_major(), t);
    }
}
