//! Slot-wise VAE shared by every slot: a strided CNN encoder conditioned on
//! (image, log mask) and a spatial broadcast decoder producing RGB means and a
//! mask logit per pixel.

use serde::{Deserialize, Serialize};

use crate::autograd::{conv_output_size, Backward, Graph, Var};
use crate::error::{MonetError, Result};
use crate::nn::{Bound, ParamSpec};
use crate::tensor::{Scalar, Tensor};

const ENC: &str = "encoder";
const DEC: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    /// RGB plus the log mask.
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    /// `log σ` is clamped to `[-bound, bound]`.
    pub log_sigma_bound: f64,
}

impl VaeArch {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            in_channels: 4,
            height,
            width,
            encoder_channels: vec![32, 32, 64, 64],
            encoder_hidden: 256,
            latent_dim: 16,
            decoder_channels: 32,
            decoder_layers: 4,
            log_sigma_bound: 10.0,
        }
    }

    /// Spatial sizes after each stride-2 encoder convolution.
    pub fn encoder_plan(&self) -> Result<Vec<(usize, usize)>> {
        let mut sizes = Vec::with_capacity(self.encoder_channels.len());
        let (mut h, mut w) = (self.height, self.width);
        for i in 0..self.encoder_channels.len() {
            match (conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)) {
                (Some(nh), Some(nw)) if nh >= 1 && nw >= 1 && h >= 1 && w >= 1 => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(MonetError::Config(format!(
                        "{}x{} input cannot pass encoder layer {i}",
                        self.height, self.width
                    )))
                }
            }
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    pub fn encoder_flat_size(&self) -> Result<usize> {
        let plan = self.encoder_plan()?;
        let (h, w) = plan.last().copied().unwrap_or((self.height, self.width));
        let c = self.encoder_channels.last().copied().unwrap_or(self.in_channels);
        Ok(h * w * c)
    }

    /// Spatial size of the broadcast grid for a target output size.
    pub fn decoder_input_size(&self, out_h: usize, out_w: usize) -> (usize, usize) {
        (out_h + 2 * self.decoder_layers, out_w + 2 * self.decoder_layers)
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            specs.push(ParamSpec::weight(format!("{ENC}.conv{i}.weight"), &[c, cin, 3, 3], cin * 9));
            specs.push(ParamSpec::bias(format!("{ENC}.conv{i}.bias"), c));
            cin = c;
        }
        let flat = self.encoder_flat_size()?;
        specs.push(ParamSpec::weight(format!("{ENC}.fc0.weight"), &[flat, self.encoder_hidden], flat));
        specs.push(ParamSpec::bias(format!("{ENC}.fc0.bias"), self.encoder_hidden));
        specs.push(ParamSpec::weight(
            format!("{ENC}.fc1.weight"),
            &[self.encoder_hidden, 2 * self.latent_dim],
            self.encoder_hidden,
        ));
        specs.push(ParamSpec::bias(format!("{ENC}.fc1.bias"), 2 * self.latent_dim));

        let mut cin = self.latent_dim + 2;
        for i in 0..self.decoder_layers {
            let c = self.decoder_channels;
            specs.push(ParamSpec::weight(format!("{DEC}.conv{i}.weight"), &[c, cin, 3, 3], cin * 9));
            specs.push(ParamSpec::bias(format!("{DEC}.conv{i}.bias"), c));
            cin = c;
        }
        specs.push(ParamSpec::weight(format!("{DEC}.out.weight"), &[4, cin, 1, 1], cin));
        specs.push(ParamSpec::bias(format!("{DEC}.out.bias"), 4));
        Ok(specs)
    }

    /// Posterior `(μ, log σ)`, each (N, latent_dim), for a (N, 4, H, W) input of
    /// image channels followed by the log mask.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, params: &mut Bound<T>, input: Var) -> Result<(Var, Var)> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] != self.height || shape[3] != self.width {
            return Err(MonetError::Shape(format!(
                "encoder input {shape:?}, expected (N, {}, {}, {})",
                self.in_channels, self.height, self.width
            )));
        }
        self.encoder_plan()?;
        let n = shape[0];
        let mut h = input;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            let cin = g.shape(h)[1];
            let w = params.get(g, &format!("{ENC}.conv{i}.weight"), &[c, cin, 3, 3])?;
            let b = params.get(g, &format!("{ENC}.conv{i}.bias"), &[c])?;
            h = g.conv2d(h, w, 2, 1)?;
            h = g.channel_bias(h, b)?;
            h = g.relu(h);
        }
        let flat = self.encoder_flat_size()?;
        h = g.reshape(h, &[n, flat])?;
        let w0 = params.get(g, &format!("{ENC}.fc0.weight"), &[flat, self.encoder_hidden])?;
        let b0 = params.get(g, &format!("{ENC}.fc0.bias"), &[self.encoder_hidden])?;
        h = g.linear(h, w0, b0)?;
        h = g.relu(h);
        let w1 = params.get(g, &format!("{ENC}.fc1.weight"), &[self.encoder_hidden, 2 * self.latent_dim])?;
        let b1 = params.get(g, &format!("{ENC}.fc1.bias"), &[2 * self.latent_dim])?;
        let out = g.linear(h, w1, b1)?;
        let mu = g.narrow(out, 1, 0, self.latent_dim)?;
        let raw_log_sigma = g.narrow(out, 1, self.latent_dim, self.latent_dim)?;
        let log_sigma = g.clamp(raw_log_sigma, -self.log_sigma_bound, self.log_sigma_bound);
        Ok((mu, log_sigma))
    }

    /// Decodes (N, latent_dim) latents into (N, 4, out_h, out_w): RGB means then the mask logit.
    pub fn broadcast_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut Bound<T>,
        z: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(MonetError::Argument(format!("decoder output size {out_h}x{out_w} is empty")));
        }
        let zs = g.shape(z);
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(MonetError::Shape(format!("latents {zs:?}, expected (N, {})", self.latent_dim)));
        }
        let (gh, gw) = self.decoder_input_size(out_h, out_w);
        let mut h = spatial_broadcast(g, z, gh, gw)?;
        for i in 0..self.decoder_layers {
            let cin = g.shape(h)[1];
            let c = self.decoder_channels;
            let w = params.get(g, &format!("{DEC}.conv{i}.weight"), &[c, cin, 3, 3])?;
            let b = params.get(g, &format!("{DEC}.conv{i}.bias"), &[c])?;
            h = g.conv2d(h, w, 1, 0)?;
            h = g.channel_bias(h, b)?;
            h = g.relu(h);
        }
        let cin = g.shape(h)[1];
        let w = params.get(g, &format!("{DEC}.out.weight"), &[4, cin, 1, 1])?;
        let b = params.get(g, &format!("{DEC}.out.bias"), &[4])?;
        let out = g.conv2d(h, w, 1, 0)?;
        g.channel_bias(out, b)
    }
}

/// `n` evenly spaced values from -1 to 1 inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

struct BroadcastRule {
    latent: usize,
    plane: usize,
}

impl<T: Scalar> Backward<T> for BroadcastRule {
    fn name(&self) -> &'static str {
        "spatial_broadcast"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = inputs[0].dim(0);
        let per_sample = (self.latent + 2) * self.plane;
        let mut dz = Tensor::zeros(inputs[0].shape());
        for i in 0..n {
            for c in 0..self.latent {
                let s = &grad.data()[i * per_sample + c * self.plane..][..self.plane];
                dz.data_mut()[i * self.latent + c] = s.iter().copied().sum();
            }
        }
        vec![Some(dz)]
    }
}

/// Tiles (N, L) latents over an h×w grid and appends x- then y-coordinate
/// channels spanning [-1, 1]; output (N, L + 2, h, w).
pub fn spatial_broadcast<T: Scalar>(g: &mut Graph<T>, z: Var, h: usize, w: usize) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    if zs.len() != 2 {
        return Err(MonetError::Shape(format!("latents must be (N, L), got {zs:?}")));
    }
    let (n, l) = (zs[0], zs[1]);
    let plane = h * w;
    let xs: Vec<T> = linspace(-1.0, 1.0, w).into_iter().map(T::of).collect();
    let ys: Vec<T> = linspace(-1.0, 1.0, h).into_iter().map(T::of).collect();
    let mut out = Tensor::zeros(&[n, l + 2, h, w]);
    let zd = g.value(z).data().to_vec();
    for (i, sample) in out.data_mut().chunks_mut((l + 2) * plane).enumerate() {
        for c in 0..l {
            sample[c * plane..(c + 1) * plane].fill(zd[i * l + c]);
        }
        for r in 0..h {
            sample[l * plane + r * w..][..w].copy_from_slice(&xs);
            sample[(l + 1) * plane + r * w..][..w].fill(ys[r]);
        }
    }
    Ok(g.push(out, &[z], BroadcastRule { latent: l, plane }))
}

struct ReparamRule;

impl<T: Scalar> Backward<T> for ReparamRule {
    fn name(&self) -> &'static str {
        "reparameterize"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (log_sigma, eps) = (inputs[1], inputs[2]);
        let d_log_sigma = needs[1].then(|| {
            let data = grad
                .data()
                .iter()
                .zip(log_sigma.data())
                .zip(eps.data())
                .map(|((&g, &ls), &e)| g * ls.exp() * e)
                .collect();
            Tensor::new(grad.shape(), data).expect("same shape")
        });
        vec![needs[0].then(|| grad.clone()), d_log_sigma, None]
    }
}

/// `z = μ + exp(log σ)·ε` for externally drawn standard-normal `ε`.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var, noise: Tensor<T>) -> Result<Var> {
    if g.shape(mu) != g.shape(log_sigma) || g.shape(mu) != noise.shape() {
        return Err(MonetError::Shape(format!(
            "reparameterize: mu {:?}, log_sigma {:?}, noise {:?}",
            g.shape(mu),
            g.shape(log_sigma),
            noise.shape()
        )));
    }
    let data = g
        .value(mu)
        .data()
        .iter()
        .zip(g.value(log_sigma).data())
        .zip(noise.data())
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect();
    let out = Tensor::new(noise.shape(), data)?;
    let eps = g.constant(noise);
    Ok(g.push(out, &[mu, log_sigma, eps], ReparamRule))
}

/// Log-softmax across the slot axis of (B, K, H, W) mask logits: `log m̃`.
pub fn reconstruct_masks<T: Scalar>(mask_logits: &Tensor<T>) -> Result<Tensor<T>> {
    if mask_logits.rank() != 4 || mask_logits.dim(1) < 2 {
        return Err(MonetError::Shape(format!("mask logits must be (B, K>=2, H, W), got {:?}", mask_logits.shape())));
    }
    let (b, k) = (mask_logits.dim(0), mask_logits.dim(1));
    let plane = mask_logits.dim(2) * mask_logits.dim(3);
    let mut out = mask_logits.clone();
    for i in 0..b {
        for p in 0..plane {
            let idx = |s: usize| (i * k + s) * plane + p;
            let vals: Vec<T> = (0..k).map(|s| mask_logits.data()[idx(s)]).collect();
            let lse = crate::objective::logsumexp(&vals);
            for (s, v) in vals.into_iter().enumerate() {
                out.data_mut()[idx(s)] = v - lse;
            }
        }
    }
    Ok(out)
}

/// Single-slot mask read against a zero reference logit: `σ(logit)` per pixel.
pub fn unnormalized_slot_mask<T: Scalar>(mask_logit: &Tensor<T>) -> Tensor<T> {
    mask_logit.map(crate::autograd::sigmoid)
}

/// Per-slot Gaussian posterior, (B, K, latent_dim) each.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPosterior<T: Scalar> {
    pub mu: Tensor<T>,
    pub log_sigma: Tensor<T>,
    pub z: Tensor<T>,
}

/// Per-slot decoder output: RGB means (B, K, 3, H, W) and mask logits (B, K, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDecode<T: Scalar> {
    pub rgb_means: Tensor<T>,
    pub mask_logits: Tensor<T>,
}

impl<T: Scalar> SlotDecode<T> {
    /// From the slot-major (K·B, 4, H, W) decoder output.
    pub fn from_slot_major(decoded: &Tensor<T>, slots: usize) -> Result<Self> {
        let s = decoded.shape();
        if s.len() != 4 || s[1] != 4 || !s[0].is_multiple_of(slots) {
            return Err(MonetError::Shape(format!("decoder output {s:?} for {slots} slots")));
        }
        let (b, h, w) = (s[0] / slots, s[2], s[3]);
        let plane = h * w;
        let mut rgb = vec![T::zero(); b * slots * 3 * plane];
        let mut logits = vec![T::zero(); b * slots * plane];
        for k in 0..slots {
            for i in 0..b {
                let src = &decoded.data()[(k * b + i) * 4 * plane..][..4 * plane];
                rgb[(i * slots + k) * 3 * plane..][..3 * plane].copy_from_slice(&src[..3 * plane]);
                logits[(i * slots + k) * plane..][..plane].copy_from_slice(&src[3 * plane..]);
            }
        }
        Ok(Self {
            rgb_means: Tensor::new(&[b, slots, 3, h, w], rgb)?,
            mask_logits: Tensor::new(&[b, slots, h, w], logits)?,
        })
    }
}
