//! The full model: attention recursion (or externally provided masks), the
//! shared component VAE run on every slot at once, and the loss.
//!
//! Slot tensors inside the graph are slot-major: row `k·B + b` holds slot `k`
//! of sample `b`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::component_vae::{reparameterize, SlotDecode, SlotPosterior, VaeArch};
use crate::decomposition::{decompose, AttentionArch, LogMaskStack, LOG_FLOOR};
use crate::error::{MonetError, Result};
use crate::nn::{Bound, ParamSpec};
use crate::objective::{loss_nodes, LossConfig, LossNodes};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonetArch {
    pub attention: AttentionArch,
    pub vae: VaeArch,
}

impl MonetArch {
    /// Five U-Net blocks up to 64×64 inputs, six above. Small inputs get fewer
    /// blocks so that the bottleneck keeps at least 2×2 pixels.
    pub fn new(height: usize, width: usize) -> Self {
        let blocks = if height.max(width) > 64 { 6 } else { 5 };
        let fit = (height.min(width).max(2).ilog2() as usize).max(1);
        let blocks = blocks.min(fit);
        Self { attention: AttentionArch::new(height, width, blocks), vae: VaeArch::new(height, width) }
    }

    /// A narrow model for finite-difference checks: 3-block U-Net, 4-dim latents.
    pub fn tiny(height: usize, width: usize) -> Self {
        let attention = AttentionArch {
            in_channels: 4,
            channels: vec![3, 4, 4],
            mlp_hidden: vec![12, 12],
            height,
            width,
            norm_eps: 1e-5,
        };
        let vae = VaeArch {
            encoder_channels: vec![8, 8, 8, 8],
            encoder_hidden: 16,
            latent_dim: 4,
            decoder_channels: 8,
            ..VaeArch::new(height, width)
        };
        Self { attention, vae }
    }

    pub fn height(&self) -> usize {
        self.vae.height
    }

    pub fn width(&self) -> usize {
        self.vae.width
    }

    pub fn validate(&self) -> Result<()> {
        if (self.attention.height, self.attention.width) != (self.vae.height, self.vae.width) {
            return Err(MonetError::Config(format!(
                "attention network is {}x{} but the VAE is {}x{}",
                self.attention.height, self.attention.width, self.vae.height, self.vae.width
            )));
        }
        self.attention.plan()?;
        self.vae.encoder_plan()?;
        Ok(())
    }

    /// Attention parameters first, then VAE parameters.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = self.attention.param_specs()?;
        specs.extend(self.vae.param_specs()?);
        Ok(specs)
    }

    /// Standard-normal reparameterisation noise for `slots · batch` slot-major rows.
    pub fn draw_noise<T: Scalar>(&self, rng: &mut impl Rng, slots: usize, batch: usize) -> Tensor<T> {
        let n = slots * batch * self.vae.latent_dim;
        let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        Tensor::new(&[slots * batch, self.vae.latent_dim], data).expect("sized")
    }

    /// One forward pass.
    ///
    /// `noise` is slot-major (K·B, latent_dim); `None` decodes the posterior mean.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut Bound<T>,
        x: &Tensor<T>,
        masks: MaskSource<'_, T>,
        noise: Option<Tensor<T>>,
        loss: &LossConfig,
    ) -> Result<ForwardOutput> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != self.height() || xs[3] != self.width() {
            return Err(MonetError::Shape(format!(
                "image batch {xs:?}, expected (B, 3, {}, {})",
                self.height(),
                self.width()
            )));
        }
        let (batch, h, w) = (xs[0], xs[2], xs[3]);
        let xv = g.constant(x.clone());
        let (log_masks, slots, attention_calls) = match masks {
            MaskSource::Learned { slots } => {
                let d = decompose(&self.attention, g, params, xv, slots)?;
                (g.concat(&d.log_masks, 0)?, slots, d.network_calls)
            }
            MaskSource::Provided(stack) => {
                let (b, k, mh, mw) = stack.dims();
                if (b, mh, mw) != (batch, h, w) {
                    return Err(MonetError::Shape(format!(
                        "provided masks {:?} do not match image batch {xs:?}",
                        stack.tensor().shape()
                    )));
                }
                let t = stack.to_slot_major().reshape(&[k * b, 1, h, w])?;
                (g.constant(t), k, 0)
            }
        };
        let tiled = g.concat(&vec![xv; slots], 0)?;
        let enc_in = g.concat(&[tiled, log_masks], 1)?;
        let (mu, log_sigma) = self.vae.encode(g, params, enc_in)?;
        let noise = noise.unwrap_or_else(|| Tensor::zeros(g.shape(mu)));
        let z = reparameterize(g, mu, log_sigma, noise)?;
        let decoded = self.vae.broadcast_decode(g, params, z, h, w)?;
        let loss = loss_nodes(g, xv, log_masks, decoded, mu, log_sigma, slots, loss)?;
        Ok(ForwardOutput { log_masks, decoded, mu, log_sigma, z, loss, attention_calls, slots, batch })
    }
}

/// Where the per-slot masks come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a, T: Scalar> {
    /// Run the attention recursion for this many slots.
    Learned { slots: usize },
    /// Use fixed masks; the attention network is not evaluated.
    Provided(&'a LogMaskStack<T>),
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// (K·B, 1, H, W)
    pub log_masks: Var,
    /// (K·B, 4, H, W)
    pub decoded: Var,
    /// (K·B, latent_dim)
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub loss: LossNodes,
    pub attention_calls: usize,
    pub slots: usize,
    pub batch: usize,
}

impl ForwardOutput {
    pub fn mask_stack<T: Scalar>(&self, g: &Graph<T>) -> Result<LogMaskStack<T>> {
        let t = g.value(self.log_masks);
        LogMaskStack::from_slot_major(&t.clone().reshape(&[self.slots, self.batch, t.dim(2), t.dim(3)])?)
    }

    pub fn posterior<T: Scalar>(&self, g: &Graph<T>) -> Result<SlotPosterior<T>> {
        let to_bk = |v: Var| -> Result<Tensor<T>> {
            let t = g.value(v);
            let l = t.dim(1);
            let mut data = vec![T::zero(); t.numel()];
            for k in 0..self.slots {
                for b in 0..self.batch {
                    data[(b * self.slots + k) * l..][..l].copy_from_slice(&t.data()[(k * self.batch + b) * l..][..l]);
                }
            }
            Tensor::new(&[self.batch, self.slots, l], data)
        };
        Ok(SlotPosterior { mu: to_bk(self.mu)?, log_sigma: to_bk(self.log_sigma)?, z: to_bk(self.z)? })
    }

    pub fn decode<T: Scalar>(&self, g: &Graph<T>) -> Result<SlotDecode<T>> {
        SlotDecode::from_slot_major(g.value(self.decoded), self.slots)
    }
}

/// Log masks from (B, K, H, W) mask masses; empty entries sit at the floor.
pub fn log_masks_from_masses<T: Scalar>(masses: &Tensor<T>) -> Result<LogMaskStack<T>> {
    let floor = T::of(LOG_FLOOR);
    LogMaskStack::new(masses.map(|m| if m > floor.exp() { m.ln() } else { floor }))
}
