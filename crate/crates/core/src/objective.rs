//! Training objective: pixel-wise mixture negative log-likelihood, the latent
//! KL against a unit Gaussian prior, and the KL from the attention mask
//! distribution to the decoder's reconstructed masks.
//!
//! Every term is summed over pixels, channels and slots and averaged over the
//! batch. Mask entries at or below [`LOG_FLOOR`] count as exactly empty.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, Var};
use crate::component_vae::{SlotDecode, SlotPosterior};
use crate::decomposition::{LogMaskStack, LOG_FLOOR};
use crate::error::{MonetError, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(a) + log Σ exp(a − max(a))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp<T: Scalar>(a: &[T]) -> T {
    let m = a.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Loss weights and fixed likelihood scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Scale of slot 0.
    pub sigma_bg: f64,
    /// Scale of slots 1..K.
    pub sigma_fg: f64,
}

impl LossConfig {
    pub const fn monet() -> Self {
        Self { beta: 0.5, gamma: 0.5, sigma_bg: 0.09, sigma_fg: 0.11 }
    }

    /// Settings for training the component VAE alone on provided masks.
    pub const fn provided_masks() -> Self {
        Self { beta: 0.5, gamma: 0.25, sigma_bg: 0.05, sigma_fg: 0.05 }
    }

    pub fn slot_sigma(&self, slot: usize) -> f64 {
        if slot == 0 {
            self.sigma_bg
        } else {
            self.sigma_fg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_bg > 0.0 && self.sigma_fg > 0.0) {
            return Err(MonetError::Argument(format!(
                "likelihood scales must be positive (sigma_bg {}, sigma_fg {})",
                self.sigma_bg, self.sigma_fg
            )));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(MonetError::Argument(format!(
                "negative loss weight (beta {}, gamma {})",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::monet()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub latent_kl: f64,
    pub mask_kl: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_bg: f64,
    pub sigma_fg: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, latent_kl: f64, mask_kl: f64, config: &LossConfig) -> Self {
        Self {
            nll,
            latent_kl,
            mask_kl,
            total: nll + config.beta * latent_kl + config.gamma * mask_kl,
            beta: config.beta,
            gamma: config.gamma,
            sigma_bg: config.sigma_bg,
            sigma_fg: config.sigma_fg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.latent_kl.is_finite() && self.mask_kl.is_finite() && self.total.is_finite()
    }
}

fn mass<T: Scalar>(log_m: T) -> Option<T> {
    (log_m > T::of(LOG_FLOOR)).then(|| log_m.exp())
}

/// Dimensions of slot-major mixture inputs.
#[derive(Clone, Copy, Debug)]
struct MixtureDims {
    slots: usize,
    batch: usize,
    plane: usize,
    /// Channel count of the means tensor; only the first three are used.
    channels: usize,
}

/// Mixture NLL on slot-major data:
/// `x` (B, 3, P), `log_masks` (K, B, P), `means` (K, B, C, P).
fn mixture_kernel<T: Scalar>(
    dims: MixtureDims,
    x: &[T],
    log_masks: &[T],
    means: &[T],
    sigmas: &[T],
    mut grads: Option<(&mut [T], &mut [T])>,
) -> f64 {
    let MixtureDims { slots, batch, plane, channels } = dims;
    let half_log_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let log_norm: Vec<T> = sigmas.iter().map(|&s| T::of(3.0) * (-half_log_2pi - s.ln())).collect();
    let inv_var: Vec<T> = sigmas.iter().map(|&s| T::one() / (s * s)).collect();
    let scale = T::one() / T::of(batch as f64);
    let mut total = 0.0f64;
    let mut logits = vec![T::zero(); slots];
    for b in 0..batch {
        for p in 0..plane {
            let xp = [x[(b * 3) * plane + p], x[(b * 3 + 1) * plane + p], x[(b * 3 + 2) * plane + p]];
            for k in 0..slots {
                let lm = log_masks[(k * batch + b) * plane + p];
                logits[k] = if lm > T::of(LOG_FLOOR) {
                    let base = (k * batch + b) * channels * plane + p;
                    let sq: T = (0..3)
                        .map(|c| {
                            let d = xp[c] - means[base + c * plane];
                            d * d
                        })
                        .sum();
                    lm + log_norm[k] - T::of(0.5) * sq * inv_var[k]
                } else {
                    T::neg_infinity()
                };
            }
            let lse = logsumexp(&logits);
            total -= lse.as_f64();
            if let Some((d_log_masks, d_means)) = grads.as_mut() {
                for k in 0..slots {
                    if logits[k] == T::neg_infinity() {
                        continue;
                    }
                    let resp = (logits[k] - lse).exp();
                    d_log_masks[(k * batch + b) * plane + p] = -resp * scale;
                    let base = (k * batch + b) * channels * plane + p;
                    for c in 0..3 {
                        let idx = base + c * plane;
                        d_means[idx] = -resp * (xp[c] - means[idx]) * inv_var[k] * scale;
                    }
                }
            }
        }
    }
    total / batch as f64
}

/// `Σ ½(σ² + μ² − 1 − 2 log σ)` over (N, L) rows, divided by `batch`.
fn latent_kl_kernel<T: Scalar>(mu: &[T], log_sigma: &[T], batch: usize) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| {
            let (m, ls) = (m.as_f64(), ls.as_f64());
            0.5 * ((2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls)
        })
        .sum::<f64>()
        / batch as f64
}

/// `Σ m (log m − log m̃)` over slot-major data, divided by `batch`.
fn mask_kl_kernel<T: Scalar>(log_masks: &[T], log_mtilde: &[T], batch: usize) -> f64 {
    log_masks.iter().zip(log_mtilde).filter_map(|(&lm, &lt)| mass(lm).map(|m| (m * (lm - lt)).as_f64())).sum::<f64>()
        / batch as f64
}

struct MixtureRule<T> {
    dims: MixtureDims,
    sigmas: Vec<T>,
}

impl<T: Scalar> Backward<T> for MixtureRule<T> {
    fn name(&self) -> &'static str {
        "mixture_nll"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, log_masks, means) = (inputs[0], inputs[1], inputs[2]);
        let mut d_log_masks = Tensor::zeros(log_masks.shape());
        let mut d_means = Tensor::zeros(means.shape());
        mixture_kernel(
            self.dims,
            x.data(),
            log_masks.data(),
            means.data(),
            &self.sigmas,
            Some((d_log_masks.data_mut(), d_means.data_mut())),
        );
        let g = grad.item();
        vec![None, needs[1].then(|| d_log_masks.map(|v| v * g)), needs[2].then(|| d_means.map(|v| v * g))]
    }
}

struct LatentKlRule {
    batch: usize,
}

impl<T: Scalar> Backward<T> for LatentKlRule {
    fn name(&self) -> &'static str {
        "latent_kl"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = grad.item() / T::of(self.batch as f64);
        vec![
            needs[0].then(|| inputs[0].map(|m| m * s)),
            needs[1].then(|| inputs[1].map(|ls| ((ls + ls).exp() - T::one()) * s)),
        ]
    }
}

struct MaskKlRule {
    batch: usize,
}

impl<T: Scalar> Backward<T> for MaskKlRule {
    fn name(&self) -> &'static str {
        "mask_kl"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (lm, lt) = (inputs[0], inputs[1]);
        let s = grad.item() / T::of(self.batch as f64);
        let d_lm = needs[0].then(|| {
            let data = lm
                .data()
                .iter()
                .zip(lt.data())
                .map(|(&a, &b)| mass(a).map_or(T::zero(), |m| m * (a - b + T::one()) * s))
                .collect();
            Tensor::new(lm.shape(), data).expect("same shape")
        });
        let d_lt = needs[1].then(|| lm.map(|a| mass(a).map_or(T::zero(), |m| -m * s)));
        vec![d_lm, d_lt]
    }
}

/// Scalar nodes of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub nll: Var,
    pub latent_kl: Var,
    pub mask_kl: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, config: &LossConfig) -> LossBreakdown {
        let v = |n: Var| g.value(n).item().as_f64();
        let mut b = LossBreakdown::new(v(self.nll), v(self.latent_kl), v(self.mask_kl), config);
        b.total = v(self.total);
        b
    }
}

/// Mixture NLL node. `x`: (B, 3, H, W); `log_masks`: (K·B, 1, H, W) slot-major;
/// `decoded`: (K·B, C ≥ 3, H, W) slot-major with RGB means in the first three channels.
pub fn mixture_nll_node<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    log_masks: Var,
    decoded: Var,
    slots: usize,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let (xs, ms, ds) = (g.shape(x).to_vec(), g.shape(log_masks).to_vec(), g.shape(decoded).to_vec());
    if xs.len() != 4 || xs[1] != 3 {
        return Err(MonetError::Shape(format!("image batch must be (B, 3, H, W), got {xs:?}")));
    }
    let (batch, plane) = (xs[0], xs[2] * xs[3]);
    if ms != [slots * batch, 1, xs[2], xs[3]]
        || ds.len() != 4
        || ds[0] != slots * batch
        || ds[1] < 3
        || ds[2..] != xs[2..]
    {
        return Err(MonetError::Shape(format!(
            "mixture inputs disagree: image {xs:?}, log masks {ms:?}, decoded {ds:?}, {slots} slots"
        )));
    }
    let dims = MixtureDims { slots, batch, plane, channels: ds[1] };
    let sigmas: Vec<T> = (0..slots).map(|k| T::of(config.slot_sigma(k))).collect();
    let value =
        mixture_kernel(dims, g.value(x).data(), g.value(log_masks).data(), g.value(decoded).data(), &sigmas, None);
    Ok(g.push(Tensor::scalar(T::of(value)), &[x, log_masks, decoded], MixtureRule { dims, sigmas }))
}

/// Latent KL node over slot-major (K·B, L) posteriors.
pub fn latent_kl_node<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var, batch: usize) -> Result<Var> {
    if g.shape(mu) != g.shape(log_sigma) || batch == 0 {
        return Err(MonetError::Shape(format!("posterior mu {:?} vs log_sigma {:?}", g.shape(mu), g.shape(log_sigma))));
    }
    let value = latent_kl_kernel(g.value(mu).data(), g.value(log_sigma).data(), batch);
    Ok(g.push(Tensor::scalar(T::of(value)), &[mu, log_sigma], LatentKlRule { batch }))
}

/// Mask KL node; both inputs slot-major with identical shapes.
pub fn mask_kl_node<T: Scalar>(g: &mut Graph<T>, log_masks: Var, log_mtilde: Var, batch: usize) -> Result<Var> {
    if g.shape(log_masks) != g.shape(log_mtilde) || batch == 0 {
        return Err(MonetError::Shape(format!("mask stacks {:?} vs {:?}", g.shape(log_masks), g.shape(log_mtilde))));
    }
    let value = mask_kl_kernel(g.value(log_masks).data(), g.value(log_mtilde).data(), batch);
    Ok(g.push(Tensor::scalar(T::of(value)), &[log_masks, log_mtilde], MaskKlRule { batch }))
}

/// `log m̃` from slot-major (K·B, 4, H, W) decoder output, shaped (K·B, 1, H, W).
pub fn reconstructed_log_masks_node<T: Scalar>(g: &mut Graph<T>, decoded: Var, slots: usize) -> Result<Var> {
    let ds = g.shape(decoded).to_vec();
    if ds.len() != 4 || ds[1] != 4 || !ds[0].is_multiple_of(slots) {
        return Err(MonetError::Shape(format!("decoder output {ds:?} for {slots} slots")));
    }
    let logits = g.narrow(decoded, 1, 3, 1)?;
    let per_slot = ds[0] / slots * ds[2] * ds[3];
    let grouped = g.reshape(logits, &[slots, per_slot])?;
    let log_mtilde = g.log_softmax0(grouped)?;
    g.reshape(log_mtilde, &[ds[0], 1, ds[2], ds[3]])
}

/// All three terms and their weighted total.
#[allow(clippy::too_many_arguments)]
pub fn loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    log_masks: Var,
    decoded: Var,
    mu: Var,
    log_sigma: Var,
    slots: usize,
    config: &LossConfig,
) -> Result<LossNodes> {
    let batch = g.shape(x)[0];
    if g.shape(mu)[0] != slots * batch {
        return Err(MonetError::Shape(format!(
            "posterior rows {} do not match {slots} slots × batch {batch}",
            g.shape(mu)[0]
        )));
    }
    let nll = mixture_nll_node(g, x, log_masks, decoded, slots, config)?;
    let latent_kl = latent_kl_node(g, mu, log_sigma, batch)?;
    let log_mtilde = reconstructed_log_masks_node(g, decoded, slots)?;
    let mask_kl = mask_kl_node(g, log_masks, log_mtilde, batch)?;
    let total = g.weighted_sum(&[(nll, 1.0), (latent_kl, config.beta), (mask_kl, config.gamma)])?;
    Ok(LossNodes { nll, latent_kl, mask_kl, total })
}

/// (B, K, inner…) → slot-major (K, B, inner…) data.
fn slot_major<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let (b, k) = (t.dim(0), t.dim(1));
    let inner = t.numel() / (b * k).max(1);
    let mut out = vec![T::zero(); t.numel()];
    for i in 0..b {
        for s in 0..k {
            out[(s * b + i) * inner..][..inner].copy_from_slice(&t.data()[(i * k + s) * inner..][..inner]);
        }
    }
    out
}

/// Mixture NLL for `x` (B, 3, H, W), `log_masks` (B, K, H, W) and
/// `rgb_means` (B, K, 3, H, W). A single slot is allowed (it uses `sigma_bg`).
pub fn mixture_nll<T: Scalar>(
    x: &Tensor<T>,
    log_masks: &Tensor<T>,
    rgb_means: &Tensor<T>,
    sigma_bg: f64,
    sigma_fg: f64,
) -> Result<f64> {
    let config = LossConfig { sigma_bg, sigma_fg, ..LossConfig::monet() };
    config.validate()?;
    let (xs, ms, rs) = (x.shape(), log_masks.shape(), rgb_means.shape());
    if xs.len() != 4 || xs[1] != 3 || ms.len() != 4 || ms[0] != xs[0] || ms[2..] != xs[2..] {
        return Err(MonetError::Shape(format!("image {xs:?} vs log masks {ms:?}")));
    }
    if rs.len() != 5 || rs[..2] != ms[..2] || rs[2] != 3 || rs[3..] != xs[2..] {
        return Err(MonetError::Shape(format!("rgb means {rs:?} vs log masks {ms:?}")));
    }
    let dims = MixtureDims { slots: ms[1], batch: xs[0], plane: xs[2] * xs[3], channels: 3 };
    let sigmas: Vec<T> = (0..dims.slots).map(|k| T::of(config.slot_sigma(k))).collect();
    Ok(mixture_kernel(dims, x.data(), &slot_major(log_masks), &slot_major(rgb_means), &sigmas, None))
}

/// Latent KL for (B, K, L) posterior parameters.
pub fn latent_kl<T: Scalar>(mu: &Tensor<T>, log_sigma: &Tensor<T>) -> Result<f64> {
    if mu.shape() != log_sigma.shape() || mu.rank() != 3 {
        return Err(MonetError::Shape(format!("mu {:?} vs log_sigma {:?}", mu.shape(), log_sigma.shape())));
    }
    Ok(latent_kl_kernel(mu.data(), log_sigma.data(), mu.dim(0)))
}

/// `KL(q ‖ p)` between attention masks and reconstructed masks, both (B, K, H, W) in log units.
pub fn mask_kl<T: Scalar>(log_masks: &Tensor<T>, log_mtilde: &Tensor<T>) -> Result<f64> {
    if log_masks.shape() != log_mtilde.shape() || log_masks.rank() != 4 {
        return Err(MonetError::Shape(format!("mask stacks {:?} vs {:?}", log_masks.shape(), log_mtilde.shape())));
    }
    Ok(mask_kl_kernel(log_masks.data(), log_mtilde.data(), log_masks.dim(0)))
}

/// All three terms from materialised model outputs.
pub fn total_loss<T: Scalar>(
    x: &Tensor<T>,
    log_masks: &LogMaskStack<T>,
    posterior: &SlotPosterior<T>,
    decode: &SlotDecode<T>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let k = log_masks.slots();
    let ks = [posterior.mu.dim(1), posterior.log_sigma.dim(1), decode.rgb_means.dim(1), decode.mask_logits.dim(1)];
    if ks.iter().any(|&v| v != k) {
        return Err(MonetError::Shape(format!("slot counts disagree: masks {k}, others {ks:?}")));
    }
    let nll = mixture_nll(x, log_masks.tensor(), &decode.rgb_means, config.sigma_bg, config.sigma_fg)?;
    let kl = latent_kl(&posterior.mu, &posterior.log_sigma)?;
    let log_mtilde = crate::component_vae::reconstruct_masks(&decode.mask_logits)?;
    let mkl = mask_kl(log_masks.tensor(), &log_mtilde)?;
    Ok(LossBreakdown::new(nll, kl, mkl, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_sum() {
        let a = [-3.0f64, 0.5, 19.0, -20.0, 7.25];
        let naive = a.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&a) - naive).abs() < 1e-12);
        assert_eq!(logsumexp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((logsumexp(&[f64::NEG_INFINITY, 0.0]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_single_component_pixel() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 1, 1], &[0.2, 0.5, 0.9]).unwrap();
        let lm = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let means = x.clone().reshape(&[1, 1, 3, 1, 1]).unwrap();
        let nll = mixture_nll(&x, &lm, &means, 0.09, 0.11).unwrap();
        // −3·(−½ ln(2π·0.09²))
        let per_channel = -0.5 * (2.0 * std::f64::consts::PI * 0.09f64.powi(2)).ln();
        assert!((per_channel - 1.48899).abs() < 1e-4);
        assert!((nll + 3.0 * per_channel).abs() < 1e-12);
        assert!((nll - -4.46696).abs() < 1e-4);
    }

    #[test]
    fn empty_slot_is_inert() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 1, 1], &[0.2, 0.5, 0.9]).unwrap();
        let lm = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.0, LOG_FLOOR]).unwrap();
        let mut means = vec![0.2, 0.5, 0.9, 7.0, -3.0, 0.1];
        let a = mixture_nll(&x, &lm, &Tensor::from_f64(&[1, 2, 3, 1, 1], &means).unwrap(), 0.09, 0.11).unwrap();
        means[3] = -40.0;
        let b = mixture_nll(&x, &lm, &Tensor::from_f64(&[1, 2, 3, 1, 1], &means).unwrap(), 0.09, 0.11).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - -4.46696).abs() < 1e-4);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        let lm = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let means = Tensor::<f64>::zeros(&[1, 1, 3, 1, 1]);
        assert!(matches!(mixture_nll(&x, &lm, &means, 0.0, 0.1), Err(MonetError::Argument(_))));
    }

    #[test]
    fn latent_kl_closed_forms() {
        let one = |m: f64, s: f64| {
            latent_kl(
                &Tensor::<f64>::from_f64(&[1, 1, 1], &[m]).unwrap(),
                &Tensor::<f64>::from_f64(&[1, 1, 1], &[s.ln()]).unwrap(),
            )
            .unwrap()
        };
        assert!(one(0.0, 1.0).abs() < 1e-15);
        assert!((one(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((one(0.0, 0.5) - 0.318147).abs() < 1e-6);
    }

    #[test]
    fn mask_kl_examples() {
        let lm = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.0, f64::NEG_INFINITY]).unwrap();
        let lt = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.5f64.ln(), 0.5f64.ln()]).unwrap();
        assert!((mask_kl(&lm, &lt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let floored = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.0, LOG_FLOOR]).unwrap();
        assert!((mask_kl(&floored, &lt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(mask_kl(&lt, &lt).unwrap(), 0.0);
    }
}
