//! Segmentation scoring, panel rendering, latent traversals and the
//! provided-mask ablation report.

mod ablation;
mod ari;
mod render;

pub use ablation::{final_window, AblationReport, AblationRun, ConditionSummary};
pub use ari::{ari, fg_ari};
pub use render::{compose_panels, line_chart, palette_color, reconstruction_mixture, render_panels, PALETTE};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::component_vae::{linspace, unnormalized_slot_mask, SlotDecode};
use crate::data::{FloatImage, LabeledScene};
use crate::decomposition::LogMaskStack;
use crate::error::{MonetError, Result};
use crate::model::{MaskSource, MonetArch};
use crate::nn::{Bound, ParamStore};
use crate::objective::{LossBreakdown, LossConfig};
use crate::tensor::{Scalar, Tensor};
use crate::training::SceneSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// Row-major argmax slot per pixel.
    pub hard_labels: Vec<usize>,
    pub ari: Option<f64>,
    pub fg_ari: Option<f64>,
    /// Mean mask mass of each slot over the image.
    pub per_slot_mass: Vec<f64>,
    /// Largest per-pixel `|logsumexp_k log m_k|`.
    pub normalization_error: f64,
}

/// Model outputs for one evaluated batch.
pub struct SegmentationBatch<T: Scalar> {
    pub results: Vec<SegmentationResult>,
    pub log_masks: LogMaskStack<T>,
    pub decode: SlotDecode<T>,
    pub loss: LossBreakdown,
}

/// Scores a stack of log masks, optionally against ground truth.
pub fn score_masks<T: Scalar>(
    log_masks: &LogMaskStack<T>,
    truth: Option<&[&LabeledScene]>,
) -> Result<Vec<SegmentationResult>> {
    let (b, k, h, w) = log_masks.dims();
    if let Some(t) = truth {
        if t.len() != b || t.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(MonetError::Shape(format!(
                "ground truth for {} scenes does not match {b} {h}x{w} masks",
                t.len()
            )));
        }
    }
    let plane = h * w;
    (0..b)
        .map(|i| {
            let hard_labels = log_masks.argmax(i);
            let per_slot_mass: Vec<f64> = (0..k)
                .map(|s| {
                    log_masks.tensor().data()[(i * k + s) * plane..][..plane]
                        .iter()
                        .map(|v| v.as_f64().exp())
                        .sum::<f64>()
                        / plane as f64
                })
                .collect();
            let single = LogMaskStack::new(log_masks.tensor().narrow0(i, 1))?;
            let (ari_v, fg) = match truth {
                Some(t) => {
                    let gt = t[i].labels_usize();
                    (Some(ari(&hard_labels, &gt)?), fg_ari(&hard_labels, &gt, 0)?)
                }
                None => (None, None),
            };
            Ok(SegmentationResult {
                hard_labels,
                ari: ari_v,
                fg_ari: fg,
                per_slot_mass,
                normalization_error: single.normalization_error(),
            })
        })
        .collect()
}

/// Runs the attention recursion for `slots` steps and scores the masks.
/// Latents are decoded at the posterior mean, so the result is deterministic.
pub fn segment<T: Scalar>(
    arch: &MonetArch,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    slots: usize,
    truth: Option<&[&LabeledScene]>,
    loss: &LossConfig,
) -> Result<SegmentationBatch<T>> {
    let mut g = Graph::new();
    let mut bound = Bound::frozen(params);
    let out = arch.forward(&mut g, &mut bound, x, MaskSource::Learned { slots }, None, loss)?;
    let log_masks = out.mask_stack(&g)?;
    Ok(SegmentationBatch {
        results: score_masks(&log_masks, truth)?,
        decode: out.decode(&g)?,
        loss: out.loss.breakdown(&g, loss),
        log_masks,
    })
}

/// Scores for a range of scenes from one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub results: Vec<SegmentationResult>,
    /// Mean per-scene mixture NLL.
    pub nll: f64,
}

impl DatasetScores {
    pub fn ari_mean(&self) -> Option<f64> {
        mean(self.results.iter().filter_map(|r| r.ari))
    }

    pub fn fg_ari_mean(&self) -> Option<f64> {
        mean(self.results.iter().filter_map(|r| r.fg_ari))
    }

    /// Median over scenes that have foreground pixels.
    pub fn fg_ari_median(&self) -> Option<f64> {
        median(self.results.iter().filter_map(|r| r.fg_ari).collect())
    }

    pub fn max_normalization_error(&self) -> f64 {
        self.results.iter().map(|r| r.normalization_error).fold(0.0, f64::max)
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Middle value, or the mean of the two middle values; NaNs sort last.
pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Segments scenes `range` of `data` in batches and scores them against
/// their ground-truth labels.
pub fn score_source(
    arch: &MonetArch,
    params: &ParamStore<f32>,
    data: &dyn SceneSource,
    range: std::ops::Range<usize>,
    slots: usize,
    batch: usize,
    loss: &LossConfig,
) -> Result<DatasetScores> {
    if range.is_empty() || range.end > data.len() {
        return Err(MonetError::Argument(format!("scene range {range:?} is empty or exceeds {} scenes", data.len())));
    }
    if data.size() != (arch.height(), arch.width()) {
        return Err(MonetError::Shape(format!(
            "scenes are {:?} but the model expects {}x{}",
            data.size(),
            arch.height(),
            arch.width()
        )));
    }
    let batch = batch.max(1);
    let mut results = Vec::with_capacity(range.len());
    let mut nll = 0.0;
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch).min(range.end);
        let scenes = (start..end).map(|i| data.scene(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let x = crate::data::image_batch::<f32>(&refs)?;
        let seg = segment(arch, params, &x, slots, Some(&refs), loss)?;
        nll += seg.loss.nll * refs.len() as f64;
        results.extend(seg.results);
        start = end;
    }
    Ok(DatasetScores { nll: nll / range.len() as f64, results })
}

/// Decodes (N, latent_dim) latents to (N, 4, H, W).
pub fn decode_latents<T: Scalar>(arch: &MonetArch, params: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut bound = Bound::frozen(params);
    let zv = g.constant(z.clone());
    let out = arch.vae.broadcast_decode(&mut g, &mut bound, zv, arch.height(), arch.width())?;
    Ok(g.value(out).clone())
}

/// A sweep over one latent dimension of one slot.
#[derive(Clone, Debug)]
pub struct Traversal {
    pub values: Vec<f64>,
    /// Posterior mean of the slot before the sweep.
    pub mu: Vec<f64>,
    /// (steps, 4, H, W) decoder outputs.
    pub decoded: Tensor<f32>,
    /// Component means times the unnormalised slot mask, one per value.
    pub frames: Vec<FloatImage>,
}

impl Traversal {
    /// Frames side by side.
    pub fn strip(&self) -> FloatImage {
        let (h, w) = (self.frames[0].height, self.frames[0].width);
        let n = self.frames.len();
        let mut img = FloatImage::filled(w * n, h, [0.0; 3]);
        for (j, f) in self.frames.iter().enumerate() {
            for y in 0..h {
                let dst = (y * w * n + j * w) * 3;
                img.data[dst..dst + w * 3].copy_from_slice(&f.data[y * w * 3..(y + 1) * w * 3]);
            }
        }
        img
    }

    /// Largest mean absolute difference between the first frame and any other.
    pub fn sensitivity(&self) -> f64 {
        self.frames.iter().map(|f| mean_abs_diff(&self.frames[0], f)).fold(0.0, f64::max)
    }
}

pub fn mean_abs_diff(a: &FloatImage, b: &FloatImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len().max(1) as f64
}

fn frame(decoded: &Tensor<f32>, n: usize) -> Result<FloatImage> {
    let (h, w) = (decoded.dim(2), decoded.dim(3));
    let plane = h * w;
    let one = &decoded.data()[n * 4 * plane..(n + 1) * 4 * plane];
    let mask = unnormalized_slot_mask(&Tensor::new(&[plane], one[3 * plane..].to_vec())?);
    let mut rgb = Tensor::new(&[3, h, w], one[..3 * plane].to_vec())?;
    for c in 0..3 {
        for p in 0..plane {
            rgb.data_mut()[c * plane + p] *= mask.data()[p];
        }
    }
    FloatImage::from_chw(&rgb)
}

/// Encodes `x` (1, 3, H, W), replaces dimension `dim` of slot `slot`'s posterior
/// mean with `steps` values from −1 to 1, and decodes each.
pub fn traverse_latent(
    arch: &MonetArch,
    params: &ParamStore<f32>,
    x: &Tensor<f32>,
    slots: usize,
    slot: usize,
    dim: usize,
    steps: usize,
) -> Result<Traversal> {
    let l = arch.vae.latent_dim;
    if dim >= l {
        return Err(MonetError::Argument(format!("latent dimension {dim} out of range 0..{l}")));
    }
    if slot >= slots {
        return Err(MonetError::Argument(format!("slot {slot} out of range 0..{slots}")));
    }
    if steps < 2 {
        return Err(MonetError::Argument(format!("a traversal needs at least 2 steps, got {steps}")));
    }
    if x.dim(0) != 1 {
        return Err(MonetError::Shape(format!("traversal takes a single image, got batch {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let mut bound = Bound::frozen(params);
    let out = arch.forward(&mut g, &mut bound, x, MaskSource::Learned { slots }, None, &LossConfig::monet())?;
    // slot-major rows; batch of one, so row `slot` is this slot
    let mu: Vec<f64> = g.value(out.mu).data()[slot * l..(slot + 1) * l].iter().map(|&v| v as f64).collect();
    let values = linspace(-1.0, 1.0, steps);
    traverse_from(arch, params, mu, dim, values)
}

/// Decodes `mu` with dimension `dim` replaced by each of `values`.
pub fn traverse_from(
    arch: &MonetArch,
    params: &ParamStore<f32>,
    mu: Vec<f64>,
    dim: usize,
    values: Vec<f64>,
) -> Result<Traversal> {
    let l = arch.vae.latent_dim;
    if mu.len() != l || dim >= l {
        return Err(MonetError::Argument(format!("latent {} / dimension {dim} for latent size {l}", mu.len())));
    }
    let mut z = Vec::with_capacity(values.len() * l);
    for &v in &values {
        let mut row = mu.clone();
        row[dim] = v;
        z.extend(row.into_iter().map(|x| x as f32));
    }
    let decoded = decode_latents(arch, params, &Tensor::new(&[values.len(), l], z)?)?;
    let frames = (0..values.len()).map(|n| frame(&decoded, n)).collect::<Result<Vec<_>>>()?;
    Ok(Traversal { values, mu, decoded, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_multidsprites, image_batch, mask_batch, SpriteConfig};
    use crate::model::log_masks_from_masses;
    use crate::training::init_params;

    #[test]
    fn medians() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mean([1.0, 2.0].into_iter()), Some(1.5));
    }

    #[test]
    fn ground_truth_masks_score_perfectly() {
        let scenes = generate_multidsprites(2, 0, 4, &SpriteConfig::new(16)).unwrap();
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let stack = log_masks_from_masses(&mask_batch::<f64>(&refs, 5).unwrap()).unwrap();
        for r in score_masks(&stack, Some(&refs)).unwrap() {
            assert_eq!(r.ari, Some(1.0));
            assert!(r.fg_ari.is_none_or(|v| v == 1.0));
            assert!((r.per_slot_mass.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn segmentation_of_extra_slots_stays_normalised() {
        let arch = MonetArch::new(16, 16);
        let mut arch = arch;
        arch.attention.channels = vec![8, 8, 8];
        let params = init_params::<f32>(0, &arch).unwrap();
        let scenes = generate_multidsprites(2, 0, 2, &SpriteConfig::new(16)).unwrap();
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let x = image_batch::<f32>(&refs).unwrap();
        for k in [3, 7] {
            let seg = segment(&arch, &params, &x, k, Some(&refs), &LossConfig::monet()).unwrap();
            assert_eq!(seg.log_masks.slots(), k);
            for r in &seg.results {
                assert!(r.normalization_error < 1e-5);
                assert_eq!(r.per_slot_mass.len(), k);
            }
        }
        let a = segment(&arch, &params, &x, 4, Some(&refs), &LossConfig::monet()).unwrap();
        let b = segment(&arch, &params, &x, 4, Some(&refs), &LossConfig::monet()).unwrap();
        assert_eq!(a.results, b.results);
    }

    #[test]
    fn traversal_endpoints_and_identity_frame() {
        let mut arch = MonetArch::new(16, 16);
        arch.attention.channels = vec![8, 8, 8];
        let params = init_params::<f32>(1, &arch).unwrap();
        let scenes = generate_multidsprites(2, 0, 1, &SpriteConfig::new(16)).unwrap();
        let x = image_batch::<f32>(&[&scenes[0]]).unwrap();
        let t = traverse_latent(&arch, &params, &x, 3, 1, 2, 11).unwrap();
        assert_eq!(t.values.first(), Some(&-1.0));
        assert_eq!(t.values.last(), Some(&1.0));
        assert!((t.values[1] - -0.8).abs() < 1e-12);
        assert_eq!(t.strip().width, 16 * 11);

        let own = traverse_from(&arch, &params, t.mu.clone(), 2, vec![t.mu[2]]).unwrap();
        let z: Vec<f32> = t.mu.iter().map(|&v| v as f32).collect();
        let plain = decode_latents(&arch, &params, &Tensor::new(&[1, 16], z).unwrap()).unwrap();
        assert_eq!(own.decoded, plain);
        assert!(traverse_latent(&arch, &params, &x, 3, 1, 16, 11).is_err());
    }
}
