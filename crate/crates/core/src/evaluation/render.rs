use std::path::Path;

use crate::component_vae::{reconstruct_masks, SlotDecode};
use crate::data::{save_png, FloatImage};
use crate::decomposition::LogMaskStack;
use crate::error::{MonetError, Result};
use crate::tensor::{Scalar, Tensor};

/// Slot colours for segmentation maps; slot `k` uses entry `k mod 12`.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn palette_color(slot: usize) -> [f32; 3] {
    let c = PALETTE[slot % PALETTE.len()];
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

/// `Σ_k m_k·x̂_k` per pixel, clamped to [0, 1]: (B, 3, H, W).
pub fn reconstruction_mixture<T: Scalar>(log_masks: &LogMaskStack<T>, decode: &SlotDecode<T>) -> Result<Tensor<T>> {
    let (b, k, h, w) = log_masks.dims();
    if decode.rgb_means.shape() != [b, k, 3, h, w] {
        return Err(MonetError::Shape(format!(
            "decoded means {:?} do not match masks {:?}",
            decode.rgb_means.shape(),
            log_masks.tensor().shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); b * 3 * plane];
    for i in 0..b {
        for s in 0..k {
            for p in 0..plane {
                let m = log_masks.tensor().data()[(i * k + s) * plane + p].exp();
                for c in 0..3 {
                    out[(i * 3 + c) * plane + p] =
                        out[(i * 3 + c) * plane + p] + m * decode.rgb_means.data()[((i * k + s) * 3 + c) * plane + p];
                }
            }
        }
    }
    let clamped = out.into_iter().map(|v| v.max(T::zero()).min(T::one())).collect();
    Tensor::new(&[b, 3, h, w], clamped)
}

struct Canvas {
    tile_h: usize,
    tile_w: usize,
    img: FloatImage,
}

impl Canvas {
    fn new(rows: usize, cols: usize, tile_h: usize, tile_w: usize) -> Self {
        Self { tile_h, tile_w, img: FloatImage::filled(cols * tile_w, rows * tile_h, [0.0; 3]) }
    }

    fn put(&mut self, row: usize, col: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let yy = row * self.tile_h + y;
        let xx = col * self.tile_w + x;
        let i = (yy * self.img.width + xx) * 3;
        for c in 0..3 {
            self.img.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }
}

/// Panel grid with `2 + 2K` rows and one column per image:
/// reconstruction mixture, argmax segmentation, K unmasked component means,
/// K component means multiplied by the decoder's reconstructed masks.
pub fn compose_panels<T: Scalar>(log_masks: &LogMaskStack<T>, decode: &SlotDecode<T>) -> Result<FloatImage> {
    let (b, k, h, w) = log_masks.dims();
    let mix = reconstruction_mixture(log_masks, decode)?;
    let log_mtilde = reconstruct_masks(&decode.mask_logits)?;
    let plane = h * w;
    let mut canvas = Canvas::new(2 + 2 * k, b, h, w);
    let f = |v: T| v.as_f64() as f32;
    for i in 0..b {
        let labels = log_masks.argmax(i);
        for p in 0..plane {
            let (y, x) = (p / w, p % w);
            let px = |c: usize| f(mix.data()[(i * 3 + c) * plane + p]);
            canvas.put(0, i, y, x, [px(0), px(1), px(2)]);
            canvas.put(1, i, y, x, palette_color(labels[p]));
            for s in 0..k {
                let mean = |c: usize| f(decode.rgb_means.data()[((i * k + s) * 3 + c) * plane + p]);
                let rgb = [mean(0), mean(1), mean(2)];
                canvas.put(2 + s, i, y, x, rgb);
                let m = f(log_mtilde.data()[(i * k + s) * plane + p].exp());
                canvas.put(2 + k + s, i, y, x, [rgb[0] * m, rgb[1] * m, rgb[2] * m]);
            }
        }
    }
    Ok(canvas.img)
}

pub fn render_panels<T: Scalar>(
    log_masks: &LogMaskStack<T>,
    decode: &SlotDecode<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    save_png(path, &compose_panels(log_masks, decode)?)
}

/// Line chart of several series on a white background, each series scaled
/// into the shared value range.
pub fn line_chart(series: &[(&[(f64, f64)], [u8; 3])], width: usize, height: usize) -> FloatImage {
    let mut img = FloatImage::filled(width, height, [1.0; 3]);
    let pts = series.iter().flat_map(|(s, _)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !(x0 < x1) {
        x1 = x0 + 1.0;
    }
    if !(y0 < y1) {
        y1 = y0 + 1.0;
    }
    let margin = 8.0;
    let to_px = |x: f64, y: f64| {
        let px = margin + (x - x0) / (x1 - x0) * (width as f64 - 2.0 * margin);
        let py = height as f64 - margin - (y - y0) / (y1 - y0) * (height as f64 - 2.0 * margin);
        (px, py)
    };
    let mut plot = |x: f64, y: f64, c: [f32; 3]| {
        let (xi, yi) = (x.round() as isize, y.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < width && (yi as usize) < height {
            let i = (yi as usize * width + xi as usize) * 3;
            img.data[i..i + 3].copy_from_slice(&c);
        }
    };
    for (s, color) in series {
        let c = [color[0] as f32 / 255.0, color[1] as f32 / 255.0, color[2] as f32 / 255.0];
        for win in s.windows(2) {
            let (a, b) = (to_px(win[0].0, win[0].1), to_px(win[1].0, win[1].1));
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for t in 0..=n {
                let u = t as f64 / n as f64;
                plot(a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1), c);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_reconstruction_survives_quantisation() {
        // two slots splitting a 2x2 image, both decoding the true colours
        let x = [0.2f64, 0.9, 0.0, 1.0, 0.5, 0.25, 0.75, 0.1, 0.3, 0.6, 0.4, 0.8];
        let masses = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let lm: Vec<f64> = masses.iter().map(|&m: &f64| if m > 0.0 { 0.0 } else { -14.0 }).collect();
        let stack = LogMaskStack::new(Tensor::from_f64(&[1, 2, 2, 2], &lm).unwrap()).unwrap();
        let mut means = x.to_vec();
        means.extend_from_slice(&x);
        let decode = SlotDecode {
            rgb_means: Tensor::from_f64(&[1, 2, 3, 2, 2], &means).unwrap(),
            mask_logits: Tensor::zeros(&[1, 2, 2, 2]),
        };
        let mix = reconstruction_mixture(&stack, &decode).unwrap();
        let q = |v: f64| crate::data::quantize(v);
        for (a, b) in mix.data().iter().zip(&x) {
            assert_eq!(q(*a), q(*b));
        }
    }

    #[test]
    fn panel_grid_dimensions() {
        let (b, k, h, w) = (3, 4, 5, 6);
        let stack = LogMaskStack::new(Tensor::<f32>::full(&[b, k, h, w], -(k as f32).ln())).unwrap();
        let decode =
            SlotDecode { rgb_means: Tensor::zeros(&[b, k, 3, h, w]), mask_logits: Tensor::zeros(&[b, k, h, w]) };
        let img = compose_panels(&stack, &decode).unwrap();
        assert_eq!((img.height, img.width), ((2 + 2 * k) * h, b * w));
        // all slots tie, argmax picks slot 0, drawn in palette colour 0
        assert_eq!(img.get(0, h), palette_color(0));
    }

    #[test]
    fn chart_draws_something() {
        let s = [(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)];
        let img = line_chart(&[(&s, [255, 0, 0])], 64, 32);
        assert!(img.data.chunks(3).any(|p| p == [1.0, 0.0, 0.0]));
    }
}
