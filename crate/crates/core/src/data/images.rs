//! Float RGB images, PNG import/export and CLEVR preprocessing.

use std::path::Path;

use super::LabeledScene;
use crate::error::{MonetError, Result};
use crate::tensor::{Scalar, Tensor};

/// Crop window as `(row_start, row_end, col_start, col_end)`, half-open.
pub const CLEVR_CROP: (usize, usize, usize, usize) = (29, 221, 64, 256);
pub const CLEVR_SIZE: usize = 128;
const CLEVR_INPUT: (usize, usize) = (320, 240);

/// Row-major `height × width × 3` image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(MonetError::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self { width, height, data: rgb.repeat(width * height) }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `round(255·clamp(v, 0, 1))`, halves rounded away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v as f64)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// From a (3, H, W) tensor.
    pub fn from_chw<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(MonetError::Shape(format!("expected (3, H, W), got {:?}", t.shape())));
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = t.data()[c * plane + p].as_f64() as f32;
            }
        }
        Self::new(w, h, data)
    }

    /// To a (3, H, W) tensor.
    pub fn to_chw<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = T::of(self.data[p * 3 + c] as f64);
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("3·H·W values")
    }
}

/// Clamp to [0, 1] and quantise to a byte, rounding halves away from zero.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn load_png(path: impl AsRef<Path>) -> Result<FloatImage> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    FloatImage::from_u8(w as usize, h as usize, img.as_raw())
}

pub fn save_png(path: impl AsRef<Path>, img: &FloatImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_u8())
        .ok_or_else(|| MonetError::Shape("image buffer size".into()))?;
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

/// Bilinear resampling with pixel-centre alignment (`align_corners = false`).
fn resize_bilinear(src: &FloatImage, out_w: usize, out_h: usize) -> FloatImage {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (xs, ys) = (axis(out_w, src.width), axis(out_h, src.height));
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (src.get(x0, y0), src.get(x1, y0), src.get(x0, y1), src.get(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    FloatImage { width: out_w, height: out_h, data }
}

/// Crops a 320×240 CLEVR render to the central 192×192 window and resizes it to 128×128.
pub fn preprocess_clevr(img: &FloatImage) -> Result<FloatImage> {
    if (img.width, img.height) != CLEVR_INPUT {
        return Err(MonetError::Argument(format!(
            "CLEVR image must be {}x{} (width x height), got {}x{}",
            CLEVR_INPUT.0, CLEVR_INPUT.1, img.width, img.height
        )));
    }
    let (r0, r1, c0, c1) = CLEVR_CROP;
    let mut crop = Vec::with_capacity((r1 - r0) * (c1 - c0) * 3);
    for y in r0..r1 {
        crop.extend_from_slice(&img.data[(y * img.width + c0) * 3..(y * img.width + c1) * 3]);
    }
    let crop = FloatImage::new(c1 - c0, r1 - r0, crop)?;
    let mut out = resize_bilinear(&crop, CLEVR_SIZE, CLEVR_SIZE);
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// A scene from an RGB PNG and one binary PNG per ground-truth mask
/// (a pixel belongs to a mask when its first channel is at least 128).
pub fn scene_from_pngs(image: impl AsRef<Path>, masks: &[impl AsRef<Path>]) -> Result<LabeledScene> {
    let img = image::open(image.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = vec![u8::MAX; w * h];
    for (k, m) in masks.iter().enumerate() {
        let m = image::open(m.as_ref())?.to_luma8();
        if (m.width() as usize, m.height() as usize) != (w, h) {
            return Err(MonetError::Shape(format!("mask {k} is {}x{}, image is {w}x{h}", m.width(), m.height())));
        }
        for (p, &v) in m.as_raw().iter().enumerate() {
            if v >= 128 {
                if labels[p] != u8::MAX {
                    return Err(MonetError::Argument(format!("pixel {p} belongs to masks {} and {k}", labels[p])));
                }
                labels[p] = k as u8;
            }
        }
    }
    if let Some(p) = labels.iter().position(|&l| l == u8::MAX) {
        return Err(MonetError::Argument(format!("pixel {p} belongs to no mask")));
    }
    LabeledScene::new(h, w, img.into_raw(), labels, masks.len(), [0; 3], Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> FloatImage {
        let mut data = Vec::new();
        for _y in 0..240 {
            for x in 0..320 {
                let v = x as f32 / 319.0;
                data.extend_from_slice(&[v, 1.0 - v, 0.5]);
            }
        }
        FloatImage::new(320, 240, data).unwrap()
    }

    #[test]
    fn constant_input_stays_constant() {
        let out = preprocess_clevr(&FloatImage::filled(320, 240, [0.2, 0.4, 0.9])).unwrap();
        assert_eq!((out.width, out.height), (128, 128));
        for px in out.data.chunks(3) {
            assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn horizontal_gradient_matches_reference() {
        let out = preprocess_clevr(&gradient_image()).unwrap();
        for ox in 0..128 {
            // column coordinate in the crop, then back to the full image
            let s = ((ox as f64 + 0.5) * 1.5 - 0.5).max(0.0);
            let x0 = s.floor();
            let x1 = (x0 + 1.0).min(191.0);
            let fx = s - x0;
            let v = ((64.0 + x0) / 319.0) * (1.0 - fx) + ((64.0 + x1) / 319.0) * fx;
            for oy in [0, 17, 127] {
                assert!((out.get(ox, oy)[0] as f64 - v).abs() < 1e-5, "({ox},{oy})");
            }
        }
    }

    #[test]
    fn first_output_pixel_reads_the_crop_corner() {
        let mut img = FloatImage::filled(320, 240, [0.0; 3]);
        for y in 29..31 {
            for x in 64..66 {
                let i = (y * 320 + x) * 3;
                img.data[i] = 1.0;
            }
        }
        let out = preprocess_clevr(&img).unwrap();
        assert!((out.get(0, 0)[0] - 1.0).abs() < 1e-6);
        let mut outside = FloatImage::filled(320, 240, [0.0; 3]);
        for y in 0..240 {
            for x in 0..320 {
                if !(29..31).contains(&y) || !(64..66).contains(&x) {
                    outside.data[(y * 320 + x) * 3] = 1.0;
                }
            }
        }
        assert!(preprocess_clevr(&outside).unwrap().get(0, 0)[0].abs() < 1e-6);
    }

    #[test]
    fn wrong_size_names_expected_dims() {
        let err = preprocess_clevr(&FloatImage::filled(300, 200, [0.0; 3])).unwrap_err();
        assert!(err.to_string().contains("320x240"), "{err}");
    }

    #[test]
    fn png_round_trip_and_quantisation() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(7.0), 255);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img =
            FloatImage::from_u8(3, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 255])
                .unwrap();
        save_png(&path, &img).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn scenes_import_from_mask_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let img = FloatImage::filled(4, 2, [0.5, 0.5, 0.5]);
        save_png(dir.path().join("img.png"), &img).unwrap();
        let left = FloatImage::from_u8(
            4,
            2,
            &[255, 255, 255, 255, 255, 255, 0, 0, 0, 0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0, 0, 0, 0],
        )
        .unwrap();
        let right = FloatImage::new(4, 2, left.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        save_png(dir.path().join("m0.png"), &left).unwrap();
        save_png(dir.path().join("m1.png"), &right).unwrap();
        let s = scene_from_pngs(dir.path().join("img.png"), &[dir.path().join("m0.png"), dir.path().join("m1.png")])
            .unwrap();
        assert_eq!(s.labels, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(s.mask_slots, 2);
    }
}
