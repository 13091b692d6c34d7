//! Scenes with ground-truth segmentations: the procedural sprite generator,
//! the dataset container, and image import/export.

mod format;
mod images;
mod sprites;

pub use format::{DatasetHeader, DatasetReader, DatasetWriter, ScenesIter, FORMAT_VERSION, MAGIC};
pub use images::{load_png, preprocess_clevr, quantize, save_png, scene_from_pngs, FloatImage, CLEVR_CROP, CLEVR_SIZE};
pub use sprites::{
    generate_multidsprites, generate_scene, orientation_value, position_value, rasterize_sprite, scale_value, Sprite,
    SpriteConfig, SpriteShape, MIN_SIZE, ORIENTATIONS, POSITIONS, SCALES,
};

use crate::error::{MonetError, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of ground-truth masks in Objects Room scenes: floor, sky, two walls, three objects.
pub const OBJECTS_ROOM_MASKS: usize = 7;

/// An RGB image with a per-pixel ground-truth entity label (0 is background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width × 3`.
    pub pixels: Vec<u8>,
    /// Row-major `height × width`, each `< mask_slots`.
    pub labels: Vec<u8>,
    pub mask_slots: usize,
    pub background: [u8; 3],
    /// In compositing order; sprite `j` carries label `j + 1`.
    pub sprites: Vec<Sprite>,
}

impl LabeledScene {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
        mask_slots: usize,
        background: [u8; 3],
        sprites: Vec<Sprite>,
    ) -> Result<Self> {
        if pixels.len() != height * width * 3 || labels.len() != height * width {
            return Err(MonetError::Shape(format!(
                "scene {height}x{width} has {} pixel bytes and {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= mask_slots) {
            return Err(MonetError::Argument(format!("label {l} exceeds {mask_slots} mask slots")));
        }
        Ok(Self { height, width, pixels, labels, mask_slots, background, sprites })
    }

    /// Binary mask of entity `k` (row-major).
    pub fn mask(&self, k: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == k).collect()
    }

    /// All `mask_slots` binary masks; exactly one is set at every pixel.
    pub fn gt_masks(&self) -> Vec<Vec<bool>> {
        (0..self.mask_slots).map(|k| self.mask(k)).collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Image as (3, H, W) with values `v / 255`.
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = T::of(self.pixels[p * 3 + c] as f64 / 255.0);
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("sized")
    }
}

/// Opens an externally rendered Objects Room dataset, which must carry seven masks per scene.
pub fn open_objects_room(path: impl AsRef<std::path::Path>) -> Result<DatasetReader> {
    let reader = DatasetReader::open(path)?;
    if reader.header().mask_slots != OBJECTS_ROOM_MASKS {
        return Err(MonetError::DatasetHeader(format!(
            "Objects Room scenes need {OBJECTS_ROOM_MASKS} masks, file has {}",
            reader.header().mask_slots
        )));
    }
    Ok(reader)
}

fn check_homogeneous(scenes: &[&LabeledScene]) -> Result<(usize, usize)> {
    let first = scenes.first().ok_or_else(|| MonetError::Argument("empty scene batch".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(s) = scenes.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(MonetError::Shape(format!("mixed scene sizes {h}x{w} and {}x{}", s.height, s.width)));
    }
    Ok((h, w))
}

/// (B, 3, H, W) image batch.
pub fn image_batch<T: Scalar>(scenes: &[&LabeledScene]) -> Result<Tensor<T>> {
    check_homogeneous(scenes)?;
    let parts: Vec<Tensor<T>> = scenes.iter().map(|s| s.image_tensor()).collect();
    Tensor::stack0(&parts.iter().collect::<Vec<_>>())
}

/// (B, K, H, W) one-hot ground-truth masks.
pub fn mask_batch<T: Scalar>(scenes: &[&LabeledScene], slots: usize) -> Result<Tensor<T>> {
    let (h, w) = check_homogeneous(scenes)?;
    let plane = h * w;
    let mut data = vec![T::zero(); scenes.len() * slots * plane];
    for (b, s) in scenes.iter().enumerate() {
        for (p, &l) in s.labels.iter().enumerate() {
            let l = l as usize;
            if l >= slots {
                return Err(MonetError::Config(format!("scene label {l} does not fit {slots} mask slots")));
            }
            data[(b * slots + l) * plane + p] = T::one();
        }
    }
    Tensor::new(&[scenes.len(), slots, h, w], data)
}

/// (B, K, H, W) masks with everything in the first slot.
pub fn all_in_one_masks<T: Scalar>(batch: usize, slots: usize, height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    let mut t = Tensor::zeros(&[batch, slots, height, width]);
    for b in 0..batch {
        t.data_mut()[b * slots * plane..][..plane].fill(T::one());
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_partition_every_scene() {
        let cfg = SpriteConfig::new(32);
        for i in 0..20 {
            let s = generate_scene(3, i, &cfg).unwrap();
            let masks = s.gt_masks();
            assert_eq!(masks.len(), 5);
            for p in 0..32 * 32 {
                assert_eq!(masks.iter().filter(|m| m[p]).count(), 1);
            }
        }
    }

    #[test]
    fn objects_room_loader_checks_mask_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = vec![0u8; 16 * 16];
        for (p, l) in labels.iter_mut().enumerate() {
            *l = (p % 7) as u8;
        }
        let scene = LabeledScene::new(16, 16, vec![9; 16 * 16 * 3], labels, 7, [0; 3], Vec::new()).unwrap();
        let path = dir.path().join("room.bin");
        DatasetWriter::write_all(&path, DatasetHeader::new(1, 16, 16, 7, 0, "objects_room"), [&scene]).unwrap();
        assert_eq!(open_objects_room(&path).unwrap().read(0).unwrap(), scene);
        let other = dir.path().join("sprites.bin");
        let s = generate_scene(0, 0, &SpriteConfig::new(16)).unwrap();
        DatasetWriter::write_all(&other, DatasetHeader::new(1, 16, 16, 5, 4, "multi_dsprites"), [&s]).unwrap();
        assert!(open_objects_room(&other).is_err());
    }

    #[test]
    fn batches_have_expected_layout() {
        let cfg = SpriteConfig::new(16);
        let scenes = generate_multidsprites(1, 0, 3, &cfg).unwrap();
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let x = image_batch::<f64>(&refs).unwrap();
        assert_eq!(x.shape(), &[3, 3, 16, 16]);
        assert_eq!(x.data()[0], scenes[0].pixels[0] as f64 / 255.0);
        assert_eq!(x.data()[256], scenes[0].pixels[1] as f64 / 255.0);
        let m = mask_batch::<f64>(&refs, 5).unwrap();
        let sums: Vec<f64> = (0..256).map(|p| (0..5).map(|k| m.data()[k * 256 + p]).sum()).collect();
        assert!(sums.iter().all(|&v| v == 1.0));
        if scenes.iter().any(|s| s.labels.iter().any(|&l| l > 0)) {
            assert!(matches!(mask_batch::<f64>(&refs, 1), Err(MonetError::Config(_))));
        }
        let a = all_in_one_masks::<f64>(2, 3, 2, 2);
        assert_eq!(&a.data()[..4], &[1.0; 4]);
        assert_eq!(&a.data()[4..12], &[0.0; 8]);
    }
}
