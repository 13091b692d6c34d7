//! Procedural Multi-dSprites: up to four coloured sprites composited with
//! occlusion onto a uniformly coloured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledScene;
use crate::error::{MonetError, Result};

pub const MIN_SIZE: usize = 16;
pub const SCALES: usize = 6;
pub const ORIENTATIONS: usize = 40;
pub const POSITIONS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpriteShape {
    Square,
    Ellipse,
    Heart,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 3] = [SpriteShape::Square, SpriteShape::Ellipse, SpriteShape::Heart];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Membership of a point in canonical coordinates, where the sprite fills `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            SpriteShape::Square => u.abs().max(v.abs()) <= 1.0,
            SpriteShape::Ellipse => u * u + (v / 0.5) * (v / 0.5) <= 1.0,
            SpriteShape::Heart => {
                // the implicit heart spans roughly x ∈ [-1.14, 1.14], y ∈ [-1, 1.24]
                let x = 1.15 * u;
                let y = -1.15 * v + 0.12;
                let r = x * x + y * y - 1.0;
                r * r * r - x * x * y * y * y <= 0.0
            }
        }
    }
}

/// Placement of one sprite. Position is in pixels, scale is the side length
/// as a fraction of the image size, orientation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    pub color: [u8; 3],
}

/// Binary coverage of a sprite, sampled at pixel centres, row-major `height × width`.
pub fn rasterize_sprite(
    shape: SpriteShape,
    position: (f64, f64),
    scale: f64,
    orientation: f64,
    size: (usize, usize),
) -> Result<Vec<bool>> {
    if !(scale > 0.0) {
        return Err(MonetError::Argument(format!("sprite scale must be positive, got {scale}")));
    }
    let (height, width) = size;
    let half = 0.5 * scale * height.min(width) as f64;
    let (sin, cos) = orientation.sin_cos();
    let mut mask = Vec::with_capacity(height * width);
    for py in 0..height {
        for px in 0..width {
            let dx = px as f64 + 0.5 - position.0;
            let dy = py as f64 + 0.5 - position.1;
            let u = (cos * dx + sin * dy) / half;
            let v = (-sin * dx + cos * dy) / half;
            mask.push(shape.contains(u, v));
        }
    }
    Ok(mask)
}

/// Generator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub height: usize,
    pub width: usize,
    pub max_sprites: usize,
    /// Redraw sprite colours whose largest channel difference to the background is below this.
    pub min_color_delta: Option<u8>,
}

impl SpriteConfig {
    pub fn new(size: usize) -> Self {
        Self { height: size, width: size, max_sprites: 4, min_color_delta: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIZE || self.width < MIN_SIZE {
            return Err(MonetError::Argument(format!(
                "image size {}x{} is below the {MIN_SIZE}x{MIN_SIZE} sprite minimum",
                self.height, self.width
            )));
        }
        if self.max_sprites == 0 || self.max_sprites > 254 {
            return Err(MonetError::Argument(format!("max_sprites must be in 1..=254, got {}", self.max_sprites)));
        }
        Ok(())
    }

    pub fn mask_slots(&self) -> usize {
        self.max_sprites + 1
    }
}

/// Scale grid: six values linear in [0.5, 1] times 0.45.
pub fn scale_value(idx: usize) -> f64 {
    0.45 * (0.5 + 0.5 * idx as f64 / (SCALES - 1) as f64)
}

pub fn orientation_value(idx: usize) -> f64 {
    std::f64::consts::TAU * idx as f64 / ORIENTATIONS as f64
}

pub fn position_value(idx: usize, size: usize) -> f64 {
    (idx as f64 + 0.5) / POSITIONS as f64 * size as f64
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_delta(a: [u8; 3], b: [u8; 3]) -> u8 {
    (0..3).map(|c| a[c].abs_diff(b[c])).max().unwrap_or(0)
}

/// Scene `index` of the corpus identified by `seed`; independent of any other index.
pub fn generate_scene(seed: u64, index: u64, config: &SpriteConfig) -> Result<LabeledScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = scene_rng(seed, index);
    let count = rng.random_range(1..=config.max_sprites);
    let background = random_color(&mut rng);
    let mut labels = vec![0u8; h * w];
    let mut sprites = Vec::with_capacity(count);
    for j in 0..count {
        let shape = SpriteShape::ALL[rng.random_range(0..3)];
        let scale = scale_value(rng.random_range(0..SCALES));
        let orientation = orientation_value(rng.random_range(0..ORIENTATIONS));
        let x = position_value(rng.random_range(0..POSITIONS), w);
        let y = position_value(rng.random_range(0..POSITIONS), h);
        let mut color = random_color(&mut rng);
        if let Some(min) = config.min_color_delta {
            while color_delta(color, background) < min {
                color = random_color(&mut rng);
            }
        }
        let mask = rasterize_sprite(shape, (x, y), scale, orientation, (h, w))?;
        for (l, covered) in labels.iter_mut().zip(mask) {
            if covered {
                *l = (j + 1) as u8;
            }
        }
        sprites.push(Sprite { shape, x, y, scale, orientation, color });
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        let c = if l == 0 { background } else { sprites[l as usize - 1].color };
        pixels.extend_from_slice(&c);
    }
    LabeledScene::new(h, w, pixels, labels, config.mask_slots(), background, sprites)
}

/// Scenes `start..start + count`, generated in parallel; identical to sequential generation.
pub fn generate_multidsprites(seed: u64, start: u64, count: usize, config: &SpriteConfig) -> Result<Vec<LabeledScene>> {
    use rayon::prelude::*;
    config.validate()?;
    (0..count as u64).into_par_iter().map(|i| generate_scene(seed, start + i, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_area_matches_side_length() {
        for &s in &[0.225, 0.3, 0.45] {
            let mask = rasterize_sprite(SpriteShape::Square, (32.0, 32.0), s, 0.0, (64, 64)).unwrap();
            let area = mask.iter().filter(|&&m| m).count() as f64;
            let side = s * 64.0;
            assert!((area - side * side).abs() <= 2.0 * 4.0 * side, "scale {s}: area {area}");
        }
    }

    #[test]
    fn ellipse_is_point_symmetric() {
        let a = rasterize_sprite(SpriteShape::Ellipse, (32.0, 32.0), 0.4, 0.0, (64, 64)).unwrap();
        let b = rasterize_sprite(SpriteShape::Ellipse, (32.0, 32.0), 0.4, std::f64::consts::PI, (64, 64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heart_matches_dense_oracle() {
        let mask = rasterize_sprite(SpriteShape::Heart, (16.0, 16.0), 0.6, 0.0, (32, 32)).unwrap();
        let half = 0.5 * 0.6 * 32.0;
        for py in 0..32 {
            for px in 0..32 {
                let x = 1.15 * (px as f64 + 0.5 - 16.0) / half;
                let y = -1.15 * (py as f64 + 0.5 - 16.0) / half + 0.12;
                let inside = (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0;
                assert_eq!(mask[py * 32 + px], inside, "({px}, {py})");
            }
        }
        assert!(mask.iter().any(|&m| m));
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        assert!(rasterize_sprite(SpriteShape::Square, (8.0, 8.0), 0.0, 0.0, (16, 16)).is_err());
    }

    #[test]
    fn scene_is_a_pure_function_of_seed_and_index() {
        let cfg = SpriteConfig::new(32);
        let a = generate_scene(7, 0, &cfg).unwrap();
        let b = generate_scene(7, 0, &cfg).unwrap();
        assert_eq!(a, b);
        let batch = generate_multidsprites(7, 0, 5, &cfg).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[3], generate_scene(7, 3, &cfg).unwrap());
        assert_ne!(generate_scene(7, 1, &cfg).unwrap(), a);
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(generate_scene(0, 0, &SpriteConfig::new(8)).is_err());
    }

    #[test]
    fn occlusion_follows_compositing_order() {
        let cfg = SpriteConfig::new(32);
        for i in 0..50 {
            let s = generate_scene(11, i, &cfg).unwrap();
            for p in 0..32 * 32 {
                let (py, px) = (p / 32, p % 32);
                let top = s
                    .sprites
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, sp)| {
                        let m = rasterize_sprite(sp.shape, (sp.x, sp.y), sp.scale, sp.orientation, (32, 32)).unwrap();
                        m[py * 32 + px]
                    })
                    .map(|(j, _)| j);
                let expected = top.map_or(s.background, |j| s.sprites[j].color);
                assert_eq!(&s.pixels[p * 3..p * 3 + 3], &expected);
            }
        }
    }
}
