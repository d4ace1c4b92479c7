//! Joint image/mask augmentation: horizontal flip, rotation about the image
//! center and center zoom, with parameters derived deterministically from
//! `(seed, epoch, sample_index)`.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bilinear_sample, HumanMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub flip: bool,
    /// Rotation magnitude in degrees.
    pub rotation_degrees: f64,
    /// Direction of the rotation; ignored when the magnitude is zero.
    pub rotation_clockwise: bool,
    pub zoom_factor: f64,
}

impl AugmentationParams {
    pub const IDENTITY: AugmentationParams = AugmentationParams {
        flip: false,
        rotation_degrees: 0.0,
        rotation_clockwise: false,
        zoom_factor: 1.0,
    };

    /// Signed angle in degrees, counter-clockwise positive.
    pub fn signed_rotation(&self) -> f64 {
        if self.rotation_clockwise {
            -self.rotation_degrees
        } else {
            self.rotation_degrees
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    pub max_rotation_degrees: f64,
    /// Draw a random rotation direction; otherwise always counter-clockwise.
    pub rotation_signed: bool,
    pub zoom_min: f64,
    pub zoom_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_probability: 0.5,
            max_rotation_degrees: 10.0,
            rotation_signed: true,
            zoom_min: 0.9,
            zoom_max: 1.1,
        }
    }
}

impl AugmentationConfig {
    pub fn draw(&self, global_seed: u64, epoch: u64, sample_index: u64) -> AugmentationParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[global_seed, epoch, sample_index]));
        let flip = rng.random_bool(self.flip_probability);
        let rotation_degrees = rng.random_range(0.0..=self.max_rotation_degrees);
        let rotation_clockwise = self.rotation_signed && rng.random_bool(0.5);
        let zoom_factor = rng.random_range(self.zoom_min..=self.zoom_max);
        AugmentationParams {
            flip,
            rotation_degrees,
            rotation_clockwise,
            zoom_factor,
        }
    }
}

/// Draws augmentation parameters with the default ranges.
pub fn draw_params(global_seed: u64, epoch: u64, sample_index: u64) -> AugmentationParams {
    AugmentationConfig::default().draw(global_seed, epoch, sample_index)
}

/// Folds a sequence of integers into one well-mixed seed (splitmix64).
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(0x5851_f42d_4c95_7f2d, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Applies flip, rotation and zoom, in that order, to an image and its mask.
///
/// The image is resampled bilinearly with the per-channel image mean as fill;
/// the mask uses nearest-neighbour sampling with fill 0.
pub fn apply(image: &Image, mask: &HumanMask, params: &AugmentationParams) -> (Image, HumanMask) {
    let (h, w, _) = image.dim();
    assert_eq!((h, w), (mask.height(), mask.width()), "image and mask must share dimensions");

    let mut img = image.clone();
    let mut grid = mask.grid().clone();
    if params.flip {
        img.invert_axis(Axis(1));
        grid.invert_axis(Axis(1));
        img = img.as_standard_layout().into_owned();
        grid = grid.as_standard_layout().into_owned();
    }

    let theta = params.signed_rotation().to_radians();
    let z = params.zoom_factor;
    if theta != 0.0 || z != 1.0 {
        let (sin, cos) = theta.sin_cos();
        // Inverse map: undo the zoom, then undo a counter-clockwise rotation
        // in image coordinates (y pointing down). One resampling pass.
        let map = |dx: f64, dy: f64| {
            let (dx, dy) = (dx / z, dy / z);
            (cos * dx - sin * dy, sin * dx + cos * dy)
        };
        (img, grid) = resample(&img, &grid, map);
    }
    (img, HumanMask::new(grid))
}

fn channel_means(image: &Image) -> [f64; 3] {
    let mut m = [0.0; 3];
    for (c, v) in m.iter_mut().enumerate() {
        *v = image.index_axis(Axis(2), c).mean().unwrap_or(0.0);
    }
    m
}

// `src_offset` maps an output offset from the center to a source offset.
fn resample(
    image: &Image,
    mask: &Array2<bool>,
    src_offset: impl Fn(f64, f64) -> (f64, f64),
) -> (Image, Array2<bool>) {
    let (h, w, _) = image.dim();
    let fill = channel_means(image);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((h, w, 3));
    let mut out_mask = Array2::from_elem((h, w), false);
    let mut px = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = src_offset(x as f64 - cx, y as f64 - cy);
            let (sx, sy) = (cx + ox, cy + oy);
            if !bilinear_sample(image, sx, sy, &mut px) {
                px = fill;
            }
            for c in 0..3 {
                out[[y, x, c]] = px[c];
            }
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_mask[[y, x]] = mask[[ny as usize, nx as usize]];
            }
        }
    }
    (out, out_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;
    use crate::mask::boxes_to_mask;
    use proptest::prelude::*;

    fn test_image(h: usize, w: usize) -> Image {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 11) % 17) as f64 / 16.0)
    }

    #[test]
    fn draw_is_deterministic() {
        assert_eq!(draw_params(3, 1, 9), draw_params(3, 1, 9));
        assert_ne!(draw_params(3, 1, 9), draw_params(3, 1, 10));
    }

    #[test]
    fn draw_statistics() {
        let n = 10_000;
        let draws: Vec<_> = (0..n).map(|i| draw_params(42, 0, i)).collect();
        let flips = draws.iter().filter(|p| p.flip).count() as f64 / n as f64;
        assert!((flips - 0.5).abs() <= 0.02, "flip frequency {flips}");
        assert!(draws.iter().all(|p| (0.0..=10.0).contains(&p.rotation_degrees)));
        assert!(draws.iter().all(|p| (0.9..=1.1).contains(&p.zoom_factor)));
        let cw = draws.iter().filter(|p| p.rotation_clockwise).count();
        assert!(cw > 4500 && cw < 5500);
    }

    #[test]
    fn identity_leaves_inputs_unchanged() {
        let img = test_image(12, 10);
        let mask = boxes_to_mask(&[BoundingBox::new(2.0, 3.0, 7.0, 9.0).unwrap()], 10, 12);
        let (i2, m2) = apply(&img, &mask, &AugmentationParams::IDENTITY);
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = test_image(9, 8);
        let mask = boxes_to_mask(&[BoundingBox::new(1.0, 1.0, 3.0, 8.0).unwrap()], 8, 9);
        let p = AugmentationParams {
            flip: true,
            ..AugmentationParams::IDENTITY
        };
        let (i1, m1) = apply(&img, &mask, &p);
        assert_ne!(m1, mask);
        let (i2, m2) = apply(&i1, &m1, &p);
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn flip_index_arithmetic_exhaustive() {
        let img = test_image(8, 8);
        let p = AugmentationParams {
            flip: true,
            ..AugmentationParams::IDENTITY
        };
        for i in 0..8 {
            for j in 0..8 {
                let mut g = Array2::from_elem((8, 8), false);
                g[[i, j]] = true;
                let (_, m) = apply(&img, &HumanMask::new(g), &p);
                assert_eq!(m.count(), 1);
                assert!(m.grid()[[i, 7 - j]]);
            }
        }
    }

    #[test]
    fn small_rotation_keeps_center_pixel() {
        let img = test_image(16, 16);
        let mut g = Array2::from_elem((16, 16), false);
        for y in 6..10 {
            for x in 6..10 {
                g[[y, x]] = true;
            }
        }
        let p = AugmentationParams {
            rotation_degrees: 10.0,
            ..AugmentationParams::IDENTITY
        };
        let (_, m) = apply(&img, &HumanMask::new(g), &p);
        assert!(m.grid()[[7, 7]] && m.grid()[[8, 8]]);
        assert!(!m.grid()[[0, 0]]);
    }

    #[test]
    fn zoom_out_pads_with_mean() {
        let img = test_image(20, 20);
        let mask = HumanMask::new(Array2::from_elem((20, 20), true));
        let p = AugmentationParams {
            zoom_factor: 0.9,
            ..AugmentationParams::IDENTITY
        };
        let (i2, m2) = apply(&img, &mask, &p);
        let means = channel_means(&img);
        for c in 0..3 {
            assert!((i2[[0, 0, c]] - means[c]).abs() < 1e-12);
        }
        assert!(!m2.grid()[[0, 0]]);
        assert!(m2.grid()[[10, 10]]);
    }

    proptest! {
        #[test]
        fn shapes_and_binary_mask_preserved(seed in 0u64..1000, idx in 0u64..1000) {
            let img = test_image(24, 16);
            let mask = boxes_to_mask(&[BoundingBox::new(3.0, 4.0, 12.0, 20.0).unwrap()], 16, 24);
            let p = draw_params(seed, 0, idx);
            let (i2, m2) = apply(&img, &mask, &p);
            prop_assert_eq!(i2.dim(), img.dim());
            prop_assert_eq!((m2.height(), m2.width()), (24, 16));
            prop_assert!(i2.iter().all(|v| v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(v)));
        }

        #[test]
        fn flipped_box_consistency(x0 in 0.0f64..20.0, y0 in 0.0f64..20.0, bw in 1.0f64..12.0, bh in 1.0f64..12.0) {
            let w = 32usize;
            let b = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).unwrap();
            let flipped = BoundingBox::new(w as f64 - b.x_max, b.y_min, w as f64 - b.x_min, b.y_max).unwrap();
            let mask = boxes_to_mask(&[b], w, w);
            let p = AugmentationParams { flip: true, ..AugmentationParams::IDENTITY };
            let (_, m2) = apply(&test_image(w, w), &mask, &p);
            prop_assert_eq!(m2, boxes_to_mask(&[flipped], w, w));
        }
    }
}
