//! Domain types shared across the crate: boxes, keypoints, masks, heatmap
//! targets and RGB images stored as `H x W x 3` arrays of reals in `[0, 1]`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image, `H x W x 3`, channel values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Number of joints in the MPII body model.
pub const NUM_JOINTS: usize = 16;

/// MPII joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "upper_neck",
    "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Multiplies every coordinate; used when an image is resized.
    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersects `b` with `[0, width] x [0, height]`.
pub fn clamp_box(b: &BoundingBox, width: f64, height: f64) -> Result<BoundingBox> {
    assert!(width > 0.0 && height > 0.0, "image extent must be positive");
    let out = BoundingBox {
        x_min: b.x_min.clamp(0.0, width),
        y_min: b.y_min.clamp(0.0, height),
        x_max: b.x_max.clamp(0.0, width),
        y_max: b.y_max.clamp(0.0, height),
    };
    if out.x_min < out.x_max && out.y_min < out.y_max {
        Ok(out)
    } else {
        Err(Error::EmptyBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            width,
            height,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// The 16 MPII body joints in [`JOINT_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints {
    joints: Vec<Joint>,
}

impl Keypoints {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::mismatch(NUM_JOINTS, joints.len()));
        }
        Ok(Keypoints { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn visible(&self) -> impl Iterator<Item = &Joint> {
        self.joints.iter().filter(|j| j.visible)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Keypoints {
        Keypoints {
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    x: j.x * sx,
                    y: j.y * sy,
                    visible: j.visible,
                })
                .collect(),
        }
    }
}

/// Binary person mask at image resolution (`true` = inside a person box).
#[derive(Debug, Clone, PartialEq)]
pub struct HumanMask {
    grid: Array2<bool>,
}

impl HumanMask {
    pub fn new(grid: Array2<bool>) -> Self {
        HumanMask { grid }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        HumanMask {
            grid: Array2::from_elem((height, width), false),
        }
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.grid.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Regression target at feature resolution; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    grid: Array2<f64>,
}

impl HeatmapTarget {
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("heatmap target value {v} outside [0, 1]")));
        }
        Ok(HeatmapTarget { grid })
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

/// Ordered class names; `c^gt` and `c^*` are indices into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ActionLabelSpace {
    class_names: Vec<String>,
}

impl ActionLabelSpace {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Config(format!(
                "label space needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {name:?}")));
            }
        }
        Ok(ActionLabelSpace { class_names })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.class_names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.class_names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ActionLabelSpace {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        ActionLabelSpace::new(v)
    }
}

impl From<ActionLabelSpace> for Vec<String> {
    fn from(l: ActionLabelSpace) -> Self {
        l.class_names
    }
}

/// A decoded dataset record.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub image_path: PathBuf,
    pub pixels: Image,
    pub label: usize,
    pub boxes: Vec<BoundingBox>,
    pub keypoints: Option<Keypoints>,
}

impl AnnotatedSample {
    pub fn has_person_evidence(&self) -> bool {
        !self.boxes.is_empty() || self.keypoints.is_some()
    }
}

/// Reads an 8-bit image file into an `H x W x 3` array in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb8_to_image(&img))
}

pub fn rgb8_to_image(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn image_to_rgb8(pixels: &Image) -> image::RgbImage {
    let (h, w, _) = pixels.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes an image as 8-bit RGB; the format follows the file extension.
pub fn save_image(path: &Path, pixels: &Image) -> Result<()> {
    image_to_rgb8(pixels)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Samples `image` at real pixel coordinates with bilinear interpolation,
/// pixel centers at integer positions. Returns `false` outside the frame.
pub fn bilinear_sample(image: &Image, x: f64, y: f64, out: &mut [f64; 3]) -> bool {
    let (h, w, _) = image.dim();
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return false;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    for (c, o) in out.iter_mut().enumerate() {
        let top = image[[y0, x0, c]] * (1.0 - fx) + image[[y0, x1, c]] * fx;
        let bottom = image[[y1, x0, c]] * (1.0 - fx) + image[[y1, x1, c]] * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    true
}

/// Bilinear resize with aligned pixel centers (stretches non-square inputs).
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let (h, w, _) = image.dim();
    if (h, w) == (height, width) {
        return image.clone();
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out = Array3::zeros((height, width, 3));
    let mut px = [0.0; 3];
    for y in 0..height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            bilinear_sample(image, src_x, src_y, &mut px);
            for c in 0..3 {
                out[[y, x, c]] = px[c];
            }
        }
    }
    out
}
