//! Synthetic misleading-context benchmark.
//!
//! Each image holds one stick-figure "agent" whose pose encodes the class and
//! one solid "distractor" shape. In training data the distractor is the
//! shape tied to a *different* class (`(label + 1) % C`) with probability
//! `train_correlation`; at test time the correlation is set to chance, so a
//! model that learned the shortcut is misled.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::data::{save_image, ActionLabelSpace, BoundingBox, HumanMask, Image};
use crate::dataset::{write_atomic, Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::network::BACKBONE_STRIDE;

/// Pose table: (arm angle from the downward direction, leg spread), degrees.
/// Every pose is left/right symmetric so flipping never changes the class.
const POSES: [(f64, f64); 10] = [
    (160.0, 6.0),
    (20.0, 6.0),
    (90.0, 32.0),
    (20.0, 32.0),
    (90.0, 6.0),
    (160.0, 32.0),
    (55.0, 6.0),
    (125.0, 32.0),
    (125.0, 6.0),
    (55.0, 32.0),
];

const POSE_NAMES: [&str; 10] = [
    "cheering",
    "standing",
    "balancing",
    "striding",
    "gliding",
    "jumping",
    "reaching",
    "stretching",
    "waving",
    "bracing",
];

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "diamond", "ring", "hexagon", "bar", "cross", "star",
];

pub const MAX_CLASSES: usize = 10;

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.10],
    [0.97, 0.97, 0.97],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub canvas_size: usize,
    /// Probability that a training distractor is the shape tied to another
    /// class.
    pub train_correlation: f64,
    /// Same probability for validation and test; `None` means chance (1/C).
    pub test_correlation: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, train: usize, val: usize, test: usize, train_correlation: f64, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            train,
            val,
            test,
            canvas_size: 128,
            train_correlation,
            test_correlation: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.canvas_size < 64 || !self.canvas_size.is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Config(format!(
                "canvas_size must be a multiple of {BACKBONE_STRIDE} and at least 64, got {}",
                self.canvas_size
            )));
        }
        for (name, p) in [
            ("train_correlation", Some(self.train_correlation)),
            ("test_correlation", self.test_correlation),
        ] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
                }
            }
        }
        if self.train == 0 {
            return Err(Error::Config("train split must be nonempty".into()));
        }
        Ok(())
    }

    pub fn correlation(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train_correlation,
            Split::Val | Split::Test => self.test_correlation.unwrap_or(1.0 / self.num_classes as f64),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn label_space(&self) -> ActionLabelSpace {
        ActionLabelSpace::new(POSE_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect())
            .expect("pose names are unique")
    }
}

/// The class whose distractor shape misleads toward `label`'s neighbour.
pub fn partner_shape(label: usize, num_classes: usize) -> usize {
    (label + 1) % num_classes
}

#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub pixels: Image,
    pub label: usize,
    pub distractor: usize,
    /// Tight box over agent pixels.
    pub agent_box: BoundingBox,
    pub distractor_box: BoundingBox,
    /// Pixels painted by the agent.
    pub agent_pixels: HumanMask,
}

#[derive(Serialize, Deserialize)]
struct DistractorLine {
    image: String,
    distractor: String,
    shape_index: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

pub fn image_name(split: Split, index: usize) -> String {
    format!("images/{split}_{index:05}.png")
}

/// Renders one sample. Pixel values are quantized to 8 bits so the in-memory
/// image equals what a PNG round-trip yields.
pub fn render_sample(spec: &SyntheticSpec, split: Split, index: usize) -> RenderedSample {
    let split_id = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, split_id, index as u64]));
    let c = spec.num_classes;
    let s = spec.canvas_size;
    let sf = s as f64;
    let label = index % c;
    let distractor = if rng.random_bool(spec.correlation(split)) {
        partner_shape(label, c)
    } else {
        let other = rng.random_range(0..c - 1);
        if other >= partner_shape(label, c) {
            other + 1
        } else {
            other
        }
    };

    let mut pixels = background(&mut rng, s);

    // Agent geometry.
    let height = rng.random_range(0.28..=0.42) * sf;
    let thickness = (0.06 * height).max(2.0);
    let (arm_deg, leg_deg) = POSES[label];
    let arm = 0.30 * height;
    let leg = 0.40 * height;
    let head_r = 0.11 * height;
    // Figure in local coordinates (head top at the origin), then placed so
    // its extent stays inside the canvas.
    let (a, l) = (arm_deg.to_radians(), leg_deg.to_radians());
    let neck = (0.0, 2.0 * head_r);
    let shoulder = (0.0, 2.0 * head_r + 0.05 * height);
    let hip = (0.0, 0.58 * height);
    let mut local = vec![(neck, hip)];
    for side in [-1.0, 1.0] {
        local.push((shoulder, (side * arm * a.sin(), shoulder.1 + arm * a.cos())));
        local.push((hip, (side * leg * l.sin(), hip.1 + leg * l.cos())));
    }
    let pts = local.iter().flat_map(|&(p, q)| [p, q]);
    let half = thickness / 2.0 + 1.0;
    let x_lo = pts.clone().map(|p| p.0).fold(-head_r, f64::min) - half;
    let x_hi = pts.clone().map(|p| p.0).fold(head_r, f64::max) + half;
    let y_lo = pts.clone().map(|p| p.1).fold(0.0, f64::min) - half;
    let y_hi = pts.map(|p| p.1).fold(0.0, f64::max) + half;
    let ox = rng.random_range(-x_lo..=(sf - x_hi));
    let oy = rng.random_range(-y_lo..=(sf - y_hi));
    let agent_color = PALETTE[rng.random_range(0..PALETTE.len())];
    let segments: Vec<_> = local
        .iter()
        .map(|&((x0, y0), (x1, y1))| ((x0 + ox, y0 + oy), (x1 + ox, y1 + oy)))
        .collect();
    let head = (ox, oy + head_r);
    let agent = Array2::from_shape_fn((s, s), |(i, j)| {
        let p = (j as f64 + 0.5, i as f64 + 0.5);
        dist(p, head) <= head_r || segments.iter().any(|&(a, b)| segment_dist(p, a, b) <= thickness / 2.0)
    });
    let agent_box = tight_box(&agent).expect("agent is drawn inside the canvas");

    // Distractor: larger than the agent half of the time, never overlapping it.
    let larger = rng.random_bool(0.5);
    let mut size = if larger {
        (height * rng.random_range(1.1..=1.5)).min(0.5 * sf)
    } else {
        height * rng.random_range(0.45..=0.85)
    };
    let mut placed = None;
    for attempt in 0..400 {
        if attempt > 0 && attempt % 100 == 0 {
            size *= 0.85;
        }
        let x0 = rng.random_range(0.0..=(sf - size));
        let y0 = rng.random_range(0.0..=(sf - size));
        let b = BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + size,
            y_max: y0 + size,
        };
        let gap = 2.0;
        let apart = b.x_min >= agent_box.x_max + gap
            || b.x_max + gap <= agent_box.x_min
            || b.y_min >= agent_box.y_max + gap
            || b.y_max + gap <= agent_box.y_min;
        if apart {
            placed = Some(b);
            break;
        }
    }
    let distractor_color = PALETTE[rng.random_range(0..PALETTE.len())];
    let dbox = placed.unwrap_or(BoundingBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 0.0,
        y_max: 0.0,
    });
    if placed.is_some() {
        let (cx, cy) = ((dbox.x_min + dbox.x_max) / 2.0, (dbox.y_min + dbox.y_max) / 2.0);
        let r = size / 2.0;
        for i in (dbox.y_min.floor() as usize)..(dbox.y_max.ceil() as usize).min(s) {
            for j in (dbox.x_min.floor() as usize)..(dbox.x_max.ceil() as usize).min(s) {
                let u = (j as f64 + 0.5 - cx) / r;
                let v = (i as f64 + 0.5 - cy) / r;
                if in_shape(distractor, u, v) {
                    for ch in 0..3 {
                        pixels[[i, j, ch]] = distractor_color[ch];
                    }
                }
            }
        }
    }
    for ((i, j), &on) in agent.indexed_iter() {
        if on {
            for ch in 0..3 {
                pixels[[i, j, ch]] = agent_color[ch];
            }
        }
    }
    pixels.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);

    RenderedSample {
        pixels,
        label,
        distractor,
        agent_box,
        distractor_box: dbox,
        agent_pixels: HumanMask::new(agent),
    }
}

/// Renders every split in memory, returning a manifest rooted at `base_dir`
/// and the images in record order.
pub fn render_all(spec: &SyntheticSpec, base_dir: &Path) -> Result<(Manifest, Vec<RenderedSample>)> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for index in 0..spec.count(split) {
            let r = render_sample(spec, split, index);
            records.push(ManifestRecord {
                image: image_name(split, index),
                label: r.label,
                split,
                boxes: vec![r.agent_box],
                keypoints: None,
            });
            samples.push(r);
        }
    }
    let manifest = Manifest {
        label_space: spec.label_space(),
        records,
        base_dir: base_dir.to_path_buf(),
    };
    Ok((manifest, samples))
}

/// Writes images, `manifest.jsonl` and a `distractors.jsonl` sidecar.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let (manifest, samples) = render_all(spec, out_dir)?;
    let mut sidecar = String::new();
    for (record, sample) in manifest.records.iter().zip(&samples) {
        save_image(&out_dir.join(&record.image), &sample.pixels)?;
        sidecar.push_str(
            &serde_json::to_string(&DistractorLine {
                image: record.image.clone(),
                distractor: SHAPE_NAMES[sample.distractor].to_string(),
                shape_index: sample.distractor,
                bbox: sample.distractor_box.to_array(),
            })
            .expect("serializable"),
        );
        sidecar.push('\n');
    }
    write_atomic(&out_dir.join("distractors.jsonl"), sidecar.as_bytes())?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn background(rng: &mut ChaCha8Rng, s: usize) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..=0.55));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(2.0..=7.0) * 2.0 * PI / s as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            (angle.cos() * freq, angle.sin() * freq, phase, rng.random_range(0.02..=0.06))
        })
        .collect();
    let mut img = Array3::zeros((s, s, 3));
    for i in 0..s {
        for j in 0..s {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * j as f64 + fy * i as f64 + ph).sin())
                .sum();
            for (c, &b) in base.iter().enumerate() {
                img[[i, j, c]] = b + t + rng.random_range(-0.04..=0.04);
            }
        }
    }
    img
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, (a.0 + t * dx, a.1 + t * dy))
}

/// `[min, max + 1)` over set pixels, so every set pixel's center is inside.
fn tight_box(grid: &Array2<bool>) -> Option<BoundingBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((i, j), &on) in grid.indexed_iter() {
        if on {
            b = Some(match b {
                None => (j, i, j, i),
                Some((x0, y0, x1, y1)) => (x0.min(j), y0.min(i), x1.max(j), y1.max(i)),
            });
        }
    }
    b.map(|(x0, y0, x1, y1)| BoundingBox {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: (x1 + 1) as f64,
        y_max: (y1 + 1) as f64,
    })
}

/// Membership test in shape-local coordinates `u, v` in `[-1, 1]`.
fn in_shape(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => (-0.9..=0.85).contains(&v) && u.abs() <= (v + 0.9) / 1.75,
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => u.abs() + v.abs() <= 1.0,
        5 => (0.55..=1.0).contains(&r),
        6 => v.abs() <= 0.866 && v.abs() * 0.577 + u.abs() <= 1.0,
        7 => u.abs() <= 0.95 && v.abs() <= 0.35,
        8 => {
            let (a, b) = ((u + v) / 2f64.sqrt(), (u - v) / 2f64.sqrt());
            (a.abs() <= 0.25 && b.abs() <= 0.95) || (b.abs() <= 0.25 && a.abs() <= 0.95)
        }
        _ => {
            let theta = v.atan2(u);
            r <= 0.55 + 0.4 * (5.0 * theta + PI / 2.0).cos()
        }
    }
}
