//! Ground-truth person masks from boxes or keypoints, and their reduction to
//! the heatmap head's resolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{clamp_box, BoundingBox, HeatmapTarget, HumanMask, Keypoints};
use crate::error::{Error, Result};

/// Width and height of a keypoint box are each multiplied by this factor
/// about the box center.
pub const KEYPOINT_BOX_EXPANSION: f64 = 1.5;

/// Minimum side of a keypoint box before expansion.
pub const DEFAULT_MIN_EXTENT: f64 = 32.0;

/// How a binary mask is reduced to heatmap resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTargetMode {
    /// Fractional coverage of each cell.
    #[default]
    Soft,
    /// Coverage thresholded at 0.5.
    Hard,
}

/// Tight box over the visible joints, grown to `min_extent` per axis, then
/// expanded by [`KEYPOINT_BOX_EXPANSION`] and clamped to the image.
pub fn keypoints_to_box(
    kps: &Keypoints,
    min_extent: f64,
    width: f64,
    height: f64,
) -> Result<BoundingBox> {
    let mut visible = kps.visible().peekable();
    if visible.peek().is_none() {
        return Err(Error::NoVisibleJoints);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in visible {
        x0 = x0.min(j.x);
        y0 = y0.min(j.y);
        x1 = x1.max(j.x);
        y1 = y1.max(j.y);
    }
    let (x0, x1) = expand_axis(x0, x1, min_extent);
    let (y0, y1) = expand_axis(y0, y1, min_extent);
    let expanded = BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    };
    clamp_box(&expanded, width, height)
}

fn expand_axis(lo: f64, hi: f64, min_extent: f64) -> (f64, f64) {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo).max(min_extent) * KEYPOINT_BOX_EXPANSION;
    (center - half, center + half)
}

/// Rasterizes the union of `boxes`: a pixel is set iff its center lies in
/// some box.
pub fn boxes_to_mask(boxes: &[BoundingBox], width: usize, height: usize) -> HumanMask {
    let mut grid = Array2::from_elem((height, width), false);
    for b in boxes {
        let Some((c0, c1)) = center_range(b.x_min, b.x_max, width) else {
            continue;
        };
        let Some((r0, r1)) = center_range(b.y_min, b.y_max, height) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                grid[[r, c]] = true;
            }
        }
    }
    HumanMask::new(grid)
}

// Indices k in [0, n) with k + 0.5 in [lo, hi].
fn center_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Block mean of `mask` onto an `h x w` grid.
pub fn downsample_mask(mask: &HumanMask, h: usize, w: usize) -> Result<HeatmapTarget> {
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::mismatch(
            format!("mask size divisible by {h}x{w}"),
            format!("{mh}x{mw}"),
        ));
    }
    let (bh, bw) = (mh / h, mw / w);
    let grid = mask.grid();
    let cells = Array2::from_shape_fn((h, w), |(i, j)| {
        let block = grid.slice(ndarray::s![i * bh..(i + 1) * bh, j * bw..(j + 1) * bw]);
        block.iter().filter(|&&v| v).count() as f64 / (bh * bw) as f64
    });
    HeatmapTarget::new(cells)
}

/// Downsamples with the chosen reduction mode.
pub fn mask_to_target(
    mask: &HumanMask,
    h: usize,
    w: usize,
    mode: MaskTargetMode,
) -> Result<HeatmapTarget> {
    let soft = downsample_mask(mask, h, w)?;
    match mode {
        MaskTargetMode::Soft => Ok(soft),
        MaskTargetMode::Hard => HeatmapTarget::new(soft.grid().mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })),
    }
}

/// Builds the image-resolution mask for a sample from its boxes and, when
/// present, its keypoint box.
pub fn sample_mask(
    boxes: &[BoundingBox],
    keypoints: Option<&Keypoints>,
    min_extent: f64,
    width: usize,
    height: usize,
) -> Result<HumanMask> {
    let mut all = Vec::with_capacity(boxes.len() + 1);
    for b in boxes {
        if let Ok(c) = clamp_box(b, width as f64, height as f64) {
            all.push(c);
        }
    }
    if let Some(kps) = keypoints {
        match keypoints_to_box(kps, min_extent, width as f64, height as f64) {
            Ok(b) => all.push(b),
            Err(Error::NoVisibleJoints) | Err(Error::EmptyBox { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(boxes_to_mask(&all, width, height))
}
