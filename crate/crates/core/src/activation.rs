//! Class activation analysis: the sum of normalized activation maps (SAM),
//! the class activation map at the predicted class (PAM), the share of
//! positive activation that falls inside the person region, and overlays.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{HeatmapTarget, Image};
use crate::error::{Error, Result};
use crate::network::{cam_weights, predict, ForwardOutputs, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MapKind {
    Sam,
    Pam { class_index: usize },
    /// The localization head's output.
    Heatmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub grid: Array2<f64>,
    pub kind: MapKind,
}

impl ActivationMap {
    pub fn class_index(&self) -> Option<usize> {
        match self.kind {
            MapKind::Pam { class_index } => Some(class_index),
            _ => None,
        }
    }

    /// Whitespace-separated rows, one line per map row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.grid.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// Min-max normalizes a channel to `[0, 1]`; constant channels become zero.
pub fn normalize_channel(channel: ArrayView2<f64>) -> Array2<f64> {
    let (min, max) = channel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    // Also catches NaN from non-finite activations.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(range > 0.0) {
        return Array2::zeros(channel.dim());
    }
    channel.mapv(|v| (v - min) / range)
}

/// Sum over channels of the per-channel normalized `F_cls`.
pub fn sam(f_cls: &Array3<f64>) -> ActivationMap {
    let (_, h, w) = f_cls.dim();
    let mut grid = Array2::zeros((h, w));
    for channel in f_cls.axis_iter(Axis(0)) {
        grid += &normalize_channel(channel);
    }
    ActivationMap {
        grid,
        kind: MapKind::Sam,
    }
}

/// Weighted channel sum `sum_k w_k F_cls^k` (left unnormalized).
pub fn pam(f_cls: &Array3<f64>, weights: &Array1<f64>, class_index: usize) -> Result<ActivationMap> {
    let (k, h, w) = f_cls.dim();
    if weights.len() != k {
        return Err(Error::mismatch(k, weights.len()));
    }
    let flat = f_cls.view().into_shape_with_order((k, h * w)).expect("contiguous");
    let grid = weights
        .dot(&flat)
        .into_shape_with_order((h, w))
        .expect("h*w elements");
    Ok(ActivationMap {
        grid,
        kind: MapKind::Pam { class_index },
    })
}

/// PAM at the model's own prediction.
pub fn predicted_pam(params: &ModelParams, outputs: &ForwardOutputs) -> Result<ActivationMap> {
    let c = predict(outputs)?;
    pam(&outputs.f_cls, &cam_weights(params, c)?, c)
}

/// Fraction of rectified activation mass that lies inside the target.
pub fn attention_in_mask(map: &ActivationMap, target: &HeatmapTarget) -> Result<f64> {
    if map.grid.dim() != target.dim() {
        return Err(Error::mismatch(target.dim(), map.grid.dim()));
    }
    let mut inside = 0.0;
    let mut total = 0.0;
    for (&a, &t) in map.grid.iter().zip(target.grid()) {
        let a = a.max(0.0);
        inside += a * t;
        total += a;
    }
    if total > 0.0 {
        Ok((inside / total).clamp(0.0, 1.0))
    } else {
        Ok(0.0)
    }
}

/// Bilinear upsampling with aligned cell centers.
pub fn upsample_bilinear(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[f64; 3]; 9] = [
    [0.267004, 0.004874, 0.329415],
    [0.278826, 0.175490, 0.483397],
    [0.229739, 0.322361, 0.545706],
    [0.172719, 0.448791, 0.557885],
    [0.127568, 0.566949, 0.550556],
    [0.157851, 0.683765, 0.501686],
    [0.369214, 0.788888, 0.382914],
    [0.678489, 0.863742, 0.189503],
    [0.993248, 0.906157, 0.143936],
];

/// Perceptual colormap for a value in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f;
    }
    out
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Normalizes `map`, upsamples it to the image size, colors it and blends it
/// over the image.
pub fn render_overlay(image: &Image, map: &ActivationMap) -> Image {
    let (h, w, _) = image.dim();
    let normalized = normalize_channel(map.grid.view());
    let up = upsample_bilinear(&normalized, h, w);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let color = colormap(up[[y, x]]);
            for c in 0..3 {
                let v = (1.0 - OVERLAY_ALPHA) * image[[y, x, c]].clamp(0.0, 1.0) + OVERLAY_ALPHA * color[c];
                out[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}
