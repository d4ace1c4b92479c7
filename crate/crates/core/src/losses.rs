//! Cross-entropy classification loss, L2 heatmap loss, their weighted sum,
//! and batch gradients through the network.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{HeatmapTarget, Image};
use crate::error::{Error, Result};
use crate::network::{backward, forward_traced, ForwardOutputs, ModelParams};

/// Reduction applied to the per-cell squared errors of the mask loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_mask: f64,
    pub total: f64,
    pub lambda_mask: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_mask: f64, lambda_mask: f64) -> Self {
        LossBreakdown {
            l_cls,
            l_mask,
            total: l_cls + lambda_mask * l_mask,
            lambda_mask,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_cls.is_finite() && self.l_mask.is_finite() && self.total.is_finite()
    }
}

fn check_logits(logits: &[f64], gt_class: usize) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    if gt_class >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: gt_class,
            len: logits.len(),
        });
    }
    Ok(())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&s| (s - lse).exp()).collect()
}

/// `-log softmax(logits)[gt_class]`.
pub fn classification_loss(logits: &[f64], gt_class: usize) -> Result<f64> {
    check_logits(logits, gt_class)?;
    Ok((log_sum_exp(logits) - logits[gt_class]).max(0.0))
}

/// Gradient of [`classification_loss`] with respect to the logits.
pub fn classification_loss_grad(logits: &[f64], gt_class: usize) -> Result<Array1<f64>> {
    check_logits(logits, gt_class)?;
    let mut g = Array1::from(softmax(logits));
    g[gt_class] -= 1.0;
    Ok(g)
}

fn check_mask_shapes(m_star: &Array2<f64>, m_gt: &HeatmapTarget) -> Result<()> {
    if m_star.dim() != m_gt.dim() {
        return Err(Error::mismatch(m_gt.dim(), m_star.dim()));
    }
    Ok(())
}

/// Squared L2 distance between the predicted and target heatmaps.
pub fn mask_loss(m_star: &Array2<f64>, m_gt: &HeatmapTarget, reduction: MaskReduction) -> Result<f64> {
    check_mask_shapes(m_star, m_gt)?;
    let sum: f64 = m_star
        .iter()
        .zip(m_gt.grid())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(match reduction {
        MaskReduction::Sum => sum,
        MaskReduction::Mean => sum / m_star.len() as f64,
    })
}

/// Gradient of [`mask_loss`] with respect to `m_star`.
pub fn mask_loss_grad(
    m_star: &Array2<f64>,
    m_gt: &HeatmapTarget,
    reduction: MaskReduction,
) -> Result<Array2<f64>> {
    check_mask_shapes(m_star, m_gt)?;
    let scale = match reduction {
        MaskReduction::Sum => 2.0,
        MaskReduction::Mean => 2.0 / m_star.len() as f64,
    };
    Ok((m_star - m_gt.grid()) * scale)
}

/// `L = L_cls + lambda_mask * L_mask` for one forward pass.
pub fn combined_loss(
    outputs: &ForwardOutputs,
    gt_class: usize,
    m_gt: &HeatmapTarget,
    lambda_mask: f64,
    reduction: MaskReduction,
) -> Result<LossBreakdown> {
    let l_cls = classification_loss(outputs.logits.as_slice().expect("contiguous"), gt_class)?;
    let l_mask = mask_loss(&outputs.heatmap, m_gt, reduction)?;
    Ok(LossBreakdown::new(l_cls, l_mask, lambda_mask))
}

/// One supervised training example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub target: &'a HeatmapTarget,
}

fn mean_breakdown(parts: &[LossBreakdown], lambda_mask: f64) -> LossBreakdown {
    let n = parts.len() as f64;
    let l_cls = parts.iter().map(|p| p.l_cls).sum::<f64>() / n;
    let l_mask = parts.iter().map(|p| p.l_mask).sum::<f64>() / n;
    LossBreakdown::new(l_cls, l_mask, lambda_mask)
}

/// Mean of the per-sample losses over a batch (forward only).
pub fn batch_loss(
    params: &ModelParams,
    batch: &[Example<'_>],
    lambda_mask: f64,
    reduction: MaskReduction,
) -> Result<LossBreakdown> {
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let (out, _) = forward_traced(params, ex.image)?;
        parts.push(combined_loss(&out, ex.label, ex.target, lambda_mask, reduction)?);
    }
    Ok(mean_breakdown(&parts, lambda_mask))
}

/// Batch-mean loss and its gradient with respect to every parameter.
pub fn batch_loss_and_gradients(
    params: &ModelParams,
    batch: &[Example<'_>],
    lambda_mask: f64,
    reduction: MaskReduction,
) -> Result<(LossBreakdown, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("batch".into()));
    }
    let mut grads = params.zeros_like();
    let inv_n = 1.0 / batch.len() as f64;
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let (out, trace) = forward_traced(params, ex.image)?;
        let logits = out.logits.as_slice().expect("contiguous");
        parts.push(combined_loss(&out, ex.label, ex.target, lambda_mask, reduction)?);
        let g_logits = classification_loss_grad(logits, ex.label)? * inv_n;
        let g_heat = if lambda_mask == 0.0 {
            Array2::zeros(out.heatmap.dim())
        } else {
            mask_loss_grad(&out.heatmap, ex.target, reduction)? * (lambda_mask * inv_n)
        };
        backward(params, &out, &trace, &g_logits, &g_heat, &mut grads);
    }
    Ok((mean_breakdown(&parts, lambda_mask), grads))
}
