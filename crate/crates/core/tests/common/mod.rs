//! Shared oracles for integration tests.

#![allow(dead_code)]

use maskguide::data::{HeatmapTarget, Image};
use maskguide::losses::{batch_loss_and_gradients, combined_loss, Example, MaskReduction};
use maskguide::network::{build_model, forward_traced, BackboneSpec, LocOutput, ModelParams, ModelSpec};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small network for exhaustive finite-difference checks: C = 3, D = 8.
pub fn toy_spec(loc_output: LocOutput) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec::new(vec![4, 4, 6, 8, 8]).unwrap(),
        num_classes: 3,
        cls_channels: 6,
        loc_channels: [5, 4, 3],
        loc_output,
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Array3::from_shape_fn((size, size, 3), |_| rng.random::<f64>())
}

pub fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HeatmapTarget {
    HeatmapTarget::new(Array2::from_shape_fn((h, w), |_| rng.random::<f64>())).unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Batch-mean total loss and the rectifier pattern of every example, from a
/// single forward pass each.
fn loss_and_patterns(
    params: &ModelParams,
    batch: &[Example],
    lambda: f64,
    reduction: MaskReduction,
) -> (f64, Vec<Vec<bool>>) {
    let mut total = 0.0;
    let mut pats = Vec::with_capacity(batch.len());
    for ex in batch {
        let (out, trace) = forward_traced(params, ex.image).unwrap();
        total += combined_loss(&out, ex.label, ex.target, lambda, reduction).unwrap().total;
        pats.push(trace.activation_pattern(&out));
    }
    (total / batch.len() as f64, pats)
}

/// Compares analytic gradients with central differences on every parameter
/// (or every `stride`-th one). Parameters whose perturbation flips any
/// rectifier are skipped, since the loss is not differentiable there.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    params: &ModelParams,
    images: &[Image],
    labels: &[usize],
    targets: &[HeatmapTarget],
    lambda: f64,
    reduction: MaskReduction,
    step: f64,
    floor: f64,
    stride: usize,
) -> GradCheck {
    let batch: Vec<Example> = images
        .iter()
        .zip(labels)
        .zip(targets)
        .map(|((image, &label), target)| Example { image, label, target })
        .collect();
    let (_, grads) = batch_loss_and_gradients(params, &batch, lambda, reduction).unwrap();
    let (_, base_pattern) = loss_and_patterns(params, &batch, lambda, reduction);
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.data.to_vec()).collect();
    let mut probe = params.clone();
    let mut result = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut counter = 0usize;
    #[allow(clippy::needless_range_loop)]
    for (ti, name) in names.iter().enumerate() {
        for k in 0..analytic[ti].len() {
            counter += 1;
            if !(counter - 1).is_multiple_of(stride) {
                continue;
            }
            let original = probe.tensors()[ti].data[k];
            probe.tensors_mut()[ti][k] = original + step;
            let (plus, pats) = loss_and_patterns(&probe, &batch, lambda, reduction);
            let kink_plus = pats != base_pattern;
            probe.tensors_mut()[ti][k] = original - step;
            let (minus, pats) = loss_and_patterns(&probe, &batch, lambda, reduction);
            let kink_minus = pats != base_pattern;
            probe.tensors_mut()[ti][k] = original;
            if kink_plus || kink_minus {
                result.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            result.checked += 1;
            if rel > result.max_rel_error {
                result.max_rel_error = rel;
                result.worst = format!("{name}[{k}]: analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    result
}

/// Runs the full toy check for one seed: random model, two 64x64 images.
pub fn toy_gradient_check(seed: u64, lambda: f64, reduction: MaskReduction, loc_output: LocOutput) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build_model(&toy_spec(loc_output), seed).unwrap();
    let images: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 64)).collect();
    let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let targets: Vec<HeatmapTarget> = (0..2).map(|_| random_target(&mut rng, 2, 2)).collect();
    check_gradients(&params, &images, &labels, &targets, lambda, reduction, 1e-5, 1e-6, 1)
}
