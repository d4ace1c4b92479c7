//! Two-branch network: a stride-32 convolutional backbone shared by a
//! classification branch (conv, global average pooling, one linear layer)
//! and a localization branch (four 3x3 convolutions down to one heatmap
//! channel).
//!
//! All convolutions are 3x3 with one pixel of zero padding. Forward passes
//! keep the intermediate tensors needed by [`backward`], which accumulates
//! parameter gradients into a [`ModelParams`]-shaped buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Total downsampling factor of every backbone.
pub const BACKBONE_STRIDE: usize = 32;
const NUM_STAGES: usize = 5;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Output channels of each stride-2 stage; the last entry is `D`.
    pub stage_channels: Vec<usize>,
    pub overall_stride: usize,
}

impl BackboneSpec {
    pub fn new(stage_channels: Vec<usize>) -> Result<Self> {
        let spec = BackboneSpec {
            stage_channels,
            overall_stride: BACKBONE_STRIDE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.overall_stride != BACKBONE_STRIDE {
            return Err(Error::Config(format!(
                "backbone stride must be {BACKBONE_STRIDE}, got {}",
                self.overall_stride
            )));
        }
        if self.stage_channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "backbone needs {NUM_STAGES} stride-2 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel count `D` of the shared feature map.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            stage_channels: vec![32, 64, 128, 256, 256],
            overall_stride: BACKBONE_STRIDE,
        }
    }
}

/// Output nonlinearity of the localization head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocOutput {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Kernels of the classification conv (1024 at full width).
    pub cls_channels: usize,
    /// Hidden widths of the localization branch (512, 64, 32 at full width).
    pub loc_channels: [usize; 3],
    #[serde(default)]
    pub loc_output: LocOutput,
}

impl ModelSpec {
    /// Full-width heads over the default desk-scale backbone.
    pub fn full(num_classes: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec::default(),
            num_classes,
            cls_channels: 1024,
            loc_channels: [512, 64, 32],
            loc_output: LocOutput::Linear,
        }
    }

    /// Narrow network used for synthetic experiments on a single CPU core.
    pub fn compact(num_classes: usize) -> Self {
        ModelSpec {
            backbone: BackboneSpec {
                stage_channels: vec![12, 24, 32, 48, 48],
                overall_stride: BACKBONE_STRIDE,
            },
            num_classes,
            cls_channels: 96,
            loc_channels: [48, 16, 8],
            loc_output: LocOutput::Linear,
        }
    }

    /// Names and shapes of every parameter tensor, in [`ModelParams::tensors`]
    /// order, computed without allocating the tensors.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |prefix: String, c_in: usize, c_out: usize| {
            out.push((format!("{prefix}.weight"), vec![c_out, c_in, KERNEL, KERNEL]));
            out.push((format!("{prefix}.bias"), vec![c_out]));
        };
        let mut c_in = 3;
        for (i, &c) in self.backbone.stage_channels.iter().enumerate() {
            conv(format!("backbone.{i}"), c_in, c);
            c_in = c;
        }
        conv("cls_conv".into(), c_in, self.cls_channels);
        let [l1, l2, l3] = self.loc_channels;
        let loc = [(c_in, l1), (l1, l2), (l2, l3), (l3, 1)];
        let mut tail = Vec::new();
        for (i, &(a, b)) in loc.iter().enumerate() {
            tail.push((format!("loc.{i}.weight"), vec![b, a, KERNEL, KERNEL]));
            tail.push((format!("loc.{i}.bias"), vec![b]));
        }
        out.push(("fc.weight".into(), vec![self.num_classes, self.cls_channels]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out.extend(tail);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.cls_channels == 0 || self.loc_channels.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// A 3x3 convolution with one pixel of zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, 3, 3)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv2d {
    fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((c_out, c_in, KERNEL, KERNEL)),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    fn init(c_in: usize, c_out: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let mut conv = Conv2d::zeros(c_in, c_out, stride);
        fill_uniform(conv.weight.as_slice_mut().expect("contiguous"), (gain / fan_in).sqrt(), rng);
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, _, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * KERNEL * KERNEL))
            .expect("contiguous weight")
    }

    fn forward(&self, input: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = input.dim();
        let (ho, wo) = out_size(h, w, self.stride);
        let cols = im2col(input, self.stride);
        let mut out = Array2::zeros((self.out_channels(), ho * wo));
        general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("contiguous output");
        (out, cols)
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `input_dim` is given.
    fn backward(
        &self,
        grad_out: &Array3<f64>,
        cols: &Array2<f64>,
        grads: &mut Conv2d,
        input_dim: Option<(usize, usize, usize)>,
    ) -> Option<Array3<f64>> {
        let (o, ho, wo) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((o, ho * wo))
            .expect("contiguous gradient");
        {
            let (go, gi, _, _) = grads.weight.dim();
            let mut gw = grads
                .weight
                .view_mut()
                .into_shape_with_order((go, gi * KERNEL * KERNEL))
                .expect("contiguous weight gradient");
            general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gw);
        }
        grads.bias += &g.sum_axis(Axis(1));
        input_dim.map(|dim| {
            let mut dcols = Array2::zeros(cols.dim());
            general_mat_mul(1.0, &self.weight_matrix().t(), &g, 0.0, &mut dcols);
            col2im(&dcols, dim, self.stride)
        })
    }
}

fn out_size(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// Unfolds 3x3 patches (zero padded by one) into a `(C*9, Ho*Wo)` matrix.
fn im2col(input: ArrayView3<f64>, stride: usize) -> Array2<f64> {
    let input = input.as_standard_layout();
    let (c, h, w) = input.dim();
    let (ho, wo) = out_size(h, w, stride);
    let src = input.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * KERNEL * KERNEL, ho * wo));
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((ci * KERNEL + ky) * KERNEL + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, (c, h, w): (usize, usize, usize), stride: usize) -> Array3<f64> {
    let (ho, wo) = out_size(h, w, stride);
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array3::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((ci * KERNEL + ky) * KERNEL + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn fill_uniform(values: &mut [f64], bound: f64, rng: &mut ChaCha8Rng) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    for v in values {
        *v = dist.sample(rng);
    }
}

fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn relu_backward(grad: &mut Array3<f64>, activation: &Array3<f64>) {
    Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every learnable tensor. The same type doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub backbone: Vec<Conv2d>,
    pub cls_conv: Conv2d,
    /// `C x K`; row `c` holds the class-activation weights of class `c`.
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array1<f64>,
    pub loc_convs: Vec<Conv2d>,
}

/// A borrowed view of one parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `spec`.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut c_in = 3;
        let backbone = spec
            .backbone
            .stage_channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::zeros(c_in, c, 2);
                c_in = c;
                conv
            })
            .collect();
        let d = spec.backbone.feature_channels();
        let [l1, l2, l3] = spec.loc_channels;
        Ok(ModelParams {
            spec: spec.clone(),
            backbone,
            cls_conv: Conv2d::zeros(d, spec.cls_channels, 1),
            fc_weight: Array2::zeros((spec.num_classes, spec.cls_channels)),
            fc_bias: Array1::zeros(spec.num_classes),
            loc_convs: vec![
                Conv2d::zeros(d, l1, 1),
                Conv2d::zeros(l1, l2, 1),
                Conv2d::zeros(l2, l3, 1),
                Conv2d::zeros(l3, 1, 1),
            ],
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.spec).expect("spec already validated")
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            push_conv_tensors(&mut out, format!("backbone.{i}"), c);
        }
        push_conv_tensors(&mut out, "cls_conv".into(), &self.cls_conv);
        out.push(NamedTensor {
            name: "fc.weight".into(),
            shape: self.fc_weight.shape().to_vec(),
            data: self.fc_weight.as_slice().expect("contiguous"),
        });
        out.push(NamedTensor {
            name: "fc.bias".into(),
            shape: self.fc_bias.shape().to_vec(),
            data: self.fc_bias.as_slice().expect("contiguous"),
        });
        for (i, c) in self.loc_convs.iter().enumerate() {
            push_conv_tensors(&mut out, format!("loc.{i}"), c);
        }
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.backbone {
            out.push(c.weight.as_slice_mut().expect("contiguous"));
            out.push(c.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.cls_conv.weight.as_slice_mut().expect("contiguous"));
        out.push(self.cls_conv.bias.as_slice_mut().expect("contiguous"));
        out.push(self.fc_weight.as_slice_mut().expect("contiguous"));
        out.push(self.fc_bias.as_slice_mut().expect("contiguous"));
        for c in &mut self.loc_convs {
            out.push(c.weight.as_slice_mut().expect("contiguous"));
            out.push(c.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

fn push_conv_tensors<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: String, c: &'a Conv2d) {
    out.push(NamedTensor {
        name: format!("{prefix}.weight"),
        shape: c.weight.shape().to_vec(),
        data: c.weight.as_slice().expect("contiguous"),
    });
    out.push(NamedTensor {
        name: format!("{prefix}.bias"),
        shape: c.bias.shape().to_vec(),
        data: c.bias.as_slice().expect("contiguous"),
    });
}

/// Builds a model with fan-in scaled uniform weights and zero biases.
pub fn build_model(spec: &ModelSpec, init_seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let relu_gain = 6.0;
    let linear_gain = 3.0;
    for conv in &mut params.backbone {
        *conv = Conv2d::init(conv.in_channels(), conv.out_channels(), 2, relu_gain, &mut rng);
    }
    params.cls_conv = Conv2d::init(params.cls_conv.in_channels(), spec.cls_channels, 1, relu_gain, &mut rng);
    fill_uniform(
        params.fc_weight.as_slice_mut().expect("contiguous"),
        (linear_gain / spec.cls_channels as f64).sqrt(),
        &mut rng,
    );
    let last = params.loc_convs.len() - 1;
    for (i, conv) in params.loc_convs.iter_mut().enumerate() {
        let gain = if i == last { linear_gain } else { relu_gain };
        *conv = Conv2d::init(conv.in_channels(), conv.out_channels(), 1, gain, &mut rng);
    }
    Ok(params)
}

/// Every tensor of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    /// Backbone features `F`, `D x h x w`.
    pub features: Array3<f64>,
    /// Rectified classification features `F_cls`, `K x h x w`.
    pub f_cls: Array3<f64>,
    /// Global average pool of `F_cls`, length `K`.
    pub pooled: Array1<f64>,
    /// Class scores `S` before softmax.
    pub logits: Array1<f64>,
    /// Predicted heatmap `M*`, `h x w`.
    pub heatmap: Array2<f64>,
}

/// Intermediate tensors kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    backbone_cols: Vec<Array2<f64>>,
    backbone_acts: Vec<Array3<f64>>,
    cls_cols: Array2<f64>,
    loc_cols: Vec<Array2<f64>>,
    loc_acts: Vec<Array3<f64>>,
}

impl Trace {
    /// Signature of which rectifiers are active; finite-difference checks use
    /// it to detect steps that cross a kink.
    pub fn activation_pattern(&self, outputs: &ForwardOutputs) -> Vec<bool> {
        self.backbone_acts
            .iter()
            .chain(std::iter::once(&outputs.f_cls))
            .chain(&self.loc_acts)
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn check_input(image: &Image) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::mismatch("3 channels", c));
    }
    if h == 0 || w == 0 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
        return Err(Error::Shape {
            height: h,
            width: w,
            stride: BACKBONE_STRIDE,
        });
    }
    Ok(())
}

/// Forward pass of a single `H x W x 3` image, keeping the trace.
pub fn forward_traced(params: &ModelParams, image: &Image) -> Result<(ForwardOutputs, Trace)> {
    check_input(image)?;
    let input = image
        .view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .mapv(|v| v - INPUT_CENTER);

    let mut backbone_cols = Vec::with_capacity(params.backbone.len());
    let mut backbone_acts: Vec<Array3<f64>> = Vec::with_capacity(params.backbone.len());
    for conv in &params.backbone {
        let x = backbone_acts.last().map_or(input.view(), |a| a.view());
        let (mut y, cols) = conv.forward(x);
        relu_inplace(&mut y);
        backbone_cols.push(cols);
        backbone_acts.push(y);
    }
    let features = backbone_acts.last().expect("five stages").clone();

    let (mut f_cls, cls_cols) = params.cls_conv.forward(features.view());
    relu_inplace(&mut f_cls);
    let (k, h, w) = f_cls.dim();
    let pooled = f_cls
        .view()
        .into_shape_with_order((k, h * w))
        .expect("contiguous")
        .mean_axis(Axis(1))
        .expect("non-empty map");
    let logits = params.fc_weight.dot(&pooled) + &params.fc_bias;

    let mut loc_cols = Vec::with_capacity(4);
    let mut loc_acts: Vec<Array3<f64>> = Vec::with_capacity(3);
    let mut heat = None;
    for (i, conv) in params.loc_convs.iter().enumerate() {
        let x = if i == 0 { features.view() } else { loc_acts[i - 1].view() };
        let (mut y, cols) = conv.forward(x);
        loc_cols.push(cols);
        if i + 1 < params.loc_convs.len() {
            relu_inplace(&mut y);
            loc_acts.push(y);
        } else {
            heat = Some(y.index_axis_move(Axis(0), 0));
        }
    }
    let mut heatmap = heat.expect("four loc layers");
    if params.spec.loc_output == LocOutput::Sigmoid {
        heatmap.mapv_inplace(sigmoid);
    }

    Ok((
        ForwardOutputs {
            features,
            f_cls,
            pooled,
            logits,
            heatmap,
        },
        Trace {
            backbone_cols,
            backbone_acts,
            cls_cols,
            loc_cols,
            loc_acts,
        },
    ))
}

/// Forward pass over a batch of `H x W x 3` images.
pub fn forward(params: &ModelParams, batch: &[Image]) -> Result<Vec<ForwardOutputs>> {
    batch
        .iter()
        .map(|img| forward_traced(params, img).map(|(o, _)| o))
        .collect()
}

/// Back-propagates `d loss / d logits` and `d loss / d heatmap` through one
/// traced forward pass, accumulating into `grads`.
pub fn backward(
    params: &ModelParams,
    outputs: &ForwardOutputs,
    trace: &Trace,
    grad_logits: &Array1<f64>,
    grad_heatmap: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let (k, h, w) = outputs.f_cls.dim();

    // Classification branch.
    grads
        .fc_weight
        .zip_mut_with(&outer(grad_logits, &outputs.pooled), |g, &d| *g += d);
    grads.fc_bias += grad_logits;
    let grad_pooled = params.fc_weight.t().dot(grad_logits);
    let inv_area = 1.0 / (h * w) as f64;
    let mut grad_fcls = Array3::from_shape_fn((k, h, w), |(c, _, _)| grad_pooled[c] * inv_area);
    relu_backward(&mut grad_fcls, &outputs.f_cls);
    let mut grad_features = params
        .cls_conv
        .backward(&grad_fcls, &trace.cls_cols, &mut grads.cls_conv, Some(outputs.features.dim()))
        .expect("input gradient requested");

    // Localization branch; skipped when it receives no gradient.
    if grad_heatmap.iter().any(|&g| g != 0.0) {
        backward_loc(params, outputs, trace, grad_heatmap, grads, &mut grad_features);
    }

    // Shared backbone.
    let mut grad = grad_features;
    for i in (0..params.backbone.len()).rev() {
        relu_backward(&mut grad, &trace.backbone_acts[i]);
        let input_dim = if i == 0 {
            None
        } else {
            Some(trace.backbone_acts[i - 1].dim())
        };
        match params.backbone[i].backward(&grad, &trace.backbone_cols[i], &mut grads.backbone[i], input_dim) {
            Some(g) => grad = g,
            None => break,
        }
    }
}

fn backward_loc(
    params: &ModelParams,
    outputs: &ForwardOutputs,
    trace: &Trace,
    grad_heatmap: &Array2<f64>,
    grads: &mut ModelParams,
    grad_features: &mut Array3<f64>,
) {
    let mut grad = grad_heatmap.clone();
    if params.spec.loc_output == LocOutput::Sigmoid {
        Zip::from(&mut grad)
            .and(&outputs.heatmap)
            .for_each(|g, &m| *g *= m * (1.0 - m));
    }
    let mut grad = grad.insert_axis(Axis(0));
    for i in (0..params.loc_convs.len()).rev() {
        let input_dim = if i == 0 {
            outputs.features.dim()
        } else {
            trace.loc_acts[i - 1].dim()
        };
        let g_in = params.loc_convs[i]
            .backward(&grad, &trace.loc_cols[i], &mut grads.loc_convs[i], Some(input_dim))
            .expect("input gradient requested");
        if i == 0 {
            *grad_features += &g_in;
        } else {
            grad = g_in;
            relu_backward(&mut grad, &trace.loc_acts[i - 1]);
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Predicted class `c*`: the arg-max of the logits, lowest index on ties.
pub fn predict(outputs: &ForwardOutputs) -> Result<usize> {
    argmax(outputs.logits.as_slice().expect("contiguous"))
}

pub(crate) fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Row `class_index` of the linear classifier: the class-activation weights.
pub fn cam_weights(params: &ModelParams, class_index: usize) -> Result<Array1<f64>> {
    if class_index >= params.num_classes() {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            len: params.num_classes(),
        });
    }
    Ok(params.fc_weight.row(class_index).to_owned())
}

/// Horizontally flips an `h x w` map.
pub fn flip_map(map: &Array2<f64>) -> Array2<f64> {
    map.slice(s![.., ..;-1]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec(c: usize) -> ModelSpec {
        ModelSpec {
            backbone: BackboneSpec::new(vec![4, 4, 6, 6, 8]).unwrap(),
            num_classes: c,
            cls_channels: 16,
            loc_channels: [8, 4, 4],
            loc_output: LocOutput::Linear,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&tiny_spec(3), 5).unwrap();
        let b = build_model(&tiny_spec(3), 5).unwrap();
        assert_eq!(a, b);
        let c = build_model(&tiny_spec(3), 6).unwrap();
        assert_ne!(a, c);
        assert!(a.fc_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_shapes_match_allocation() {
        for spec in [ModelSpec::full(40), ModelSpec::compact(3)] {
            let p = ModelParams::zeros(&spec).unwrap();
            let listed: Vec<(String, Vec<usize>)> = p.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
            assert_eq!(listed, spec.tensor_shapes());
        }
    }

    #[test]
    fn full_width_shapes() {
        let spec = ModelSpec::full(40);
        let p = ModelParams::zeros(&spec).unwrap();
        assert_eq!(p.fc_weight.dim(), (40, 1024));
        assert_eq!(p.cls_conv.weight.dim(), (1024, 256, 3, 3));
        let chain: Vec<_> = p.loc_convs.iter().map(|c| (c.in_channels(), c.out_channels())).collect();
        assert_eq!(chain, vec![(256, 512), (512, 64), (64, 32), (32, 1)]);
    }

    #[test]
    fn spec_validation() {
        assert!(BackboneSpec::new(vec![4, 4, 4, 4]).is_err());
        let mut s = tiny_spec(3);
        s.backbone.overall_stride = 16;
        assert!(build_model(&s, 0).is_err());
        assert!(build_model(&tiny_spec(1), 0).is_err());
    }

    #[test]
    fn output_geometry() {
        let p = build_model(&tiny_spec(3), 1).unwrap();
        let out = forward(&p, &[random_image(64, 96, 2)]).unwrap();
        assert_eq!(out[0].f_cls.dim(), (16, 2, 3));
        assert_eq!(out[0].heatmap.dim(), (2, 3));
        assert_eq!(out[0].features.dim(), (8, 2, 3));
        assert!(matches!(
            forward(&p, &[random_image(48, 64, 2)]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn centered_zero_input_gives_bias_logits() {
        let p = build_model(&tiny_spec(3), 1).unwrap();
        let out = forward(&p, &[Array3::from_elem((32, 32, 3), INPUT_CENTER)]).unwrap();
        assert_eq!(out[0].logits, p.fc_bias);
        assert!(out[0].pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_is_spatial_mean_and_fcls_nonnegative() {
        let p = build_model(&tiny_spec(3), 3).unwrap();
        let (o, _) = forward_traced(&p, &random_image(64, 64, 4)).unwrap();
        assert!(o.f_cls.iter().all(|&v| v >= 0.0));
        for k in 0..o.f_cls.dim().0 {
            let m = o.f_cls.index_axis(Axis(0), k).mean().unwrap();
            assert!((m - o.pooled[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn predict_tie_break_and_errors() {
        let p = build_model(&tiny_spec(3), 1).unwrap();
        let mut o = forward(&p, &[Array3::zeros((32, 32, 3))]).unwrap().remove(0);
        o.logits = Array1::from(vec![0.1, 0.9, 0.3]);
        assert_eq!(predict(&o).unwrap(), 1);
        o.logits = Array1::from(vec![0.5, 0.5]);
        assert_eq!(predict(&o).unwrap(), 0);
        o.logits = Array1::from(vec![0.5, f64::NAN]);
        assert!(matches!(predict(&o), Err(Error::NonFiniteLogits)));
    }

    #[test]
    fn cam_weights_rows() {
        let p = build_model(&tiny_spec(3), 1).unwrap();
        assert_eq!(cam_weights(&p, 0).unwrap(), p.fc_weight.row(0));
        assert!(matches!(cam_weights(&p, 3), Err(Error::IndexOutOfRange { .. })));
        let (o, _) = forward_traced(&p, &random_image(32, 64, 9)).unwrap();
        for c in 0..3 {
            let s = cam_weights(&p, c).unwrap().dot(&o.pooled) + p.fc_bias[c];
            assert!((s - o.logits[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let conv = Conv2d::init(2, 3, 2, 6.0, &mut rng);
        let x = Array3::from_shape_fn((2, 7, 6), |_| rng.random::<f64>() - 0.5);
        for stride in [1, 2] {
            let conv = Conv2d { stride, ..conv.clone() };
            let (y, _) = conv.forward(x.view());
            let (ho, wo) = out_size(7, 6, stride);
            assert_eq!(y.dim(), (3, ho, wo));
            for o in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias[o];
                        for i in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                        acc += conv.weight[[o, i, ky, kx]] * x[[i, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((acc - y[[o, oy, ox]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 6, 5), |_| rng.random::<f64>());
        for stride in [1, 2] {
            let cols = im2col(x.view(), stride);
            let y = Array2::from_shape_fn(cols.dim(), |_| rng.random::<f64>());
            let lhs: f64 = (&cols * &y).sum();
            let rhs: f64 = (&x * &col2im(&y, x.dim(), stride)).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
