//! Small CNN classifier trained from scratch, f64 end to end.
//!
//! Layer vocabulary: valid (unpadded) convolution, relu, non-overlapping
//! max-pool, dense, softmax. A descriptor lists the layers; building a
//! model against an input shape checks the whole shape chain and lays all
//! weights out in one flat parameter vector, which keeps SGD updates,
//! finite-difference probes and checkpointing trivial.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model};
pub use train::{train, train_traced, TrainConfig};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;

/// Probabilities below this floor are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// One layer in a descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Relu,
    MaxPool { kernel: usize },
    Dense { out_features: usize },
    Softmax,
}

/// An architecture description, independent of any input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Descriptor {
    layers: Vec<LayerSpec>,
}

impl Descriptor {
    pub fn new(layers: Vec<LayerSpec>) -> Descriptor {
        Descriptor { layers }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Default architecture for 28x28-scale inputs:
    /// conv(8,3,1)-relu-maxpool(2)-conv(16,3,1)-relu-maxpool(2)-dense(32)-relu-dense(K)-softmax.
    pub fn small_cnn(num_classes: usize) -> Descriptor {
        Descriptor::new(vec![
            LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2 },
            LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2 },
            LayerSpec::Dense { out_features: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: num_classes },
            LayerSpec::Softmax,
        ])
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { out_channels, kernel, stride } => {
                    format!("conv({out_channels},{kernel},{stride})")
                }
                LayerSpec::Relu => "relu".into(),
                LayerSpec::MaxPool { kernel } => format!("maxpool({kernel})"),
                LayerSpec::Dense { out_features } => format!("dense({out_features})"),
                LayerSpec::Softmax => "softmax".into(),
            })
            .collect();
        write!(f, "{}", parts.join("-"))
    }
}

impl FromStr for Descriptor {
    type Err = Error;

    /// Parses the compact text form produced by `Display`, e.g.
    /// `conv(8,3,1)-relu-maxpool(2)-dense(10)-softmax`.
    fn from_str(s: &str) -> Result<Descriptor> {
        let mut layers = Vec::new();
        for part in s.split('-') {
            let part = part.trim();
            let (name, args) = match part.find('(') {
                Some(open) => {
                    if !part.ends_with(')') {
                        return Err(Error::Descriptor(format!("unbalanced parens in '{part}'")));
                    }
                    let nums: Vec<usize> = part[open + 1..part.len() - 1]
                        .split(',')
                        .map(|t| {
                            t.trim().parse().map_err(|_| {
                                Error::Descriptor(format!("bad number in layer '{part}'"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    (&part[..open], nums)
                }
                None => (part, Vec::new()),
            };
            let layer = match (name, args.as_slice()) {
                ("conv", [oc, k, s]) => LayerSpec::Conv { out_channels: *oc, kernel: *k, stride: *s },
                ("relu", []) => LayerSpec::Relu,
                ("maxpool", [k]) => LayerSpec::MaxPool { kernel: *k },
                ("dense", [n]) => LayerSpec::Dense { out_features: *n },
                ("softmax", []) => LayerSpec::Softmax,
                _ => return Err(Error::Descriptor(format!("unknown layer '{part}'"))),
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Descriptor("empty descriptor".into()));
        }
        Ok(Descriptor::new(layers))
    }
}

/// A layer bound to concrete shapes, with offsets into the flat parameter
/// vector where applicable.
#[derive(Debug, Clone, PartialEq, Eq)]
enum PlanLayer {
    Conv {
        in_h: usize,
        in_w: usize,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu {
        len: usize,
    },
    MaxPool {
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        w_off: usize,
        b_off: usize,
    },
    Softmax {
        len: usize,
    },
}

impl PlanLayer {
    fn output_len(&self) -> usize {
        match self {
            PlanLayer::Conv { out_c, out_h, out_w, .. } => out_c * out_h * out_w,
            PlanLayer::Relu { len } => *len,
            PlanLayer::MaxPool { channels, out_h, out_w, .. } => channels * out_h * out_w,
            PlanLayer::Dense { out_features, .. } => *out_features,
            PlanLayer::Softmax { len } => *len,
        }
    }

    /// (weight range, bias range) in the flat parameter vector, when any.
    fn param_ranges(&self) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        match self {
            PlanLayer::Conv { in_c, out_c, kernel, w_off, b_off, .. } => {
                let w_len = out_c * in_c * kernel * kernel;
                Some((*w_off..*w_off + w_len, *b_off..*b_off + out_c))
            }
            PlanLayer::Dense { in_features, out_features, w_off, b_off, .. } => {
                let w_len = out_features * in_features;
                Some((*w_off..*w_off + w_len, *b_off..*b_off + out_features))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial(usize, usize, usize), // h, w, c
    Flat(usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Spatial(h, w, c) => h * w * c,
            Shape::Flat(n) => n,
        }
    }
}

/// A classifier with bound shapes and a flat f64 parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalClassifier {
    descriptor: Descriptor,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    plan: Vec<PlanLayer>,
    params: Vec<f64>,
}

fn build_plan(
    descriptor: &Descriptor,
    input_shape: (usize, usize, usize),
) -> Result<(Vec<PlanLayer>, usize, usize)> {
    let (h0, w0, c0) = input_shape;
    if h0 == 0 || w0 == 0 || c0 == 0 {
        return Err(Error::Descriptor(format!(
            "input shape {h0}x{w0}x{c0} must be positive"
        )));
    }
    let mut shape = Shape::Spatial(h0, w0, c0);
    let mut plan = Vec::new();
    let mut offset = 0usize;
    let mut saw_softmax = false;

    for (i, spec) in descriptor.layers().iter().enumerate() {
        if saw_softmax {
            return Err(Error::Descriptor(format!(
                "layer {i} follows softmax; softmax must be last"
            )));
        }
        match *spec {
            LayerSpec::Conv { out_channels, kernel, stride } => {
                let Shape::Spatial(h, w, c) = shape else {
                    return Err(Error::Descriptor(format!(
                        "conv at layer {i} needs a spatial input, got a flat vector"
                    )));
                };
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::Descriptor(format!(
                        "conv at layer {i} has a zero-sized field"
                    )));
                }
                if kernel > h || kernel > w {
                    return Err(Error::Descriptor(format!(
                        "conv kernel {kernel} exceeds input {h}x{w} at layer {i}"
                    )));
                }
                let out_h = (h - kernel) / stride + 1;
                let out_w = (w - kernel) / stride + 1;
                let w_off = offset;
                offset += out_channels * c * kernel * kernel;
                let b_off = offset;
                offset += out_channels;
                plan.push(PlanLayer::Conv {
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    out_c: out_channels,
                    kernel,
                    stride,
                    out_h,
                    out_w,
                    w_off,
                    b_off,
                });
                shape = Shape::Spatial(out_h, out_w, out_channels);
            }
            LayerSpec::Relu => {
                plan.push(PlanLayer::Relu { len: shape.len() });
            }
            LayerSpec::MaxPool { kernel } => {
                let Shape::Spatial(h, w, c) = shape else {
                    return Err(Error::Descriptor(format!(
                        "maxpool at layer {i} needs a spatial input"
                    )));
                };
                if kernel == 0 || kernel > h || kernel > w {
                    return Err(Error::Descriptor(format!(
                        "maxpool kernel {kernel} does not fit input {h}x{w} at layer {i}"
                    )));
                }
                let out_h = h / kernel;
                let out_w = w / kernel;
                plan.push(PlanLayer::MaxPool {
                    in_h: h,
                    in_w: w,
                    channels: c,
                    kernel,
                    out_h,
                    out_w,
                });
                shape = Shape::Spatial(out_h, out_w, c);
            }
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err(Error::Descriptor(format!("dense at layer {i} has 0 outputs")));
                }
                let in_features = shape.len();
                let w_off = offset;
                offset += out_features * in_features;
                let b_off = offset;
                offset += out_features;
                plan.push(PlanLayer::Dense {
                    in_features,
                    out_features,
                    w_off,
                    b_off,
                });
                shape = Shape::Flat(out_features);
            }
            LayerSpec::Softmax => {
                let Shape::Flat(len) = shape else {
                    return Err(Error::Descriptor(format!(
                        "softmax at layer {i} needs a flat input; add a dense layer first"
                    )));
                };
                plan.push(PlanLayer::Softmax { len });
                saw_softmax = true;
            }
        }
    }

    if !saw_softmax {
        return Err(Error::Descriptor("descriptor must end with softmax".into()));
    }
    let num_classes = plan
        .last()
        .map(PlanLayer::output_len)
        .expect("softmax layer exists");
    if num_classes < 2 {
        return Err(Error::Descriptor(format!(
            "softmax over {num_classes} logits cannot classify"
        )));
    }
    Ok((plan, offset, num_classes))
}

impl EvalClassifier {
    /// Builds a model with fan-in-scaled uniform weights
    /// (U(-sqrt(1/fan_in), +sqrt(1/fan_in))) and zero biases, fully
    /// determined by the seed.
    pub fn init(
        descriptor: &Descriptor,
        input_shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<EvalClassifier> {
        let (plan, param_count, num_classes) = build_plan(descriptor, input_shape)?;
        let mut params = vec![0.0; param_count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &plan {
            match layer {
                PlanLayer::Conv { in_c, kernel, .. } => {
                    let fan_in = in_c * kernel * kernel;
                    let limit = (1.0 / fan_in as f64).sqrt();
                    let (w_range, _) = layer.param_ranges().expect("conv has params");
                    for i in w_range {
                        params[i] = rng.random_range(-limit..=limit);
                    }
                }
                PlanLayer::Dense { in_features, .. } => {
                    let limit = (1.0 / *in_features as f64).sqrt();
                    let (w_range, _) = layer.param_ranges().expect("dense has params");
                    for i in w_range {
                        params[i] = rng.random_range(-limit..=limit);
                    }
                }
                _ => {}
            }
        }
        Ok(EvalClassifier {
            descriptor: descriptor.clone(),
            input_shape,
            num_classes,
            plan,
            params,
        })
    }

    /// Rebuilds a model from a descriptor plus a previously saved parameter
    /// vector (checkpoint loading).
    pub(crate) fn from_parts(
        descriptor: Descriptor,
        input_shape: (usize, usize, usize),
        params: Vec<f64>,
    ) -> Result<EvalClassifier> {
        let (plan, param_count, num_classes) = build_plan(&descriptor, input_shape)?;
        if params.len() != param_count {
            return Err(Error::Consistency(format!(
                "parameter vector holds {} values, plan needs {param_count}",
                params.len()
            )));
        }
        Ok(EvalClassifier {
            descriptor,
            input_shape,
            num_classes,
            plan,
            params,
        })
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs every layer, returning each layer's output (index 0 is the
    /// input itself). The last entry holds the class probabilities.
    fn forward_trace(&self, image: &Image) -> Result<Vec<Vec<f64>>> {
        self.check_input(image)?;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.plan.len() + 1);
        values.push(image.pixels().to_vec());
        for layer in &self.plan {
            let x = values.last().expect("input pushed above");
            let y = match layer {
                PlanLayer::Conv {
                    in_h, in_w, in_c, out_c, kernel, stride, out_h, out_w, w_off, b_off,
                } => conv_forward(
                    x, &self.params, *in_h, *in_w, *in_c, *out_c, *kernel, *stride, *out_h,
                    *out_w, *w_off, *b_off,
                ),
                PlanLayer::Relu { .. } => x.iter().map(|&v| v.max(0.0)).collect(),
                PlanLayer::MaxPool { in_h, in_w, channels, kernel, out_h, out_w } => {
                    pool_forward(x, *in_h, *in_w, *channels, *kernel, *out_h, *out_w)
                }
                PlanLayer::Dense { in_features, out_features, w_off, b_off } => {
                    dense_forward(x, &self.params, *in_features, *out_features, *w_off, *b_off)
                }
                PlanLayer::Softmax { .. } => softmax(x),
            };
            values.push(y);
        }
        Ok(values)
    }

    /// Class probabilities for one image; they sum to 1 up to rounding.
    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_trace(image)?.pop().expect("trace never empty"))
    }

    /// Argmax class with lowest-index tie-breaking.
    pub fn predict(&self, image: &Image) -> Result<usize> {
        let probs = self.forward(image)?;
        Ok(argmax(&probs))
    }

    /// Cross-entropy loss and the full parameter gradient for one sample.
    pub fn loss_and_grad(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
        if label >= self.num_classes {
            return Err(Error::Argument(format!(
                "label {label} outside 0..{}",
                self.num_classes
            )));
        }
        let values = self.forward_trace(image)?;
        let probs = values.last().expect("trace never empty");
        let loss = cross_entropy(probs, label)?;
        let mut grad = vec![0.0; self.params.len()];

        // Fused softmax + cross-entropy start: d(loss)/d(logits) = p - onehot.
        let mut delta: Vec<f64> = probs.clone();
        delta[label] -= 1.0;

        // Walk backwards, skipping the softmax layer itself (fused above).
        for (idx, layer) in self.plan.iter().enumerate().rev() {
            let x = &values[idx];
            match layer {
                PlanLayer::Softmax { .. } => {}
                PlanLayer::Relu { .. } => {
                    for (d, &v) in delta.iter_mut().zip(x.iter()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                PlanLayer::Dense { in_features, out_features, w_off, b_off } => {
                    delta = dense_backward(
                        x, &self.params, &mut grad, &delta, *in_features, *out_features, *w_off,
                        *b_off,
                    );
                }
                PlanLayer::Conv {
                    in_h, in_w, in_c, out_c, kernel, stride, out_h, out_w, w_off, b_off,
                } => {
                    delta = conv_backward(
                        x, &self.params, &mut grad, &delta, *in_h, *in_w, *in_c, *out_c, *kernel,
                        *stride, *out_h, *out_w, *w_off, *b_off,
                    );
                }
                PlanLayer::MaxPool { in_h, in_w, channels, kernel, out_h, out_w } => {
                    delta = pool_backward(x, &delta, *in_h, *in_w, *channels, *kernel, *out_h, *out_w);
                }
            }
        }
        Ok((loss, grad))
    }

    /// Indices of a stratified random parameter subset: up to `per_layer`
    /// entries from every parameterized layer, so a check over the subset
    /// touches each layer type.
    pub fn sample_param_indices(&self, per_layer: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::new();
        for layer in &self.plan {
            if let Some((w_range, b_range)) = layer.param_ranges() {
                for range in [w_range, b_range] {
                    let len = range.len();
                    let take = per_layer.min(len);
                    let mut pool: Vec<usize> = range.collect();
                    for i in 0..take {
                        let j = rng.random_range(i..len);
                        pool.swap(i, j);
                    }
                    picked.extend_from_slice(&pool[..take]);
                }
            }
        }
        picked
    }

    /// Central finite-difference gradient (step 1e-5) at the given
    /// parameter indices.
    pub fn finite_difference_gradient(
        &self,
        image: &Image,
        label: usize,
        indices: &[usize],
    ) -> Result<Vec<f64>> {
        const STEP: f64 = 1e-5;
        let mut probe = self.clone();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= probe.params.len() {
                return Err(Error::Argument(format!("parameter index {i} out of range")));
            }
            let saved = probe.params[i];
            probe.params[i] = saved + STEP;
            let up = probe.sample_loss(image, label)?;
            probe.params[i] = saved - STEP;
            let down = probe.sample_loss(image, label)?;
            probe.params[i] = saved;
            out.push((up - down) / (2.0 * STEP));
        }
        Ok(out)
    }

    fn sample_loss(&self, image: &Image, label: usize) -> Result<f64> {
        cross_entropy(&self.forward(image)?, label)
    }
}

/// `-ln(p[label])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::Argument(format!("label {label} outside {} probabilities", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of items the model classifies correctly.
pub fn accuracy(model: &EvalClassifier, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("accuracy over an empty dataset".into()));
    }
    let hits = crate::par::map_range(dataset.len(), |i| {
        (model.predict(dataset.image(i)).expect("shape checked per item") == dataset.label(i))
            as usize
    });
    Ok(hits.iter().sum::<usize>() as f64 / dataset.len() as f64)
}

/// Compares the backprop gradient against central finite differences over
/// a stratified random parameter subset and returns the maximum relative
/// error `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn gradient_check(
    model: &EvalClassifier,
    image: &Image,
    label: usize,
    per_layer: usize,
    seed: u64,
) -> Result<f64> {
    let indices = model.sample_param_indices(per_layer, seed);
    let (_, grad) = model.loss_and_grad(image, label)?;
    let analytic: Vec<f64> = indices.iter().map(|&i| grad[i]).collect();
    let numeric = model.finite_difference_gradient(image, label, &indices)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Elementwise `|a - b| / max(|a|, |b|, 1e-6)`, maximized over the slice.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    params: &[f64],
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    w_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        let bias = params[b_off + oc];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut acc = bias;
                for ic in 0..in_c {
                    let w_base = w_off + ((oc * in_c + ic) * kernel) * kernel;
                    let x_base = ic * in_h * in_w;
                    for kh in 0..kernel {
                        let row = x_base + (oh * stride + kh) * in_w + ow * stride;
                        let wrow = w_base + kh * kernel;
                        for kw in 0..kernel {
                            acc += params[wrow + kw] * x[row + kw];
                        }
                    }
                }
                out[(oc * out_h + oh) * out_w + ow] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    params: &[f64],
    grad: &mut [f64],
    delta: &[f64],
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    w_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; in_c * in_h * in_w];
    for oc in 0..out_c {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let d = delta[(oc * out_h + oh) * out_w + ow];
                if d == 0.0 {
                    continue;
                }
                grad[b_off + oc] += d;
                for ic in 0..in_c {
                    let w_base = w_off + ((oc * in_c + ic) * kernel) * kernel;
                    let x_base = ic * in_h * in_w;
                    for kh in 0..kernel {
                        let row = x_base + (oh * stride + kh) * in_w + ow * stride;
                        let wrow = w_base + kh * kernel;
                        for kw in 0..kernel {
                            grad[wrow + kw] += d * x[row + kw];
                            dx[row + kw] += d * params[wrow + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward(
    x: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let base = c * in_h * in_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                for kh in 0..kernel {
                    let row = base + (oh * kernel + kh) * in_w + ow * kernel;
                    for kw in 0..kernel {
                        best = best.max(x[row + kw]);
                    }
                }
                out[(c * out_h + oh) * out_w + ow] = best;
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal input in scan order.
fn pool_backward(
    x: &[f64],
    delta: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; channels * in_h * in_w];
    for c in 0..channels {
        let base = c * in_h * in_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best_idx = base + (oh * kernel) * in_w + ow * kernel;
                let mut best = x[best_idx];
                for kh in 0..kernel {
                    let row = base + (oh * kernel + kh) * in_w + ow * kernel;
                    for kw in 0..kernel {
                        if x[row + kw] > best {
                            best = x[row + kw];
                            best_idx = row + kw;
                        }
                    }
                }
                dx[best_idx] += delta[(c * out_h + oh) * out_w + ow];
            }
        }
    }
    dx
}

fn dense_forward(
    x: &[f64],
    params: &[f64],
    in_features: usize,
    out_features: usize,
    w_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_features];
    for (o, out_val) in out.iter_mut().enumerate() {
        let row = w_off + o * in_features;
        let mut acc = params[b_off + o];
        for (i, &xi) in x.iter().enumerate() {
            acc += params[row + i] * xi;
        }
        *out_val = acc;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    params: &[f64],
    grad: &mut [f64],
    delta: &[f64],
    in_features: usize,
    out_features: usize,
    w_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; in_features];
    for o in 0..out_features {
        let d = delta[o];
        grad[b_off + o] += d;
        let row = w_off + o * in_features;
        if d == 0.0 {
            continue;
        }
        for (i, &xi) in x.iter().enumerate() {
            grad[row + i] += d * xi;
            dx[i] += d * params[row + i];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..h * w * c).map(|_| rng.random_range(0.0..=1.0)).collect();
        Image::new(h, w, c, px).unwrap()
    }

    #[test]
    fn descriptor_text_round_trip() {
        let d = Descriptor::small_cnn(10);
        let text = d.to_string();
        assert_eq!(
            text,
            "conv(8,3,1)-relu-maxpool(2)-conv(16,3,1)-relu-maxpool(2)-dense(32)-relu-dense(10)-softmax"
        );
        assert_eq!(text.parse::<Descriptor>().unwrap(), d);
        assert!("conv(8,3)".parse::<Descriptor>().is_err());
        assert!("".parse::<Descriptor>().is_err());
    }

    #[test]
    fn shape_chain_of_default_cnn() {
        let model = EvalClassifier::init(&Descriptor::small_cnn(10), (28, 28, 1), 0).unwrap();
        // conv 26x26x8, pool 13x13x8, conv 11x11x16, pool 5x5x16 = 400 flat.
        let expected = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 400 + 32) + (10 * 32 + 10);
        assert_eq!(model.param_count(), expected);
        assert_eq!(model.num_classes(), 10);
    }

    #[test]
    fn descriptor_validation_failures() {
        // Softmax missing.
        let d = Descriptor::new(vec![LayerSpec::Dense { out_features: 4 }]);
        assert!(matches!(
            EvalClassifier::init(&d, (4, 4, 1), 0).unwrap_err(),
            Error::Descriptor(_)
        ));
        // Conv after dense.
        let d = Descriptor::new(vec![
            LayerSpec::Dense { out_features: 4 },
            LayerSpec::Conv { out_channels: 2, kernel: 1, stride: 1 },
            LayerSpec::Softmax,
        ]);
        assert!(EvalClassifier::init(&d, (4, 4, 1), 0).is_err());
        // Kernel larger than input.
        let d = Descriptor::new(vec![
            LayerSpec::Conv { out_channels: 2, kernel: 9, stride: 1 },
            LayerSpec::Dense { out_features: 2 },
            LayerSpec::Softmax,
        ]);
        assert!(EvalClassifier::init(&d, (4, 4, 1), 0).is_err());
        // Softmax straight on a spatial shape.
        let d = Descriptor::new(vec![LayerSpec::Softmax]);
        assert!(EvalClassifier::init(&d, (4, 4, 1), 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let d = Descriptor::small_cnn(10);
        let a = EvalClassifier::init(&d, (28, 28, 1), 7).unwrap();
        let b = EvalClassifier::init(&d, (28, 28, 1), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = EvalClassifier::init(&d, (28, 28, 1), 8).unwrap();
        assert_ne!(a.params(), c.params());
        // Every bias is zero after init.
        for layer in &a.plan {
            if let Some((_, b_range)) = layer.param_ranges() {
                assert!(a.params()[b_range].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = EvalClassifier::init(&Descriptor::small_cnn(10), (28, 28, 1), 3).unwrap();
        let probs = model.forward(&random_image(28, 28, 1, 1)).unwrap();
        assert_eq!(probs.len(), 10);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zero_weight_model_is_uniform() {
        let d = Descriptor::new(vec![LayerSpec::Dense { out_features: 4 }, LayerSpec::Softmax]);
        let mut model = EvalClassifier::init(&d, (2, 2, 1), 0).unwrap();
        model.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let probs = model.forward(&random_image(2, 2, 1, 5)).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = vec![0.1; 10];
        assert!((cross_entropy(&uniform, 3).unwrap() - 10.0f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        // Zero probability hits the floor instead of +inf.
        let floored = cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!((floored - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let model = EvalClassifier::init(&Descriptor::small_cnn(10), (28, 28, 1), 0).unwrap();
        let err = model.forward(&random_image(27, 28, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn maxpool_drops_ragged_edge() {
        // 5x5 input pooled by 2 leaves 2x2: the fifth row/col is dropped.
        let d = Descriptor::new(vec![
            LayerSpec::MaxPool { kernel: 2 },
            LayerSpec::Dense { out_features: 2 },
            LayerSpec::Softmax,
        ]);
        let model = EvalClassifier::init(&d, (5, 5, 1), 0).unwrap();
        assert_eq!(model.param_count(), 2 * 4 + 2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = EvalClassifier::init(&Descriptor::small_cnn(10), (12, 12, 1), 11).unwrap();
        let image = random_image(12, 12, 1, 2);
        let err = gradient_check(&model, &image, 4, 6, 99).unwrap();
        assert!(err <= 1e-4, "gradient check error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let model = EvalClassifier::init(&Descriptor::small_cnn(10), (12, 12, 1), 11).unwrap();
        let image = random_image(12, 12, 1, 2);
        let indices = model.sample_param_indices(6, 99);
        let (_, grad) = model.loss_and_grad(&image, 4).unwrap();
        let mut analytic: Vec<f64> = indices.iter().map(|&i| grad[i]).collect();
        // Scale the largest entry; a healthy check must flag it.
        let top = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        analytic[top] *= 1.5;
        let numeric = model.finite_difference_gradient(&image, 4, &indices).unwrap();
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn stride_two_conv_shapes() {
        let d = Descriptor::new(vec![
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: 3 },
            LayerSpec::Softmax,
        ]);
        let model = EvalClassifier::init(&d, (9, 9, 1), 1).unwrap();
        // (9 - 3) / 2 + 1 = 4 -> 4x4x4 = 64 flat features.
        assert_eq!(model.param_count(), (4 * 9 + 4) + (3 * 64 + 3));
        let image = random_image(9, 9, 1, 3);
        let err = gradient_check(&model, &image, 2, 8, 5).unwrap();
        assert!(err <= 1e-4, "stride-2 gradient error {err}");
    }
}
