//! Small trainable networks with plain SGD.
//!
//! Parameters are kept as an ordered list of flat arrays, weights and biases as
//! separate entries, which is the granularity the compression codec works on.
//! Activations are `batch x features` matrices; convolutional feature maps are
//! flattened in height-width-channel order.

mod layers;

use ndarray::{Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, NUM_CLASSES};
use crate::scalar::Scalar;

pub const MNIST_SIDE: usize = 28;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss or gradient in parameter array {layer}")]
    NonFinite { layer: usize },
    #[error("{0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    FullyConnected,
    Convolutional,
}

/// One structural layer. Parametric layers own a weight and a bias array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Stride 1, "same" zero padding, odd square kernel.
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    /// 2x2 window, stride 2.
    MaxPool2,
}

/// Height, width, channels.
pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Stage {
    pub layer: LayerSpec,
    pub input: Dims,
    pub output: Dims,
    /// Index of the weight array; the bias follows it.
    pub param: Option<usize>,
    pub relu: bool,
}

/// Network topology together with the derived parameter array lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    arch_kind: ArchKind,
    input: Dims,
    stages: Vec<Stage>,
    param_shapes: Vec<usize>,
}

impl ModelSpec {
    /// Validates a layer stack. ReLU follows every parametric layer except the last,
    /// which feeds the softmax head.
    pub fn new(arch_kind: ArchKind, input: Dims, layers: &[LayerSpec]) -> Result<Self, NetError> {
        let mut dims = input;
        let mut stages = Vec::with_capacity(layers.len());
        let mut param_shapes = Vec::new();
        let last_param = layers
            .iter()
            .rposition(|l| !matches!(l, LayerSpec::MaxPool2))
            .ok_or_else(|| NetError::Argument("network has no parametric layer".into()))?;

        for (i, &layer) in layers.iter().enumerate() {
            let (h, w, c) = dims;
            let (output, param) = match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != h * w * c || outputs == 0 {
                        return Err(NetError::Shape(format!(
                            "dense layer {i} expects {inputs} inputs but receives {}",
                            h * w * c
                        )));
                    }
                    param_shapes.extend([inputs * outputs, outputs]);
                    ((1, 1, outputs), Some(param_shapes.len() - 2))
                }
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    if in_ch != c || kernel % 2 == 0 || out_ch == 0 {
                        return Err(NetError::Shape(format!(
                            "conv layer {i}: in_ch {in_ch} vs {c} channels, kernel {kernel}"
                        )));
                    }
                    param_shapes.extend([kernel * kernel * in_ch * out_ch, out_ch]);
                    ((h, w, out_ch), Some(param_shapes.len() - 2))
                }
                LayerSpec::MaxPool2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(NetError::Shape(format!(
                            "max-pool layer {i} needs even spatial dims, got {h}x{w}"
                        )));
                    }
                    ((h / 2, w / 2, c), None)
                }
            };
            stages.push(Stage {
                layer,
                input: dims,
                output,
                param,
                relu: param.is_some() && i != last_param,
            });
            dims = output;
        }
        if dims.0 * dims.1 * dims.2 != NUM_CLASSES || last_param != layers.len() - 1 {
            return Err(NetError::Shape(format!(
                "network must end in a {NUM_CLASSES}-way parametric layer"
            )));
        }
        Ok(Self {
            arch_kind,
            input,
            stages,
            param_shapes,
        })
    }

    /// 784 -> 42 -> 10 multilayer perceptron; 33,400 parameters in 4 arrays.
    pub fn fully_connected() -> Self {
        Self::new(
            ArchKind::FullyConnected,
            (MNIST_SIDE, MNIST_SIDE, 1),
            &[
                LayerSpec::Dense {
                    inputs: 784,
                    outputs: 42,
                },
                LayerSpec::Dense {
                    inputs: 42,
                    outputs: 10,
                },
            ],
        )
        .expect("static topology")
    }

    /// Two conv blocks and a dense head; 887,530 parameters in 12 arrays.
    pub fn convolutional() -> Self {
        use LayerSpec::*;
        Self::new(
            ArchKind::Convolutional,
            (MNIST_SIDE, MNIST_SIDE, 1),
            &[
                Conv { in_ch: 1, out_ch: 32, kernel: 5 },
                Conv { in_ch: 32, out_ch: 32, kernel: 5 },
                MaxPool2,
                Conv { in_ch: 32, out_ch: 64, kernel: 3 },
                Conv { in_ch: 64, out_ch: 64, kernel: 3 },
                MaxPool2,
                Dense { inputs: 7 * 7 * 64, outputs: 256 },
                Dense { inputs: 256, outputs: 10 },
            ],
        )
        .expect("static topology")
    }

    pub fn preset(kind: ArchKind) -> Self {
        match kind {
            ArchKind::FullyConnected => Self::fully_connected(),
            ArchKind::Convolutional => Self::convolutional(),
        }
    }

    pub fn arch_kind(&self) -> ArchKind {
        self.arch_kind
    }

    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn param_shapes(&self) -> &[usize] {
        &self.param_shapes
    }

    /// Number of parameter arrays (`l`).
    pub fn num_arrays(&self) -> usize {
        self.param_shapes.len()
    }

    pub fn total_params(&self) -> usize {
        self.param_shapes.iter().sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn build_model<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = vec![Vec::new(); self.param_shapes.len()];
        for stage in &self.stages {
            let Some(p) = stage.param else { continue };
            let (fan_in, fan_out) = match stage.layer {
                LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                } => (kernel * kernel * in_ch, kernel * kernel * out_ch),
                LayerSpec::MaxPool2 => unreachable!(),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            arrays[p] = (0..self.param_shapes[p])
                .map(|_| T::of(dist.sample(&mut rng)))
                .collect();
            arrays[p + 1] = vec![T::zero(); self.param_shapes[p + 1]];
        }
        ModelParams { arrays }
    }

    fn check<T: Scalar>(&self, params: &ModelParams<T>, cols: usize) -> Result<(), NetError> {
        if params.shapes().ne(self.param_shapes.iter().copied()) {
            return Err(NetError::Shape("parameter arrays do not match the model".into()));
        }
        if cols != self.input_len() {
            return Err(NetError::Shape(format!(
                "input width {cols}, expected {}",
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Class probabilities, one softmax row per input row.
    pub fn forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        images: ArrayView2<T>,
    ) -> Result<Array2<T>, NetError> {
        self.check(params, images.ncols())?;
        let mut logits = layers::forward(&self.stages, params, images.to_owned(), None);
        layers::softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        images: ArrayView2<T>,
        labels: &[u8],
    ) -> Result<f64, NetError> {
        let probs = self.forward(params, images)?;
        Ok(layers::cross_entropy(&probs, labels))
    }

    /// Loss and its gradient with respect to every parameter array.
    pub fn loss_and_gradient<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        images: ArrayView2<T>,
        labels: &[u8],
    ) -> Result<(f64, ModelParams<T>), NetError> {
        self.check(params, images.ncols())?;
        if images.nrows() == 0 || images.nrows() != labels.len() {
            return Err(NetError::Argument(format!(
                "batch has {} images and {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.stages.len() + 1);
        let mut probs = layers::forward(&self.stages, params, images.to_owned(), Some(&mut acts));
        layers::softmax_rows(&mut probs);
        let loss = layers::cross_entropy(&probs, labels);
        if !loss.is_finite() {
            return Err(NetError::NonFinite {
                layer: self.num_arrays() - 1,
            });
        }
        // d(mean CE)/d(logits) = (p - onehot) / batch
        let scale = T::of(1.0 / labels.len() as f64);
        for (mut row, &y) in probs.axis_iter_mut(Axis(0)).zip(labels) {
            row[y as usize] = row[y as usize] - T::one();
            row.mapv_inplace(|v| v * scale);
        }
        let grads = layers::backward(&self.stages, params, &acts, probs, &self.param_shapes);
        if let Some(layer) = grads.arrays.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(NetError::NonFinite { layer });
        }
        Ok((loss, grads))
    }

    /// One plain SGD step on a batch. Returns the loss measured before the update.
    pub fn sgd_step<T: Scalar>(
        &self,
        params: &mut ModelParams<T>,
        images: ArrayView2<T>,
        labels: &[u8],
        cfg: &TrainConfig,
    ) -> Result<f64, NetError> {
        let (loss, grads) = self.loss_and_gradient(params, images, labels)?;
        let lr = T::of(cfg.learning_rate);
        for (w, g) in params.arrays.iter_mut().zip(&grads.arrays) {
            for (w, &g) in w.iter_mut().zip(g) {
                *w = *w - lr * g;
            }
        }
        Ok(loss)
    }

    /// Fraction of examples whose arg-max class matches the label.
    pub fn evaluate_accuracy<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        ds: &LabeledDataset,
    ) -> Result<f64, NetError> {
        Ok(self.count_correct(params, ds)? as f64 / ds.count() as f64)
    }

    /// Number of arg-max-correct predictions over `ds`.
    pub fn count_correct<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        ds: &LabeledDataset,
    ) -> Result<usize, NetError> {
        if ds.is_empty() {
            return Err(NetError::Argument("cannot evaluate on an empty dataset".into()));
        }
        const CHUNK: usize = 500;
        let mut correct = 0;
        let all: Vec<usize> = (0..ds.count()).collect();
        for idx in all.chunks(CHUNK) {
            let probs = self.forward(params, ds.batch_matrix::<T>(idx).view())?;
            correct += probs
                .axis_iter(Axis(0))
                .zip(idx)
                .filter(|(row, &i)| argmax(row.iter().copied()) == ds.labels()[i] as usize)
                .count();
        }
        Ok(correct)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Learning rate and mini-batch size for local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NetError::Argument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ordered flat parameter arrays of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub arrays: Vec<Vec<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros_like(shapes: &[usize]) -> Self {
        Self {
            arrays: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn shapes(&self) -> impl Iterator<Item = usize> + '_ {
        self.arrays.iter().map(Vec::len)
    }

    pub fn total_len(&self) -> usize {
        self.shapes().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arrays: self
                .arrays
                .iter()
                .map(|a| a.iter().map(|&v| U::of(v.as_f64())).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
