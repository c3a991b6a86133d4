//! Multilayer perceptron classifier: forward passes and a plain SGD trainer
//! used to manufacture checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, out: f32) -> f32 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Architecture of an MLP with `layer_dims = [d0, d1, …, K]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Whether each linear layer is quantized or perturbed by ensembling.
    pub quantize_mask: Vec<bool>,
}

impl ModelSpec {
    /// Spec with the default mask: every hidden layer participates, the
    /// classifier head stays frozen.
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        let quantize_mask = (0..layers).map(|i| i + 1 < layers).collect();
        Self::with_mask(layer_dims, activation, quantize_mask)
    }

    pub fn with_mask(
        layer_dims: Vec<usize>,
        activation: Activation,
        quantize_mask: Vec<bool>,
    ) -> Result<Self> {
        let spec = Self {
            layer_dims,
            activation,
            quantize_mask,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(
                "a model needs at least an input and an output extent".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer extents must be positive: {:?}",
                self.layer_dims
            )));
        }
        if self.quantize_mask.len() != self.num_layers() {
            return Err(Error::Config(format!(
                "quantize_mask has {} entries for {} linear layers",
                self.quantize_mask.len(),
                self.num_layers()
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(out, in)` extents of layer `i` (0-based).
    pub fn weight_shape(&self, i: usize) -> [usize; 2] {
        [self.layer_dims[i + 1], self.layer_dims[i]]
    }

    /// Total parameter count `Σ dᵢ (dᵢ₋₁ + 1)`.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Names used for layer `i` (0-based) in files and maps.
pub fn weight_name(i: usize) -> String {
    format!("layer_{}/W", i + 1)
}

pub fn bias_name(i: usize) -> String {
    format!("layer_{}/b", i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    spec: ModelSpec,
    layers: Vec<Linear>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, layers: Vec<Linear>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.num_layers() {
            return Err(Error::Dimension(format!(
                "spec has {} layers, got {}",
                spec.num_layers(),
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let ws = spec.weight_shape(i);
            if l.w.shape() != ws || l.b.shape() != [ws[0]] {
                return Err(Error::Dimension(format!(
                    "layer {}: expected W {:?} and b [{}], got {:?} and {:?}",
                    i + 1,
                    ws,
                    ws[0],
                    l.w.shape(),
                    l.b.shape()
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    /// Builds from a `layer_i/W`, `layer_i/b` map; every entry must be used.
    pub fn from_named(spec: ModelSpec, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for i in 0..spec.num_layers() {
            let take = |named: &mut BTreeMap<String, Tensor>, name: String| {
                named
                    .remove(&name)
                    .ok_or_else(|| Error::Dimension(format!("missing tensor {name}")))
            };
            let w = take(&mut named, weight_name(i))?;
            let b = take(&mut named, bias_name(i))?;
            layers.push(Linear { w, b });
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Dimension(format!("unexpected tensor {extra}")));
        }
        Self::new(spec, layers)
    }

    /// Zero weights and biases.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let layers = (0..spec.num_layers())
            .map(|i| {
                let ws = spec.weight_shape(i);
                Linear {
                    w: Tensor::zeros(&ws),
                    b: Tensor::zeros(&[ws[0]]),
                }
            })
            .collect();
        Self::new(spec, layers)
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn random_init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.num_layers());
        for i in 0..spec.num_layers() {
            let [out, inp] = spec.weight_shape(i);
            let bound = 1.0 / (inp as f32).sqrt();
            let w = (0..out * inp)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let b = (0..out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Linear {
                w: Tensor::new(vec![out, inp], w)?,
                b: Tensor::new(vec![out], b)?,
            });
        }
        Self::new(spec, layers)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Linear {
        &self.layers[i]
    }

    /// Replaces the weight matrix of layer `i`, keeping its bias.
    pub fn with_weight(mut self, i: usize, w: Tensor) -> Result<Self> {
        if w.shape() != self.layers[i].w.shape() {
            return Err(Error::Dimension(format!(
                "layer {} weight {:?} replaced by {:?}",
                i + 1,
                self.layers[i].w.shape(),
                w.shape()
            )));
        }
        self.layers[i].w = w;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(weight_name(i), &l.w), (bias_name(i), &l.b)])
            .collect()
    }

    /// All parameters in layer order, each layer's W before its b.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(l.b.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(spec: &ModelSpec, flat: &[f32]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for a model with {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut pos = 0;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for i in 0..spec.num_layers() {
            let [out, inp] = spec.weight_shape(i);
            let w = Tensor::new(vec![out, inp], flat[pos..pos + out * inp].to_vec())?;
            pos += out * inp;
            let b = Tensor::new(vec![out], flat[pos..pos + out].to_vec())?;
            pos += out;
            layers.push(Linear { w, b });
        }
        Self::new(spec.clone(), layers)
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    match x.shape() {
        &[_, d] if d == spec.input_dim() => Ok(()),
        s => Err(Error::Dimension(format!(
            "input {s:?} does not match model input width {}",
            spec.input_dim()
        ))),
    }
}

/// Logits `N×K` for inputs `N×d0`.
pub fn forward(ckpt: &Checkpoint, x: &Tensor) -> Result<Tensor> {
    check_input(&ckpt.spec, x)?;
    let last = ckpt.layers.len() - 1;
    let mut h = x.clone();
    for (i, l) in ckpt.layers.iter().enumerate() {
        h = h.affine(&l.w, &l.b)?;
        if i < last {
            let act = ckpt.spec.activation;
            h = h.map(|v| act.apply(v));
        }
    }
    Ok(h)
}

/// Forward pass with `W ⊙ mask` on every layer that has a mask.
pub fn forward_masked(ckpt: &Checkpoint, x: &Tensor, masks: &[Option<Tensor>]) -> Result<Tensor> {
    if masks.len() != ckpt.layers.len() {
        return Err(Error::Dimension(format!(
            "{} masks for {} layers",
            masks.len(),
            ckpt.layers.len()
        )));
    }
    let mut masked = ckpt.clone();
    for (i, mask) in masks.iter().enumerate() {
        let Some(mask) = mask else { continue };
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data(format!(
                "mask for layer {} is not binary",
                i + 1
            )));
        }
        let w = masked.layers[i]
            .w
            .zip_with(mask, |w, m| if m == 0.0 { 0.0 } else { w })?;
        masked.layers[i].w = w;
    }
    forward(&masked, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 50,
            batch: 32,
            seed: 0,
        }
    }
}

/// Minibatch SGD on mean cross-entropy, starting from
/// [`Checkpoint::random_init`] with `cfg.seed`.
pub fn train_sgd(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Checkpoint> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    check_input(spec, data.features())?;
    data.check_labels(spec.num_classes())?;

    let mut ckpt = Checkpoint::random_init(spec.clone(), cfg.seed)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4531);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            epoch_loss += sgd_step(&mut ckpt, data, batch, cfg.lr) * batch.len() as f64;
        }
        if !epoch_loss.is_finite()
            || ckpt
                .layers
                .iter()
                .any(|l| !l.w.is_finite() || !l.b.is_finite())
        {
            return Err(Error::TrainingDiverged { epoch, lr: cfg.lr });
        }
    }
    Ok(ckpt)
}

/// One gradient step on the rows in `batch`; returns the batch mean loss.
fn sgd_step(ckpt: &mut Checkpoint, data: &Dataset, batch: &[usize], lr: f32) -> f64 {
    let n = batch.len();
    let rows: Vec<Vec<f32>> = batch
        .iter()
        .map(|&i| data.features().row(i).to_vec())
        .collect();
    let x = Tensor::from_rows(&rows).expect("batch rows share the feature width");
    let act = ckpt.spec.activation;
    let last = ckpt.layers.len() - 1;

    // activations[0] is the input, activations[i + 1] the output of layer i
    let mut activations = vec![x];
    for (i, l) in ckpt.layers.iter().enumerate() {
        let mut h = activations[i].affine(&l.w, &l.b).expect("shapes validated");
        if i < last {
            h = h.map(|v| act.apply(v));
        }
        activations.push(h);
    }

    let logits = &activations[last + 1];
    let k = logits.row_len();
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
    let loss = metrics::logit_nll(logits, &labels).unwrap_or(f64::NAN);

    let mut delta: Vec<f32> = logits.softmax().into_data();
    for (r, &y) in labels.iter().enumerate() {
        delta[r * k + y] -= 1.0;
    }
    let inv_n = 1.0 / n as f32;
    delta.iter_mut().for_each(|d| *d *= inv_n);

    for i in (0..=last).rev() {
        let [out, inp] = ckpt.spec.weight_shape(i);
        let input = activations[i].data();

        let mut grad_w = vec![0.0f32; out * inp];
        let mut grad_b = vec![0.0f32; out];
        for r in 0..n {
            let d_row = &delta[r * out..(r + 1) * out];
            let a_row = &input[r * inp..(r + 1) * inp];
            for (o, &d) in d_row.iter().enumerate() {
                grad_b[o] += d;
                for (g, &a) in grad_w[o * inp..(o + 1) * inp].iter_mut().zip(a_row) {
                    *g += d * a;
                }
            }
        }

        let next_delta = (i > 0).then(|| {
            let w = ckpt.layers[i].w.data();
            let mut nd = vec![0.0f32; n * inp];
            for r in 0..n {
                for o in 0..out {
                    let d = delta[r * out + o];
                    for (acc, &wv) in nd[r * inp..(r + 1) * inp]
                        .iter_mut()
                        .zip(&w[o * inp..(o + 1) * inp])
                    {
                        *acc += d * wv;
                    }
                }
            }
            for (g, &a) in nd.iter_mut().zip(input) {
                *g *= act.grad_from_output(a);
            }
            nd
        });

        let layer = &mut ckpt.layers[i];
        for (w, g) in layer.w.data_mut().iter_mut().zip(&grad_w) {
            *w -= lr * g;
        }
        for (b, g) in layer.b.data_mut().iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
        if let Some(nd) = next_delta {
            delta = nd;
        }
    }
    loss
}
