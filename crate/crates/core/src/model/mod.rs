//! Feed-forward embedding `g` with affine classifier heads.
//!
//! Gradients are computed by explicit reverse-mode accumulation through the
//! dense layers; there is no tape, each layer caches its input and
//! pre-activation during the forward pass.

mod checkpoint;
mod loss;
mod train;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use loss::{grad_weighted_label_loss, weighted_label_loss, LabelLossGrad};
pub(crate) use loss::{soft_label_loss, soft_label_loss_grad, soft_targets};
pub use train::{pretrain_erm, pretrain_mtl, Adam, Pretrained, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths of the embedding and the label space.
///
/// `g` is `input_dim -> hidden[0] -> ... -> hidden[last]` with the activation
/// after every hidden layer, followed by a linear projection to `embed_dim`
/// when set. An empty `hidden` with no `embed_dim` makes `g` the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: Option<usize>,
    pub n_classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn embedding_width(&self) -> usize {
        self.embed_dim
            .or_else(|| self.hidden.last().copied())
            .unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::Config("input width and class count must be positive".into()));
        }
        if self.hidden.contains(&0) || self.embed_dim == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Classifier head identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadId {
    /// `f_S`, shared by all sources (ERM pretraining).
    Global,
    /// `f_j`, one per source (multi-task pretraining).
    Source(usize),
    /// `f`, the adapted target classifier.
    Target,
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadId::Global => write!(f, "global"),
            HeadId::Source(j) => write!(f, "source{j}"),
            HeadId::Target => write!(f, "target"),
        }
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(HeadId::Global),
            "target" => Ok(HeadId::Target),
            _ => s
                .strip_prefix("source")
                .and_then(|j| j.parse().ok())
                .map(HeadId::Source)
                .ok_or_else(|| Error::Input(format!("unknown head id '{s}'"))),
        }
    }
}

/// Affine map `x -> W x + b`, weights stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient with the same shapes as a [`Dense`] layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        Self {
            weights,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    /// Parameter gradient and input gradient given `d_out = dL/d(output)`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, d_out: ArrayView2<'_, f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            weights: d_out.t().dot(&x),
            bias: d_out.sum_axis(Axis(0)),
        };
        (grad, d_out.dot(&self.weights))
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    /// Reads `n_params()` values from the front of `src`, returns the rest.
    pub fn assign_from<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weights.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weights.iter_mut().zip(w).for_each(|(p, v)| *p = *v);
        self.bias.iter_mut().zip(b).for_each(|(p, v)| *p = *v);
        rest
    }

    /// Element-wise mean of several layers of equal shape.
    pub fn average(layers: &[&Dense]) -> Option<Dense> {
        let first = layers.first()?;
        let k = layers.len() as f64;
        let mut out = Dense::zeros(first.inputs(), first.outputs());
        for l in layers {
            out.weights += &l.weights;
            out.bias += &l.bias;
        }
        out.weights /= k;
        out.bias /= k;
        Some(out)
    }
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }

    pub fn add_scaled(&mut self, other: &DenseGrad, scale: f64) {
        self.weights.scaled_add(scale, &other.weights);
        self.bias.scaled_add(scale, &other.bias);
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    pub fn sq_norm(&self) -> f64 {
        self.weights.iter().chain(self.bias.iter()).map(|g| g * g).sum()
    }
}

/// Intermediate values of one forward pass through `g`.
pub(crate) struct EmbeddingTrace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    layers: Vec<Dense>,
    /// The first `activated` layers are followed by the activation.
    activated: usize,
    activation: Activation,
}

impl Embedding {
    fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut width = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(Dense::xavier(width, h, rng));
            width = h;
        }
        if let Some(e) = arch.embed_dim {
            layers.push(Dense::xavier(width, e, rng));
        }
        Self {
            layers,
            activated: arch.hidden.len(),
            activation: arch.activation,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.forward(a.view());
            if l < self.activated {
                let act = self.activation;
                a.mapv_inplace(|v| act.apply(v));
            }
        }
        a
    }

    pub(crate) fn forward_trace(&self, x: ArrayView2<'_, f64>) -> EmbeddingTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            inputs.push(a);
            a = if l < self.activated {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        EmbeddingTrace { inputs, pre, output: a }
    }

    /// Layer gradients given `dL/dg(x)` for the traced batch.
    pub(crate) fn backward(&self, trace: &EmbeddingTrace, d_out: ArrayView2<'_, f64>) -> Vec<DenseGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            if l < self.activated {
                let act = self.activation;
                delta.zip_mut_with(&trace.pre[l], |d, &z| *d *= act.derivative(z));
            }
            let (g, d_in) = self.layers[l].backward(trace.inputs[l].view(), delta.view());
            grads.push(g);
            delta = d_in;
        }
        grads.reverse();
        grads
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.layers.iter().for_each(|l| l.flatten_into(out));
    }

    pub fn assign_from<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for l in &mut self.layers {
            src = l.assign_from(src);
        }
        src
    }

    pub(crate) fn from_layers(layers: Vec<Dense>, activated: usize, activation: Activation) -> Self {
        Self {
            layers,
            activated,
            activation,
        }
    }
}

/// Embedding `g` plus a set of classifier heads `e -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedClassifier {
    arch: Architecture,
    embedding: Embedding,
    heads: BTreeMap<HeadId, Dense>,
}

impl EmbedClassifier {
    /// Xavier-initialized embedding followed by `heads` in the given order.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, heads: &[HeadId], rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let embedding = Embedding::init(&arch, rng);
        let mut model = Self {
            arch,
            embedding,
            heads: BTreeMap::new(),
        };
        for &h in heads {
            let layer = Dense::xavier(model.arch.embedding_width(), model.arch.n_classes, rng);
            model.heads.insert(h, layer);
        }
        Ok(model)
    }

    pub(crate) fn from_parts(arch: Architecture, embedding: Embedding, heads: BTreeMap<HeadId, Dense>) -> Result<Self> {
        arch.validate()?;
        let model = Self { arch, embedding, heads };
        let e = model.arch.embedding_width();
        for (id, h) in &model.heads {
            if h.inputs() != e || h.outputs() != model.arch.n_classes {
                return Err(Error::Config(format!(
                    "head {id} has shape {}x{}, expected {}x{e}",
                    h.outputs(),
                    h.inputs(),
                    model.arch.n_classes
                )));
            }
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut Embedding {
        &mut self.embedding
    }

    pub fn head(&self, id: HeadId) -> Option<&Dense> {
        self.heads.get(&id)
    }

    pub fn head_mut(&mut self, id: HeadId) -> Option<&mut Dense> {
        self.heads.get_mut(&id)
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadId, &Dense)> {
        self.heads.iter().map(|(k, v)| (*k, v))
    }

    pub fn set_head(&mut self, id: HeadId, layer: Dense) -> Result<()> {
        if layer.inputs() != self.arch.embedding_width() || layer.outputs() != self.arch.n_classes {
            return Err(Error::Config(format!(
                "head {id} must map {} -> {}",
                self.arch.embedding_width(),
                self.arch.n_classes
            )));
        }
        self.heads.insert(id, layer);
        Ok(())
    }

    pub(crate) fn require_head(&self, id: HeadId) -> Result<&Dense> {
        self.heads
            .get(&id)
            .ok_or_else(|| Error::Config(format!("model has no {id} head")))
    }

    pub(crate) fn check_input_width(&self, width: usize) -> Result<()> {
        if width != self.arch.input_dim {
            return Err(Error::Config(format!(
                "embedding expects {} input columns, got {width}",
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// `g(x)` for every row of `x`.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input_width(x.ncols())?;
        Ok(self.embedding.forward(x))
    }

    /// Class probabilities of head `id` applied to embeddings `z`.
    pub fn head_proba(&self, id: HeadId, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let head = self.require_head(id)?;
        if z.ncols() != head.inputs() {
            return Err(Error::Input(format!(
                "head {id} expects {} embedding columns, got {}",
                head.inputs(),
                z.ncols()
            )));
        }
        Ok(softmax_rows(head.forward(z).view()))
    }

    pub fn predict_proba(&self, id: HeadId, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.embed(x)?;
        self.head_proba(id, z.view())
    }

    /// Arg-max class per row; ties resolve to the lowest class index.
    pub fn predict(&self, id: HeadId, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let z = self.embed(x)?;
        let logits = self.require_head(id)?.forward(z.view());
        Ok(logits.axis_iter(Axis(0)).map(argmax).collect())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}
