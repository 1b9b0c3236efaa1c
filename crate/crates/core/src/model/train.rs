use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax_rows, softmax_rows, Activation, Architecture, DenseGrad, EmbedClassifier, HeadId};
use crate::measures::{check_compatible, FeatureSet, LabeledDataset};
use crate::{Error, Result};

/// Pretraining hyper-parameters, including the embedding architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    /// Final linear projection; unset leaves the last hidden layer (or the
    /// raw input, with no hidden layers) as the embedding.
    pub embed_dim: Option<usize>,
    pub activation: Activation,
    pub epochs: usize,
    /// Rows drawn from each source per step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: None,
            activation: Activation::Tanh,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn architecture(&self, input_dim: usize, n_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            n_classes,
            activation: self.activation,
        }
    }
}

/// Adam with first-moment decay 0.9, second-moment decay 0.999 and `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// A pretrained model with its training history.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: EmbedClassifier,
    /// Full-data objective after every epoch.
    pub loss_trace: Vec<f64>,
    /// Terminal mean cross-entropy of each source under its head.
    pub source_losses: Vec<f64>,
}

/// Learns `g` and the global head `f_S` by minimizing
/// `sum_j mean_i CE(f_S(g(x_ji)), y_ji)`.
pub fn pretrain_erm(sources: &[LabeledDataset], cfg: &TrainConfig) -> Result<Pretrained> {
    let heads = vec![HeadId::Global; sources.len()];
    train(sources, &heads, cfg)
}

/// Learns `g` shared by one head `f_j` per source, minimizing
/// `sum_j mean_i CE(f_j(g(x_ji)), y_ji)`.
pub fn pretrain_mtl(sources: &[LabeledDataset], cfg: &TrainConfig) -> Result<Pretrained> {
    let heads: Vec<_> = (0..sources.len()).map(HeadId::Source).collect();
    train(sources, &heads, cfg)
}

/// `heads[j]` is the head that classifies source `j`.
fn train(sources: &[LabeledDataset], heads: &[HeadId], cfg: &TrainConfig) -> Result<Pretrained> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Input("pretraining needs at least one source".into()))?;
    check_compatible(sources)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut distinct = heads.to_vec();
    distinct.dedup();
    let arch = cfg.architecture(first.dim(), first.n_classes());
    let mut model = EmbedClassifier::init(arch, &distinct, &mut rng)?;
    let one_hots: Vec<Array2<f64>> = sources.iter().map(LabeledDataset::one_hot).collect();

    let mut params = flat_params(&model, &distinct);
    let mut adam = Adam::new(params.len(), cfg.lr);
    let steps = sources
        .iter()
        .map(|s| s.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(1);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let orders: Vec<Vec<usize>> = sources
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        for step in 0..steps {
            let mut emb_grad: Vec<DenseGrad> = model.embedding().layers().iter().map(DenseGrad::zeros_like).collect();
            let mut head_grads: Vec<DenseGrad> = distinct
                .iter()
                .map(|h| DenseGrad::zeros_like(model.head(*h).expect("initialized head")))
                .collect();
            for (j, src) in sources.iter().enumerate() {
                let n = src.len();
                let batch: Vec<usize> = (0..cfg.batch_size.min(n))
                    .map(|b| orders[j][(step * cfg.batch_size + b) % n])
                    .collect();
                let x = src.features().select(Axis(0), &batch);
                let y = one_hots[j].select(Axis(0), &batch);
                let trace = model.embedding().forward_trace(x.view());
                let head = model.head(heads[j]).expect("initialized head");
                let probs = softmax_rows(head.forward(trace.output.view()).view());
                let d_logits = (probs - &y) / batch.len() as f64;
                let (hg, dz) = head.backward(trace.output.view(), d_logits.view());
                let slot = distinct.iter().position(|h| *h == heads[j]).expect("head slot");
                head_grads[slot].add_scaled(&hg, 1.0);
                for (acc, g) in emb_grad.iter_mut().zip(model.embedding().backward(&trace, dz.view())) {
                    acc.add_scaled(&g, 1.0);
                }
            }
            let mut grads = Vec::with_capacity(params.len());
            emb_grad.iter().for_each(|g| g.flatten_into(&mut grads));
            head_grads.iter().for_each(|g| g.flatten_into(&mut grads));
            adam.step(&mut params, &grads);
            assign_params(&mut model, &distinct, &params);
        }
        let per_source = source_losses(&model, sources, &one_hots, heads);
        let total: f64 = per_source.iter().sum();
        loss_trace.push(total);
        if !total.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("objective became {total}"),
                loss_trace,
            });
        }
    }
    let source_losses = source_losses(&model, sources, &one_hots, heads);
    Ok(Pretrained {
        model,
        loss_trace,
        source_losses,
    })
}

fn source_losses(
    model: &EmbedClassifier,
    sources: &[LabeledDataset],
    one_hots: &[Array2<f64>],
    heads: &[HeadId],
) -> Vec<f64> {
    sources
        .iter()
        .zip(one_hots)
        .zip(heads)
        .map(|((src, y), h)| {
            let z = model.embedding().forward(src.features());
            let logp = log_softmax_rows(model.head(*h).expect("initialized head").forward(z.view()).view());
            -(&logp * y).sum() / src.len() as f64
        })
        .collect()
}

fn flat_params(model: &EmbedClassifier, heads: &[HeadId]) -> Vec<f64> {
    let mut out = Vec::new();
    model.embedding().flatten_into(&mut out);
    for h in heads {
        model.head(*h).expect("initialized head").flatten_into(&mut out);
    }
    out
}

fn assign_params(model: &mut EmbedClassifier, heads: &[HeadId], params: &[f64]) {
    let mut rest = model.embedding_mut().assign_from(params);
    for h in heads {
        rest = model.head_mut(*h).expect("initialized head").assign_from(rest);
    }
    debug_assert!(rest.is_empty());
}
