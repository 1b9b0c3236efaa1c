use ndarray::{Array2, ArrayView2, Axis};

use super::{log_softmax_rows, softmax_rows, Dense, DenseGrad, EmbedClassifier, HeadId};
use crate::{Error, Result};

/// Gradient of the transport-weighted label loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelLossGrad {
    pub loss: f64,
    pub head: DenseGrad,
    /// Per-layer gradient of `g`, present when requested.
    pub embedding: Option<Vec<DenseGrad>>,
}

/// `T = coupling^T Y`: the label mass each target atom receives.
pub(crate) fn soft_targets(coupling: ArrayView2<'_, f64>, src_labels: ArrayView2<'_, f64>) -> Array2<f64> {
    coupling.t().dot(&src_labels)
}

/// `beta * sum_k sum_c -T[k,c] log softmax(head(z_k))_c`
pub(crate) fn soft_label_loss(head: &Dense, z: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, beta: f64) -> f64 {
    let logp = log_softmax_rows(head.forward(z).view());
    -beta * (&logp * &targets).sum()
}

/// Loss, head gradient and gradient w.r.t. the embeddings `z`.
pub(crate) fn soft_label_loss_grad(
    head: &Dense,
    z: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    beta: f64,
) -> (f64, DenseGrad, Array2<f64>) {
    let logits = head.forward(z);
    let logp = log_softmax_rows(logits.view());
    let loss = -beta * (&logp * &targets).sum();
    let mass = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
    // d/dlogits of -sum_c T_c log p_c is (sum_c T_c) p - T
    let d_logits = (softmax_rows(logits.view()) * &mass - targets) * beta;
    let (grad, dz) = head.backward(z, d_logits.view());
    (loss, grad, dz)
}

fn check_shapes(
    model: &EmbedClassifier,
    tgt_features: ArrayView2<'_, f64>,
    coupling: ArrayView2<'_, f64>,
    src_labels: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be nonnegative, got {beta}")));
    }
    if coupling.ncols() != tgt_features.nrows() {
        return Err(Error::Input(format!(
            "coupling has {} target columns, {} target rows given",
            coupling.ncols(),
            tgt_features.nrows()
        )));
    }
    if coupling.nrows() != src_labels.nrows() {
        return Err(Error::Input(format!(
            "coupling has {} source rows, {} source labels given",
            coupling.nrows(),
            src_labels.nrows()
        )));
    }
    if src_labels.ncols() != model.architecture().n_classes {
        return Err(Error::Input(format!(
            "source labels have {} classes, model has {}",
            src_labels.ncols(),
            model.architecture().n_classes
        )));
    }
    Ok(())
}

/// `sum_{i,k} pi_ik * beta * CE(f(g(x_k)), y_i)` for head `f`.
pub fn weighted_label_loss(
    model: &EmbedClassifier,
    head: HeadId,
    tgt_features: ArrayView2<'_, f64>,
    coupling: ArrayView2<'_, f64>,
    src_labels: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<f64> {
    check_shapes(model, tgt_features, coupling, src_labels, beta)?;
    let layer = model.require_head(head)?;
    let z = model.embed(tgt_features)?;
    let targets = soft_targets(coupling, src_labels);
    Ok(soft_label_loss(layer, z.view(), targets.view(), beta))
}

/// Reverse-mode gradient of [`weighted_label_loss`] w.r.t. the head and,
/// when `wrt_embedding` is set, the embedding parameters.
pub fn grad_weighted_label_loss(
    model: &EmbedClassifier,
    head: HeadId,
    tgt_features: ArrayView2<'_, f64>,
    coupling: ArrayView2<'_, f64>,
    src_labels: ArrayView2<'_, f64>,
    beta: f64,
    wrt_embedding: bool,
) -> Result<LabelLossGrad> {
    check_shapes(model, tgt_features, coupling, src_labels, beta)?;
    let layer = model.require_head(head)?;
    model.check_input_width(tgt_features.ncols())?;
    let trace = model.embedding().forward_trace(tgt_features);
    let targets = soft_targets(coupling, src_labels);
    let (loss, head_grad, dz) = soft_label_loss_grad(layer, trace.output.view(), targets.view(), beta);
    let embedding = wrt_embedding.then(|| model.embedding().backward(&trace, dz.view()));
    Ok(LabelLossGrad {
        loss,
        head: head_grad,
        embedding,
    })
}
