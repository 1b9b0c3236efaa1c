//! Datasets, empirical measures and joint (embedding, label) measures.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::model::{EmbedClassifier, HeadId};
use crate::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const MASS_TOL: f64 = 1e-9;

/// Anything that carries a feature matrix, optionally with labels.
pub trait FeatureSet {
    fn features(&self) -> ArrayView2<'_, f64>;
    fn labels(&self) -> Option<&[usize]>;
    fn domain(&self) -> &str;

    fn len(&self) -> usize {
        self.features().nrows()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        self.features().ncols()
    }
}

/// Feature matrix with integer class labels and a domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    domain: String,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize, domain: impl Into<String>) -> Result<Self> {
        let domain = domain.into();
        if features.nrows() == 0 {
            return Err(Error::Input(format!("dataset '{domain}' has no rows")));
        }
        if labels.len() != features.nrows() {
            return Err(Error::Input(format!(
                "dataset '{domain}': {} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Input("number of classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Input(format!(
                "dataset '{domain}': label {bad} outside [0, {n_classes})"
            )));
        }
        check_finite(features.view(), &domain)?;
        Ok(Self {
            features,
            labels,
            n_classes,
            domain,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One-hot encoding of the labels, `N x C`.
    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.labels, self.n_classes)
    }

    /// Drops the labels. Adaptation routines only accept this form of the target.
    pub fn without_labels(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            features: self.features.clone(),
            domain: self.domain.clone(),
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.n_classes, self.domain.clone())
    }

    /// Stacks datasets row-wise under a new domain tag.
    pub fn concat(parts: &[LabeledDataset], domain: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero datasets".into()))?;
        check_compatible(parts)?;
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Input(format!("concatenate: {e}")))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(features, labels, first.n_classes, domain)
    }

    pub(crate) fn features_mut(&mut self) -> &mut Array2<f64> {
        &mut self.features
    }
}

impl FeatureSet for LabeledDataset {
    fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
    fn labels(&self) -> Option<&[usize]> {
        Some(&self.labels)
    }
    fn domain(&self) -> &str {
        &self.domain
    }
}

/// Target features with the labels stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    features: Array2<f64>,
    domain: String,
}

impl UnlabeledDataset {
    pub fn new(features: Array2<f64>, domain: impl Into<String>) -> Result<Self> {
        let domain = domain.into();
        if features.nrows() == 0 {
            return Err(Error::Input(format!("dataset '{domain}' has no rows")));
        }
        check_finite(features.view(), &domain)?;
        Ok(Self { features, domain })
    }
}

impl FeatureSet for UnlabeledDataset {
    fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
    fn labels(&self) -> Option<&[usize]> {
        None
    }
    fn domain(&self) -> &str {
        &self.domain
    }
}

fn check_finite(features: ArrayView2<'_, f64>, domain: &str) -> Result<()> {
    if let Some((idx, _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Input(format!(
            "dataset '{domain}': non-finite feature at row {}, column {}",
            idx.0, idx.1
        )));
    }
    Ok(())
}

/// All datasets of one experiment must agree on feature width and class count.
pub fn check_compatible(parts: &[LabeledDataset]) -> Result<()> {
    let Some(first) = parts.first() else {
        return Ok(());
    };
    for p in &parts[1..] {
        if p.dim() != first.dim() {
            return Err(Error::Input(format!(
                "feature width mismatch: '{}' has {}, '{}' has {}",
                first.domain,
                first.dim(),
                p.domain,
                p.dim()
            )));
        }
        if p.n_classes != first.n_classes {
            return Err(Error::Input(format!(
                "class count mismatch: '{}' has {}, '{}' has {}",
                first.domain, first.n_classes, p.domain, p.n_classes
            )));
        }
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Per-column z-score fitted on the pooled sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(sources: &[LabeledDataset]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Input("no source datasets to standardize on".into()));
        }
        check_compatible(sources)?;
        let views: Vec<_> = sources.iter().map(|p| p.features.view()).collect();
        let pooled = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Input(format!("concatenate: {e}")))?;
        let n = pooled.nrows() as f64;
        let mean = pooled.sum_axis(Axis(0)) / n;
        let mut scale = pooled
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
            .collect::<Array1<f64>>();
        // constant columns pass through centered
        scale.mapv_inplace(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Input(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok((&x - &self.mean) / &self.scale)
    }

    pub fn apply(&self, data: &mut LabeledDataset) -> Result<()> {
        let z = self.transform(data.features.view())?;
        *data.features_mut() = z;
        Ok(())
    }

    pub fn apply_unlabeled(&self, data: &mut UnlabeledDataset) -> Result<()> {
        data.features = self.transform(data.features.view())?;
        Ok(())
    }
}

fn check_weights(weights: ArrayView1<'_, f64>) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Input("measure has no atoms".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Input(format!("invalid atom weight {w}")));
    }
    let total: f64 = weights.sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::Input(format!("atom weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Weighted point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    support: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if support.nrows() != weights.len() {
            return Err(Error::Input(format!(
                "{} atoms but {} weights",
                support.nrows(),
                weights.len()
            )));
        }
        check_weights(weights.view())?;
        Ok(Self { support, weights })
    }

    pub fn uniform(support: Array2<f64>) -> Result<Self> {
        let m = support.nrows();
        if m == 0 {
            return Err(Error::Input("measure has no atoms".into()));
        }
        Self::new(support, Array1::from_elem(m, 1.0 / m as f64))
    }

    pub fn support(&self) -> ArrayView2<'_, f64> {
        self.support.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// One atom of a joint measure: an embedding and a distribution over classes.
#[derive(Debug, Clone, Copy)]
pub struct JointAtom<'a> {
    pub embedding: ArrayView1<'a, f64>,
    pub label_dist: ArrayView1<'a, f64>,
}

/// Empirical measure on embedding space x label simplex.
///
/// Source atoms carry one-hot label rows, proxy target atoms carry softmax
/// outputs; both share this representation so a single ground cost applies.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMeasure {
    embeddings: Array2<f64>,
    label_dists: Array2<f64>,
    weights: Array1<f64>,
}

impl JointMeasure {
    pub fn new(embeddings: Array2<f64>, label_dists: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let m = weights.len();
        if embeddings.nrows() != m || label_dists.nrows() != m {
            return Err(Error::Input(format!(
                "joint measure: {} embeddings, {} label rows, {} weights",
                embeddings.nrows(),
                label_dists.nrows(),
                m
            )));
        }
        check_weights(weights.view())?;
        for (i, row) in label_dists.axis_iter(Axis(0)).enumerate() {
            let total: f64 = row.sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > MASS_TOL {
                return Err(Error::Input(format!(
                    "label distribution of atom {i} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            embeddings,
            label_dists,
            weights,
        })
    }

    pub fn uniform(embeddings: Array2<f64>, label_dists: Array2<f64>) -> Result<Self> {
        let m = embeddings.nrows();
        if m == 0 {
            return Err(Error::Input("measure has no atoms".into()));
        }
        Self::new(embeddings, label_dists, Array1::from_elem(m, 1.0 / m as f64))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> JointAtom<'_> {
        JointAtom {
            embedding: self.embeddings.row(i),
            label_dist: self.label_dists.row(i),
        }
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn label_dists(&self) -> ArrayView2<'_, f64> {
        self.label_dists.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.label_dists.ncols()
    }

    /// Same atoms, new weights.
    pub fn reweighted(&self, weights: Array1<f64>) -> Result<Self> {
        Self::new(self.embeddings.clone(), self.label_dists.clone(), weights)
    }
}

/// How atoms of a joint measure get their label coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labeler {
    /// Ground-truth one-hot labels (source domains).
    OneHot,
    /// Softmax output of a classifier head (proxy target).
    Head(HeadId),
}

/// Pushes a dataset through the embedding and attaches labels, uniform weights `1/N`.
pub fn make_joint_measure<D: FeatureSet + ?Sized>(
    data: &D,
    embedder: &EmbedClassifier,
    labeler: Labeler,
) -> Result<JointMeasure> {
    if data.is_empty() {
        return Err(Error::Input("cannot build a measure from an empty dataset".into()));
    }
    if data.dim() != embedder.architecture().input_dim {
        return Err(Error::Config(format!(
            "embedder expects {} input columns, dataset '{}' has {}",
            embedder.architecture().input_dim,
            data.domain(),
            data.dim()
        )));
    }
    let z = embedder.embed(data.features())?;
    let labels = match labeler {
        Labeler::OneHot => {
            let y = data
                .labels()
                .ok_or_else(|| Error::Config(format!("dataset '{}' has no labels for one-hot mode", data.domain())))?;
            let c = embedder.architecture().n_classes;
            if let Some(bad) = y.iter().find(|&&v| v >= c) {
                return Err(Error::Config(format!("label {bad} outside the model's {c} classes")));
            }
            one_hot(y, c)
        }
        Labeler::Head(head) => embedder.head_proba(head, z.view())?,
    };
    JointMeasure::uniform(z, labels)
}
