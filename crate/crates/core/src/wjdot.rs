//! Weighted joint distribution optimal transport.
//!
//! Minimizes `W(p_T^f, sum_j alpha_j p_j)` over the target head `f` and the
//! mixture weights `alpha` by block-coordinate descent:
//!
//! 1. rebuild the proxy target measure `(g(x), f(g(x)))` with the current `f`;
//! 2. solve one OT problem between the concatenated source mixture and the proxy;
//! 3. take `inner_f_steps` descent steps on `f` with the plan held fixed;
//! 4. take one projected-gradient step on `alpha`, using the mixture-side dual
//!    potentials as the gradient of the transport cost w.r.t. the marginal.
//!
//! With `line_search` on, each `alpha` step is only accepted when it does not
//! increase the transport cost at the new `f`, and every `f` step is an Armijo
//! step on the plan-weighted label loss, so with exact OT solves the
//! objective trace is non-increasing.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::measures::{
    make_joint_measure, one_hot, FeatureSet, JointMeasure, LabeledDataset, Labeler, UnlabeledDataset,
};
use crate::model::{soft_label_loss, soft_label_loss_grad, soft_targets, Dense, DenseGrad, EmbedClassifier, HeadId};
use crate::ot::{joint_cost_matrix, project_simplex, solve_exact, ConvergenceWarning, Sinkhorn, TransportPlan};
use crate::{Error, Result};

/// Slack allowed on the objective between consecutive outer iterations.
pub const MONOTONE_TOL: f64 = 1e-6;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtSolver {
    Sinkhorn,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaUpdate {
    /// Euclidean step on the tangent-centered gradient, then simplex projection.
    Projected,
    /// Multiplicative update `alpha_j <- alpha_j exp(-lr grad_j)`, renormalized.
    Exponentiated,
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WjdotConfig {
    /// Weight of the label term in the ground cost.
    pub beta: f64,
    /// Sinkhorn regularization as a fraction of the mean ground cost.
    pub eps: f64,
    pub alpha_lr: f64,
    pub f_lr: f64,
    pub outer_iters: usize,
    pub inner_f_steps: usize,
    /// Stop once the objective changes by less than this between outer iterations.
    pub tol: f64,
    pub solver: OtSolver,
    pub alpha_update: AlphaUpdate,
    /// Accept only non-increasing `alpha` steps (halving the step up to `max_backtracks` times).
    pub line_search: bool,
    pub max_backtracks: usize,
    /// Fail with a solver error on any objective increase above [`MONOTONE_TOL`].
    pub strict: bool,
    /// Also update the embedding `g` (off by default: `g` stays frozen).
    pub train_embedding: bool,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
}

impl Default for WjdotConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps: 1e-2,
            alpha_lr: 0.5,
            f_lr: 1.0,
            outer_iters: 50,
            inner_f_steps: 10,
            tol: 1e-7,
            solver: OtSolver::Exact,
            alpha_update: AlphaUpdate::Projected,
            line_search: true,
            max_backtracks: 8,
            strict: false,
            train_embedding: false,
            sinkhorn_max_iter: 10_000,
            sinkhorn_tol: 1e-9,
        }
    }
}

impl WjdotConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta >= 0.0),
            ("eps", self.eps > 0.0),
            ("alpha_lr", self.alpha_lr >= 0.0),
            ("f_lr", self.f_lr > 0.0),
            ("tol", self.tol >= 0.0),
            ("sinkhorn_tol", self.sinkhorn_tol > 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Parameter(format!("{name} is out of range")));
            }
        }
        Ok(())
    }
}

/// One recorded outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub alpha: Vec<f64>,
}

/// Mixture weights on the simplex with their optimization history.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights {
    pub alpha: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct WjdotResult {
    pub alpha: MixtureWeights,
    /// The adapted classifier `f`.
    pub target_head: Dense,
    /// Input model with `f` installed as its target head (and `g` updated if fine-tuned).
    pub model: EmbedClassifier,
    pub objective_trace: Vec<f64>,
    /// Plan of the last accepted solve; for per-source problems, one per source.
    pub final_plans: Vec<TransportPlan>,
    /// Sinkhorn convergence warnings keyed by outer iteration.
    pub warnings: Vec<(usize, ConvergenceWarning)>,
    /// Outer iterations whose objective rose by more than [`MONOTONE_TOL`].
    pub monotonicity_violations: Vec<usize>,
}

impl WjdotResult {
    pub fn final_plan(&self) -> &TransportPlan {
        &self.final_plans[0]
    }

    pub fn evaluate(&self, test: &LabeledDataset) -> Result<Metrics> {
        evaluate(&self.model, HeadId::Target, test)
    }
}

/// Classification metrics on a labeled evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `1 - accuracy`; the command error rate when classes are commands.
    pub error_rate: f64,
    pub correct: usize,
    pub total: usize,
}

impl Metrics {
    pub fn from_predictions(pred: &[usize], truth: &[usize]) -> Self {
        let correct = pred.iter().zip(truth).filter(|(p, y)| p == y).count();
        let total = truth.len();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self {
            accuracy,
            error_rate: 1.0 - accuracy,
            correct,
            total,
        }
    }
}

/// Accuracy of `argmax head(g(x))` against held-out labels.
pub fn evaluate(model: &EmbedClassifier, head: HeadId, test: &LabeledDataset) -> Result<Metrics> {
    let pred = model.predict(head, test.features())?;
    Ok(Metrics::from_predictions(&pred, test.labels()))
}

/// `sum_j alpha_j p_j` as one measure over the concatenated source atoms, and
/// the row range of each source inside it.
pub fn build_mixture_measure(sources: &[JointMeasure], alpha: &[f64]) -> Result<(JointMeasure, Vec<Range<usize>>)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Input("mixture needs at least one source".into()))?;
    if alpha.len() != sources.len() {
        return Err(Error::Input(format!(
            "{} mixture weights for {} sources",
            alpha.len(),
            sources.len()
        )));
    }
    check_simplex(alpha)?;
    for s in &sources[1..] {
        if s.embedding_dim() != first.embedding_dim() || s.n_classes() != first.n_classes() {
            return Err(Error::Input("source measures have different atom shapes".into()));
        }
    }
    let emb: Vec<_> = sources.iter().map(JointMeasure::embeddings).collect();
    let lab: Vec<_> = sources.iter().map(JointMeasure::label_dists).collect();
    let embeddings = ndarray::concatenate(Axis(0), &emb).map_err(|e| Error::Input(e.to_string()))?;
    let labels = ndarray::concatenate(Axis(0), &lab).map_err(|e| Error::Input(e.to_string()))?;
    let mut weights = Vec::with_capacity(embeddings.nrows());
    let mut partition = Vec::with_capacity(sources.len());
    for (s, &a) in sources.iter().zip(alpha) {
        let start = weights.len();
        weights.extend(s.weights().iter().map(|w| a * w));
        partition.push(start..weights.len());
    }
    let measure = JointMeasure::new(embeddings, labels, Array1::from(weights))?;
    Ok((measure, partition))
}

fn check_simplex(alpha: &[f64]) -> Result<()> {
    let total: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "mixture weights {alpha:?} are not on the simplex"
        )));
    }
    Ok(())
}

/// Gradient of the transport cost w.r.t. `alpha`:
/// `d W / d alpha_j = (1 / N_j) sum_{i in source j} u_i` with `u` the mixture-side duals.
///
/// Only the component tangent to the simplex is meaningful; shifting all
/// duals by a constant shifts every entry equally.
pub fn alpha_gradient(plan: &TransportPlan, partition: &[Range<usize>], alpha: &[f64]) -> Result<Vec<f64>> {
    if partition.len() != alpha.len() {
        return Err(Error::Input(format!(
            "{} partition blocks for {} weights",
            partition.len(),
            alpha.len()
        )));
    }
    let mut next = 0;
    for r in partition {
        if r.start != next || r.end <= r.start {
            return Err(Error::Input(format!(
                "partition block {r:?} does not tile the plan rows"
            )));
        }
        next = r.end;
    }
    if next != plan.dual_u.len() {
        return Err(Error::Input(format!(
            "partition covers {next} rows, plan has {}",
            plan.dual_u.len()
        )));
    }
    Ok(partition
        .iter()
        .map(|r| plan.dual_u.slice(ndarray::s![r.clone()]).sum() / r.len() as f64)
        .collect())
}

/// One `alpha` update of size `lr` from gradient `grad`.
pub fn alpha_step(alpha: &[f64], grad: &[f64], lr: f64, rule: AlphaUpdate) -> Vec<f64> {
    if lr == 0.0 {
        return alpha.to_vec();
    }
    match rule {
        AlphaUpdate::Projected => {
            let mean = grad.iter().sum::<f64>() / grad.len() as f64;
            let moved: Vec<f64> = alpha.iter().zip(grad).map(|(a, g)| a - lr * (g - mean)).collect();
            project_simplex(&moved)
        }
        AlphaUpdate::Exponentiated => {
            let min = grad.iter().copied().fold(f64::INFINITY, f64::min);
            let raw: Vec<f64> = alpha
                .iter()
                .zip(grad)
                .map(|(a, g)| a * (-lr * (g - min)).exp())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|r| r / total).collect()
        }
    }
}

/// How the sources enter the transport problem.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Coupling {
    /// One problem against `sum_j alpha_j p_j`; `alpha` learned or held fixed.
    Mixture { alpha0: Vec<f64>, learn: bool },
    /// One problem per source, averaged with equal weights.
    PerSource,
}

/// Solves the joint problem. Target labels are never visible here.
pub fn fit(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    model: &EmbedClassifier,
    cfg: &WjdotConfig,
) -> Result<WjdotResult> {
    let j = sources.len();
    let alpha0 = vec![1.0 / j.max(1) as f64; j];
    run(sources, target, model, cfg, Coupling::Mixture { alpha0, learn: true })
}

/// Initial target head: the global head if present, else the mean of the per-source heads.
pub(crate) fn initial_target_head(model: &EmbedClassifier) -> Result<Dense> {
    if let Some(h) = model.head(HeadId::Global) {
        return Ok(h.clone());
    }
    let per_source: Vec<&Dense> = model
        .heads()
        .filter(|(id, _)| matches!(id, HeadId::Source(_)))
        .map(|(_, h)| h)
        .collect();
    Dense::average(&per_source)
        .ok_or_else(|| Error::Config("pretrained model has neither a global nor per-source heads".into()))
}

/// `(coupling, rows' source features, rows' one-hot labels, weight)`.
type Term<'p> = (ArrayView2<'p, f64>, Array2<f64>, Array2<f64>, f64);

/// Plans and objective for the current `(f, alpha)`.
struct Evaluation {
    plans: Vec<TransportPlan>,
    objective: f64,
}

struct Engine<'a> {
    cfg: &'a WjdotConfig,
    coupling: Coupling,
    sources: &'a [LabeledDataset],
    target: &'a UnlabeledDataset,
    model: EmbedClassifier,
    source_measures: Vec<JointMeasure>,
    source_labels: Vec<Array2<f64>>,
    warnings: Vec<(usize, ConvergenceWarning)>,
    iteration: usize,
    /// Target potentials of the last accepted plan per problem.
    warm: Vec<Array1<f64>>,
}

pub(crate) fn run(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    model: &EmbedClassifier,
    cfg: &WjdotConfig,
    coupling: Coupling,
) -> Result<WjdotResult> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Input("adaptation needs at least one source".into()));
    }
    crate::measures::check_compatible(sources)?;
    let c = model.architecture().n_classes;
    if sources[0].n_classes() != c {
        return Err(Error::Config(format!(
            "sources have {} classes, model has {c}",
            sources[0].n_classes()
        )));
    }
    if let Coupling::Mixture { alpha0, .. } = &coupling {
        if alpha0.len() != sources.len() {
            return Err(Error::Input("initial weights do not match the source count".into()));
        }
        check_simplex(alpha0)?;
    }
    let mut adapted = model.clone();
    adapted.set_head(HeadId::Target, initial_target_head(model)?)?;
    let mut engine = Engine {
        cfg,
        coupling,
        sources,
        target,
        source_measures: Vec::new(),
        source_labels: sources.iter().map(|s| one_hot(s.labels(), c)).collect(),
        model: adapted,
        warnings: Vec::new(),
        iteration: 0,
        warm: Vec::new(),
    };
    engine.rebuild_source_measures()?;
    engine.optimize()
}

impl Engine<'_> {
    fn rebuild_source_measures(&mut self) -> Result<()> {
        self.source_measures = self
            .sources
            .iter()
            .map(|s| make_joint_measure(s, &self.model, Labeler::OneHot))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn proxy(&self) -> Result<JointMeasure> {
        make_joint_measure(self.target, &self.model, Labeler::Head(HeadId::Target))
    }

    /// Solves problem `slot`, warm-starting Sinkhorn from the last accepted plan of that slot.
    fn solve(&mut self, slot: usize, src: &JointMeasure, proxy: &JointMeasure) -> Result<TransportPlan> {
        let cost = joint_cost_matrix(src, proxy, self.cfg.beta)?;
        let plan = match self.cfg.solver {
            OtSolver::Exact => solve_exact(src.weights(), proxy.weights(), &cost)?,
            OtSolver::Sinkhorn => {
                let solver = Sinkhorn {
                    eps: (self.cfg.eps * cost.mean()).max(f64::MIN_POSITIVE),
                    max_iter: self.cfg.sinkhorn_max_iter,
                    tol: self.cfg.sinkhorn_tol,
                };
                match self.warm.get(slot) {
                    Some(g0) => solver.solve_from(src.weights(), proxy.weights(), &cost, g0.view())?,
                    None => solver.solve(src.weights(), proxy.weights(), &cost)?,
                }
            }
        };
        if let Some(w) = plan.warning {
            self.warnings.push((self.iteration, w));
        }
        Ok(plan)
    }

    fn evaluate(&mut self, alpha: &[f64], proxy: &JointMeasure) -> Result<Evaluation> {
        match self.coupling {
            Coupling::Mixture { .. } => {
                let (mixture, _) = build_mixture_measure(&self.source_measures, alpha)?;
                let plan = self.solve(0, &mixture, proxy)?;
                let objective = plan.cost;
                Ok(Evaluation {
                    plans: vec![plan],
                    objective,
                })
            }
            Coupling::PerSource => {
                let measures = std::mem::take(&mut self.source_measures);
                let plans = measures
                    .iter()
                    .enumerate()
                    .map(|(j, m)| self.solve(j, m, proxy))
                    .collect::<Result<Vec<_>>>();
                self.source_measures = measures;
                let plans = plans?;
                let objective = plans.iter().map(|p| p.cost).sum::<f64>() / plans.len() as f64;
                Ok(Evaluation { plans, objective })
            }
        }
    }

    /// One term per OT problem.
    fn terms<'p>(&self, eval: &'p Evaluation) -> Vec<Term<'p>> {
        match self.coupling {
            Coupling::Mixture { .. } => {
                let feats: Vec<_> = self.sources.iter().map(|s| s.features()).collect();
                let labs: Vec<_> = self.source_labels.iter().map(|l| l.view()).collect();
                vec![(
                    eval.plans[0].coupling.view(),
                    ndarray::concatenate(Axis(0), &feats).expect("compatible sources"),
                    ndarray::concatenate(Axis(0), &labs).expect("compatible labels"),
                    1.0,
                )]
            }
            Coupling::PerSource => {
                let w = 1.0 / eval.plans.len() as f64;
                eval.plans
                    .iter()
                    .zip(self.sources.iter().zip(&self.source_labels))
                    .map(|(p, (s, l))| (p.coupling.view(), s.features().to_owned(), l.clone(), w))
                    .collect()
            }
        }
    }

    /// Descent on the plan-weighted label loss with the plans held fixed.
    fn update_classifier(&mut self, eval: &Evaluation) -> Result<()> {
        if self.cfg.train_embedding {
            return self.update_classifier_and_embedding(eval);
        }
        let terms = self.terms(eval);
        let c = self.model.architecture().n_classes;
        let mut targets = Array2::zeros((self.target.len(), c));
        for (coupling, _, labels, w) in &terms {
            targets.scaled_add(*w, &soft_targets(*coupling, labels.view()));
        }
        let z = self.model.embed(self.target.features())?;
        let beta = self.cfg.beta;
        let mut head = self.model.require_head(HeadId::Target)?.clone();
        for _ in 0..self.cfg.inner_f_steps {
            let (loss, grad, _) = soft_label_loss_grad(&head, z.view(), targets.view(), beta);
            let sq = grad.sq_norm();
            if sq == 0.0 {
                break;
            }
            let mut step = self.cfg.f_lr;
            let mut moved = false;
            for _ in 0..MAX_HALVINGS {
                let mut cand = head.clone();
                cand.weights.scaled_add(-step, &grad.weights);
                cand.bias.scaled_add(-step, &grad.bias);
                if soft_label_loss(&cand, z.view(), targets.view(), beta) <= loss - ARMIJO_C * step * sq {
                    head = cand;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        self.model.set_head(HeadId::Target, head)
    }

    /// Joint descent on `g` and `f` for the full plan-weighted ground cost.
    fn update_classifier_and_embedding(&mut self, eval: &Evaluation) -> Result<()> {
        let terms = self.terms(eval);
        let beta = self.cfg.beta;
        let tx = self.target.features();
        let objective = |m: &EmbedClassifier| -> f64 {
            let zt = m.embedding().forward(tx);
            let head = m.head(HeadId::Target).expect("target head");
            terms
                .iter()
                .map(|(p, xs, ys, w)| {
                    let zs = m.embedding().forward(xs.view());
                    let dist = crate::ot::squared_euclidean_cost(zs.view(), zt.view())
                        .map(|c| crate::ot::transport_cost(*p, c.entries()))
                        .unwrap_or(f64::INFINITY);
                    let t = soft_targets(*p, ys.view());
                    w * (dist + soft_label_loss(head, zt.view(), t.view(), beta))
                })
                .sum()
        };
        for _ in 0..self.cfg.inner_f_steps {
            let loss = objective(&self.model);
            let (emb_grad, head_grad) = self.full_gradient(&terms)?;
            let sq = head_grad.sq_norm() + emb_grad.iter().map(DenseGrad::sq_norm).sum::<f64>();
            if sq == 0.0 || !loss.is_finite() {
                break;
            }
            let mut params = Vec::new();
            self.model.embedding().flatten_into(&mut params);
            let mut grads = Vec::new();
            emb_grad.iter().for_each(|g| g.flatten_into(&mut grads));
            let mut step = self.cfg.f_lr;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let mut cand = self.model.clone();
                let moved: Vec<f64> = params.iter().zip(&grads).map(|(p, g)| p - step * g).collect();
                cand.embedding_mut().assign_from(&moved);
                let h = cand.head_mut(HeadId::Target).expect("target head");
                h.weights.scaled_add(-step, &head_grad.weights);
                h.bias.scaled_add(-step, &head_grad.bias);
                if objective(&cand) <= loss - ARMIJO_C * step * sq {
                    accepted = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some(m) => self.model = m,
                None => break,
            }
        }
        self.rebuild_source_measures()
    }

    fn full_gradient(&self, terms: &[Term<'_>]) -> Result<(Vec<DenseGrad>, DenseGrad)> {
        let emb = self.model.embedding();
        let head = self.model.require_head(HeadId::Target)?;
        let t_trace = emb.forward_trace(self.target.features());
        let zt = &t_trace.output;
        let mut dzt = Array2::zeros(zt.raw_dim());
        let mut head_grad = DenseGrad::zeros_like(head);
        let mut emb_grad: Vec<DenseGrad> = emb.layers().iter().map(DenseGrad::zeros_like).collect();
        for (p, xs, ys, w) in terms {
            let s_trace = emb.forward_trace(xs.view());
            let zs = &s_trace.output;
            let row_mass = p.sum_axis(Axis(1)).insert_axis(Axis(1));
            let col_mass = p.sum_axis(Axis(0)).insert_axis(Axis(1));
            // d/dz of sum_ik p_ik |z_i - z_k|^2
            let dzs = (zs * &row_mass - p.dot(zt)) * (2.0 * w);
            dzt.scaled_add(2.0 * w, &(zt * &col_mass - p.t().dot(zs)));
            let t = soft_targets(*p, ys.view());
            let (_, hg, dz_label) = soft_label_loss_grad(head, zt.view(), t.view(), self.cfg.beta);
            head_grad.add_scaled(&hg, *w);
            dzt.scaled_add(*w, &dz_label);
            for (acc, g) in emb_grad.iter_mut().zip(emb.backward(&s_trace, dzs.view())) {
                acc.add_scaled(&g, 1.0);
            }
        }
        for (acc, g) in emb_grad.iter_mut().zip(emb.backward(&t_trace, dzt.view())) {
            acc.add_scaled(&g, 1.0);
        }
        Ok((emb_grad, head_grad))
    }

    fn accept(&mut self, eval: &Evaluation) {
        self.warm = eval.plans.iter().map(|p| p.dual_v.clone()).collect();
    }

    fn solver_error(&self, message: String, trace: &[TraceRow]) -> Error {
        Error::Solver {
            iteration: self.iteration,
            message,
            objective_trace: trace.iter().map(|r| r.objective).collect(),
            alpha_trace: trace.iter().map(|r| r.alpha.clone()).collect(),
        }
    }

    fn optimize(mut self) -> Result<WjdotResult> {
        let (mut alpha, learn) = match &self.coupling {
            Coupling::Mixture { alpha0, learn } => (alpha0.clone(), *learn),
            Coupling::PerSource => (vec![1.0 / self.sources.len() as f64; self.sources.len()], false),
        };
        let partition: Vec<Range<usize>> = {
            let mut start = 0;
            self.sources
                .iter()
                .map(|s| {
                    start += s.len();
                    start - s.len()..start
                })
                .collect()
        };
        let proxy = self.proxy()?;
        let mut current = self.evaluate(&alpha, &proxy)?;
        self.accept(&current);
        let mut trace = vec![TraceRow {
            iteration: 0,
            objective: current.objective,
            alpha: alpha.clone(),
        }];
        if !current.objective.is_finite() {
            return Err(self.solver_error("initial objective is not finite".into(), &trace));
        }
        let mut violations = Vec::new();

        for it in 1..=self.cfg.outer_iters {
            self.iteration = it;
            let grad = if learn {
                Some(alpha_gradient(&current.plans[0], &partition, &alpha)?)
            } else {
                None
            };
            self.update_classifier(&current)?;
            let proxy = self.proxy()?;

            let (next_alpha, next) = match grad {
                None => {
                    let e = self.evaluate(&alpha, &proxy)?;
                    (alpha.clone(), e)
                }
                Some(grad) if self.cfg.line_search => {
                    let base = self.evaluate(&alpha, &proxy)?;
                    let mut chosen = (alpha.clone(), base);
                    let mut lr = self.cfg.alpha_lr;
                    for _ in 0..=self.cfg.max_backtracks {
                        let cand = alpha_step(&alpha, &grad, lr, self.cfg.alpha_update);
                        if cand == alpha {
                            break;
                        }
                        let e = self.evaluate(&cand, &proxy)?;
                        if e.objective <= chosen.1.objective {
                            chosen = (cand, e);
                            break;
                        }
                        lr *= 0.5;
                    }
                    chosen
                }
                Some(grad) => {
                    let cand = alpha_step(&alpha, &grad, self.cfg.alpha_lr, self.cfg.alpha_update);
                    let e = self.evaluate(&cand, &proxy)?;
                    (cand, e)
                }
            };

            let prev = current.objective;
            alpha = next_alpha;
            current = next;
            self.accept(&current);
            trace.push(TraceRow {
                iteration: it,
                objective: current.objective,
                alpha: alpha.clone(),
            });
            if !current.objective.is_finite() {
                return Err(self.solver_error(format!("objective became {}", current.objective), &trace));
            }
            if current.objective > prev + MONOTONE_TOL {
                log::warn!(
                    "objective rose from {prev} to {} at outer iteration {it}",
                    current.objective
                );
                violations.push(it);
                if self.cfg.strict {
                    return Err(
                        self.solver_error(format!("objective rose from {prev} to {}", current.objective), &trace)
                    );
                }
            }
            if (prev - current.objective).abs() < self.cfg.tol {
                break;
            }
        }

        let target_head = self.model.require_head(HeadId::Target)?.clone();
        Ok(WjdotResult {
            alpha: MixtureWeights {
                alpha,
                trace: trace.clone(),
            },
            target_head,
            model: self.model,
            objective_trace: trace.iter().map(|r| r.objective).collect(),
            final_plans: current.plans,
            warnings: self.warnings,
            monotonicity_violations: violations,
        })
    }
}
