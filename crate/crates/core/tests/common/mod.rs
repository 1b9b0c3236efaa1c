#![allow(dead_code)]

use std::path::PathBuf;

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wjdot::datagen::{generate, BenchmarkSpec};
use wjdot::experiment::ExperimentConfig;
use wjdot::measures::{FeatureSet, LabeledDataset, Standardizer};
use wjdot::model::{grad_weighted_label_loss, weighted_label_loss, Activation, Architecture, EmbedClassifier, HeadId};
use wjdot::ot::{solve_exact, squared_euclidean_cost, CostMatrix, TransportPlan};
use wjdot::wjdot::{alpha_gradient, WjdotResult};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

pub fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

pub fn random_cost(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CostMatrix {
    let d = rng.random_range(1..4);
    squared_euclidean_cost(points(rng, m, d).view(), points(rng, n, d).view()).unwrap()
}

/// Optimal cost between two uniform measures of equal size: the best
/// assignment, found by trying every permutation.
pub fn brute_force_assignment(c: ArrayView2<'_, f64>) -> f64 {
    let n = c.nrows();
    (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &k)| c[[i, k]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

/// Random probability vector with every entry at least `floor`.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .map(|r| floor + (1.0 - n as f64 * floor) * r / total)
        .collect()
}

fn flat_grad(
    model: &EmbedClassifier,
    x: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Vec<f64> {
    let g = grad_weighted_label_loss(model, HeadId::Global, x, p, y, 0.7, true).unwrap();
    let mut out = Vec::new();
    for layer in g.embedding.unwrap() {
        layer.flatten_into(&mut out);
    }
    g.head.flatten_into(&mut out);
    out
}

fn params(model: &EmbedClassifier) -> Vec<f64> {
    let mut out = Vec::new();
    model.embedding().flatten_into(&mut out);
    model.head(HeadId::Global).unwrap().flatten_into(&mut out);
    out
}

fn with_params(model: &EmbedClassifier, theta: &[f64]) -> EmbedClassifier {
    let mut m = model.clone();
    let rest = m.embedding_mut().assign_from(theta);
    m.head_mut(HeadId::Global).unwrap().assign_from(rest);
    m
}

/// Norm-wise relative error between the reverse-mode gradient of the
/// transport-weighted label loss and central differences over all parameters.
pub fn label_loss_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, c) = (r.random_range(2..5), r.random_range(2..5));
    let arch = Architecture {
        input_dim: d,
        hidden: vec![r.random_range(2..6)],
        embed_dim: Some(r.random_range(2..5)),
        n_classes: c,
        activation: Activation::Tanh,
    };
    let model = EmbedClassifier::init(arch, &[HeadId::Global], &mut r).unwrap();
    let (m, n) = (r.random_range(3..8), r.random_range(3..8));
    let x = points(&mut r, n, d);
    let plan = Array2::from_shape_fn((m, n), |_| r.random_range(0.0..1.0) / (m * n) as f64);
    let labels = Array2::from_shape_fn((m, c), |(i, k)| ((i % c) == k) as u8 as f64);
    let analytic = flat_grad(&model, x.view(), plan.view(), labels.view());
    let theta = params(&model);
    let h = 1e-5;
    let loss = |t: &[f64]| {
        weighted_label_loss(
            &with_params(&model, t),
            HeadId::Global,
            x.view(),
            plan.view(),
            labels.view(),
            0.7,
        )
        .unwrap()
    };
    let numeric: Vec<f64> = (0..theta.len())
        .map(|k| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[k] += h;
            down[k] -= h;
            (loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, b)| a - b));
    diff / norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-300)
}

/// Mixture of `sizes.len()` sources with weights `alpha_j / N_j`, as rows.
fn mixture_weights(sizes: &[usize], alpha: &[f64]) -> Array1<f64> {
    sizes
        .iter()
        .zip(alpha)
        .flat_map(|(&n, &a)| std::iter::repeat_n(a / n as f64, n))
        .collect()
}

/// Largest absolute error of the envelope gradient along the simplex
/// directions `e_j - e_k`, against central differences of the exact cost.
pub fn alpha_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let j = r.random_range(2..5);
    let sizes: Vec<usize> = (0..j).map(|_| r.random_range(2..6)).collect();
    let m: usize = sizes.iter().sum();
    let n = r.random_range(3..9);
    let c = random_cost(&mut r, m, n);
    let nu = uniform(n);
    let alpha = random_simplex(&mut r, j, 0.1);
    let solve = |a: &[f64]| solve_exact(mixture_weights(&sizes, a).view(), nu.view(), &c).unwrap();
    let plan = solve(&alpha);
    let mut start = 0;
    let partition: Vec<_> = sizes
        .iter()
        .map(|&s| {
            start += s;
            start - s..start
        })
        .collect();
    let grad = alpha_gradient(&plan, &partition, &alpha).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for a in 0..j {
        for b in a + 1..j {
            let mut up = alpha.clone();
            let mut down = alpha.clone();
            up[a] += h;
            up[b] -= h;
            down[a] -= h;
            down[b] += h;
            let fd = (solve(&up).cost - solve(&down).cost) / (2.0 * h);
            worst = worst.max((fd - (grad[a] - grad[b])).abs());
        }
    }
    worst
}

pub fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    ExperimentConfig::load(path).unwrap()
}

/// Sources, unlabeled-adaptation target and labeled test set, standardized
/// with source statistics.
pub struct Prepared {
    pub sources: Vec<LabeledDataset>,
    pub target: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn prepare(spec: &BenchmarkSpec) -> Prepared {
    let b = generate(spec).unwrap();
    let st = Standardizer::fit(&b.sources).unwrap();
    let mut out = Prepared {
        sources: b.sources,
        target: b.target,
        test: b.target_test,
    };
    for d in out.sources.iter_mut().chain([&mut out.target, &mut out.test]) {
        st.apply(d).unwrap();
    }
    out
}

/// Worst marginal violation of a plan against its own measures.
pub fn plan_violation(plan: &TransportPlan, mu: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    plan.marginal_violation(mu.view(), nu.view())
}

/// Worst marginal violation over the final plans of an adaptation run:
/// one mixture plan, or one plan per source when there are several.
pub fn result_violation(result: &WjdotResult, sources: &[LabeledDataset], n_target: usize) -> f64 {
    let sizes: Vec<usize> = sources.iter().map(|s| s.len()).collect();
    let nu = uniform(n_target);
    if result.final_plans.len() == 1 {
        plan_violation(
            &result.final_plans[0],
            &mixture_weights(&sizes, &result.alpha.alpha),
            &nu,
        )
    } else {
        result
            .final_plans
            .iter()
            .zip(&sizes)
            .map(|(p, &n)| plan_violation(p, &uniform(n), &nu))
            .fold(0.0, f64::max)
    }
}
