//! Synthetic multi-source benchmarks.
//!
//! The base task is a mixture of `C` isotropic Gaussian blobs in `d`
//! dimensions. Each source (and optionally the target) is the base task
//! pushed through a list of [`ShiftSpec`]s. A target can also be a mixture of
//! the source generators with known weights, which gives an oracle for the
//! mixture weights learned by the adaptation.

mod io;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::measures::{FeatureSet, LabeledDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotation by `magnitude` radians in the plane of the first two features.
    Rotation,
    /// Constant offset of length `magnitude` along a seeded random direction.
    Translation,
    /// Per-sample offset along a seeded fixed direction, with Gaussian
    /// amplitude of mean `magnitude` and standard deviation `magnitude / 2`.
    NoiseOverlay,
    /// Tilts the class proportions: `p_c` proportional to `exp(magnitude * t_c)`
    /// with `t_c` spread evenly over `[-1/2, 1/2]`.
    ClassPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(Error::Config(format!(
                "shift magnitude {} is not finite",
                self.magnitude
            )));
        }
        if self.kind == ShiftKind::Rotation && dim < 2 && self.magnitude != 0.0 {
            return Err(Error::Config("rotation needs at least two feature dimensions".into()));
        }
        Ok(())
    }

    fn direction(&self, dim: usize) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v / norm
        } else {
            Array1::zeros(dim)
        }
    }
}

/// A synthetic multi-source benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_sources: usize,
    pub n_per_source: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Shifts applied in order to source `j`; empty means no sources are shifted.
    pub source_shifts: Vec<Vec<ShiftSpec>>,
    /// Target drawn from the sources with these weights.
    pub target_mixture: Option<Vec<f64>>,
    /// Extra shift applied to the target after mixing.
    pub target_shift: Option<ShiftSpec>,
    /// Unlabeled adaptation rows; the labeled test draw has the same size.
    pub n_target: usize,
    /// Spread of the class means.
    pub class_sep: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_sources: 2,
            n_per_source: 100,
            dim: 2,
            n_classes: 2,
            source_shifts: Vec::new(),
            target_mixture: None,
            target_shift: None,
            n_target: 100,
            class_sep: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.n_per_source == 0 || self.dim == 0 || self.n_classes == 0 || self.n_target == 0 {
            return Err(Error::Config("benchmark counts must be positive".into()));
        }
        if !(self.class_sep >= 0.0) || !(self.noise >= 0.0) || !self.class_sep.is_finite() || !self.noise.is_finite() {
            return Err(Error::Config(
                "class_sep and noise must be finite and non-negative".into(),
            ));
        }
        if !self.source_shifts.is_empty() && self.source_shifts.len() != self.n_sources {
            return Err(Error::Config(format!(
                "{} source shift lists for {} sources",
                self.source_shifts.len(),
                self.n_sources
            )));
        }
        for s in self.source_shifts.iter().flatten().chain(&self.target_shift) {
            s.validate(self.dim)?;
        }
        match &self.target_mixture {
            None if self.target_shift.is_none() => {
                return Err(Error::Config("target needs a mixture, a shift, or both".into()));
            }
            Some(a) => check_mixture(a, self.n_sources)?,
            None => {}
        }
        Ok(())
    }
}

fn check_mixture(alpha: &[f64], n_sources: usize) -> Result<()> {
    let total: f64 = alpha.iter().sum();
    if alpha.len() != n_sources || alpha.iter().any(|a| !(*a >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "target mixture {alpha:?} is not a distribution over {n_sources} sources"
        )));
    }
    Ok(())
}

/// Generative model of one domain: the shared blobs seen through a list of shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGenerator {
    means: Array2<f64>,
    noise: f64,
    shifts: Vec<ShiftSpec>,
    priors: Vec<f64>,
    domain: String,
}

impl DomainGenerator {
    fn new(means: Array2<f64>, noise: f64, shifts: Vec<ShiftSpec>, domain: String) -> Self {
        let c = means.nrows();
        let mut logits = vec![0.0; c];
        for s in shifts.iter().filter(|s| s.kind == ShiftKind::ClassPrior) {
            for (k, l) in logits.iter_mut().enumerate() {
                let t = if c > 1 { k as f64 / (c - 1) as f64 - 0.5 } else { 0.0 };
                *l += s.magnitude * t;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        Self {
            means,
            noise,
            shifts,
            priors: raw.iter().map(|r| r / total).collect(),
            domain,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn class_priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// A copy of this generator under an additional shift.
    pub fn shifted(&self, shift: ShiftSpec, domain: impl Into<String>) -> Self {
        let mut shifts = self.shifts.clone();
        shifts.push(shift);
        Self::new(self.means.clone(), self.noise, shifts, domain.into())
    }

    /// Class counts for `n` rows: largest-remainder rounding of `n * priors`,
    /// remainder ties going to the lower class index.
    pub fn class_counts(&self, n: usize) -> Vec<usize> {
        let exact: Vec<f64> = self.priors.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        counts
    }

    /// Draws one feature row of class `y`.
    fn draw(&self, y: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let d = self.dim();
        let mut x: Array1<f64> = (0..d)
            .map(|k| self.means[[y, k]] + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for s in &self.shifts {
            match s.kind {
                ShiftKind::Rotation => {
                    let (sin, cos) = s.magnitude.sin_cos();
                    if d >= 2 {
                        let (a, b) = (x[0], x[1]);
                        x[0] = cos * a - sin * b;
                        x[1] = sin * a + cos * b;
                    }
                }
                ShiftKind::Translation => x.scaled_add(s.magnitude, &s.direction(d)),
                ShiftKind::NoiseOverlay => {
                    let amp = s.magnitude * (1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal));
                    x.scaled_add(amp, &s.direction(d));
                }
                ShiftKind::ClassPrior => {}
            }
        }
        x
    }

    /// `n` rows, stratified by class, in shuffled order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = self
            .class_counts(n)
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        labels.shuffle(&mut rng);
        let rows = self.draw_rows(&labels, &mut rng);
        LabeledDataset::new(rows, labels, self.n_classes(), self.domain.clone())
    }

    fn draw_rows(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut rows = Array2::zeros((labels.len(), self.dim()));
        for (mut row, &y) in rows.rows_mut().into_iter().zip(labels) {
            row.assign(&self.draw(y, rng));
        }
        rows
    }
}

/// Generators and drawn data of one benchmark instance.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source_generators: Vec<DomainGenerator>,
    pub sources: Vec<LabeledDataset>,
    /// Adaptation rows; their labels are only for evaluation.
    pub target: LabeledDataset,
    /// Independent labeled draw from the target distribution.
    pub target_test: LabeledDataset,
}

/// Per-stream sub-seed so each dataset of a benchmark has its own RNG stream.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

fn base_means(spec: &BenchmarkSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 0));
    Array2::from_shape_fn((spec.n_classes, spec.dim), |_| {
        spec.class_sep * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn source_generators(spec: &BenchmarkSpec) -> Result<Vec<DomainGenerator>> {
    spec.validate()?;
    let means = base_means(spec);
    Ok((0..spec.n_sources)
        .map(|j| {
            let shifts = spec.source_shifts.get(j).cloned().unwrap_or_default();
            DomainGenerator::new(means.clone(), spec.noise, shifts, format!("source{j}"))
        })
        .collect())
}

/// `J` labeled sources, deterministic per `spec.seed`.
pub fn gen_sources(spec: &BenchmarkSpec) -> Result<Vec<LabeledDataset>> {
    draw_sources(spec, &source_generators(spec)?)
}

fn draw_sources(spec: &BenchmarkSpec, generators: &[DomainGenerator]) -> Result<Vec<LabeledDataset>> {
    generators
        .iter()
        .enumerate()
        .map(|(j, g)| g.sample(spec.n_per_source, stream_seed(spec.seed, 1 + j as u64)))
        .collect()
}

/// `n` rows drawn by first picking a source `j ~ alpha_star` per row, then
/// sampling from that source's generator. Returns the rows and the picked
/// source of each row.
pub fn gen_target_mixture(
    generators: &[DomainGenerator],
    alpha_star: &[f64],
    n: usize,
    seed: u64,
) -> Result<(LabeledDataset, Vec<usize>)> {
    check_mixture(alpha_star, generators.len())?;
    let first = &generators[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(alpha_star).map_err(|e| Error::Config(e.to_string()))?;
    let components: Vec<usize> = (0..n).map(|_| pick.sample(&mut rng)).collect();
    let mut features = Array2::zeros((n, first.dim()));
    let mut labels = vec![0; n];
    for (j, gen) in generators.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| components[i] == j).collect();
        if rows.is_empty() {
            continue;
        }
        let part = gen.sample(rows.len(), rng.random())?;
        for (k, &i) in rows.iter().enumerate() {
            features.row_mut(i).assign(&part.features().row(k));
            labels[i] = part.labels()[k];
        }
    }
    let data = LabeledDataset::new(features, labels, first.n_classes(), "target")?;
    Ok((data, components))
}

/// Draws sources, the adaptation target and a labeled target test set.
pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let generators = source_generators(spec)?;
    let sources = draw_sources(spec, &generators)?;
    let target_gens: Vec<DomainGenerator> = match &spec.target_shift {
        Some(s) => generators.iter().map(|g| g.shifted(*s, "target")).collect(),
        None => generators.clone(),
    };
    let j = spec.n_sources as u64;
    let draw = |stream: u64| -> Result<LabeledDataset> {
        let seed = stream_seed(spec.seed, stream);
        match &spec.target_mixture {
            Some(alpha) => Ok(gen_target_mixture(&target_gens, alpha, spec.n_target, seed)?.0),
            None => {
                let base = DomainGenerator::new(
                    base_means(spec),
                    spec.noise,
                    spec.target_shift.into_iter().collect(),
                    "target".into(),
                );
                base.sample(spec.n_target, seed)
            }
        }
    };
    Ok(Benchmark {
        source_generators: generators,
        sources,
        target: draw(1 + j)?,
        target_test: draw(2 + j)?,
    })
}
