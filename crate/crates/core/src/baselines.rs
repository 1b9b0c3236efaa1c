//! Competitors for controlled comparison with WJDOT.
//!
//! * `Baseline`: the pretrained global head applied to the target as is.
//! * `Cjdot`: all sources concatenated into one uniformly weighted measure,
//!   i.e. the WJDOT loop with `alpha` frozen at `N_j / sum N`.
//! * `Mjdot`: one JDOT problem per source against the proxy target; `f`
//!   descends the unweighted mean of the per-source losses.
//!
//! The two JDOT extensions are reconstructions: both reuse the WJDOT
//! machinery so that differences in outcome come only from how sources are
//! weighted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::measures::{FeatureSet, LabeledDataset, UnlabeledDataset};
use crate::model::{Dense, EmbedClassifier, HeadId};
use crate::wjdot::{evaluate, run, Coupling, Metrics, WjdotConfig, WjdotResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Cjdot,
    Mjdot,
    Wjdot,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Cjdot, Method::Mjdot, Method::Wjdot];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Cjdot => "cjdot",
            Method::Mjdot => "mjdot",
            Method::Wjdot => "wjdot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub method: Method,
    pub target_head: Dense,
    pub metrics: Metrics,
    /// Adaptation run behind the result; `None` for the source-only baseline.
    pub adaptation: Option<WjdotResult>,
}

/// Source-only: the global head on the target, no adaptation.
pub fn run_baseline(model: &EmbedClassifier, target_test: &LabeledDataset) -> Result<BaselineResult> {
    let head = model
        .head(HeadId::Global)
        .ok_or_else(|| Error::Config("the baseline needs a model with a global head".into()))?
        .clone();
    Ok(BaselineResult {
        method: Method::Baseline,
        target_head: head,
        metrics: evaluate(model, HeadId::Global, target_test)?,
        adaptation: None,
    })
}

/// JDOT on the concatenation of all sources.
pub fn run_cjdot(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    model: &EmbedClassifier,
    cfg: &WjdotConfig,
    target_test: &LabeledDataset,
) -> Result<BaselineResult> {
    let total: usize = sources.iter().map(|s| s.len()).sum();
    let alpha0 = sources.iter().map(|s| s.len() as f64 / total.max(1) as f64).collect();
    let result = run(sources, target, model, cfg, Coupling::Mixture { alpha0, learn: false })?;
    finish(Method::Cjdot, result, target_test)
}

/// Mean of per-source JDOT problems.
pub fn run_mjdot(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    model: &EmbedClassifier,
    cfg: &WjdotConfig,
    target_test: &LabeledDataset,
) -> Result<BaselineResult> {
    let result = run(sources, target, model, cfg, Coupling::PerSource)?;
    finish(Method::Mjdot, result, target_test)
}

/// WJDOT wrapped in the same result type as its competitors.
pub fn run_wjdot(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    model: &EmbedClassifier,
    cfg: &WjdotConfig,
    target_test: &LabeledDataset,
) -> Result<BaselineResult> {
    let result = crate::wjdot::fit(sources, target, model, cfg)?;
    finish(Method::Wjdot, result, target_test)
}

fn finish(method: Method, result: WjdotResult, target_test: &LabeledDataset) -> Result<BaselineResult> {
    Ok(BaselineResult {
        method,
        target_head: result.target_head.clone(),
        metrics: result.evaluate(target_test)?,
        adaptation: Some(result),
    })
}
