//! Group scores over mixture weights.
//!
//! With the sources split into two groups `A` and `B`, the score of a group
//! is the total mixture weight it receives. A target is assigned to group `B`
//! when `score_b > score_a`; ties stay in group `A`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    GroupA,
    GroupB,
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::GroupA => "group_a",
            Diagnosis::GroupB => "group_b",
        })
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group_a" => Ok(Diagnosis::GroupA),
            "group_b" => Ok(Diagnosis::GroupB),
            other => Err(Error::Input(format!("unknown group {other:?}"))),
        }
    }
}

/// Two disjoint, non-empty sets of source indices that together cover `0..J`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    group_a: Vec<usize>,
    group_b: Vec<usize>,
}

impl GroupPartition {
    pub fn new(group_a: Vec<usize>, group_b: Vec<usize>, n_sources: usize) -> Result<Self> {
        if group_a.is_empty() || group_b.is_empty() {
            return Err(Error::Input("both groups need at least one source".into()));
        }
        let a: BTreeSet<usize> = group_a.iter().copied().collect();
        let b: BTreeSet<usize> = group_b.iter().copied().collect();
        if a.len() != group_a.len() || b.len() != group_b.len() {
            return Err(Error::Input("group lists contain duplicates".into()));
        }
        if let Some(j) = a.intersection(&b).next() {
            return Err(Error::Input(format!("source {j} is in both groups")));
        }
        let all: BTreeSet<usize> = a.union(&b).copied().collect();
        if all != (0..n_sources).collect() {
            return Err(Error::Input(format!("groups do not cover sources 0..{n_sources}")));
        }
        Ok(Self {
            group_a: a.into_iter().collect(),
            group_b: b.into_iter().collect(),
        })
    }

    pub fn group_a(&self) -> &[usize] {
        &self.group_a
    }

    pub fn group_b(&self) -> &[usize] {
        &self.group_b
    }

    pub fn n_sources(&self) -> usize {
        self.group_a.len() + self.group_b.len()
    }

    pub fn group_of(&self, source: usize) -> Option<Diagnosis> {
        if self.group_a.contains(&source) {
            Some(Diagnosis::GroupA)
        } else if self.group_b.contains(&source) {
            Some(Diagnosis::GroupB)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupScores {
    pub score_a: f64,
    pub score_b: f64,
    pub diagnosis: Diagnosis,
}

pub fn group_scores(alpha: &[f64], part: &GroupPartition) -> Result<GroupScores> {
    if alpha.len() != part.n_sources() {
        return Err(Error::Input(format!(
            "{} weights for a partition of {} sources",
            alpha.len(),
            part.n_sources()
        )));
    }
    let score_a: f64 = part.group_a.iter().map(|&j| alpha[j]).sum();
    let score_b: f64 = part.group_b.iter().map(|&j| alpha[j]).sum();
    let diagnosis = if score_b > score_a {
        Diagnosis::GroupB
    } else {
        Diagnosis::GroupA
    };
    Ok(GroupScores {
        score_a,
        score_b,
        diagnosis,
    })
}

/// Correct diagnoses out of the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosisAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl DiagnosisAccuracy {
    pub fn ratio(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn diagnosis_accuracy(results: &[(GroupScores, Diagnosis)]) -> Result<DiagnosisAccuracy> {
    if results.is_empty() {
        return Err(Error::Input("no diagnoses to score".into()));
    }
    Ok(DiagnosisAccuracy {
        correct: results.iter().filter(|(s, truth)| s.diagnosis == *truth).count(),
        total: results.len(),
    })
}
