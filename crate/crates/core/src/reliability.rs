//! Pseudo-label reliability: epoch-linear absolute reliability, pairwise
//! confidence-dominance ratios, per-pair thresholds, pseudo-label filtering
//! and distillation weights.

use num_rational::Ratio;
use serde::Serialize;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::students::StudentOutput;

/// Returns `(β, λ_u)` with `β = e / E_max` and `λ_u = λ_0 (1 − β) + β`.
pub fn absolute_reliability(epoch: usize, max_epochs: usize, lambda0: f64) -> Result<(f64, f64)> {
    if max_epochs == 0 || epoch > max_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {max_epochs}] or empty schedule"
        )));
    }
    let beta = epoch as f64 / max_epochs as f64;
    Ok((beta, lambda0 * (1.0 - beta) + beta))
}

/// Add-one-smoothed counts of points where student `i` is strictly more
/// confident than student `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DominanceCounts {
    students: usize,
    raw: Vec<u64>,
}

impl DominanceCounts {
    /// Builds counts directly from a raw `S×S` table (row-major, diagonal ignored).
    pub fn from_raw(students: usize, raw: Vec<u64>) -> Result<Self> {
        Error::check_len("dominance table", students * students, raw.len())?;
        Ok(Self { students, raw })
    }

    pub fn students(&self) -> usize {
        self.students
    }

    pub fn raw(&self, i: usize, j: usize) -> u64 {
        self.raw[i * self.students + j]
    }

    /// Smoothed count `N[i][j] = raw + 1`.
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.raw(i, j) + 1
    }
}

pub fn dominance_counts(confidences: &[&[f64]]) -> Result<DominanceCounts> {
    let s = confidences.len();
    if s < 2 {
        return Err(Error::InvalidArgument("dominance needs at least two students".into()));
    }
    let m = confidences[0].len();
    for c in confidences {
        Error::check_len("student confidences", m, c.len())?;
    }
    let mut raw = vec![0u64; s * s];
    for i in 0..s {
        for j in i + 1..s {
            for (a, b) in confidences[i].iter().zip(confidences[j]) {
                if a > b {
                    raw[i * s + j] += 1;
                } else if b > a {
                    raw[j * s + i] += 1;
                }
            }
        }
    }
    Ok(DominanceCounts { students: s, raw })
}

/// `γ[i][j] = N[i][j] / N[j][i]` as an exact ratio of smoothed counts.
pub fn relative_reliability(counts: &DominanceCounts, i: usize, j: usize) -> Ratio<u64> {
    Ratio::new(counts.get(i, j), counts.get(j, i))
}

/// `δ = min(δ_0, δ_0 · (1 − β) / γ)`.
pub fn threshold(delta0: f64, beta: f64, gamma: Ratio<u64>) -> f64 {
    let inv_gamma = *gamma.denom() as f64 / *gamma.numer() as f64;
    delta0.min(delta0 * ((1.0 - beta) * inv_gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<Label>,
    pub mask: Vec<bool>,
}

impl PseudoLabels {
    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Keeps eligible points whose source confidence strictly exceeds `delta`.
pub fn filter_pseudo_labels(source: &StudentOutput, delta: f64, eligible: &[bool]) -> Result<PseudoLabels> {
    Error::check_len("eligibility mask", source.len(), eligible.len())?;
    let mask: Vec<bool> = source
        .confidence
        .iter()
        .zip(eligible)
        .map(|(&c, &e)| e && c > delta)
        .collect();
    Ok(PseudoLabels {
        labels: source.predictions.clone(),
        mask,
    })
}

fn normalize_last_complement(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut out = Vec::with_capacity(raw.len());
    let mut acc = 0.0;
    for (k, &r) in raw.iter().enumerate() {
        let w = if k + 1 == raw.len() { 1.0 - acc } else { r / total };
        acc += w;
        out.push(w);
    }
    out
}

/// Weights of every source feeding `target`, in ascending source order.
///
/// With two sources `i, j`: `ω_i = N[i][j] / (N[i][j] + N[j][i])`,
/// `ω_j = 1 − ω_i`. With more, each source is weighted by its summed
/// dominance over the other non-target peers. A lone source gets weight 1.
pub fn distillation_weights(counts: &DominanceCounts, target: usize) -> Vec<(usize, f64)> {
    let sources: Vec<usize> = (0..counts.students()).filter(|&s| s != target).collect();
    if sources.len() == 1 {
        return vec![(sources[0], 1.0)];
    }
    let raw: Vec<f64> = sources
        .iter()
        .map(|&i| {
            sources
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| counts.get(i, j) as f64)
                .sum()
        })
        .collect();
    sources.into_iter().zip(normalize_last_complement(&raw)).collect()
}

/// Uniform weights over the sources of `target`.
pub fn uniform_weights(students: usize, target: usize) -> Vec<(usize, f64)> {
    let sources: Vec<usize> = (0..students).filter(|&s| s != target).collect();
    let raw = vec![1.0; sources.len()];
    sources.into_iter().zip(normalize_last_complement(&raw)).collect()
}

/// How thresholds and weights are derived each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReliabilityPolicy {
    /// Dominance-driven γ, δ and ω.
    Adaptive,
    /// Plain mutual distillation: γ ≡ 1, δ ≡ δ_0, uniform ω.
    Naive,
}

/// Per-step snapshot shared by all students' loss computations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityState {
    pub beta: f64,
    pub lambda_u: f64,
    #[serde(skip)]
    pub counts: DominanceCounts,
    /// `gamma[i][j]`, diagonal 1.
    pub gamma: Vec<Vec<f64>>,
    /// `delta[source][target]`, diagonal unused.
    pub delta: Vec<Vec<f64>>,
    /// `omega[target]` = (source, weight) pairs.
    pub omega: Vec<Vec<(usize, f64)>>,
}

impl ReliabilityState {
    /// `fixed_delta` overrides every threshold (δ ≡ const) when set.
    pub fn compute(
        policy: ReliabilityPolicy,
        beta: f64,
        lambda_u: f64,
        delta0: f64,
        fixed_delta: Option<f64>,
        confidences: &[&[f64]],
    ) -> Result<Self> {
        let counts = dominance_counts(confidences)?;
        let s = counts.students();
        let mut gamma = vec![vec![1.0; s]; s];
        let mut delta = vec![vec![delta0; s]; s];
        for i in 0..s {
            for j in (0..s).filter(|&j| j != i) {
                let g = match policy {
                    ReliabilityPolicy::Adaptive => relative_reliability(&counts, i, j),
                    ReliabilityPolicy::Naive => Ratio::from_integer(1),
                };
                gamma[i][j] = *g.numer() as f64 / *g.denom() as f64;
                delta[i][j] = match (fixed_delta, policy) {
                    (Some(d), _) => d,
                    (None, ReliabilityPolicy::Naive) => delta0,
                    (None, ReliabilityPolicy::Adaptive) => threshold(delta0, beta, g),
                };
            }
        }
        let omega = (0..s)
            .map(|t| match policy {
                ReliabilityPolicy::Adaptive => distillation_weights(&counts, t),
                ReliabilityPolicy::Naive => uniform_weights(s, t),
            })
            .collect();
        Ok(Self {
            beta,
            lambda_u,
            counts,
            gamma,
            delta,
            omega,
        })
    }
}
