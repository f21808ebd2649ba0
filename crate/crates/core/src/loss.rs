//! Multi-label weighted mean log loss and accuracy metrics.
//!
//! `loss = (1/B) Σ_b Σ_l w_l · (−y log p − (1−y) log(1−p))` with `p` clipped to
//! `[eps, 1−eps]` and `Σ w_l = 1`. The default weights are `(2,1,1,1,1,1)/7`,
//! the "any" label at index 0 counting double.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label at flat index {index} is {value}, expected 0 or 1")]
    NonBinaryLabel { index: usize, value: f64 },
    #[error("probability at flat index {index} is {value}, outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error("predictions {probs:?} and labels {labels:?} must both be [B, L] with equal shape")]
    Shape {
        probs: Vec<usize>,
        labels: Vec<usize>,
    },
    #[error("{labels} label columns but {weights} weights")]
    WeightCount { labels: usize, weights: usize },
    #[error("invalid label weights: {0}")]
    Weights(String),
}

/// Non-negative label weights normalised to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelWeights(Vec<f64>);

impl LabelWeights {
    pub fn new(raw: &[f64]) -> Result<Self, LossError> {
        if raw.is_empty() {
            return Err(LossError::Weights("no weights".into()));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Weights(format!("{raw:?} has a negative or non-finite entry")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(LossError::Weights("weights sum to zero".into()));
        }
        Ok(Self(raw.iter().map(|w| w / total).collect()))
    }

    /// Index 0 ("any") weighted 2, every subtype 1.
    pub fn standard(num_labels: usize) -> Result<Self, LossError> {
        let raw: Vec<f64> = (0..num_labels)
            .map(|i| if i == 0 && num_labels > 1 { 2.0 } else { 1.0 })
            .collect();
        Self::new(&raw)
    }

    pub fn uniform(num_labels: usize) -> Result<Self, LossError> {
        Self::new(&vec![1.0; num_labels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which "accuracy" to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Mean over all `B·L` label decisions.
    #[default]
    PerLabel,
    /// Fraction of samples with every label right.
    ExactMatch,
    /// Accuracy of the "any" column (index 0) alone.
    AnyLabel,
}

fn check(probs: &Tensor, labels: &Tensor, weights: Option<&LabelWeights>) -> Result<(usize, usize), LossError> {
    if probs.rank() != 2 || probs.shape() != labels.shape() {
        return Err(LossError::Shape {
            probs: probs.shape().to_vec(),
            labels: labels.shape().to_vec(),
        });
    }
    let (b, l) = (probs.shape()[0], probs.shape()[1]);
    if let Some(w) = weights {
        if w.len() != l {
            return Err(LossError::WeightCount {
                labels: l,
                weights: w.len(),
            });
        }
    }
    if let Some((index, &value)) = labels
        .data()
        .iter()
        .enumerate()
        .find(|(_, &y)| y != 0.0 && y != 1.0)
    {
        return Err(LossError::NonBinaryLabel { index, value });
    }
    if let Some((index, &value)) = probs
        .data()
        .iter()
        .enumerate()
        .find(|(_, &p)| !(0.0..=1.0).contains(&p))
    {
        return Err(LossError::ProbabilityRange { index, value });
    }
    Ok((b, l))
}

/// Loss value without recording a graph.
pub fn weighted_log_loss_value(
    probs: &Tensor,
    labels: &Tensor,
    weights: &LabelWeights,
    eps: f64,
) -> Result<f64, LossError> {
    let (b, l) = check(probs, labels, Some(weights))?;
    let w = weights.as_slice();
    let mut total = 0.0;
    for (i, (&p, &y)) in probs.data().iter().zip(labels.data()).enumerate() {
        let p = p.clamp(eps, 1.0 - eps);
        total += w[i % l] * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / b as f64)
}

/// Records the loss on `tape` as a scalar node differentiable in `probs`.
/// Clipped entries receive zero gradient.
pub fn weighted_log_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &Tensor,
    weights: &LabelWeights,
    eps: f64,
) -> Result<Var, LossError> {
    let value = weighted_log_loss_value(tape.value(probs), labels, weights, eps)?;
    let (b, l) = (labels.shape()[0], labels.shape()[1]);
    let y = labels.data().to_vec();
    let w = weights.as_slice().to_vec();
    let backward = Box::new(move |inputs: &[&Tensor], _out: &Tensor, g: &[f64]| {
        let scale = g[0] / b as f64;
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&y)
            .enumerate()
            .map(|(i, (&p, &y))| {
                if p < eps || p > 1.0 - eps {
                    0.0
                } else {
                    scale * w[i % l] * (-y / p + (1.0 - y) / (1.0 - p))
                }
            })
            .collect();
        vec![Some(grad)]
    });
    Ok(tape.custom("weighted_log_loss", &[probs], Tensor::scalar(value), backward))
}

/// Mean over `B·L` of `[(p ≥ threshold) == y]`.
pub fn binary_accuracy(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<f64, LossError> {
    accuracy(probs, labels, threshold, AccuracyMode::PerLabel)
}

pub fn accuracy(
    probs: &Tensor,
    labels: &Tensor,
    threshold: f64,
    mode: AccuracyMode,
) -> Result<f64, LossError> {
    let (b, l) = check(probs, labels, None)?;
    let hit = |i: usize| (probs.data()[i] >= threshold) == (labels.data()[i] == 1.0);
    let acc = match mode {
        AccuracyMode::PerLabel => (0..b * l).filter(|&i| hit(i)).count() as f64 / (b * l) as f64,
        AccuracyMode::ExactMatch => {
            (0..b).filter(|r| (0..l).all(|c| hit(r * l + c))).count() as f64 / b as f64
        }
        AccuracyMode::AnyLabel => (0..b).filter(|r| hit(r * l)).count() as f64 / b as f64,
    };
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub loss: f64,
    pub accuracy: f64,
    pub per_label_accuracy: Vec<f64>,
    /// Positive label count per column.
    pub positives: Vec<usize>,
}

pub fn metrics_report(
    probs: &Tensor,
    labels: &Tensor,
    weights: &LabelWeights,
    eps: f64,
    mode: AccuracyMode,
) -> Result<MetricsReport, LossError> {
    let loss = weighted_log_loss_value(probs, labels, weights, eps)?;
    let accuracy = accuracy(probs, labels, 0.5, mode)?;
    let (b, l) = (probs.shape()[0], probs.shape()[1]);
    let mut per_label_accuracy = vec![0.0; l];
    let mut positives = vec![0; l];
    for r in 0..b {
        for c in 0..l {
            let i = r * l + c;
            let y = labels.data()[i] == 1.0;
            if (probs.data()[i] >= 0.5) == y {
                per_label_accuracy[c] += 1.0;
            }
            positives[c] += usize::from(y);
        }
    }
    per_label_accuracy.iter_mut().for_each(|a| *a /= b as f64);
    Ok(MetricsReport {
        loss,
        accuracy,
        per_label_accuracy,
        positives,
    })
}

impl MetricsReport {
    /// `key=value` lines.
    pub fn to_kv_block(&self) -> String {
        let mut out = format!("loss={:.8}\naccuracy={:.6}\n", self.loss, self.accuracy);
        for (i, a) in self.per_label_accuracy.iter().enumerate() {
            out.push_str(&format!("acc_l{i}={a:.6}\n"));
        }
        for (i, p) in self.positives.iter().enumerate() {
            out.push_str(&format!("positives_l{i}={p}\n"));
        }
        out
    }

    pub fn csv_header(num_labels: usize) -> String {
        let mut h = String::from("step,loss,accuracy");
        for i in 0..num_labels {
            h.push_str(&format!(",acc_l{i}"));
        }
        h
    }

    pub fn csv_row(&self, step: u64) -> String {
        let mut row = format!("{step},{:.8},{:.6}", self.loss, self.accuracy);
        for a in &self.per_label_accuracy {
            row.push_str(&format!(",{a:.6}"));
        }
        row
    }
}
