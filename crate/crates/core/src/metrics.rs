//! Per-level prediction and evaluation.
//!
//! Prediction is a plain softmax over cosine similarities (no temperature).
//! Evaluation scores each test instance once: it is correct when the
//! predicted sense is any of its gold senses at that level.

use thiserror::Error;

use crate::corpus::Instance;
use crate::hierarchy::{NodeId, SenseHierarchy};
use crate::linalg::{argmax, softmax};
use crate::prototypes::{similarities, PrototypeError, PrototypeSet};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error("level {0} is not declared")]
    UndeclaredLevel(usize),
    #[error("instances without a gold label at level {level}: {}", ids.join(", "))]
    MissingGold { level: usize, ids: Vec<String> },
    #[error("confusion matrix must be square, got {rows} rows with a row of length {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("{vecs} vectors for {instances} instances")]
    LengthMismatch { vecs: usize, instances: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub level: usize,
    pub probs: Vec<f64>,
    /// Row index of the most probable sense; ties go to the lowest index.
    pub argmax: usize,
    pub node: NodeId,
}

/// Softmax over cosine similarities to the prototypes at `level`.
pub fn predict(
    v: &[f64],
    ps: &PrototypeSet,
    h: &SenseHierarchy,
    level: usize,
) -> Result<Prediction, MetricsError> {
    let nodes = h
        .nodes_at_level(level)
        .map_err(|_| MetricsError::UndeclaredLevel(level))?;
    let sims = similarities(v, ps, level)?;
    let probs = softmax(&sims);
    let best = argmax(&probs);
    Ok(Prediction {
        level,
        probs,
        argmax: best,
        node: nodes[best],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub level: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `(class name, F1)` in hierarchy order.
    pub per_class_f1: Vec<(String, f64)>,
    /// Rows are gold classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub count: usize,
}

/// F1 per class from a gold × predicted confusion matrix. Classes with
/// `P + R = 0` score 0.
pub fn per_class_f1(confusion: &[Vec<u64>]) -> Result<Vec<f64>, MetricsError> {
    let n = confusion.len();
    if let Some(row) = confusion.iter().find(|r| r.len() != n) {
        return Err(MetricsError::NotSquare {
            rows: n,
            cols: row.len(),
        });
    }
    Ok((0..n)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let actual: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(confusion: &[Vec<u64>]) -> Result<f64, MetricsError> {
    let f1 = per_class_f1(confusion)?;
    if f1.is_empty() {
        return Ok(0.0);
    }
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Scores precomputed instance vectors against their gold labels at `level`.
///
/// A hit is credited to the matched gold class; a miss is charged to the
/// first-listed gold class.
pub fn evaluate_vectors(
    vecs: &[Vec<f64>],
    instances: &[Instance],
    ps: &PrototypeSet,
    h: &SenseHierarchy,
    level: usize,
) -> Result<MetricsReport, MetricsError> {
    if vecs.len() != instances.len() {
        return Err(MetricsError::LengthMismatch {
            vecs: vecs.len(),
            instances: instances.len(),
        });
    }
    let nodes = h
        .nodes_at_level(level)
        .map_err(|_| MetricsError::UndeclaredLevel(level))?;
    let golds: Vec<Vec<NodeId>> = instances.iter().map(|i| i.golds_at(level)).collect();
    let missing: Vec<String> = instances
        .iter()
        .zip(&golds)
        .filter(|(_, g)| g.is_empty())
        .map(|(i, _)| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingGold {
            level,
            ids: missing,
        });
    }
    let m = nodes.len();
    let mut confusion = vec![vec![0u64; m]; m];
    let mut correct = 0usize;
    for (v, gold) in vecs.iter().zip(&golds) {
        let pred = predict(v, ps, h, level)?;
        let row = if gold.contains(&pred.node) {
            correct += 1;
            pred.argmax
        } else {
            h.node(gold[0]).expect("gold from hierarchy").position
        };
        confusion[row][pred.argmax] += 1;
    }
    let f1 = per_class_f1(&confusion)?;
    let accuracy = if instances.is_empty() {
        0.0
    } else {
        correct as f64 / instances.len() as f64
    };
    Ok(MetricsReport {
        level,
        accuracy,
        macro_f1: if m == 0 {
            0.0
        } else {
            f1.iter().sum::<f64>() / m as f64
        },
        per_class_f1: nodes
            .iter()
            .map(|&id| h.name(id).to_string())
            .zip(f1)
            .collect(),
        confusion,
        count: instances.len(),
    })
}

impl MetricsReport {
    /// JSON report with every real printed to four decimals.
    pub fn to_json(&self) -> String {
        let per_class: Vec<String> = self
            .per_class_f1
            .iter()
            .map(|(name, f)| format!("{}: {f:.4}", serde_json::to_string(name).expect("string")))
            .collect();
        let confusion: Vec<String> = self
            .confusion
            .iter()
            .map(|r| {
                format!(
                    "[{}]",
                    r.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
                )
            })
            .collect();
        format!(
            "{{\n  \"level\": {},\n  \"count\": {},\n  \"accuracy\": {:.4},\n  \"macro_f1\": {:.4},\n  \"per_class_f1\": {{{}}},\n  \"confusion\": [{}]\n}}\n",
            self.level,
            self.count,
            self.accuracy,
            self.macro_f1,
            per_class.join(", "),
            confusion.join(", ")
        )
    }
}
