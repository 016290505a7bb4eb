//! Prototype quality analyses: mean cosine distance from each prototype to
//! its own test examples, and the label make-up of each prototype's nearest
//! test examples.

use thiserror::Error;

use crate::corpus::Instance;
use crate::hierarchy::SenseHierarchy;
use crate::prototypes::{cosine_sim, PrototypeError, PrototypeSet};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("{vecs} vectors for {instances} instances")]
    LengthMismatch { vecs: usize, instances: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub level: usize,
    pub k: usize,
    pub class_names: Vec<String>,
    /// Mean `1 − cos` per class; `None` when the class has no test examples.
    pub avg_cos_distance: Vec<Option<f64>>,
    /// `neighbor_dist[p][c]`: share of prototype `p`'s top-k neighbours labelled `c`.
    pub neighbor_dist: Vec<Vec<f64>>,
}

fn check_lengths(vecs: &[Vec<f64>], instances: &[Instance]) -> Result<(), DiagnosticsError> {
    if vecs.len() != instances.len() {
        return Err(DiagnosticsError::LengthMismatch {
            vecs: vecs.len(),
            instances: instances.len(),
        });
    }
    Ok(())
}

/// Mean cosine distance between each prototype at `level` and the test
/// examples carrying that class among their golds.
pub fn avg_cos_distance(
    ps: &PrototypeSet,
    vecs: &[Vec<f64>],
    instances: &[Instance],
    h: &SenseHierarchy,
    level: usize,
) -> Result<Vec<Option<f64>>, DiagnosticsError> {
    check_lengths(vecs, instances)?;
    let protos = ps.level(level)?;
    let mut sums = vec![0.0; protos.rows()];
    let mut counts = vec![0usize; protos.rows()];
    for (v, inst) in vecs.iter().zip(instances) {
        for gold in inst.golds_at(level) {
            let c = h.node(gold).expect("gold from hierarchy").position;
            sums[c] += 1.0 - cosine_sim(v, protos.row(c))?;
            counts[c] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// For each prototype at `level`, the label histogram of its `k` most
/// similar test examples (ties by instance order). A neighbour with several
/// golds splits its unit of mass evenly among them.
pub fn topk_neighbors(
    ps: &PrototypeSet,
    vecs: &[Vec<f64>],
    instances: &[Instance],
    h: &SenseHierarchy,
    level: usize,
    k: usize,
) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    check_lengths(vecs, instances)?;
    if k == 0 {
        return Err(DiagnosticsError::ZeroK);
    }
    if instances.is_empty() {
        return Err(DiagnosticsError::EmptyTestSet);
    }
    let protos = ps.level(level)?;
    let golds: Vec<Vec<usize>> = instances
        .iter()
        .map(|i| {
            i.golds_at(level)
                .into_iter()
                .map(|g| h.node(g).expect("gold from hierarchy").position)
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(protos.rows());
    for c in protos.iter_rows() {
        let mut scored = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| cosine_sim(v, c).map(|s| (i, s)))
            .collect::<Result<Vec<_>, _>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut hist = vec![0.0; protos.rows()];
        for &(i, _) in scored.iter().take(k) {
            let g = &golds[i];
            let share = 1.0 / g.len().max(1) as f64;
            for &label in g {
                hist[label] += share;
            }
        }
        out.push(hist);
    }
    Ok(out)
}

pub fn analyze(
    ps: &PrototypeSet,
    vecs: &[Vec<f64>],
    instances: &[Instance],
    h: &SenseHierarchy,
    level: usize,
    k: usize,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    if instances.is_empty() {
        return Err(DiagnosticsError::EmptyTestSet);
    }
    let class_names = h
        .nodes_at_level(level)
        .map_err(|_| PrototypeError::UndeclaredLevel(level))?
        .iter()
        .map(|&id| h.name(id).to_string())
        .collect();
    Ok(DiagnosticsReport {
        level,
        k,
        class_names,
        avg_cos_distance: avg_cos_distance(ps, vecs, instances, h, level)?,
        neighbor_dist: topk_neighbors(ps, vecs, instances, h, level, k)?,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl DiagnosticsReport {
    /// `class,distance` rows; classes without test examples print `NA`.
    pub fn avg_distance_csv(&self) -> String {
        let mut out = String::from("class,distance\n");
        for (name, d) in self.class_names.iter().zip(&self.avg_cos_distance) {
            match d {
                Some(d) => out.push_str(&format!("{},{d:.4}\n", csv_field(name))),
                None => out.push_str(&format!("{},NA\n", csv_field(name))),
            }
        }
        out
    }

    /// `prototype,label,count` rows, non-zero counts only.
    pub fn neighbors_csv(&self) -> String {
        let mut out = String::from("prototype,label,count\n");
        for (p, hist) in self.class_names.iter().zip(&self.neighbor_dist) {
            for (label, &count) in self.class_names.iter().zip(hist) {
                if count > 0.0 {
                    out.push_str(&format!(
                        "{},{},{count:.4}\n",
                        csv_field(p),
                        csv_field(label)
                    ));
                }
            }
        }
        out
    }
}
