//! Brute-force reference implementations and random fixtures shared by the
//! integration tests. Nothing here calls into the crate's loss or metric code.

#![allow(dead_code)]

use protoverb::hierarchy::{SenseHierarchy, SensePath};
use protoverb::linalg::Matrix;
use protoverb::prototypes::PrototypeSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Cosine as the dot product of the two normalized vectors.
pub fn cos(u: &[f64], w: &[f64]) -> f64 {
    unit(u).iter().zip(unit(w)).map(|(a, b)| a * b).sum()
}

/// `-log( exp(z[gold]) / Σ exp(z) )` evaluated literally.
fn neg_log_softmax(z: &[f64], gold: usize) -> f64 {
    let denom: f64 = z.iter().map(|x| x.exp()).sum();
    -(z[gold].exp() / denom).ln()
}

/// Row index of `path`'s label at `level`, if any.
pub fn label_at(h: &SenseHierarchy, path: &SensePath, level: usize) -> Option<usize> {
    path.0
        .get(level - 1)
        .map(|&id| h.node(id).unwrap().position)
}

pub fn oracle_ins_ins(h: &SenseHierarchy, vecs: &[Vec<f64>], paths: &[SensePath], tau: f64) -> f64 {
    let mut per_level = Vec::new();
    for level in [2, 3] {
        let members: Vec<usize> = (0..vecs.len())
            .filter(|&i| label_at(h, &paths[i], level).is_some())
            .collect();
        if members.len() < 2 {
            continue;
        }
        let mut anchor_terms = Vec::new();
        for &i in &members {
            let yi = label_at(h, &paths[i], level);
            let pos: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&p| p != i && label_at(h, &paths[p], level) == yi)
                .collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = members
                .iter()
                .filter(|&&k| k != i)
                .map(|&k| (cos(&vecs[i], &vecs[k]) / tau).exp())
                .sum();
            let mut t = 0.0;
            for &p in &pos {
                t -= ((cos(&vecs[i], &vecs[p]) / tau).exp() / denom).ln();
            }
            anchor_terms.push(t / pos.len() as f64);
        }
        let level_loss = if anchor_terms.is_empty() {
            0.0
        } else {
            anchor_terms.iter().sum::<f64>() / anchor_terms.len() as f64
        };
        per_level.push(level_loss);
    }
    if per_level.is_empty() {
        0.0
    } else {
        per_level.iter().sum::<f64>() / per_level.len() as f64
    }
}

pub fn oracle_ins_pro(
    h: &SenseHierarchy,
    ps: &PrototypeSet,
    vecs: &[Vec<f64>],
    paths: &[SensePath],
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for (v, p) in vecs.iter().zip(paths) {
        let mut t = 0.0;
        for level in 1..=p.0.len() {
            let protos = ps.level(level).unwrap();
            let z: Vec<f64> = protos.iter_rows().map(|c| cos(v, c) / tau).collect();
            t += neg_log_softmax(&z, label_at(h, p, level).unwrap());
        }
        total += t / p.0.len() as f64;
    }
    total / vecs.len() as f64
}

pub fn oracle_pro_pro(h: &SenseHierarchy, ps: &PrototypeSet, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut m = 0usize;
    for level in 2..=h.depth() {
        let fathers = ps.level(level - 1).unwrap();
        for &node in h.nodes_at_level(level).unwrap() {
            let n = h.node(node).unwrap();
            let parent = h.node(n.parent.unwrap()).unwrap().position;
            let c = ps.level(level).unwrap().row(n.position);
            let z: Vec<f64> = fathers.iter_rows().map(|f| cos(c, f) / tau).collect();
            total += neg_log_softmax(&z, parent);
            m += 1;
        }
    }
    total / m as f64
}

/// Symmetric class-wise alignment loss; `target_of[c]` is the target row of
/// source class `c`.
pub fn oracle_alignment(src: &Matrix, tgt: &Matrix, target_of: &[usize], tau: f64) -> f64 {
    let m = target_of.len();
    let mut total = 0.0;
    for c in 0..m {
        let s = src.row(c);
        let z: Vec<f64> = (0..m)
            .map(|d| cos(s, tgt.row(target_of[d])) / tau)
            .collect();
        total += neg_log_softmax(&z, c);
        let t = tgt.row(target_of[c]);
        let z: Vec<f64> = (0..m).map(|d| cos(t, src.row(d)) / tau).collect();
        total += neg_log_softmax(&z, c);
    }
    total / (2 * m) as f64
}

/// Softmax over raw cosine similarities (no temperature).
pub fn oracle_probs(v: &[f64], protos: &Matrix) -> Vec<f64> {
    let e: Vec<f64> = protos.iter_rows().map(|c| cos(v, c).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per-class F1 from a gold-row/predicted-column confusion matrix.
pub fn oracle_f1(conf: &[Vec<u64>]) -> Vec<f64> {
    let m = conf.len();
    (0..m)
        .map(|c| {
            let tp = conf[c][c] as f64;
            let fp: f64 = (0..m).filter(|&r| r != c).map(|r| conf[r][c] as f64).sum();
            let fn_: f64 = (0..m).filter(|&k| k != c).map(|k| conf[c][k] as f64).sum();
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .collect()
}

/// A random hierarchy with at most 4 level-1 and 11 level-2 senses, and
/// sometimes a few level-3 senses.
pub fn random_hierarchy(rng: &mut ChaCha8Rng) -> SenseHierarchy {
    let m1 = rng.random_range(2..=4);
    let m2 = rng.random_range(2..=11);
    let mut src = String::new();
    for i in 0..m1 {
        src.push_str(&format!("1\tT{i}\t\n"));
    }
    let mut l2_parent = Vec::new();
    for j in 0..m2 {
        let p = rng.random_range(0..m1);
        l2_parent.push(p);
        src.push_str(&format!("2\tS{j}\tT{p}\n"));
    }
    if rng.random_bool(0.3) {
        for k in 0..rng.random_range(2..=4) {
            let j = rng.random_range(0..m2);
            src.push_str(&format!("3\tR{k}\tT{}.S{j}\n", l2_parent[j]));
        }
    }
    SenseHierarchy::parse(&src).unwrap()
}

/// A random full-depth or truncated lineage.
pub fn random_path(rng: &mut ChaCha8Rng, h: &SenseHierarchy) -> SensePath {
    let level = if rng.random_bool(0.15) {
        1
    } else {
        rng.random_range(1..=h.depth())
    };
    let nodes = h.nodes_at_level(level).unwrap();
    h.lineage(nodes[rng.random_range(0..nodes.len())]).unwrap()
}

pub fn random_prototypes(rng: &mut ChaCha8Rng, h: &SenseHierarchy, dim: usize) -> PrototypeSet {
    let levels = (1..=h.depth())
        .map(|l| {
            let m = h.level_size(l).unwrap();
            Matrix::from_rows(&(0..m).map(|_| gaussian(rng, dim)).collect::<Vec<_>>())
        })
        .collect();
    PrototypeSet::from_levels(levels).unwrap()
}

/// `|fd − a| ≤ tol · max(|fd|, |a|, floor)`.
pub fn grad_close(fd: f64, a: f64, tol: f64) -> bool {
    (fd - a).abs() <= tol * fd.abs().max(a.abs()).max(1e-3)
}
