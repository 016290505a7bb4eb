//! The three contrastive objectives and their analytic gradients.
//!
//! * instance–instance: supervised contrastive loss over ordered pairs in a
//!   batch, positives sharing a sense at level 2 or 3;
//! * instance–prototype: softmax cross-entropy of each instance against the
//!   prototypes of every level its sense path covers;
//! * prototype–prototype: each child prototype against all prototypes one
//!   level up, its parent being the positive.
//!
//! Similarity is cosine throughout, divided by the temperature.

use thiserror::Error;

use crate::hierarchy::{SenseHierarchy, SensePath};
use crate::linalg::{cosine_grad_into, cosine_unchecked, log_sum_exp, norm, Matrix, NORM_FLOOR};
use crate::prototypes::PrototypeSet;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("instance–instance loss needs at least 2 instances, got {0}")]
    BatchTooSmall(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("instance {index} has no label at level {level}")]
    MissingLabel { index: usize, level: usize },
    #[error("prototype–prototype loss needs at least two levels, got {0}")]
    TooFewLevels(usize),
    #[error("instance {index} has norm {norm:e}, below the zero guard")]
    ZeroNormInstance { index: usize, norm: f64 },
    #[error("level {level} prototype {row} has norm below the zero guard")]
    ZeroNormPrototype { level: usize, row: usize },
    #[error("instance {index} is labelled at level {level}, which has no prototypes")]
    LabelOutsidePrototypes { index: usize, level: usize },
    #[error("batch holds {vecs} vectors but {paths} label paths")]
    LengthMismatch { vecs: usize, paths: usize },
    #[error("vector dimension {got} does not match prototype dimension {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Instance vectors with their resolved sense paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub vecs: Vec<Vec<f64>>,
    pub paths: Vec<SensePath>,
    pub tau: f64,
}

impl Batch {
    pub fn new(vecs: Vec<Vec<f64>>, paths: Vec<SensePath>, tau: f64) -> Result<Self, LossError> {
        if vecs.len() != paths.len() {
            return Err(LossError::LengthMismatch {
                vecs: vecs.len(),
                paths: paths.len(),
            });
        }
        check_tau(tau)?;
        for (index, v) in vecs.iter().enumerate() {
            let n = norm(v);
            if !(n > NORM_FLOOR) || !n.is_finite() {
                return Err(LossError::ZeroNormInstance { index, norm: n });
            }
        }
        Ok(Self { vecs, paths, tau })
    }

    pub fn len(&self) -> usize {
        self.vecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vecs.is_empty()
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.vecs.iter().map(|v| vec![0.0; v.len()]).collect()
    }
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

fn check_prototypes(ps: &PrototypeSet) -> Result<(), LossError> {
    for (li, m) in ps.levels().iter().enumerate() {
        for (row, r) in m.iter_rows().enumerate() {
            if !(norm(r) > NORM_FLOOR) {
                return Err(LossError::ZeroNormPrototype { level: li + 1, row });
            }
        }
    }
    Ok(())
}

fn zero_like(ps: &PrototypeSet) -> Vec<Matrix> {
    ps.levels()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect()
}

/// Which optional terms enter the combined objective. The
/// instance–prototype term is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub ins_ins: bool,
    pub pro_pro: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            ins_ins: true,
            pro_pro: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ins_ins: f64,
    pub ins_pro: f64,
    pub pro_pro: f64,
    pub total: f64,
    /// `∂L/∂v` for every instance in the batch.
    pub grad_vecs: Vec<Vec<f64>>,
    /// `∂L/∂C`, one matrix per level.
    pub grad_prototypes: Vec<Matrix>,
}

/// Instance–instance loss at one level over the instances listed in `members`.
/// Gradients are scaled by `weight` and accumulated into `grads`.
fn ins_ins_over(
    b: &Batch,
    level: usize,
    members: &[usize],
    weight: f64,
    grads: &mut [Vec<f64>],
) -> f64 {
    let label = |i: usize| b.paths[i].at_level(level).expect("members are labelled");
    let anchors: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| members.iter().any(|&j| j != i && label(j) == label(i)))
        .collect();
    if anchors.is_empty() {
        return 0.0;
    }
    let scale = weight / anchors.len() as f64;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(members.len());
    for &i in &anchors {
        let others: Vec<usize> = members.iter().copied().filter(|&k| k != i).collect();
        logits.clear();
        logits.extend(
            others
                .iter()
                .map(|&k| cosine_unchecked(&b.vecs[i], &b.vecs[k]) / b.tau),
        );
        let lse = log_sum_exp(&logits);
        let positives = others.iter().filter(|&&k| label(k) == label(i)).count() as f64;
        let mut term = 0.0;
        for (&k, &z) in others.iter().zip(&logits) {
            let is_pos = label(k) == label(i);
            if is_pos {
                term -= (z - lse) / positives;
            }
            let coef =
                scale * ((z - lse).exp() - if is_pos { 1.0 / positives } else { 0.0 }) / b.tau;
            if coef != 0.0 {
                let (vi, vk) = (&b.vecs[i], &b.vecs[k]);
                cosine_grad_into(vi, vk, coef, &mut grads[i]);
                cosine_grad_into(vk, vi, coef, &mut grads[k]);
            }
        }
        total += term;
    }
    total / anchors.len() as f64
}

/// Instance–instance loss at a single level. Every instance must carry a
/// label there. Anchors without positives are skipped and do not count
/// toward the normalizer.
pub fn loss_ins_ins_level(b: &Batch, level: usize) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if b.len() < 2 {
        return Err(LossError::BatchTooSmall(b.len()));
    }
    if let Some(index) = b.paths.iter().position(|p| p.at_level(level).is_none()) {
        return Err(LossError::MissingLabel { index, level });
    }
    let members: Vec<usize> = (0..b.len()).collect();
    let mut grads = b.zero_grads();
    let loss = ins_ins_over(b, level, &members, 1.0, &mut grads);
    Ok((loss, grads))
}

/// Instance–instance loss averaged over levels 2 and 3. A level takes part
/// when at least two instances are labelled there; the pairs at that level
/// are formed among those instances only.
pub fn loss_ins_ins(b: &Batch) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if b.len() < 2 {
        return Err(LossError::BatchTooSmall(b.len()));
    }
    let per_level: Vec<(usize, Vec<usize>)> = [2, 3]
        .into_iter()
        .map(|level| {
            let members = (0..b.len())
                .filter(|&i| b.paths[i].at_level(level).is_some())
                .collect();
            (level, members)
        })
        .filter(|(_, m): &(usize, Vec<usize>)| m.len() >= 2)
        .collect();
    let mut grads = b.zero_grads();
    if per_level.is_empty() {
        return Ok((0.0, grads));
    }
    let weight = 1.0 / per_level.len() as f64;
    let mut loss = 0.0;
    for (level, members) in &per_level {
        loss += weight * ins_ins_over(b, *level, members, weight, &mut grads);
    }
    Ok((loss, grads))
}

/// Loss value, `∂L/∂v` per instance, `∂L/∂C` per level.
pub type InsProOutput = (f64, Vec<Vec<f64>>, Vec<Matrix>);

/// Instance–prototype loss: per instance, the mean over the levels its path
/// covers of `−log softmax(sim/τ)[gold]`, then the batch mean.
pub fn loss_ins_pro(
    b: &Batch,
    ps: &PrototypeSet,
    h: &SenseHierarchy,
) -> Result<InsProOutput, LossError> {
    check_prototypes(ps)?;
    let mut grad_v = b.zero_grads();
    let mut grad_c = zero_like(ps);
    if b.is_empty() {
        return Ok((0.0, grad_v, grad_c));
    }
    let inv_n = 1.0 / b.len() as f64;
    let mut total = 0.0;
    let mut logits = Vec::new();
    for (i, (v, path)) in b.vecs.iter().zip(&b.paths).enumerate() {
        if v.len() != ps.dim() {
            return Err(LossError::Dimension {
                expected: ps.dim(),
                got: v.len(),
            });
        }
        let depth = path.depth();
        if depth > ps.depth() {
            return Err(LossError::LabelOutsidePrototypes {
                index: i,
                level: depth,
            });
        }
        let inv_levels = 1.0 / depth as f64;
        let mut term = 0.0;
        for (li, &node) in path.0.iter().enumerate() {
            let protos = &ps.levels()[li];
            let gold = h.node(node).expect("path belongs to hierarchy").position;
            logits.clear();
            logits.extend(protos.iter_rows().map(|c| cosine_unchecked(v, c) / b.tau));
            let lse = log_sum_exp(&logits);
            term += lse - logits[gold];
            for (j, &z) in logits.iter().enumerate() {
                let target = if j == gold { 1.0 } else { 0.0 };
                let coef = inv_n * inv_levels * ((z - lse).exp() - target) / b.tau;
                if coef != 0.0 {
                    let c = protos.row(j);
                    cosine_grad_into(v, c, coef, &mut grad_v[i]);
                    cosine_grad_into(c, v, coef, grad_c[li].row_mut(j));
                }
            }
        }
        total += term * inv_levels;
    }
    Ok((total * inv_n, grad_v, grad_c))
}

/// Prototype–prototype loss: every prototype below level 1 is contrasted
/// against all prototypes of its parent's level, the parent being the
/// positive; averaged over all child prototypes.
pub fn loss_pro_pro(
    ps: &PrototypeSet,
    h: &SenseHierarchy,
    tau: f64,
) -> Result<(f64, Vec<Matrix>), LossError> {
    check_tau(tau)?;
    let levels = ps.depth().min(h.depth());
    if levels < 2 {
        return Err(LossError::TooFewLevels(levels));
    }
    check_prototypes(ps)?;
    let mut grad = zero_like(ps);
    let children: usize = (2..=levels).map(|l| ps.levels()[l - 1].rows()).sum();
    let inv_m = 1.0 / children as f64;
    let mut total = 0.0;
    let mut logits = Vec::new();
    for level in 2..=levels {
        let (upper, lower) = ps.levels().split_at(level - 1);
        let fathers = &upper[level - 2];
        let kids = &lower[0];
        for (ci, &node) in h
            .nodes_at_level(level)
            .expect("declared")
            .iter()
            .enumerate()
        {
            let parent = h
                .parent_of(node)
                .expect("valid")
                .expect("non-root has a parent");
            let gold = h.node(parent).expect("valid").position;
            let c = kids.row(ci);
            logits.clear();
            logits.extend(fathers.iter_rows().map(|f| cosine_unchecked(c, f) / tau));
            let lse = log_sum_exp(&logits);
            total += lse - logits[gold];
            for (j, &z) in logits.iter().enumerate() {
                let target = if j == gold { 1.0 } else { 0.0 };
                let coef = inv_m * ((z - lse).exp() - target) / tau;
                if coef != 0.0 {
                    let f = fathers.row(j);
                    cosine_grad_into(c, f, coef, grad[level - 1].row_mut(ci));
                    cosine_grad_into(f, c, coef, grad[level - 2].row_mut(j));
                }
            }
        }
    }
    Ok((total * inv_m, grad))
}

/// The combined objective: the sum of the enabled terms. Disabled terms are
/// reported as exactly zero and contribute nothing to the gradients.
pub fn total_loss(
    b: &Batch,
    ps: &PrototypeSet,
    h: &SenseHierarchy,
    toggles: LossToggles,
) -> Result<LossBreakdown, LossError> {
    let (ins_pro, mut grad_vecs, mut grad_prototypes) = loss_ins_pro(b, ps, h)?;
    let mut ins_ins = 0.0;
    if toggles.ins_ins {
        let (l, g) = loss_ins_ins(b)?;
        ins_ins = l;
        for (acc, gi) in grad_vecs.iter_mut().zip(&g) {
            crate::linalg::axpy(1.0, gi, acc);
        }
    }
    let mut pro_pro = 0.0;
    if toggles.pro_pro && ps.depth().min(h.depth()) >= 2 {
        let (l, g) = loss_pro_pro(ps, h, b.tau)?;
        pro_pro = l;
        for (acc, gl) in grad_prototypes.iter_mut().zip(&g) {
            crate::linalg::axpy(1.0, gl.as_slice(), acc.as_mut_slice());
        }
    }
    Ok(LossBreakdown {
        ins_ins,
        ins_pro,
        pro_pro,
        total: ins_ins + ins_pro + pro_pro,
        grad_vecs,
        grad_prototypes,
    })
}
