//! Zero-shot cross-lingual support: per-language template lookup and
//! class-wise contrastive alignment of two prototype sets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::Template;
use crate::hierarchy::SenseHierarchy;
use crate::kv::{self, KvError};
use crate::linalg::{cosine_grad_into, cosine_unchecked, log_sum_exp, norm, Matrix, NORM_FLOOR};
use crate::optim::{AdamConfig, Moments};
use crate::prototypes::{PrototypeError, PrototypeSet};

#[derive(Debug, Error, PartialEq)]
pub enum XlingualError {
    #[error("no template registered for language {0:?}")]
    UnregisteredLanguage(String),
    #[error("a template for {0:?} is already registered")]
    DuplicateLanguage(String),
    #[error("class {name:?} at level {level} has no counterpart in the target hierarchy")]
    MissingCounterpart { level: usize, name: String },
    #[error("level {level}: source has {source_count} classes, target has {target}")]
    ClassCount {
        level: usize,
        source_count: usize,
        target: usize,
    },
    #[error("correspondence is not a bijection")]
    NotBijective,
    #[error("alignment needs at least one step")]
    ZeroSteps,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("alignment loss became non-finite at step {0}")]
    NonFinite(usize),
    #[error("prototype dimensions differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Config(#[from] KvError),
}

/// Templates keyed by language tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, t: Template) -> Result<(), XlingualError> {
        let lang = t.language().to_string();
        if self.templates.contains_key(&lang) {
            return Err(XlingualError::DuplicateLanguage(lang));
        }
        self.templates.insert(lang, t);
        Ok(())
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }
}

/// The template registered for `language`. Never falls back to another language.
pub fn select_template<'a>(
    reg: &'a TemplateRegistry,
    language: &str,
) -> Result<&'a Template, XlingualError> {
    reg.templates
        .get(language)
        .ok_or_else(|| XlingualError::UnregisteredLanguage(language.to_string()))
}

/// `target_of[c]` is the target row matched with source row `c` at `level`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCorrespondence {
    pub level: usize,
    pub target_of: Vec<usize>,
}

impl ClassCorrespondence {
    pub fn new(level: usize, target_of: Vec<usize>) -> Result<Self, XlingualError> {
        let mut seen = vec![false; target_of.len()];
        for &t in &target_of {
            if t >= seen.len() || std::mem::replace(&mut seen[t], true) {
                return Err(XlingualError::NotBijective);
            }
        }
        Ok(Self { level, target_of })
    }

    pub fn identity(level: usize, m: usize) -> Self {
        Self {
            level,
            target_of: (0..m).collect(),
        }
    }

    /// Matches senses at `level` by name.
    pub fn by_name(
        src: &SenseHierarchy,
        tgt: &SenseHierarchy,
        level: usize,
    ) -> Result<Self, XlingualError> {
        let src_nodes = src
            .nodes_at_level(level)
            .map_err(|_| PrototypeError::UndeclaredLevel(level))?;
        let tgt_nodes = tgt
            .nodes_at_level(level)
            .map_err(|_| PrototypeError::UndeclaredLevel(level))?;
        if src_nodes.len() != tgt_nodes.len() {
            return Err(XlingualError::ClassCount {
                level,
                source_count: src_nodes.len(),
                target: tgt_nodes.len(),
            });
        }
        let target_of = src_nodes
            .iter()
            .map(|&id| {
                let name = src.name(id);
                tgt.find(level, name)
                    .map(|t| tgt.node(t).expect("found").position)
                    .ok_or_else(|| XlingualError::MissingCounterpart {
                        level,
                        name: name.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(level, target_of)
    }

    pub fn len(&self) -> usize {
        self.target_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_of.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    TargetOnly,
    Both,
}

impl FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target_only" => Ok(UpdateMode::TargetOnly),
            "both" => Ok(UpdateMode::Both),
            other => Err(format!(
                "unknown update mode {other:?} (expected target_only or both)"
            )),
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::TargetOnly => "target_only",
            UpdateMode::Both => "both",
        })
    }
}

pub const ALIGN_KEYS: [&str; 6] = [
    "tau_align",
    "steps",
    "learning_rate",
    "update_mode",
    "level",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub tau_align: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub update_mode: UpdateMode,
    pub level: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau_align: 0.1,
            steps: 200,
            learning_rate: 0.01,
            update_mode: UpdateMode::TargetOnly,
            level: 1,
            seed: 42,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), XlingualError> {
        if !(self.tau_align > 0.0 && self.tau_align.is_finite()) {
            return Err(XlingualError::Temperature(self.tau_align));
        }
        if self.steps == 0 {
            return Err(XlingualError::ZeroSteps);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        match key {
            "tau_align" => self.tau_align = kv::parse_value(key, value)?,
            "steps" => self.steps = kv::parse_value(key, value)?,
            "learning_rate" => self.learning_rate = kv::parse_value(key, value)?,
            "update_mode" => self.update_mode = kv::parse_value(key, value)?,
            "level" => self.level = kv::parse_value(key, value)?,
            "seed" => self.seed = kv::parse_value(key, value)?,
            _ => {
                return Err(KvError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            cfg.set(&e.key, &e.value)?;
        }
        Ok(cfg)
    }

    pub fn to_config(&self) -> String {
        format!(
            "tau_align = {}\nsteps = {}\nlearning_rate = {}\nupdate_mode = {}\nlevel = {}\nseed = {}\n",
            self.tau_align, self.steps, self.learning_rate, self.update_mode, self.level, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub value: f64,
    pub grad_source: Matrix,
    pub grad_target: Matrix,
}

fn check_rows(m: &Matrix, level: usize) -> Result<(), XlingualError> {
    for (row, r) in m.iter_rows().enumerate() {
        if !(norm(r) > NORM_FLOOR) {
            return Err(PrototypeError::DegenerateRow { level, row }.into());
        }
    }
    Ok(())
}

/// Symmetric class-wise contrastive loss between source rows `S` and target
/// rows `T` at one level:
///
/// `(1/2M) Σ_c [ −log softmax_c'(sim(s_c, t_c')/τ)[c] − log softmax_c'(sim(t_c, s_c')/τ)[c] ]`
///
/// with `t_c` the target row matched to source class `c`.
pub fn alignment_loss(
    src: &PrototypeSet,
    tgt: &PrototypeSet,
    corr: &ClassCorrespondence,
    tau: f64,
) -> Result<AlignmentLoss, XlingualError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(XlingualError::Temperature(tau));
    }
    let s = src.level(corr.level)?;
    let t = tgt.level(corr.level)?;
    if s.cols() != t.cols() {
        return Err(XlingualError::Dimension(s.cols(), t.cols()));
    }
    let m = corr.len();
    if s.rows() != m || t.rows() != m {
        return Err(XlingualError::ClassCount {
            level: corr.level,
            source_count: s.rows(),
            target: t.rows(),
        });
    }
    check_rows(s, corr.level)?;
    check_rows(t, corr.level)?;

    let mut grad_s = Matrix::zeros(m, s.cols());
    let mut grad_t = Matrix::zeros(m, t.cols());
    let inv = 1.0 / (2 * m) as f64;
    // sims[c][d] = sim(s_c, t_{corr(d)})
    let sims: Vec<Vec<f64>> = (0..m)
        .map(|c| {
            (0..m)
                .map(|d| cosine_unchecked(s.row(c), t.row(corr.target_of[d])))
                .collect()
        })
        .collect();
    let mut value = 0.0;
    let mut logits = vec![0.0; m];
    for c in 0..m {
        // source → target
        for (z, sim) in logits.iter_mut().zip(&sims[c]) {
            *z = sim / tau;
        }
        let lse = log_sum_exp(&logits);
        value += lse - logits[c];
        for (d, &z) in logits.iter().enumerate() {
            let coef = inv * ((z - lse).exp() - if d == c { 1.0 } else { 0.0 }) / tau;
            let (si, ti) = (s.row(c), t.row(corr.target_of[d]));
            cosine_grad_into(si, ti, coef, grad_s.row_mut(c));
            cosine_grad_into(ti, si, coef, grad_t.row_mut(corr.target_of[d]));
        }
        // target → source
        for (z, row) in logits.iter_mut().zip(&sims) {
            *z = row[c] / tau;
        }
        let lse = log_sum_exp(&logits);
        value += lse - logits[c];
        for (d, &z) in logits.iter().enumerate() {
            let coef = inv * ((z - lse).exp() - if d == c { 1.0 } else { 0.0 }) / tau;
            let (ti, si) = (t.row(corr.target_of[c]), s.row(d));
            cosine_grad_into(ti, si, coef, grad_t.row_mut(corr.target_of[c]));
            cosine_grad_into(si, ti, coef, grad_s.row_mut(d));
        }
    }
    Ok(AlignmentLoss {
        value: value * inv,
        grad_source: grad_s,
        grad_target: grad_t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub source: PrototypeSet,
    pub target: PrototypeSet,
    /// Loss before each update, one entry per step.
    pub history: Vec<f64>,
}

/// Runs `cfg.steps` Adam updates on the target prototypes at `corr.level`
/// (and the source prototypes too in [`UpdateMode::Both`]).
pub fn align(
    src: &PrototypeSet,
    tgt: &PrototypeSet,
    corr: &ClassCorrespondence,
    cfg: &AlignmentConfig,
) -> Result<AlignOutcome, XlingualError> {
    cfg.validate()?;
    let mut source = src.clone();
    let mut target = tgt.clone();
    // Validates shapes before any update happens.
    alignment_loss(&source, &target, corr, cfg.tau_align)?;

    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let n = target.level(corr.level)?.as_slice().len();
    let mut mt = Moments::zeros(n);
    let mut ms = Moments::zeros(n);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let loss = alignment_loss(&source, &target, corr, cfg.tau_align)?;
        if !loss.value.is_finite() {
            return Err(XlingualError::NonFinite(step));
        }
        history.push(loss.value);
        let scale = adam.scale(step as u64);
        adam.update(
            scale,
            target.level_mut(corr.level)?.as_mut_slice(),
            loss.grad_target.as_slice(),
            &mut mt,
        );
        if cfg.update_mode == UpdateMode::Both {
            adam.update(
                scale,
                source.level_mut(corr.level)?.as_mut_slice(),
                loss.grad_source.as_slice(),
                &mut ms,
            );
        }
    }
    Ok(AlignOutcome {
        source,
        target,
        history,
    })
}

/// Line-delimited JSON records, one per step, reals at four decimals.
pub fn history_jsonl(history: &[f64]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{{\"step\": {}, \"loss\": {l:.4}}}\n", i + 1))
        .collect()
}
