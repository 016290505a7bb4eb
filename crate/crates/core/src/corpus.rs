//! Instances, prompt templates and the synthetic corpus generator.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{SenseHierarchy, SensePath};
use crate::kv::{self, KvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub arg1: String,
    pub arg2: String,
    pub sense_paths: Vec<SensePath>,
    pub language: String,
    pub split: Split,
}

impl Instance {
    /// Distinct gold labels at `level`, in the order their paths are listed.
    pub fn golds_at(&self, level: usize) -> Vec<crate::hierarchy::NodeId> {
        let mut out = Vec::new();
        for p in &self.sense_paths {
            if let Some(id) = p.at_level(level) {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }
}

/// On-disk shape of one corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    arg1: String,
    arg2: String,
    senses: Vec<String>,
    lang: String,
    split: Split,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: empty {field}")]
    EmptyArgument { line: usize, field: &'static str },
    #[error("line {line}: record has no senses")]
    NoSenses { line: usize },
    #[error("line {line}: {source}")]
    BadSense {
        line: usize,
        #[source]
        source: crate::hierarchy::HierarchyError,
    },
    #[error("line {line}: sense {path:?} listed twice")]
    DuplicateSense { line: usize, path: String },
    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },
}

/// Parses line-delimited JSON records (`id`, `arg1`, `arg2`, `senses`, `lang`, `split`).
pub fn load_corpus(source: &str, h: &SenseHierarchy) -> Result<Vec<Instance>, CorpusError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, text) in source.lines().enumerate() {
        let line = idx + 1;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match msg
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
            {
                Some(field) => CorpusError::MissingField {
                    line,
                    field: field.to_string(),
                },
                None => CorpusError::Record { line, message: msg },
            }
        })?;
        if rec.arg1.trim().is_empty() {
            return Err(CorpusError::EmptyArgument {
                line,
                field: "arg1",
            });
        }
        if rec.arg2.trim().is_empty() {
            return Err(CorpusError::EmptyArgument {
                line,
                field: "arg2",
            });
        }
        if rec.senses.is_empty() {
            return Err(CorpusError::NoSenses { line });
        }
        let mut paths: Vec<SensePath> = Vec::with_capacity(rec.senses.len());
        for s in &rec.senses {
            let p = SensePath::resolve(h, s)
                .map_err(|source| CorpusError::BadSense { line, source })?;
            if paths.contains(&p) {
                return Err(CorpusError::DuplicateSense {
                    line,
                    path: s.clone(),
                });
            }
            paths.push(p);
        }
        if !ids.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: rec.id });
        }
        out.push(Instance {
            id: rec.id,
            arg1: rec.arg1,
            arg2: rec.arg2,
            sense_paths: paths,
            language: rec.lang,
            split: rec.split,
        });
    }
    Ok(out)
}

/// Serializes instances in the record format accepted by [`load_corpus`].
pub fn write_corpus(instances: &[Instance], h: &SenseHierarchy) -> String {
    let mut out = String::new();
    for inst in instances {
        let rec = Record {
            id: inst.id.clone(),
            arg1: inst.arg1.clone(),
            arg2: inst.arg2.clone(),
            senses: inst.sense_paths.iter().map(|p| p.render(h)).collect(),
            lang: inst.language.clone(),
            split: inst.split,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// One (instance, sense path) pair used as a training target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub instance_id: String,
    /// Index of the source instance in the slice given to [`expand_multilabel`].
    pub source: usize,
    pub path: SensePath,
}

/// Splits multi-label instances into one example per annotated path.
pub fn expand_multilabel(instances: &[Instance]) -> Vec<TrainingExample> {
    instances
        .iter()
        .enumerate()
        .flat_map(|(source, inst)| {
            inst.sense_paths.iter().map(move |p| TrainingExample {
                instance_id: inst.id.clone(),
                source,
                path: p.clone(),
            })
        })
        .collect()
}

pub const PH_L1: &str = "{L1_LABELS}";
pub const PH_L2: &str = "{L2_LABELS}";
pub const PH_ARG1: &str = "{ARG1}";
pub const PH_ARG2: &str = "{ARG2}";
pub const PH_MASK: &str = "{MASK}";

/// Text inserted at the mask site.
pub const MASK_TOKEN: &str = "<mask>";

const PLACEHOLDERS: [&str; 5] = [PH_L1, PH_L2, PH_ARG1, PH_ARG2, PH_MASK];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template has no {{MASK}} placeholder")]
    MissingMask,
    #[error("placeholder {placeholder} occurs {count} times, expected exactly once")]
    PlaceholderCount {
        placeholder: &'static str,
        count: usize,
    },
    #[error("template file must start with `lang: <tag>`")]
    MissingLanguage,
    #[error("template is for {template:?} but instance {instance:?} is {language:?}")]
    LanguageMismatch {
        template: String,
        instance: String,
        language: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    language: String,
    pattern: String,
}

impl Template {
    pub fn new(
        language: impl Into<String>,
        pattern: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let pattern = pattern.into();
        if !pattern.contains(PH_MASK) {
            return Err(TemplateError::MissingMask);
        }
        for ph in PLACEHOLDERS {
            let count = pattern.matches(ph).count();
            if count != 1 {
                return Err(TemplateError::PlaceholderCount {
                    placeholder: ph,
                    count,
                });
            }
        }
        Ok(Self {
            language: language.into(),
            pattern,
        })
    }

    /// Parses a template file: first line `lang: <tag>`, the rest is the pattern.
    pub fn parse_file(text: &str) -> Result<Self, TemplateError> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let lang = first
            .trim()
            .strip_prefix("lang:")
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .ok_or(TemplateError::MissingLanguage)?;
        Self::new(lang, rest.trim_end_matches(['\n', '\r']))
    }

    pub fn to_file(&self) -> String {
        format!("lang: {}\n{}\n", self.language, self.pattern)
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }
}

/// The default English-style pattern used by generated corpora.
pub fn default_pattern() -> &'static str {
    "{L1_LABELS}. {L2_LABELS}. {ARG1} {MASK} {ARG2}"
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Character (not byte) index where [`MASK_TOKEN`] begins.
    pub mask_offset: usize,
}

fn label_inventory(h: &SenseHierarchy, level: usize) -> String {
    h.nodes_at_level(level)
        .map(|ids| {
            ids.iter()
                .map(|&id| h.name(id))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_default()
}

/// Fills a template for one instance. With `include_label_info` off the
/// label inventories expand to nothing.
pub fn render(
    template: &Template,
    inst: &Instance,
    h: &SenseHierarchy,
    include_label_info: bool,
) -> Result<RenderedPrompt, TemplateError> {
    if template.language != inst.language {
        return Err(TemplateError::LanguageMismatch {
            template: template.language.clone(),
            instance: inst.id.clone(),
            language: inst.language.clone(),
        });
    }
    let (l1, l2) = if include_label_info {
        (label_inventory(h, 1), label_inventory(h, 2))
    } else {
        (String::new(), String::new())
    };

    let mut text =
        String::with_capacity(template.pattern.len() + inst.arg1.len() + inst.arg2.len());
    let mut mask_offset = 0;
    let mut rest = template.pattern.as_str();
    while let Some(start) = rest.find('{') {
        text.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = PLACEHOLDERS.iter().find(|ph| tail.starts_with(**ph));
        match hit {
            Some(&ph) => {
                match ph {
                    PH_L1 => text.push_str(&l1),
                    PH_L2 => text.push_str(&l2),
                    PH_ARG1 => text.push_str(&inst.arg1),
                    PH_ARG2 => text.push_str(&inst.arg2),
                    _ => {
                        mask_offset = text.chars().count();
                        text.push_str(MASK_TOKEN);
                    }
                }
                rest = &tail[ph.len()..];
            }
            None => {
                text.push('{');
                rest = &tail[1..];
            }
        }
    }
    text.push_str(rest);
    Ok(RenderedPrompt { text, mask_offset })
}

pub const SYNTH_KEYS: [&str; 10] = [
    "roots",
    "children_per_root",
    "grandchildren",
    "vocab_per_leaf",
    "noise_vocab",
    "tokens_per_arg",
    "instances_per_leaf",
    "noise",
    "languages",
    "overlap",
];

/// Settings for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub roots: usize,
    pub children_per_root: usize,
    /// Level-3 refinements per level-2 sense; 0 gives a two-level hierarchy.
    pub grandchildren: usize,
    pub vocab_per_leaf: usize,
    pub noise_vocab: usize,
    pub tokens_per_arg: usize,
    pub instances_per_leaf: usize,
    pub noise: f64,
    pub languages: Vec<String>,
    pub overlap: Option<Overlap>,
}

/// Makes a fraction of one leaf's instances draw their words from another
/// leaf's vocabulary while keeping their own label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    /// Leaf whose vocabulary is borrowed.
    pub lender: usize,
    /// Leaf whose instances are disguised.
    pub borrower: usize,
    pub rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            roots: 3,
            children_per_root: 2,
            grandchildren: 0,
            vocab_per_leaf: 12,
            noise_vocab: 40,
            tokens_per_arg: 8,
            instances_per_leaf: 50,
            noise: 0.1,
            languages: vec!["en".to_string()],
            overlap: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("noise rate {0} must lie in [0, 1)")]
    NoiseRate(f64),
    #[error("instances_per_leaf must be positive")]
    NoInstances,
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("overlap leaf index {0} out of range")]
    OverlapLeaf(usize),
    #[error("overlap rate {0} must lie in [0, 1]")]
    OverlapRate(f64),
    #[error(transparent)]
    Config(#[from] KvError),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..1.0).contains(&self.noise) {
            return Err(SynthError::NoiseRate(self.noise));
        }
        if self.instances_per_leaf == 0 {
            return Err(SynthError::NoInstances);
        }
        for (name, v) in [
            ("roots", self.roots),
            ("children_per_root", self.children_per_root),
            ("vocab_per_leaf", self.vocab_per_leaf),
            ("tokens_per_arg", self.tokens_per_arg),
        ] {
            if v == 0 {
                return Err(SynthError::Zero(name));
            }
        }
        if self.noise > 0.0 && self.noise_vocab == 0 {
            return Err(SynthError::Zero("noise_vocab"));
        }
        if self.languages.is_empty() {
            return Err(SynthError::Zero("languages"));
        }
        if let Some(o) = self.overlap {
            let leaves = self.leaf_count();
            for leaf in [o.lender, o.borrower] {
                if leaf >= leaves {
                    return Err(SynthError::OverlapLeaf(leaf));
                }
            }
            if !(0.0..=1.0).contains(&o.rate) {
                return Err(SynthError::OverlapRate(o.rate));
            }
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.roots * self.children_per_root * self.grandchildren.max(1)
    }

    /// Reads a `key = value` spec; unspecified keys keep their defaults.
    /// `overlap = <lender>:<borrower>:<rate>` enables the overlap experiment.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut spec = SynthSpec::default();
        for e in kv::parse(text)? {
            spec.set(&e.key, &e.value)?;
        }
        Ok(spec)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<(), KvError> {
        match k {
            "roots" => self.roots = kv::parse_value(k, v)?,
            "children_per_root" => self.children_per_root = kv::parse_value(k, v)?,
            "grandchildren" => self.grandchildren = kv::parse_value(k, v)?,
            "vocab_per_leaf" => self.vocab_per_leaf = kv::parse_value(k, v)?,
            "noise_vocab" => self.noise_vocab = kv::parse_value(k, v)?,
            "tokens_per_arg" => self.tokens_per_arg = kv::parse_value(k, v)?,
            "instances_per_leaf" => self.instances_per_leaf = kv::parse_value(k, v)?,
            "noise" => self.noise = kv::parse_value(k, v)?,
            "languages" => {
                self.languages = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "overlap" => {
                let parts: Vec<&str> = v.split(':').collect();
                let bad = || KvError::InvalidValue {
                    key: k.to_string(),
                    value: v.to_string(),
                    reason: "expected lender:borrower:rate".to_string(),
                };
                if parts.len() != 3 {
                    return Err(bad());
                }
                self.overlap = Some(Overlap {
                    lender: parts[0].trim().parse().map_err(|_| bad())?,
                    borrower: parts[1].trim().parse().map_err(|_| bad())?,
                    rate: parts[2].trim().parse().map_err(|_| bad())?,
                });
            }
            _ => return Err(KvError::UnknownKey { key: k.to_string() }),
        }
        Ok(())
    }

    pub fn to_config(&self) -> String {
        let mut s = format!(
            "roots = {}\nchildren_per_root = {}\ngrandchildren = {}\nvocab_per_leaf = {}\nnoise_vocab = {}\ntokens_per_arg = {}\ninstances_per_leaf = {}\nnoise = {}\nlanguages = {}\n",
            self.roots,
            self.children_per_root,
            self.grandchildren,
            self.vocab_per_leaf,
            self.noise_vocab,
            self.tokens_per_arg,
            self.instances_per_leaf,
            self.noise,
            self.languages.join(","),
        );
        if let Some(o) = self.overlap {
            s.push_str(&format!(
                "overlap = {}:{}:{}\n",
                o.lender, o.borrower, o.rate
            ));
        }
        s
    }
}

fn synth_hierarchy(spec: &SynthSpec) -> SenseHierarchy {
    let mut src = String::new();
    for r in 0..spec.roots {
        src.push_str(&format!("1\tSense{r}\t\n"));
    }
    for r in 0..spec.roots {
        for c in 0..spec.children_per_root {
            src.push_str(&format!("2\tSense{r}x{c}\tSense{r}\n"));
        }
    }
    if spec.grandchildren > 0 {
        for r in 0..spec.roots {
            for c in 0..spec.children_per_root {
                for g in 0..spec.grandchildren {
                    src.push_str(&format!("3\tSense{r}x{c}x{g}\tSense{r}.Sense{r}x{c}\n"));
                }
            }
        }
    }
    SenseHierarchy::parse(&src).expect("generated hierarchy is well formed")
}

/// Signature word `k` of `leaf` in `lang`. Vocabularies never collide
/// across leaves or languages.
pub fn signature_word(lang: &str, leaf: usize, k: usize) -> String {
    format!("{lang}s{leaf}w{k}")
}

pub fn noise_word(lang: &str, k: usize) -> String {
    format!("{lang}n{k}")
}

/// Generates a hierarchy plus a labelled corpus whose leaf classes each own
/// a disjoint signature vocabulary, mixed with shared noise words.
/// Deterministic under `(spec, seed)`; each leaf is split 80/10/10.
pub fn gen_synthetic(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(SenseHierarchy, Vec<Instance>), SynthError> {
    spec.validate()?;
    let h = synth_hierarchy(spec);
    let leaf_level = h.depth();
    let leaves: Vec<_> = h.nodes_at_level(leaf_level).expect("leaf level").to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.instances_per_leaf;
    let n_train = n * 8 / 10;
    let n_dev = n / 10;

    let mut out = Vec::with_capacity(leaves.len() * n * spec.languages.len());
    for lang in &spec.languages {
        for (leaf_idx, &leaf) in leaves.iter().enumerate() {
            let path = h.lineage(leaf).expect("leaf is valid");
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut splits = vec![Split::Test; n];
            for (rank, &i) in order.iter().enumerate() {
                splits[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_dev {
                    Split::Dev
                } else {
                    Split::Test
                };
            }
            for (i, split) in splits.into_iter().enumerate() {
                let vocab_leaf = match spec.overlap {
                    Some(o) if o.borrower == leaf_idx && rng.random::<f64>() < o.rate => o.lender,
                    _ => leaf_idx,
                };
                let mut arg = || {
                    (0..spec.tokens_per_arg)
                        .map(|_| {
                            if spec.noise > 0.0 && rng.random::<f64>() < spec.noise {
                                noise_word(lang, rng.random_range(0..spec.noise_vocab))
                            } else {
                                signature_word(
                                    lang,
                                    vocab_leaf,
                                    rng.random_range(0..spec.vocab_per_leaf),
                                )
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let arg1 = arg();
                let arg2 = arg();
                out.push(Instance {
                    id: format!("{lang}-{leaf_idx}-{i}"),
                    arg1,
                    arg2,
                    sense_paths: vec![path.clone()],
                    language: lang.clone(),
                    split,
                });
            }
        }
    }
    Ok((h, out))
}
