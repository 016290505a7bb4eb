//! Mini-batch training of the encoder and prototypes under the combined
//! objective, with dev-set early stopping.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{expand_multilabel, render, Instance, Split, TemplateError};
use crate::encoder::{
    EncoderError, EncoderParams, HiddenState, TokenId, Tokenizer, DEFAULT_BUCKETS,
};
use crate::hierarchy::{SenseHierarchy, SensePath};
use crate::kv::{self, KvError};
use crate::losses::{total_loss, Batch, LossBreakdown, LossError, LossToggles};
use crate::metrics::{evaluate_vectors, MetricsError, MetricsReport};
use crate::optim::{AdamConfig, Moments};
use crate::prototypes::{PrototypeError, PrototypeSet};
use crate::xlingual::{select_template, TemplateRegistry, XlingualError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] KvError),
    #[error("need at least 2 training examples, got {0}")]
    TooFewExamples(usize),
    #[error("corpus has no {0} instances")]
    EmptySplit(Split),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("no external embedding for instance {0:?}")]
    MissingEmbedding(String),
    #[error("instance {id:?} rendered to a prompt with no tokens")]
    EmptyPrompt { id: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Xlingual(#[from] XlingualError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Training hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub d_p: usize,
    pub d_h: usize,
    pub seed: u64,
    pub ins_ins: bool,
    pub pro_pro: bool,
    pub label_info: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub vocab_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            learning_rate: 5e-5,
            batch_size: 196,
            max_epochs: 10,
            patience: 5,
            d_p: 128,
            d_h: 64,
            seed: 42,
            ins_ins: true,
            pro_pro: true,
            label_info: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            vocab_buckets: DEFAULT_BUCKETS,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "tau",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "d_p",
    "d_h",
    "seed",
    "ins_ins",
    "pro_pro",
    "label_info",
    "beta1",
    "beta2",
    "epsilon",
    "vocab_buckets",
];

impl TrainConfig {
    /// Desk-scale settings for the synthetic corpora: smaller batches and a
    /// step size large enough to converge within ten short epochs.
    pub fn synthetic() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            ins_ins: self.ins_ins,
            pro_pro: self.pro_pro,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience ({}) may not exceed max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.d_p < 2 || self.d_h == 0 {
            return fail("d_p must be at least 2 and d_h positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return fail("beta1, beta2 must lie in [0, 1) and epsilon be positive".into());
        }
        if self.vocab_buckets == 0 || self.vocab_buckets > u32::MAX as usize {
            return fail("vocab_buckets must be positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        match key {
            "tau" => self.tau = kv::parse_value(key, value)?,
            "learning_rate" => self.learning_rate = kv::parse_value(key, value)?,
            "batch_size" => self.batch_size = kv::parse_value(key, value)?,
            "max_epochs" => self.max_epochs = kv::parse_value(key, value)?,
            "patience" => self.patience = kv::parse_value(key, value)?,
            "d_p" => self.d_p = kv::parse_value(key, value)?,
            "d_h" => self.d_h = kv::parse_value(key, value)?,
            "seed" => self.seed = kv::parse_value(key, value)?,
            "ins_ins" => self.ins_ins = kv::parse_value(key, value)?,
            "pro_pro" => self.pro_pro = kv::parse_value(key, value)?,
            "label_info" => self.label_info = kv::parse_value(key, value)?,
            "beta1" => self.beta1 = kv::parse_value(key, value)?,
            "beta2" => self.beta2 = kv::parse_value(key, value)?,
            "epsilon" => self.epsilon = kv::parse_value(key, value)?,
            "vocab_buckets" => self.vocab_buckets = kv::parse_value(key, value)?,
            _ => {
                return Err(KvError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn apply_file(&mut self, text: &str) -> Result<(), KvError> {
        for e in kv::parse(text)? {
            self.set(&e.key, &e.value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut cfg = Self::default();
        cfg.apply_file(text)?;
        Ok(cfg)
    }

    pub fn to_config(&self) -> String {
        format!(
            "tau = {}\nlearning_rate = {}\nbatch_size = {}\nmax_epochs = {}\npatience = {}\nd_p = {}\nd_h = {}\nseed = {}\nins_ins = {}\npro_pro = {}\nlabel_info = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\nvocab_buckets = {}\n",
            self.tau,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.d_p,
            self.d_h,
            self.seed,
            self.ins_ins,
            self.pro_pro,
            self.label_info,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.vocab_buckets
        )
    }
}

/// What the encoder consumes for one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Tokens(Vec<TokenId>),
    Hidden(HiddenState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub prototypes: PrototypeSet,
    pub tokenizer: Tokenizer,
}

impl Model {
    pub fn init(cfg: &TrainConfig, h: &SenseHierarchy) -> Result<Self, TrainError> {
        Ok(Self {
            encoder: EncoderParams::init(cfg.vocab_buckets, cfg.d_h, cfg.d_p, cfg.seed),
            prototypes: PrototypeSet::init(h, cfg.d_p, cfg.seed.wrapping_add(1))?,
            tokenizer: Tokenizer::new(cfg.vocab_buckets),
        })
    }

    pub fn embed(&self, f: &Features) -> Result<Vec<f64>, EncoderError> {
        Ok(match f {
            Features::Tokens(t) => self.encoder.encode(t)?.1 .0,
            Features::Hidden(h) => self.encoder.project(h)?.0,
        })
    }

    pub fn embed_all(&self, fs: &[Features]) -> Result<Vec<Vec<f64>>, EncoderError> {
        fs.iter().map(|f| self.embed(f)).collect()
    }
}

/// Renders and tokenizes each instance with its language's template, or
/// looks its hidden state up in `external` when given.
pub fn prepare_features(
    instances: &[Instance],
    templates: &TemplateRegistry,
    h: &SenseHierarchy,
    label_info: bool,
    tokenizer: &Tokenizer,
    external: Option<&BTreeMap<String, HiddenState>>,
) -> Result<Vec<Features>, TrainError> {
    instances
        .iter()
        .map(|inst| match external {
            Some(table) => table
                .get(&inst.id)
                .cloned()
                .map(Features::Hidden)
                .ok_or_else(|| TrainError::MissingEmbedding(inst.id.clone())),
            None => {
                let t = select_template(templates, &inst.language)?;
                let prompt = render(t, inst, h, label_info)?;
                let tokens = tokenizer.tokenize(&prompt.text);
                if tokens.is_empty() {
                    return Err(TrainError::EmptyPrompt {
                        id: inst.id.clone(),
                    });
                }
                Ok(Features::Tokens(tokens))
            }
        })
        .collect()
}

/// Shuffles `count` example indices for `epoch` and cuts them into batches
/// of `size`. A trailing batch smaller than 2 is merged into the previous one.
pub fn make_batches(
    count: usize,
    size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if size < 2 {
        return Err(TrainError::Config(format!(
            "batch size must be at least 2, got {size}"
        )));
    }
    if count < 2 {
        return Err(TrainError::TooFewExamples(count));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch").extend(tail);
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    table_moments: Moments,
    /// Token rows whose moments may be non-zero. Rows outside this set would
    /// receive an exactly-zero Adam update, so they are skipped.
    touched: BTreeSet<TokenId>,
    projection_moments: Moments,
    prototype_moments: Vec<Moments>,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let table_moments = Moments::zeros(model.encoder.token_table.as_slice().len());
        let projection_moments = Moments::zeros(model.encoder.projection.as_slice().len());
        let prototype_moments = model
            .prototypes
            .levels()
            .iter()
            .map(|m| Moments::zeros(m.as_slice().len()))
            .collect();
        Self {
            model,
            table_moments,
            touched: BTreeSet::new(),
            projection_moments,
            prototype_moments,
            step: 0,
            epoch: 0,
        }
    }
}

/// One forward/backward pass over `batch` followed by one Adam update of the
/// encoder and every prototype.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(&Features, &SensePath)],
    h: &SenseHierarchy,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let model = &state.model;
    let vecs = batch
        .iter()
        .map(|(f, _)| model.embed(f))
        .collect::<Result<Vec<_>, _>>()?;
    let paths = batch.iter().map(|(_, p)| (*p).clone()).collect();
    let b = Batch::new(vecs, paths, cfg.tau)?;
    let out = total_loss(&b, &model.prototypes, h, cfg.toggles())?;
    for (term, v) in [
        ("instance-instance", out.ins_ins),
        ("instance-prototype", out.ins_pro),
        ("prototype-prototype", out.pro_pro),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                term,
                epoch: state.epoch,
                step: state.step as usize + 1,
            });
        }
    }

    // Encoder gradients, summed in batch order.
    let d_h = model.encoder.hidden_dim();
    let mut grad_proj = vec![0.0; model.encoder.projection.as_slice().len()];
    let mut grad_rows: BTreeMap<TokenId, Vec<f64>> = BTreeMap::new();
    for ((f, _), gv) in batch.iter().zip(&out.grad_vecs) {
        let g = match f {
            Features::Tokens(t) => model.encoder.encode_backward(t, gv)?,
            Features::Hidden(hs) => model.encoder.project_backward(hs, gv)?,
        };
        crate::linalg::axpy(1.0, g.projection.as_slice(), &mut grad_proj);
        for (id, row) in g.rows {
            let slot = grad_rows.entry(id).or_insert_with(|| vec![0.0; d_h]);
            crate::linalg::axpy(1.0, &row, slot);
        }
    }

    state.step += 1;
    let adam = cfg.adam();
    let scale = adam.scale(state.step);
    state.touched.extend(grad_rows.keys().copied());
    let table = state.model.encoder.token_table.as_mut_slice();
    let zeros = vec![0.0; d_h];
    for &id in &state.touched {
        let range = id as usize * d_h..(id as usize + 1) * d_h;
        let g = grad_rows.get(&id).unwrap_or(&zeros);
        for (k, idx) in range.enumerate() {
            adam.update_one(
                scale,
                &mut table[idx],
                g[k],
                &mut state.table_moments.m[idx],
                &mut state.table_moments.v[idx],
            );
        }
    }
    adam.update(
        scale,
        state.model.encoder.projection.as_mut_slice(),
        &grad_proj,
        &mut state.projection_moments,
    );
    for ((m, g), st) in state
        .model
        .prototypes
        .levels_mut()
        .iter_mut()
        .zip(&out.grad_prototypes)
        .zip(&mut state.prototype_moments)
    {
        adam.update(scale, m.as_mut_slice(), g.as_slice(), st);
    }
    Ok(out)
}

/// Patience-based stopping on a (macro-F1, accuracy) score, compared
/// lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, macro_f1: f64, accuracy: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some((f, a)) => macro_f1 > f || (macro_f1 == f && accuracy > a),
        };
        if improved {
            self.best = Some((macro_f1, accuracy));
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: !improved && self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<(f64, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ins_ins: f64,
    pub ins_pro: f64,
    pub pro_pro: f64,
    pub total: f64,
    pub dev_level: usize,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    pub improved: bool,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"epoch\": {}, \"loss_ins_ins\": {:.4}, \"loss_ins_pro\": {:.4}, \"loss_pro_pro\": {:.4}, \"loss_total\": {:.4}, \"dev_level\": {}, \"dev_accuracy\": {:.4}, \"dev_macro_f1\": {:.4}, \"improved\": {}}}",
            self.epoch,
            self.ins_ins,
            self.ins_pro,
            self.pro_pro,
            self.total,
            self.dev_level,
            self.dev_accuracy,
            self.dev_macro_f1,
            self.improved
        )
    }
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history.iter().map(|r| r.to_json() + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the best dev epoch (the initial ones if no epoch ran).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Level monitored for early stopping: the deeper of levels 1 and 2 that the
/// hierarchy declares.
pub fn monitored_level(h: &SenseHierarchy) -> usize {
    h.depth().min(2)
}

pub fn evaluate_split(
    model: &Model,
    features: &[Features],
    instances: &[Instance],
    h: &SenseHierarchy,
    level: usize,
) -> Result<MetricsReport, TrainError> {
    let vecs = model.embed_all(features)?;
    Ok(evaluate_vectors(
        &vecs,
        instances,
        &model.prototypes,
        h,
        level,
    )?)
}

/// Trains on the `train` split, selects on `dev`.
pub fn fit(
    cfg: &TrainConfig,
    corpus: &[Instance],
    h: &SenseHierarchy,
    templates: &TemplateRegistry,
    external: Option<&BTreeMap<String, HiddenState>>,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    let train: Vec<Instance> = corpus
        .iter()
        .filter(|i| i.split == Split::Train)
        .cloned()
        .collect();
    let dev: Vec<Instance> = corpus
        .iter()
        .filter(|i| i.split == Split::Dev)
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySplit(Split::Dev));
    }
    let mut model = Model::init(cfg, h)?;
    if let Some(table) = external {
        if let Some(hs) = table.values().next() {
            if hs.0.len() != cfg.d_h {
                return Err(EncoderError::Dimension {
                    expected: cfg.d_h,
                    actual: hs.0.len(),
                }
                .into());
            }
        }
    }
    let train_features = prepare_features(
        &train,
        templates,
        h,
        cfg.label_info,
        &model.tokenizer,
        external,
    )?;
    let dev_features = prepare_features(
        &dev,
        templates,
        h,
        cfg.label_info,
        &model.tokenizer,
        external,
    )?;
    let examples = expand_multilabel(&train);
    if examples.len() < 2 {
        return Err(TrainError::TooFewExamples(examples.len()));
    }
    if cfg.max_epochs == 0 {
        return Ok(FitOutcome {
            model,
            history: Vec::new(),
            best_epoch: None,
        });
    }

    let level = monitored_level(h);
    let mut state = TrainState::new(model.clone());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch + 1;
        let batches = make_batches(examples.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut sums = [0.0f64; 4];
        for idx in &batches {
            let batch: Vec<(&Features, &SensePath)> = idx
                .iter()
                .map(|&i| (&train_features[examples[i].source], &examples[i].path))
                .collect();
            let out = train_step(&mut state, &batch, h, cfg)?;
            for (s, v) in sums
                .iter_mut()
                .zip([out.ins_ins, out.ins_pro, out.pro_pro, out.total])
            {
                *s += v;
            }
        }
        state.model.prototypes.validate()?;
        let n = batches.len() as f64;
        let report = evaluate_split(&state.model, &dev_features, &dev, h, level)?;
        let obs = stopper.observe(epoch + 1, report.macro_f1, report.accuracy);
        if obs.improved {
            model = state.model.clone();
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            ins_ins: sums[0] / n,
            ins_pro: sums[1] / n,
            pro_pro: sums[2] / n,
            total: sums[3] / n,
            dev_level: level,
            dev_accuracy: report.accuracy,
            dev_macro_f1: report.macro_f1,
            improved: obs.improved,
        });
        if obs.stop {
            break;
        }
    }
    Ok(FitOutcome {
        model,
        history,
        best_epoch: Some(stopper.best_epoch()),
    })
}
