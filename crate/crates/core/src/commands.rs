//! The `protoverb` command line: argument definitions and one function per
//! subcommand. Every command writes into a staging directory that is renamed
//! onto `--out` only after all outputs, the manifest last, are on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{
    load_hierarchy, load_templates, read_text, save_templates, write_file, Checkpoint, InputMode,
    HIERARCHY_FILE,
};
use crate::corpus::{
    default_pattern, gen_synthetic, load_corpus, write_corpus, Instance, Split, SynthSpec,
    Template, SYNTH_KEYS,
};
use crate::diagnostics::analyze;
use crate::encoder::{ingest_external, HiddenState};
use crate::kv::KvError;
use crate::trainer::{
    fit, history_jsonl, monitored_level, prepare_features, Features, TrainConfig, CONFIG_KEYS,
};
use crate::xlingual::{
    self, align, AlignmentConfig, ClassCorrespondence, TemplateRegistry, UpdateMode, ALIGN_KEYS,
};

pub const ENV_PREFIX: &str = "PROTOVERB_";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "protoverb",
    version,
    about = "Hierarchical prototype verbalizer for implicit discourse relations"
)]
pub struct Cli {
    /// Upper bound on worker threads. Work is currently sequential.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, hierarchy and templates.
    GenSynth(GenSynthArgs),
    /// Train encoder and prototypes; writes a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split at one or more levels.
    Eval(EvalArgs),
    /// Prototype distance and nearest-neighbour diagnostics.
    Analyze(AnalyzeArgs),
    /// Align target-language prototypes to a source checkpoint.
    Align(AlignArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// `key = value` generator spec; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Desk-scale settings for generated corpora.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Directory of `<lang>.txt` templates; the default pattern is used per
    /// corpus language when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Precomputed hidden states (`id<TAB>values`) used instead of the token encoder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_ins_ins: bool,
    #[arg(long)]
    pub no_pro_pro: bool,
    #[arg(long)]
    pub no_label_info: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Repeat to score several levels.
    #[arg(long = "level", default_values_t = [1])]
    pub levels: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Defaults to level 2, or 1 for single-level hierarchies.
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub update_mode: Option<UpdateMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau_align: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub duration_secs: f64,
}

/// `(key, value)` pairs from `<PREFIX><KEY>` variables, in key order.
pub fn env_overrides<F>(keys: &[&str], lookup: F) -> Vec<(String, String)>
where
    F: Fn(&str) -> Option<String>,
{
    keys.iter()
        .filter_map(|k| {
            lookup(&format!("{ENV_PREFIX}{}", k.to_uppercase())).map(|v| (k.to_string(), v))
        })
        .collect()
}

fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

fn apply_env<F>(keys: &[&str], mut set: F) -> Result<()>
where
    F: FnMut(&str, &str) -> Result<(), KvError>,
{
    for (k, v) in env_overrides(keys, process_env) {
        set(&k, &v)
            .with_context(|| format!("environment variable {ENV_PREFIX}{}", k.to_uppercase()))?;
    }
    Ok(())
}

/// Output staging. Dropping without [`Staging::commit`] removes everything.
struct Staging {
    dir: PathBuf,
    out: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        if out.exists() {
            let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
            if !empty {
                bail!(
                    "output directory {} already exists and is not empty",
                    out.display()
                );
            }
        }
        let name = out
            .file_name()
            .with_context(|| format!("invalid output path {}", out.display()))?
            .to_string_lossy();
        let dir = out.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn files(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.dir.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(&self.dir).expect("under staging dir");
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn commit(mut self, mut manifest: RunManifest, started: Instant) -> Result<()> {
        manifest.outputs = self.files()?;
        manifest.outputs.push(MANIFEST_FILE.to_string());
        manifest.duration_secs = (started.elapsed().as_secs_f64() * 1e4).round() / 1e4;
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_file(&self.path(MANIFEST_FILE), json)?;
        if self.out.exists() {
            fs::remove_dir(&self.out)?;
        }
        fs::rename(&self.dir, &self.out)
            .with_context(|| format!("moving outputs into {}", self.out.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn manifest(command: &str, config: String, inputs: &[(&str, &Path)], seed: u64) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config,
        inputs: inputs
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
        outputs: Vec::new(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: 0.0,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Align(a) => cmd_align(&a),
    }
}

pub fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::parse(&read_text(p)?).with_context(|| format!("{}", p.display()))?,
        None => SynthSpec::default(),
    };
    apply_env(&SYNTH_KEYS, |k, v| spec.set(k, v))?;
    spec.validate()?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let (h, corpus) = gen_synthetic(&spec, seed)?;

    let stage = Staging::new(&a.out)?;
    write_file(&stage.path("corpus.jsonl"), write_corpus(&corpus, &h))?;
    write_file(&stage.path(HIERARCHY_FILE), h.to_source())?;
    write_file(&stage.path("spec.txt"), spec.to_config())?;
    let mut reg = TemplateRegistry::new();
    for lang in &spec.languages {
        reg.register(Template::new(lang.as_str(), default_pattern())?)?;
    }
    save_templates(&stage.path("templates"), &reg)?;
    let inputs: Vec<(&str, &Path)> = a.spec.iter().map(|p| ("spec", p.as_path())).collect();
    stage.commit(
        manifest("gen-synth", spec.to_config(), &inputs, seed),
        started,
    )
}

fn load_embeddings(path: &Path, d_h: usize) -> Result<BTreeMap<String, HiddenState>> {
    ingest_external(&read_text(path)?, d_h).with_context(|| format!("{}", path.display()))
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match a.preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Synthetic => TrainConfig::synthetic(),
    };
    if let Some(p) = &a.config {
        cfg.apply_file(&read_text(p)?)
            .with_context(|| format!("{}", p.display()))?;
    }
    apply_env(&CONFIG_KEYS, |k, v| cfg.set(k, v))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    cfg.ins_ins &= !a.no_ins_ins;
    cfg.pro_pro &= !a.no_pro_pro;
    cfg.label_info &= !a.no_label_info;
    cfg.validate()?;
    Ok(cfg)
}

fn read_corpus(path: &Path, h: &crate::hierarchy::SenseHierarchy) -> Result<Vec<Instance>> {
    load_corpus(&read_text(path)?, h).with_context(|| format!("{}", path.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = resolve_train_config(a)?;
    let h = load_hierarchy(&a.hierarchy)?;
    let corpus = read_corpus(&a.corpus, &h)?;
    let templates = match &a.templates {
        Some(dir) => load_templates(dir)?,
        None => {
            let mut reg = TemplateRegistry::new();
            let langs: std::collections::BTreeSet<&str> =
                corpus.iter().map(|i| i.language.as_str()).collect();
            for l in langs {
                reg.register(Template::new(l, default_pattern())?)?;
            }
            reg
        }
    };
    let external = a
        .embeddings
        .as_deref()
        .map(|p| load_embeddings(p, cfg.d_h))
        .transpose()?;
    let out = fit(&cfg, &corpus, &h, &templates, external.as_ref())?;

    let stage = Staging::new(&a.out)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        model: out.model,
        hierarchy: h,
        templates,
        inputs: if external.is_some() {
            InputMode::External
        } else {
            InputMode::Tokens
        },
        history: history_jsonl(&out.history),
    };
    ck.save(&stage.dir)?;
    let mut inputs = vec![
        ("corpus", a.corpus.as_path()),
        ("hierarchy", a.hierarchy.as_path()),
    ];
    for (k, p) in [
        ("config", &a.config),
        ("templates", &a.templates),
        ("embeddings", &a.embeddings),
    ] {
        if let Some(p) = p {
            inputs.push((k, p.as_path()));
        }
    }
    stage.commit(
        manifest("train", cfg.to_config(), &inputs, cfg.seed),
        started,
    )
}

/// Encoder inputs for `instances` under checkpoint `ck`.
fn features_for(
    ck: &Checkpoint,
    instances: &[Instance],
    embeddings: Option<&Path>,
) -> Result<Vec<Features>> {
    let external = match (ck.inputs, embeddings) {
        (InputMode::External, None) => {
            bail!("checkpoint was trained on external embeddings; pass --embeddings")
        }
        (InputMode::Tokens, Some(_)) => {
            bail!("checkpoint uses the token encoder; --embeddings does not apply")
        }
        (_, Some(p)) => Some(load_embeddings(p, ck.config.d_h)?),
        (_, None) => None,
    };
    Ok(prepare_features(
        instances,
        &ck.templates,
        &ck.hierarchy,
        ck.config.label_info,
        &ck.model.tokenizer,
        external.as_ref(),
    )?)
}

fn split_of(ck: &Checkpoint, corpus: &Path, split: Split) -> Result<Vec<Instance>> {
    let all = read_corpus(corpus, &ck.hierarchy)?;
    let part: Vec<Instance> = all.into_iter().filter(|i| i.split == split).collect();
    if part.is_empty() {
        bail!("{}: no {split} instances", corpus.display());
    }
    Ok(part)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let instances = split_of(&ck, &a.corpus, a.split)?;
    let vecs = ck
        .model
        .embed_all(&features_for(&ck, &instances, a.embeddings.as_deref())?)?;
    let mut reports = Vec::new();
    for &level in &a.levels {
        let r = crate::metrics::evaluate_vectors(
            &vecs,
            &instances,
            &ck.model.prototypes,
            &ck.hierarchy,
            level,
        )
        .with_context(|| format!("level {level}"))?;
        reports.push(r);
    }
    let stage = Staging::new(&a.out)?;
    for r in &reports {
        write_file(
            &stage.path(&format!("metrics_level{}.json", r.level)),
            r.to_json(),
        )?;
    }
    let levels: Vec<String> = a.levels.iter().map(usize::to_string).collect();
    let config = format!("split = {}\nlevels = {}\n", a.split, levels.join(","));
    let inputs = [
        ("checkpoint", a.checkpoint.as_path()),
        ("corpus", a.corpus.as_path()),
    ];
    stage.commit(
        manifest("eval", config, &inputs, a.seed.unwrap_or(DEFAULT_SEED)),
        started,
    )
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let instances = split_of(&ck, &a.corpus, a.split)?;
    let level = a.level.unwrap_or_else(|| monitored_level(&ck.hierarchy));
    let vecs = ck
        .model
        .embed_all(&features_for(&ck, &instances, a.embeddings.as_deref())?)?;
    let report = analyze(
        &ck.model.prototypes,
        &vecs,
        &instances,
        &ck.hierarchy,
        level,
        a.k,
    )?;
    let stage = Staging::new(&a.out)?;
    write_file(&stage.path("avg_distance.csv"), report.avg_distance_csv())?;
    write_file(&stage.path("neighbors.csv"), report.neighbors_csv())?;
    let config = format!("split = {}\nlevel = {level}\nk = {}\n", a.split, a.k);
    let inputs = [
        ("checkpoint", a.checkpoint.as_path()),
        ("corpus", a.corpus.as_path()),
    ];
    stage.commit(
        manifest("analyze", config, &inputs, a.seed.unwrap_or(DEFAULT_SEED)),
        started,
    )
}

pub fn resolve_align_config(a: &AlignArgs) -> Result<AlignmentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            AlignmentConfig::parse(&read_text(p)?).with_context(|| format!("{}", p.display()))?
        }
        None => AlignmentConfig::default(),
    };
    apply_env(&ALIGN_KEYS, |k, v| cfg.set(k, v))?;
    if let Some(v) = a.update_mode {
        cfg.update_mode = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.tau_align {
        cfg.tau_align = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.level {
        cfg.level = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_align(a: &AlignArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = resolve_align_config(a)?;
    let src = Checkpoint::load(&a.source)?;
    let mut tgt = Checkpoint::load(&a.target)?;
    let corr = ClassCorrespondence::by_name(&src.hierarchy, &tgt.hierarchy, cfg.level)?;
    let out = align(&src.model.prototypes, &tgt.model.prototypes, &corr, &cfg)?;

    let stage = Staging::new(&a.out)?;
    tgt.model.prototypes = out.target;
    tgt.save(&stage.path("target"))?;
    if cfg.update_mode == UpdateMode::Both {
        let mut src = src;
        src.model.prototypes = out.source;
        src.save(&stage.path("source"))?;
    }
    write_file(
        &stage.path("alignment_history.jsonl"),
        xlingual::history_jsonl(&out.history),
    )?;
    let inputs = [
        ("source", a.source.as_path()),
        ("target", a.target.as_path()),
    ];
    stage.commit(
        manifest("align", cfg.to_config(), &inputs, cfg.seed),
        started,
    )
}
