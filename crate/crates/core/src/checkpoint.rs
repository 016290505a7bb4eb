//! Checkpoint directories: encoder parameters, prototypes, hierarchy,
//! templates, config echo and training history.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{Template, TemplateError};
use crate::encoder::{read_params, write_params, EncoderError, Tokenizer};
use crate::hierarchy::{HierarchyError, SenseHierarchy};
use crate::kv::KvError;
use crate::prototypes::{PrototypeError, PrototypeSet};
use crate::trainer::{Model, TrainConfig};
use crate::xlingual::{TemplateRegistry, XlingualError};

pub const ENCODER_FILE: &str = "encoder.bin";
pub const PROTOTYPES_FILE: &str = "prototypes.txt";
pub const HIERARCHY_FILE: &str = "hierarchy.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const INPUTS_FILE: &str = "inputs.txt";
pub const TEMPLATES_DIR: &str = "templates";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CheckpointError + '_ {
    move |e| CheckpointError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// How the encoder receives its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Tokens,
    External,
}

impl InputMode {
    fn as_str(self) -> &'static str {
        match self {
            InputMode::Tokens => "tokens",
            InputMode::External => "external",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub hierarchy: SenseHierarchy,
    pub templates: TemplateRegistry,
    pub inputs: InputMode,
    /// Training history as written, passed through verbatim on copy.
    pub history: String,
}

pub fn read_text(path: &Path) -> Result<String, CheckpointError> {
    fs::read_to_string(path).map_err(io(path))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(io(path))
}

/// Reads every `*.txt` template in `dir`, in file-name order.
pub fn load_templates(dir: &Path) -> Result<TemplateRegistry, CheckpointError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io(dir)))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "txt"));
    files.sort();
    let mut reg = TemplateRegistry::new();
    for f in files {
        let t = Template::parse_file(&read_text(&f)?).map_err(invalid::<TemplateError>(&f))?;
        reg.register(t).map_err(invalid::<XlingualError>(&f))?;
    }
    Ok(reg)
}

pub fn save_templates(dir: &Path, reg: &TemplateRegistry) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    for t in reg.iter() {
        write_file(&dir.join(format!("{}.txt", t.language())), t.to_file())?;
    }
    Ok(())
}

pub fn load_hierarchy(path: &Path) -> Result<SenseHierarchy, CheckpointError> {
    SenseHierarchy::parse(&read_text(path)?).map_err(invalid::<HierarchyError>(path))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        write_file(&dir.join(ENCODER_FILE), write_params(&self.model.encoder))?;
        write_file(
            &dir.join(PROTOTYPES_FILE),
            self.model.prototypes.to_checkpoint(),
        )?;
        write_file(&dir.join(HIERARCHY_FILE), self.hierarchy.to_source())?;
        write_file(&dir.join(CONFIG_FILE), self.config.to_config())?;
        write_file(&dir.join(HISTORY_FILE), &self.history)?;
        write_file(
            &dir.join(INPUTS_FILE),
            format!("{}\n", self.inputs.as_str()),
        )?;
        save_templates(&dir.join(TEMPLATES_DIR), &self.templates)
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let cfg_path = dir.join(CONFIG_FILE);
        let config =
            TrainConfig::parse(&read_text(&cfg_path)?).map_err(invalid::<KvError>(&cfg_path))?;
        let hierarchy = load_hierarchy(&dir.join(HIERARCHY_FILE))?;

        let enc_path = dir.join(ENCODER_FILE);
        let encoder = read_params(&fs::read(&enc_path).map_err(io(&enc_path))?)
            .map_err(invalid::<EncoderError>(&enc_path))?;
        let proto_path = dir.join(PROTOTYPES_FILE);
        let prototypes = PrototypeSet::from_checkpoint(&read_text(&proto_path)?)
            .map_err(invalid::<PrototypeError>(&proto_path))?;
        prototypes
            .check_shape(&hierarchy)
            .map_err(invalid::<PrototypeError>(&proto_path))?;
        if prototypes.dim() != encoder.proto_dim() {
            return Err(CheckpointError::Invalid {
                path: proto_path,
                message: format!(
                    "prototype dimension {} does not match encoder output {}",
                    prototypes.dim(),
                    encoder.proto_dim()
                ),
            });
        }

        let inputs_path = dir.join(INPUTS_FILE);
        let inputs = match read_text(&inputs_path)?.trim() {
            "tokens" => InputMode::Tokens,
            "external" => InputMode::External,
            other => {
                return Err(CheckpointError::Invalid {
                    path: inputs_path,
                    message: format!("unknown input mode {other:?}"),
                })
            }
        };
        Ok(Self {
            model: Model {
                tokenizer: Tokenizer::new(encoder.token_table.rows()),
                encoder,
                prototypes,
            },
            templates: load_templates(&dir.join(TEMPLATES_DIR))?,
            history: read_text(&dir.join(HISTORY_FILE))?,
            config,
            hierarchy,
            inputs,
        })
    }
}
