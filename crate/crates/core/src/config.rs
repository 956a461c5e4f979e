//! Run configuration: a flat `key = value` file.
//!
//! Blank lines and `#` comments are ignored. Relative paths are resolved
//! against the directory holding the config file. Unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ImnError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub sentiment_docs: Option<PathBuf>,
    pub domain_docs: Option<PathBuf>,
    /// Without an embedding file the matrix is drawn uniformly like OOV rows.
    pub general_embeddings: Option<PathBuf>,
    pub domain_embeddings: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub min_count: usize,
    pub domains: Vec<String>,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            test: None,
            sentiment_docs: None,
            domain_docs: None,
            general_embeddings: None,
            domain_embeddings: None,
            checkpoint_dir: None,
            min_count: 1,
            domains: vec!["restaurant".into(), "laptop".into()],
            model: ModelConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

fn cfg_err(msg: String) -> ImnError {
    ImnError::Config(msg)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| cfg_err(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ImnError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str_in(&text, path, base)
    }

    /// Parses config text; `origin` names it in errors and `base` anchors relative paths.
    pub fn from_str_in(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut saw_num_domains = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ImnError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("expected key = value, found {line:?}"),
                });
            };
            let key = key.trim();
            saw_num_domains |= key == "num_domains";
            cfg.set(key, value.trim(), base).map_err(|e| ImnError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        if !saw_num_domains {
            cfg.model.num_domains = cfg.domains.len();
        }
        Ok(cfg)
    }

    /// Sets one key. Paths are joined onto `base` unless absolute.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(value));
        let m = &mut self.model;
        let t = &mut self.training;
        match key {
            "train" => self.train = path(),
            "test" => self.test = path(),
            "sentiment_docs" => self.sentiment_docs = path(),
            "domain_docs" => self.domain_docs = path(),
            "general_embeddings" => self.general_embeddings = path(),
            "domain_embeddings" => self.domain_embeddings = path(),
            "checkpoint_dir" => self.checkpoint_dir = path(),
            "min_count" => self.min_count = parse(key, value)?,
            "domains" => {
                self.domains = parse_list(key, value)?;
                m.num_domains = self.domains.len();
            }
            "general_dim" => m.general_dim = parse(key, value)?,
            "domain_dim" => m.domain_dim = parse(key, value)?,
            "shared_layers" => m.shared.layers = parse(key, value)?,
            "first_kernels" => m.shared.first_kernels = parse_list(key, value)?,
            "first_filters" => m.shared.first_filters = parse(key, value)?,
            "kernel" => m.shared.kernel = parse(key, value)?,
            "filters" => m.shared.filters = parse(key, value)?,
            "dropout" => m.shared.dropout = parse(key, value)?,
            "ae_layers" => m.ae_layers = parse(key, value)?,
            "as_layers" => m.as_layers = parse(key, value)?,
            "ds_layers" => m.ds_layers = parse(key, value)?,
            "dd_layers" => m.dd_layers = parse(key, value)?,
            "dd_masked_path" => m.dd_masked_path = parse_bool(key, value)?,
            "train_embeddings" => m.train_embeddings = parse_bool(key, value)?,
            "num_domains" => m.num_domains = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "doc_interval" => t.doc_interval = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "max_pretrain_epochs" => t.max_pretrain_epochs = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "dev_fraction" => t.dev_fraction = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "scheduled_sampling" => t.scheduled_sampling = parse_bool(key, value)?,
            "target_dev_f1_i" => {
                t.target_dev_f1_i = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(cfg_err(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Checks numeric ranges, and with `require_inputs` that every training input is set and exists.
    pub fn validate(&self, require_inputs: bool) -> Result<()> {
        self.model.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.training.validate().map_err(|e| cfg_err(e.to_string()))?;
        if !(0.0..1.0).contains(&self.model.shared.dropout) {
            return Err(cfg_err(format!("dropout must lie in [0, 1), got {}", self.model.shared.dropout)));
        }
        if self.domains.len() != self.model.num_domains {
            return Err(cfg_err(format!(
                "{} domains listed but num_domains is {}",
                self.domains.len(),
                self.model.num_domains
            )));
        }
        if self.min_count == 0 {
            return Err(cfg_err("min_count must be at least 1".into()));
        }
        if let Some(t) = self.training.target_dev_f1_i {
            if !(0.0..=1.0).contains(&t) {
                return Err(cfg_err(format!("target_dev_f1_i must lie in [0, 1], got {t}")));
            }
        }
        if !require_inputs {
            return Ok(());
        }
        let required = [
            ("train", &self.train),
            ("sentiment_docs", &self.sentiment_docs),
            ("domain_docs", &self.domain_docs),
            ("checkpoint_dir", &self.checkpoint_dir),
        ];
        for (key, p) in required {
            if p.is_none() {
                return Err(cfg_err(format!("missing required key {key}")));
            }
        }
        let files = [
            &self.train,
            &self.test,
            &self.sentiment_docs,
            &self.domain_docs,
            &self.general_embeddings,
            &self.domain_embeddings,
        ];
        for p in files.into_iter().flatten() {
            if !p.is_file() {
                return Err(cfg_err(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Renders the config back into `key = value` form with absolute paths.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let paths = [
            ("train", &self.train),
            ("test", &self.test),
            ("sentiment_docs", &self.sentiment_docs),
            ("domain_docs", &self.domain_docs),
            ("general_embeddings", &self.general_embeddings),
            ("domain_embeddings", &self.domain_embeddings),
            ("checkpoint_dir", &self.checkpoint_dir),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        let m = &self.model;
        let t = &self.training;
        let scalars: [(&str, String); 26] = [
            ("min_count", self.min_count.to_string()),
            ("domains", self.domains.join(",")),
            ("num_domains", m.num_domains.to_string()),
            ("general_dim", m.general_dim.to_string()),
            ("domain_dim", m.domain_dim.to_string()),
            ("shared_layers", m.shared.layers.to_string()),
            ("first_kernels", join(&m.shared.first_kernels)),
            ("first_filters", m.shared.first_filters.to_string()),
            ("kernel", m.shared.kernel.to_string()),
            ("filters", m.shared.filters.to_string()),
            ("dropout", m.shared.dropout.to_string()),
            ("ae_layers", m.ae_layers.to_string()),
            ("as_layers", m.as_layers.to_string()),
            ("ds_layers", m.ds_layers.to_string()),
            ("dd_layers", m.dd_layers.to_string()),
            ("dd_masked_path", m.dd_masked_path.to_string()),
            ("train_embeddings", m.train_embeddings.to_string()),
            ("iterations", t.iterations.to_string()),
            ("doc_interval", t.doc_interval.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("max_pretrain_epochs", t.max_pretrain_epochs.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("dev_fraction", t.dev_fraction.to_string()),
            ("seed", t.seed.to_string()),
            ("scheduled_sampling", t.scheduled_sampling.to_string()),
        ];
        for (k, v) in scalars {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(v) = t.target_dev_f1_i {
            let _ = writeln!(out, "target_dev_f1_i = {v}");
        }
        out
    }
}
