//! Experiment configuration.
//!
//! The on-disk format is TOML. Every key is optional; missing keys take the
//! defaults below. Overrides use dotted paths (`clipfl.p=0.3`) and win over
//! the file.
//!
//! ```toml
//! seed = 42
//!
//! [data]
//! kind = "synthetic"   # or "csv"
//! k = 10               # classes (synthetic)
//! per_class = 600      # samples per class (synthetic)
//! dim = 128            # feature dimension (synthetic)
//! spread = 0.7         # per-class standard deviation (synthetic)
//! path = "train.csv"   # csv only: header f0,…,f{d-1},label
//!
//! [federation]
//! clients = 100        # N
//! sample_rate = 0.1    # C, ⌊|S|·C⌋ clients per round
//!
//! [partition]
//! kind = "iid"         # or "dirichlet"
//! alpha = 0.5
//!
//! [noise]
//! mu = 0.5             # symmetric noise level
//! rho = 0.5            # share of noisy clients
//!
//! [model]
//! hidden = 32
//!
//! [opt]
//! lr = 0.03
//! momentum = 0.9
//! weight_decay = 0.0
//! epochs = 10
//! batch = 10
//! prox_mu = 0.001      # used only when server.optimizer = "fedprox"
//!
//! [loss]
//! temperature = 10.0
//! smoothing = 0.1
//!
//! [server]
//! optimizer = "fedavg" # fedavg | fedprox | fednova | fedadam
//! lr = 0.01
//! tau = 0.001
//! beta1 = 0.9
//! beta2 = 0.99
//!
//! [clipfl]
//! enabled = true
//! m = 5
//! p = 0.5
//! t_pre = 80
//! t_post = 40
//!
//! [output]
//! dir = "out"
//! ```
//!
//! `threads` (top level) sets the worker count. It changes speed only and is
//! left out of the configuration echo in run summaries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{ServerHyper, ServerOptimizer};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{LossConfig, OptimizerConfig};
use crate::rng::floor_fraction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub k: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            k: 10,
            per_class: 600,
            dim: 128,
            spread: 0.7,
            path: None,
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.k,
            per_class: self.per_class,
            feature_dim: self.dim,
            spread: self.spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub sample_rate: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 100,
            sample_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: PartitionKind,
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Iid,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub mu: f64,
    pub rho: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { mu: 0.5, rho: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub prox_mu: f64,
}

impl Default for OptSection {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch: 10,
            prox_mu: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub temperature: f64,
    pub smoothing: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            temperature: d.temperature,
            smoothing: d.smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub optimizer: ServerOptimizer,
    pub lr: f64,
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        let d = ServerHyper::default();
        Self {
            optimizer: ServerOptimizer::FedAvg,
            lr: d.lr,
            tau: d.tau,
            beta1: d.beta1,
            beta2: d.beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipflSection {
    pub enabled: bool,
    pub m: usize,
    pub p: f64,
    pub t_pre: usize,
    pub t_post: usize,
}

impl Default for ClipflSection {
    fn default() -> Self {
        Self {
            enabled: true,
            m: 5,
            p: 0.5,
            t_pre: 80,
            t_post: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Fully defaulted experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub data: DataSection,
    pub federation: FederationSection,
    pub partition: PartitionSection,
    pub noise: NoiseSection,
    pub model: ModelSection,
    pub opt: OptSection,
    pub loss: LossSection,
    pub server: ServerSection,
    pub clipfl: ClipflSection,
    #[serde(skip_serializing)]
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: None,
            data: DataSection::default(),
            federation: FederationSection::default(),
            partition: PartitionSection::default(),
            noise: NoiseSection::default(),
            model: ModelSection::default(),
            opt: OptSection::default(),
            loss: LossSection::default(),
            server: ServerSection::default(),
            clipfl: ClipflSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn in_unit(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} is outside [0, 1]")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be positive")))
    }
}

impl ExperimentConfig {
    pub fn total_rounds(&self) -> usize {
        self.clipfl.t_pre + self.clipfl.t_post
    }

    /// Local optimizer settings. The proximal term is only active for
    /// FedProx.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.opt.lr,
            momentum: self.opt.momentum,
            weight_decay: self.opt.weight_decay,
            epochs: self.opt.epochs,
            batch_size: self.opt.batch,
            prox_mu: if self.server.optimizer == ServerOptimizer::FedProx {
                self.opt.prox_mu
            } else {
                0.0
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.loss.temperature,
            smoothing: self.loss.smoothing,
        }
    }

    pub fn server_hyper(&self) -> ServerHyper {
        ServerHyper {
            lr: self.server.lr,
            tau: self.server.tau,
            beta1: self.server.beta1,
            beta2: self.server.beta2,
        }
    }

    /// Checks every module precondition that can be known before any work
    /// starts.
    pub fn validate(&self) -> Result<()> {
        match self.data.kind {
            DataKind::Synthetic => {
                if self.data.k < 2 {
                    return Err(Error::config("data.k", "need at least 2 classes"));
                }
                if self.data.per_class == 0 {
                    return Err(Error::config("data.per_class", "must be at least 1"));
                }
                if self.data.dim < 2 {
                    return Err(Error::config("data.dim", "must be at least 2"));
                }
                positive("data.spread", self.data.spread)?;
                let n = self.data.k * self.data.per_class;
                if n < 12 {
                    return Err(Error::config(
                        "data.per_class",
                        format!("{n} samples cannot be split 9:1:2"),
                    ));
                }
            }
            DataKind::Csv => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "required when data.kind = \"csv\""));
                }
            }
        }

        let n = self.federation.clients;
        if n == 0 {
            return Err(Error::config("federation.clients", "must be at least 1"));
        }
        let c = self.federation.sample_rate;
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config("federation.sample_rate", format!("{c} is outside (0, 1]")));
        }
        if floor_fraction(n, c) == 0 {
            return Err(Error::config(
                "federation.sample_rate",
                format!("⌊{n}·{c}⌋ = 0 clients per round"),
            ));
        }

        if self.partition.kind == PartitionKind::Dirichlet {
            positive("partition.alpha", self.partition.alpha)?;
        }
        in_unit("noise.mu", self.noise.mu)?;
        in_unit("noise.rho", self.noise.rho)?;

        if self.model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        if !(self.opt.lr > 0.0 && self.opt.lr.is_finite()) {
            return Err(Error::config("opt.lr", "must be positive"));
        }
        OptimizerConfig {
            prox_mu: self.opt.prox_mu,
            ..self.optimizer()
        }
        .validate()?;
        if self.server.optimizer == ServerOptimizer::FedProx && self.opt.prox_mu <= 0.0 {
            return Err(Error::config("opt.prox_mu", "fedprox needs prox_mu > 0"));
        }
        self.loss().validate()?;

        positive("server.lr", self.server.lr)?;
        positive("server.tau", self.server.tau)?;
        for (key, b) in [("server.beta1", self.server.beta1), ("server.beta2", self.server.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("{b} is outside [0, 1)")));
            }
        }

        let cf = &self.clipfl;
        if cf.m == 0 {
            return Err(Error::config("clipfl.m", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&cf.p) {
            return Err(Error::config("clipfl.p", format!("{} is outside [0, 1)", cf.p)));
        }
        if cf.enabled && cf.t_pre == 0 {
            return Err(Error::config(
                "clipfl.t_pre",
                "pruning needs at least one pre-pruning round",
            ));
        }
        if self.total_rounds() == 0 {
            return Err(Error::config("clipfl.t_post", "the run has zero rounds"));
        }
        if cf.enabled && cf.t_post > 0 {
            let survivors = n - floor_fraction(n, cf.p);
            if floor_fraction(survivors, c) == 0 {
                return Err(Error::config(
                    "clipfl.p",
                    format!("after pruning ⌊{survivors}·{c}⌋ = 0 clients per round"),
                ));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Effective configuration as TOML, including runtime-only keys.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).unwrap_or_default();
        if let Some(t) = self.threads {
            table.insert("threads".into(), toml::Value::Integer(t as i64));
        }
        let mut output = toml::Table::new();
        output.insert(
            "dir".into(),
            toml::Value::String(self.output.dir.display().to_string()),
        );
        table.insert("output".into(), toml::Value::Table(output));
        toml::to_string(&table).unwrap_or_default()
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// (`--set data.kind=csv`).
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn apply_override(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{part}` is not a table"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Builds a config from TOML text plus `key=value` overrides.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_owned()))?;
    for (key, raw) in overrides {
        apply_override(&mut table, key, parse_override_value(raw))?;
    }
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(path, inner.message().to_owned())
        })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config file (if any) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Ingest {
            path: p.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
