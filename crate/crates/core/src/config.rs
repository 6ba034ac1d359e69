//! Run configuration: one TOML file with a section per component, plus
//! `key=value` overrides given on the command line.
//!
//! An override key is either a dotted path (`train.schedule.lr_peak`) or a
//! bare field name. A bare name resolves to the shallowest field with that
//! name and must be unique at that depth, so `steps` means `train.steps`
//! even though `dream.settings.steps` also exists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analytics::AnalyticsConfig;
use crate::dreaming::DreamSettings;
use crate::error::{DnaError, Result};
use crate::model::{DnaConfig, Task};
use crate::train::{AdamWConfig, CharDataset, Dataset, RandomTokens, Schedule, ShapesDataset, TextSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// `total` may be left out; it then follows `steps`.
    pub schedule: Schedule,
    #[serde(default)]
    pub optim: AdamWConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            schedule: Schedule::warmup_cosine(20, 200, 3e-4),
            optim: AdamWConfig::default(),
            clip: default_clip(),
            precision: Precision::F32,
        }
    }
}

/// Training data. Absent means the task's synthetic default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Generated shapes images.
    Shapes { count: usize },
    /// Periodic character stream; see [`TextSource::Periodic`].
    Periodic { period: usize, length: usize },
    /// Bytes of a text file.
    File { path: PathBuf },
}

impl DataSpec {
    pub fn default_for(task: &Task) -> Self {
        match *task {
            Task::VisionClassify { .. } => DataSpec::Shapes { count: 256 },
            Task::CausalLm { vocab, .. } => DataSpec::Periodic {
                period: vocab.min(64),
                length: 4096,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    /// Sequences (images) pushed through the model.
    pub sequences: usize,
    pub batch_size: usize,
    /// Uniform random tokens instead of the training data (language only).
    #[serde(default)]
    pub random_tokens: bool,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            sequences: 64,
            batch_size: 16,
            random_tokens: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamSection {
    /// Routed steps summed into the objective.
    pub horizon: usize,
    /// Token subset; empty means all tokens.
    #[serde(default)]
    pub tokens: Vec<usize>,
    /// Patches clamped to the reference image.
    #[serde(default)]
    pub context: Vec<usize>,
    /// Index of the reference image in the shapes data.
    #[serde(default)]
    pub reference: usize,
    #[serde(default)]
    pub use_logits: bool,
    pub settings: DreamSettings,
}

impl Default for DreamSection {
    fn default() -> Self {
        Self {
            horizon: 1,
            tokens: Vec::new(),
            context: Vec::new(),
            reference: 0,
            use_logits: false,
            settings: DreamSettings::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: DnaConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub analytics: AnalyticsConfig,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub dream: DreamSection,
}

/// Config file contents plus the overrides applied on top.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: PathBuf,
    pub text: String,
    /// Overrides as `(resolved path, value)`.
    pub overrides: Vec<(String, String)>,
}

impl RunConfig {
    /// Seeds for model init, training and data, all derived from `seed`.
    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn data_spec(&self) -> DataSpec {
        self.data.clone().unwrap_or_else(|| DataSpec::default_for(&self.model.task))
    }

    /// The training data described by the `data` section.
    pub fn dataset(&self) -> Result<Box<dyn Dataset>> {
        Ok(match self.data_spec() {
            DataSpec::Shapes { count } => Box::new(ShapesDataset::for_task(&self.model.task, count, self.data_seed())?),
            DataSpec::Periodic { period, length } => Box::new(CharDataset::from_source(
                &TextSource::Periodic { period, length },
                &self.model.task,
                self.data_seed(),
            )?),
            DataSpec::File { path } => {
                Box::new(CharDataset::from_source(&TextSource::File { path }, &self.model.task, self.data_seed())?)
            }
        })
    }

    /// The data a trace run walks over: the training data, or uniform
    /// random tokens when `trace.random_tokens` is set.
    pub fn trace_dataset(&self) -> Result<Box<dyn Dataset>> {
        match (self.trace.random_tokens, self.model.task) {
            (false, _) => self.dataset(),
            (true, Task::CausalLm { vocab, context }) => Ok(Box::new(RandomTokens {
                vocab,
                context,
                count: self.trace.sequences,
                seed: self.data_seed(),
            })),
            (true, _) => Err(DnaError::config("trace.random_tokens", "only applies to language models")),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            schedule: self.train.schedule,
            optim: self.train.optim,
            clip: (self.train.clip > 0.0).then_some(self.train.clip),
            seed: self.train_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.analytics.validate()?;
        if self.trace.batch_size == 0 {
            return Err(DnaError::config("trace.batch_size", "must be positive"));
        }
        match (self.data_spec(), &self.model.task) {
            (DataSpec::Shapes { .. }, Task::VisionClassify { .. }) | (DataSpec::Periodic { .. } | DataSpec::File { .. }, Task::CausalLm { .. }) => Ok(()),
            _ => Err(DnaError::config("data.kind", "data kind does not match model.task")),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parse(text: &str, path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
        let parse_err = |reason: String| DnaError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason,
        };
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
            DnaError::Parse {
                path: path.to_path_buf(),
                line,
                reason: e.message().to_string(),
            }
        })?;
        let explicit_total = table
            .get("train")
            .and_then(|t| t.get("schedule"))
            .and_then(|s| s.get("total"))
            .is_some();
        let mut working = defaulted(&table).map_err(|e| parse_err(e.to_string()))?;
        let template = with_data(working.clone());
        let mut applied = Vec::new();
        let mut total_overridden = false;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| DnaError::config(ov.clone(), "override must look like key=value"))?;
            let path = resolve_key(&template, key.trim())?;
            total_overridden |= path == ["train", "schedule", "total"];
            set_path(&mut working, &path, parse_value(raw.trim()))?;
            applied.push((path.join("."), raw.trim().to_string()));
        }
        if !explicit_total && !total_overridden {
            fill_schedule_total(&mut working);
        }
        let mut config: RunConfig = Value::Table(working)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.message().to_string()))?;
        if !explicit_total && !total_overridden {
            // Keeps the warmup inside a shortened run.
            config.train.schedule = config.train.schedule.with_total(config.train.steps);
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            source: path.to_path_buf(),
            text: text.to_string(),
            overrides: applied,
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
        Self::parse(&text, path, overrides)
    }
}

impl LoadedConfig {
    /// Writes `config.toml` (the file as given) and `resolved.toml` (every
    /// field after defaults and overrides) into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let original = dir.join("config.toml");
        std::fs::write(&original, &self.text).map_err(|e| DnaError::io(&original, e))?;
        let mut resolved = format!("# resolved from {}\n", self.source.display());
        for (k, v) in &self.overrides {
            resolved.push_str(&format!("# override {k} = {v}\n"));
        }
        resolved.push_str(&self.config.to_toml());
        let path = dir.join("resolved.toml");
        std::fs::write(&path, resolved).map_err(|e| DnaError::io(&path, e))
    }
}

/// The file's table with every defaulted field filled in.
fn defaulted(table: &Table) -> Result<Table, toml::de::Error> {
    let mut t = table.clone();
    fill_schedule_total(&mut t);
    let config: RunConfig = Value::Table(t).try_into()?;
    match Value::try_from(&config).expect("config serializes") {
        Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Adds the task's default data section so bare override keys can name its
/// fields.
fn with_data(mut t: Table) -> Value {
    if !t.contains_key("data") {
        if let Ok(config) = Value::Table(t.clone()).try_into::<RunConfig>() {
            t.insert("data".into(), Value::try_from(config.data_spec()).expect("data spec serializes"));
        }
    }
    Value::Table(t)
}

fn fill_schedule_total(table: &mut Table) {
    let steps = table
        .get("train")
        .and_then(|t| t.get("steps"))
        .cloned()
        .unwrap_or(Value::Integer(TrainSection::default().steps as i64));
    if let Some(Value::Table(schedule)) = table.get_mut("train").and_then(|t| t.get_mut("schedule")) {
        schedule.insert("total".into(), steps);
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn collect_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Table(t) = v {
        for (k, child) in t {
            prefix.push(k.clone());
            out.push(prefix.clone());
            collect_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

/// Dotted keys are taken as given; bare keys go to the shallowest unique
/// match in `template`.
pub fn resolve_key(template: &Value, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        return Err(DnaError::config("override", "empty key"));
    }
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let mut all = Vec::new();
    collect_paths(template, &mut Vec::new(), &mut all);
    let hits: Vec<&Vec<String>> = all.iter().filter(|p| p.last().is_some_and(|l| l == key)).collect();
    let Some(depth) = hits.iter().map(|p| p.len()).min() else {
        return Err(DnaError::config(key, "no config field has this name"));
    };
    let shallow: Vec<&&Vec<String>> = hits.iter().filter(|p| p.len() == depth).collect();
    if shallow.len() > 1 {
        let names: Vec<String> = shallow.iter().map(|p| p.join(".")).collect();
        return Err(DnaError::config(key, format!("ambiguous; use one of {}", names.join(", "))));
    }
    Ok(shallow[0].to_vec())
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(DnaError::config(
                    path[..=i].join("."),
                    "is a value, not a section",
                ))
            }
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3

[model]
d_embed = 16
d_mlp = 32
n_head = 2
n_backbone = 1
s_max = 3
k = 1
pool = { transformer-block = 2, identity = 1 }
task = { kind = "causal-lm", vocab = 16, context = 8 }

[train]
steps = 10
batch_size = 4
schedule = { kind = "warmup-cosine", warmup = 2, lr_init = 1e-7, lr_peak = 1e-3, lr_final = 1e-6 }
"#;

    fn load(overrides: &[&str]) -> Result<LoadedConfig> {
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::parse(BASE, Path::new("base.toml"), &ov)
    }

    #[test]
    fn schedule_total_follows_steps() {
        let c = load(&[]).unwrap().config;
        assert_eq!(c.train.schedule.total(), 10);
        let c = load(&["steps=0"]).unwrap();
        assert_eq!(c.config.train.steps, 0);
        assert_eq!(c.config.train.schedule.total(), 0);
        assert_eq!(c.overrides, vec![("train.steps".to_string(), "0".to_string())]);
    }

    #[test]
    fn dotted_and_bare_overrides() {
        let c = load(&["train.schedule.lr_peak=0.01", "alpha=2.0", "model.k=2"]).unwrap().config;
        assert!(matches!(c.train.schedule, Schedule::WarmupCosine { lr_peak, .. } if lr_peak == 0.01));
        assert_eq!(c.analytics.alpha, 2.0);
        assert_eq!(c.model.k, 2);
    }

    #[test]
    fn bad_fields_are_named() {
        let err = load(&["model.k=9"]).unwrap_err();
        assert!(matches!(err, DnaError::Config { ref field, .. } if field == "k"), "{err}");
        let err = load(&["nonsense=1"]).unwrap_err();
        assert!(err.to_string().contains("nonsense"));
        let err = load(&["train.stepz=1"]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = load(&["seed=9"]).unwrap().config;
        let again = RunConfig::parse(&c.to_toml(), Path::new("resolved.toml"), &[]).unwrap().config;
        assert_eq!(c, again);
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let err = RunConfig::parse("seed = 1\n[model\n", Path::new("x.toml"), &[]).unwrap_err();
        assert!(matches!(err, DnaError::Parse { line: 2, .. }), "{err}");
    }
}
