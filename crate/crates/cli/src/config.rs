//! Experiment configuration: a flat TOML file with dotted section keys.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! methods = ["ER", "DGC"]
//! mode = "cil"
//! output_path = "results.jsonl"
//!
//! stream.tasks = 5
//! stream.dim = 20
//! model.kind = "softmax-linear"
//! train.steps_per_stage = 200
//! train.buffer_capacity = 200
//! ```
//!
//! Every `stream.*` and `train.*` key overrides the library default of the
//! same name; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use gradcal::stream::{generate_gaussian_cil, load_stream_csv, CsvSchema, Generator};
use gradcal::{Method, ModelKind, ModelSpec, StreamConfig, StreamMode, TaskStream, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// A problem with the command line or the configuration file (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Cil,
    Tfcl,
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSource {
    pub config: StreamConfig,
    /// Explicit data seed. When absent each run generates its data from its own seed.
    pub data_seed: Option<u64>,
    /// Training CSV when `stream.generator = "file"`.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

/// Fully resolved experiment. `train.method` and `train.seed` are placeholders
/// that each run overrides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub micro_task_size: usize,
    pub stream: StreamSource,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sample_bytes: u64,
    #[serde(skip)]
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub methods: Vec<Method>,
    #[serde(skip)]
    pub output_path: PathBuf,
    #[serde(skip)]
    pub series_path: Option<PathBuf>,
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "seeds",
    "methods",
    "mode",
    "micro_task_size",
    "output_path",
    "series_path",
    "eval_interval",
    "sample_bytes",
    "stream",
    "model",
    "train",
];

const MODEL_KEYS: &[&str] = &["kind", "hidden_width", "l2", "class_count"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// Parses configuration text. Relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        check_keys(&root, TOP_LEVEL_KEYS, "")?;

        let seeds: Vec<u64> = take(&mut root, "seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err("seeds must list at least one seed".into());
        }
        let method_names: Vec<String> =
            take(&mut root, "methods")?.unwrap_or_else(|| vec!["DGC".to_string()]);
        let methods = parse_methods(&method_names)?;
        let mode = take(&mut root, "mode")?.unwrap_or(RunMode::Cil);
        let micro_task_size = take(&mut root, "micro_task_size")?.unwrap_or(10usize);
        let output_path = base.join(
            take::<PathBuf>(&mut root, "output_path")?.unwrap_or_else(|| "results.jsonl".into()),
        );
        let series_path = take::<PathBuf>(&mut root, "series_path")?.map(|p| base.join(p));
        let eval_interval: Option<usize> = take(&mut root, "eval_interval")?;

        let mut stream_table = take_table(&mut root, "stream")?;
        let data_seed: Option<u64> = take(&mut stream_table, "seed")?;
        let path = take::<PathBuf>(&mut stream_table, "path")?.map(|p| base.join(p));
        let test_path = take::<PathBuf>(&mut stream_table, "test_path")?.map(|p| base.join(p));
        let stream_config: StreamConfig =
            overlay(&StreamConfig::default(), stream_table, "stream")?;
        if stream_config.generator == Generator::File && path.is_none() {
            return Err("stream.generator = \"file\" needs stream.path".into());
        }
        if stream_config.generator == Generator::GaussianClusters {
            stream_config.validate().map_err(|e| e.to_string())?;
        }

        let mut model_table = take_table(&mut root, "model")?;
        check_keys(&model_table, MODEL_KEYS, "model.")?;
        let kind: ModelKind = match take::<String>(&mut model_table, "kind")? {
            Some(name) => name.parse().map_err(|e: gradcal::Error| e.to_string())?,
            None => ModelKind::SoftmaxLinear,
        };
        let hidden_width = take(&mut model_table, "hidden_width")?.unwrap_or(32usize);
        let l2 = take(&mut model_table, "l2")?.unwrap_or(0.0f64);
        let class_count = take(&mut model_table, "class_count")?
            .unwrap_or_else(|| stream_config.effective_class_count());
        let model = match kind {
            ModelKind::RidgeQuadratic => ModelSpec::ridge(stream_config.dim, l2),
            ModelKind::SoftmaxLinear => ModelSpec::softmax(stream_config.dim, class_count, l2),
            ModelKind::Mlp1Hidden => {
                ModelSpec::mlp(stream_config.dim, hidden_width, class_count, l2)
            }
        };
        model.validate().map_err(|e| e.to_string())?;

        let train_table = take_table(&mut root, "train")?;
        for key in ["method", "seed"] {
            if train_table.contains_key(key) {
                return Err(format!(
                    "train.{key} is set per run; use the top-level `{key}s` list"
                ));
            }
        }
        let mut train: TrainConfig = overlay(&TrainConfig::default(), train_table, "train")?;
        if let Some(interval) = eval_interval {
            train.eval_interval = interval;
        }
        train.validate().map_err(|e| e.to_string())?;
        let sample_bytes = take(&mut root, "sample_bytes")?
            .unwrap_or_else(|| gradcal::metrics::default_sample_bytes(stream_config.dim));

        Ok(ExperimentConfig {
            mode,
            micro_task_size,
            stream: StreamSource {
                config: stream_config,
                data_seed,
                path,
                test_path,
            },
            model,
            train,
            sample_bytes,
            seeds,
            methods,
            output_path,
            series_path,
        })
    }

    /// SHA-256 of the resolved configuration, excluding seeds, methods and output paths.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Series file next to the records unless configured explicitly.
    pub fn series_path(&self) -> PathBuf {
        self.series_path
            .clone()
            .unwrap_or_else(|| self.output_path.with_extension("series.csv"))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output_path.with_extension("summary.csv")
    }

    /// The data stream used by a run with master seed `seed`.
    pub fn build_stream(&self, seed: u64) -> gradcal::Result<TaskStream> {
        let cil = match self.stream.config.generator {
            Generator::GaussianClusters => generate_gaussian_cil(&StreamConfig {
                seed: self.stream.data_seed.unwrap_or(seed),
                ..self.stream.config.clone()
            })?,
            Generator::File => {
                let path = self.stream.path.as_ref().expect("checked at parse time");
                load_stream_csv(
                    path,
                    &CsvSchema {
                        dim: self.stream.config.dim,
                        mode: StreamMode::Cil,
                        test_path: self.stream.test_path.clone(),
                        chunk_size: 0,
                        class_count: Some(self.model.class_count),
                    },
                )?
            }
        };
        match self.mode {
            RunMode::Cil => Ok(cil),
            RunMode::Tfcl => cil.to_tfcl(self.micro_task_size),
        }
    }
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>, String> {
    if names.is_empty() {
        return Err("methods must list at least one method".into());
    }
    names
        .iter()
        .map(|n| n.parse::<Method>().map_err(|e| e.to_string()))
        .collect()
}

fn check_keys(table: &Table, allowed: &[&str], prefix: &str) -> Result<(), String> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(format!(
                "unknown key `{prefix}{key}` (valid: {})",
                allowed.join(", ")
            ));
        }
    }
    Ok(())
}

fn take<T: serde::de::DeserializeOwned>(table: &mut Table, key: &str) -> Result<Option<T>, String> {
    match table.remove(key) {
        None => Ok(None),
        Some(v) => v
            .try_into()
            .map(Some)
            .map_err(|e: toml::de::Error| format!("key `{key}`: {}", e.message())),
    }
}

fn take_table(table: &mut Table, key: &str) -> Result<Table, String> {
    match table.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(format!("`{key}` must be a table of dotted keys")),
    }
}

/// Applies the keys of `overrides` on top of `defaults`.
fn overlay<T>(defaults: &T, overrides: Table, section: &str) -> Result<T, String>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut base = Table::try_from(defaults).map_err(|e| e.to_string())?;
    let allowed: Vec<String> = base.keys().cloned().collect();
    for (key, value) in overrides {
        if !base.contains_key(&key) {
            return Err(format!(
                "unknown key `{section}.{key}` (valid: {})",
                allowed.join(", ")
            ));
        }
        base.insert(key, value);
    }
    Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| format!("{section}: {}", e.message()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, String> {
        ExperimentConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.methods, vec![Method::Dgc]);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model, ModelSpec::softmax(20, 10, 0.0));
        assert_eq!(c.output_path, Path::new("/tmp/results.jsonl"));
    }

    #[test]
    fn dotted_keys_override_sections() {
        let c = parse(
            "seeds = [3, 4]\nmethods = [\"er\", \"SSVRG\"]\nstream.dim = 8\nstream.seed = 9\n\
             model.kind = \"mlp-1hidden\"\nmodel.hidden_width = 5\ntrain.alpha = 0.01\n\
             train.stage_end = \"exhaustive\"\neval_interval = 7\n",
        )
        .unwrap();
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.methods, vec![Method::Er, Method::Ssvrg]);
        assert_eq!(c.stream.config.dim, 8);
        assert_eq!(c.stream.data_seed, Some(9));
        assert_eq!(c.model, ModelSpec::mlp(8, 5, 10, 0.0));
        assert_eq!(c.train.alpha, 0.01);
        assert_eq!(c.train.eval_interval, 7);
    }

    #[test]
    fn errors_name_the_problem() {
        let err = parse("methods = [\"DGX\"]").unwrap_err();
        assert!(err.contains("ER") && err.contains("DGC-combined"), "{err}");
        assert!(parse("train.steps = 3")
            .unwrap_err()
            .contains("train.steps"));
        assert!(parse("colour = 1").unwrap_err().contains("colour"));
        assert!(parse("train.seed = 1").is_err());
        assert!(parse("seeds = []").is_err());
        let err = parse("seeds = [1,\nstream.dim = ").unwrap_err();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn hash_ignores_seeds_and_tracks_hyperparameters() {
        let a = parse("seeds = [1]").unwrap();
        let b = parse("seeds = [2, 3]").unwrap();
        let c = parse("train.alpha = 0.5").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
