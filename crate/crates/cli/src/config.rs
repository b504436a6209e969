use std::path::{Path, PathBuf};

use compt::model::ModelConfig;
use compt::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    GraphCsv,
    NodeJsonl,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: DataFormat,
    #[serde(default = "default_smiles_column")]
    pub smiles_column: String,
    #[serde(default)]
    pub target_columns: Vec<String>,
    /// JSON-lines sidecar with partial charges keyed by source row.
    #[serde(default)]
    pub feature_overrides: Option<PathBuf>,
}

fn default_smiles_column() -> String {
    "smiles".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Scaffold {
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    Random {
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default = "default_valid_fraction")]
        valid_fraction_of_train: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_valid_fraction() -> f64 {
    0.05
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Scaffold {
            fractions: default_fractions(),
            seed: 0,
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<(), CliError> {
        let ok = match self {
            SplitConfig::Scaffold { fractions, .. } => {
                fractions.iter().all(|f| (0.0..=1.0).contains(f)) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
            SplitConfig::Random {
                train_fraction,
                valid_fraction_of_train,
                ..
            } => (0.0..=1.0).contains(train_fraction) && (0.0..1.0).contains(valid_fraction_of_train),
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Input(format!("invalid split fractions in {self:?}")))
        }
    }
}

/// Everything a training run needs. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

/// Parses a `key.path=value` override. The value is read as JSON when it
/// parses as JSON and as a plain string otherwise.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override {text:?} is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Input(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (depth, key) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Input(format!("override path {}: {key:?} is not inside an object", path.join(".")))
        })?;
        if depth + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("config {} is not valid JSON: {e}", path.display())))?;
        for o in overrides {
            let (keys, v) = parse_override(o)?;
            apply_override(&mut value, &keys, v)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.data.path = base.join(&config.data.path);
        config.data.feature_overrides = config.data.feature_overrides.map(|p| base.join(p));
        config.output_dir = base.join(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Input(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Input(e.to_string()))?;
        self.split.validate()?;
        if self.data.format == DataFormat::GraphCsv && self.data.target_columns.is_empty() {
            return Err(CliError::Input("data.target_columns must name at least one column".into()));
        }
        Ok(())
    }
}
