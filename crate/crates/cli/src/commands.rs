use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use compt::chem::parse_smiles;
use compt::datasets::{
    apply_feature_overrides, cache_featurized, featurize_all, load_cache, load_graph_csv, load_node_jsonl,
    random_split, scaffold_split, Dataset, SplitAssignment,
};
use compt::featurize::{build_featurized, FeaturizerConfig};
use compt::metrics::MetricReport;
use compt::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use compt::train::{evaluate, fit, predict_values, write_history, TargetScaler};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataConfig, DataFormat, RunConfig, SplitConfig};
use crate::error::CliError;

pub struct LoadCounts {
    pub parsed: usize,
    pub skipped: usize,
    pub capped: usize,
}

pub fn load_dataset(data: &DataConfig, featurizer: &FeaturizerConfig) -> Result<(Dataset, LoadCounts), CliError> {
    let (mut dataset, counts) = match data.format {
        DataFormat::Cache => {
            let d = load_cache(&data.path, featurizer)?;
            let counts = LoadCounts {
                parsed: d.len(),
                skipped: 0,
                capped: 0,
            };
            (d, counts)
        }
        DataFormat::GraphCsv | DataFormat::NodeJsonl => {
            let (report, names) = if data.format == DataFormat::GraphCsv {
                let cols: Vec<&str> = data.target_columns.iter().map(String::as_str).collect();
                (
                    load_graph_csv(&data.path, &data.smiles_column, &cols)?,
                    data.target_columns.clone(),
                )
            } else {
                (load_node_jsonl(&data.path, featurizer.max_atoms)?, vec!["shift".to_string()])
            };
            let (d, capped) = featurize_all(&report.molecules, names, featurizer)?;
            let counts = LoadCounts {
                parsed: report.molecules.len(),
                skipped: report.skipped,
                capped: report.capped + capped,
            };
            (d, counts)
        }
    };
    if let Some(path) = &data.feature_overrides {
        let n = apply_feature_overrides(&mut dataset, path)?;
        log::info!("applied feature overrides to {n} molecules");
    }
    Ok((dataset, counts))
}

pub fn featurize(data: &DataConfig, featurizer: &FeaturizerConfig, out: &Path) -> Result<(), CliError> {
    if data.format == DataFormat::Cache {
        return Err(CliError::Input("featurize reads graph-csv or node-jsonl input".into()));
    }
    let (dataset, counts) = load_dataset(data, featurizer)?;
    cache_featurized(&dataset, featurizer, out)?;
    println!(
        "parsed {} skipped {} capped {} written {}",
        counts.parsed,
        counts.skipped,
        counts.capped,
        dataset.len()
    );
    Ok(())
}

/// Run metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunExtra {
    pub scaler: Option<TargetScaler>,
    pub target_names: Vec<String>,
    pub split: SplitAssignment,
    pub dataset_len: usize,
}

fn split_dataset(dataset: &Dataset, split: &SplitConfig) -> SplitAssignment {
    match *split {
        SplitConfig::Scaffold { fractions, seed } => scaffold_split(&dataset.scaffolds(), fractions, seed),
        SplitConfig::Random {
            train_fraction,
            valid_fraction_of_train,
            seed,
        } => random_split(dataset.len(), train_fraction, valid_fraction_of_train, seed),
    }
}

fn report_or_none(
    model: &Model,
    scaler: Option<&TargetScaler>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Option<MetricReport>, CliError> {
    if indices.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, scaler, data, indices)?))
}

pub fn train(mut config: RunConfig) -> Result<(), CliError> {
    let featurizer = config.model.featurizer();
    let (dataset, counts) = load_dataset(&config.data, &featurizer)?;
    log::info!(
        "loaded {} molecules ({} skipped, {} capped)",
        dataset.len(),
        counts.skipped,
        counts.capped
    );
    if dataset.meta.node_level != config.model.task.is_node_level() {
        return Err(CliError::Input(format!(
            "task {:?} does not match a {} dataset",
            config.model.task,
            if dataset.meta.node_level { "node-level" } else { "graph-level" }
        )));
    }
    config.model.num_targets = dataset.meta.num_targets;
    let split = split_dataset(&dataset, &config.split);
    log::info!(
        "split sizes: train {} valid {} test {}",
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let model = Model::init(config.model.clone(), config.train.seed)?;
    let result = fit(model, &dataset, &split, &config.train)?;
    let scaler = result.scaler.as_ref();

    let reports = [
        ("train", report_or_none(&result.model, scaler, &dataset, &split.train)?),
        ("valid", report_or_none(&result.model, scaler, &dataset, &split.valid)?),
        ("test", report_or_none(&result.model, scaler, &dataset, &split.test)?),
    ];

    fs::create_dir_all(&config.output_dir).map_err(CliError::internal)?;
    let extra = RunExtra {
        scaler: result.scaler.clone(),
        target_names: dataset.meta.target_names.clone(),
        split: split.clone(),
        dataset_len: dataset.len(),
    };
    let ckpt = config.output_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &result.model, &serde_json::to_value(&extra).map_err(CliError::internal)?)
        .map_err(CliError::internal)?;
    write_history(&config.output_dir.join("history.jsonl"), &result.history).map_err(CliError::internal)?;
    let metrics = json!({
        "best_epoch": result.best_epoch,
        "epochs_run": result.history.len(),
        "train": reports[0].1,
        "valid": reports[1].1,
        "test": reports[2].1,
    });
    write_json(&config.output_dir.join("metrics.json"), &metrics)?;
    write_json(&config.output_dir.join("config.json"), &config)?;

    for (name, report) in &reports {
        if let Some(r) = report {
            println!("{name} {} {:.6}", r.metric, r.mean);
        }
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(CliError::internal),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::internal)
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub extra: RunExtra,
}

/// Loads a checkpoint and verifies it against the current featurizer and,
/// when given, the model section of a run config.
pub fn open_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<LoadedCheckpoint, CliError> {
    let (model, hash, extra) = load_checkpoint(path)?;
    let current = model.config().featurizer().hash();
    if hash != current {
        return Err(CliError::Input(format!(
            "checkpoint featurizer {hash} does not match current featurizer {current}"
        )));
    }
    if let Some(expected) = expected {
        let expected = ModelConfig {
            num_targets: model.config().num_targets,
            ..expected.clone()
        };
        if &expected != model.config() {
            return Err(CliError::Input(format!(
                "checkpoint model config {} does not match the given config {}",
                serde_json::to_string(model.config()).map_err(CliError::internal)?,
                serde_json::to_string(&expected).map_err(CliError::internal)?
            )));
        }
    }
    let extra: RunExtra = serde_json::from_value(extra)
        .map_err(|e| CliError::Input(format!("checkpoint run metadata: {e}")))?;
    Ok(LoadedCheckpoint { model, extra })
}

pub fn eval(ckpt: &LoadedCheckpoint, data: &Path, partition: &str) -> Result<(), CliError> {
    let dataset = load_cache(data, &ckpt.model.config().featurizer())?;
    let all: Vec<usize>;
    let indices = if partition == "all" {
        all = (0..dataset.len()).collect();
        &all[..]
    } else {
        if dataset.len() != ckpt.extra.dataset_len {
            return Err(CliError::Input(format!(
                "cache holds {} molecules but the checkpoint split covers {}",
                dataset.len(),
                ckpt.extra.dataset_len
            )));
        }
        ckpt.extra
            .split
            .partition(partition)
            .ok_or_else(|| CliError::Input(format!("unknown partition {partition:?}")))?
    };
    if indices.is_empty() {
        return Err(CliError::Input(format!("partition {partition:?} is empty")));
    }
    let report = evaluate(&ckpt.model, ckpt.extra.scaler.as_ref(), &dataset, indices)?;
    emit(&serde_json::to_string(&report).map_err(CliError::internal)?)?;
    Ok(())
}

pub fn predict(ckpt: &LoadedCheckpoint, input: &Path, smiles_column: &str, out: &Path) -> Result<(), CliError> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| CliError::Input(e.to_string()))?;
    let headers = reader.headers().map_err(|e| CliError::Input(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == smiles_column)
        .ok_or_else(|| CliError::Input(format!("column {smiles_column:?} not found in {}", input.display())))?;
    let node = ckpt.model.config().task.is_node_level();
    let featurizer = ckpt.model.config().featurizer();
    let mut writer = csv::Writer::from_path(out).map_err(CliError::internal)?;
    if node {
        writer.write_record(["smiles", "atom_index", "ppm"]).map_err(CliError::internal)?;
    } else {
        let mut head = vec!["smiles".to_string()];
        head.extend(ckpt.extra.target_names.iter().cloned());
        writer.write_record(&head).map_err(CliError::internal)?;
    }
    let mut failed = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(e.to_string()))?;
        let smiles = record.get(col).unwrap_or("").trim();
        let values = parse_smiles(smiles)
            .map_err(|e| e.to_string())
            .and_then(|g| build_featurized(&g, &featurizer).map_err(|e| e.to_string()))
            .and_then(|g| predict_values(&ckpt.model, ckpt.extra.scaler.as_ref(), &g).map_err(|e| e.to_string()));
        let values = match values {
            Ok(v) => v,
            Err(e) => {
                log::warn!("row {}: {smiles:?}: {e}", row + 2);
                failed += 1;
                if !node {
                    let mut rec = vec![smiles.to_string()];
                    rec.extend(ckpt.extra.target_names.iter().map(|_| String::new()));
                    writer.write_record(&rec).map_err(CliError::internal)?;
                }
                continue;
            }
        };
        if node {
            for (i, v) in values.iter().enumerate() {
                writer
                    .write_record([smiles.to_string(), i.to_string(), v.to_string()])
                    .map_err(CliError::internal)?;
            }
        } else {
            let mut rec = vec![smiles.to_string()];
            rec.extend(values.iter().map(f64::to_string));
            writer.write_record(&rec).map_err(CliError::internal)?;
        }
    }
    writer.flush().map_err(CliError::internal)?;
    if failed > 0 {
        eprintln!("{failed} molecules could not be predicted");
    }
    Ok(())
}

pub fn gradcheck(op: &str) -> Result<(), CliError> {
    let filter = (op != "all").then_some(op);
    let results = compt::gradcheck::run(filter).map_err(|e| match e {
        compt::tensor::TensorError::InvalidArgument { op: "gradcheck", .. } => CliError::Input(e.to_string()),
        other => CliError::internal(other),
    })?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        emit(&format!("{:<20} {:>12.3e}  tol {:.0e}  {status}", r.op, r.max_error, r.tolerance))?;
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Internal(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn rows(t: &compt::tensor::Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

pub fn inspect(ckpt: &LoadedCheckpoint, smiles: &str, layer: usize) -> Result<(), CliError> {
    let graph = parse_smiles(smiles).map_err(|e| CliError::Input(format!("{smiles:?}: {e}")))?;
    let g = build_featurized(&graph, &ckpt.model.config().featurizer()).map_err(|e| CliError::Input(e.to_string()))?;
    let (_, trace) = ckpt.model.trace(&g)?;
    let layers = trace.layers.len();
    let t = trace
        .layers
        .get(layer)
        .ok_or_else(|| CliError::Input(format!("layer {layer} out of range, model has {layers} layers")))?;
    let heads: Vec<_> = t
        .heads
        .iter()
        .enumerate()
        .map(|(h, head)| {
            json!({
                "head": h,
                "combined": rows(&head.combined),
                "diffused": rows(&head.diffused),
            })
        })
        .collect();
    let out = json!({
        "smiles": smiles,
        "atoms": g.atom_count(),
        "layer": layer,
        "diffusion": ckpt.model.config().use_diffusion,
        "alpha": t.alpha,
        "alphas": ckpt.model.alphas(),
        "heads": heads,
    });
    emit(&serde_json::to_string_pretty(&out).map_err(CliError::internal)?)?;
    Ok(())
}

pub fn config_for(path: Option<&PathBuf>, overrides: &[String]) -> Result<Option<ModelConfig>, CliError> {
    path.map(|p| RunConfig::load(p, overrides).map(|c| c.model)).transpose()
}
