use super::*;
use crate::chem::parse_smiles;
use crate::datasets::LabeledMolecule;
use crate::featurize::FeaturizerConfig;
use crate::model::ModelConfig;

const SMILES: [&str; 12] = [
    "CCO", "CC(=O)O", "c1ccccc1", "CCN", "OCCO", "CC(C)C", "C1CCCCC1", "CCCl", "c1ccncc1", "CC=O", "CCOC", "NCC(=O)O",
];

fn dataset(classification: bool) -> Dataset {
    let mols: Vec<LabeledMolecule> = SMILES
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let graph = parse_smiles(s).unwrap();
            let n = graph.atom_count() as f64;
            let y = if classification { (n > 4.0) as u8 as f64 } else { 0.5 * n - 1.0 };
            LabeledMolecule {
                smiles: s.to_string(),
                graph,
                graph_targets: vec![Some(y)],
                node_targets: None,
                source_row: i,
            }
        })
        .collect();
    featurize_all(&mols, vec!["y".into()], &FeaturizerConfig::default()).unwrap().0
}

fn small_model(task: Task, seed: u64) -> Model {
    let config = ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        num_layers: 1,
        dropout: 0.1,
        task,
        ..ModelConfig::default()
    };
    Model::init(config, seed).unwrap()
}

fn split() -> SplitAssignment {
    SplitAssignment {
        train: (0..8).collect(),
        valid: vec![8, 9],
        test: vec![10, 11],
    }
}

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
}

use crate::datasets::featurize_all;

#[test]
fn warmup_schedule() {
    let c = TrainConfig {
        learning_rate: 0.01,
        warmup_epochs: 4,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (1..=6).map(|e| c.lr_at(e)).collect();
    assert_eq!(lrs, vec![0.0025, 0.005, 0.0075, 0.01, 0.01, 0.01]);
    let flat = TrainConfig {
        warmup_epochs: 0,
        ..c
    };
    assert_eq!(flat.lr_at(1), 0.01);
}

#[test]
fn scaler_round_trip() {
    let data = dataset(false);
    let s = TargetScaler::fit(&data, &[0, 1, 2, 3]);
    let raw: Vec<f64> = [0, 1, 2, 3].iter().map(|&i| data.samples[i].targets[0]).collect();
    let scaled = s.scale(&raw);
    let mean = scaled.iter().sum::<f64>() / 4.0;
    let var = scaled.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    let back = s.unscale(&scaled);
    for (a, b) in back.iter().zip(&raw) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_metric_with_patience_one_stops_at_epoch_two() {
    let data = dataset(false);
    let config = TrainConfig {
        patience: 1,
        max_epochs: 20,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let r = fit_in_pool(&pool(2), small_model(Task::GraphRegression, 1), &data, &split(), &config, false, |_, _| Ok(3.0)).unwrap();
    assert_eq!(r.history.len(), 2);
    assert_eq!(r.history.last().unwrap().epoch, 2);
    assert_eq!(r.best_epoch, 1);
}

#[test]
fn patience_zero_runs_every_epoch() {
    let data = dataset(false);
    let config = TrainConfig {
        patience: 0,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let r = fit_in_pool(&pool(1), small_model(Task::GraphRegression, 1), &data, &split(), &config, false, |_, _| Ok(3.0)).unwrap();
    assert_eq!(r.history.len(), 3);
}

#[test]
fn training_is_independent_of_thread_count() {
    let data = dataset(false);
    let config = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 3,
        batch_size: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |threads| {
        fit_in_pool(&pool(threads), small_model(Task::GraphRegression, 4), &data, &split(), &config, false, |m, s| {
            Ok(evaluate(m, s, &data, &[8, 9])?.mean)
        })
        .unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.history, b.history);
    for id in a.model.params().ids() {
        assert_eq!(a.model.params().value(id), b.model.params().value(id));
    }
}

#[test]
fn regression_loss_decreases() {
    let data = dataset(false);
    let config = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 30,
        batch_size: 4,
        warmup_epochs: 0,
        patience: 0,
        ..TrainConfig::default()
    };
    let r = fit(small_model(Task::GraphRegression, 2), &data, &split(), &config).unwrap();
    let first = r.history[0].train_loss;
    let last = r.history.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(r.history[0].alphas.len(), 1);
}

#[test]
fn best_model_is_returned() {
    let data = dataset(false);
    let config = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 4,
        patience: 0,
        ..TrainConfig::default()
    };
    let mut scores = vec![5.0, 1.0, 2.0, 3.0].into_iter();
    let mut snapshots = Vec::new();
    let r = fit_in_pool(&pool(2), small_model(Task::GraphRegression, 3), &data, &split(), &config, false, |m, _| {
        snapshots.push(m.clone());
        Ok(scores.next().unwrap())
    })
    .unwrap();
    assert_eq!(r.best_epoch, 2);
    assert_eq!(r.best_valid, 1.0);
    for id in r.model.params().ids() {
        assert_eq!(r.model.params().value(id), snapshots[1].params().value(id));
    }
}

#[test]
fn classification_evaluation_skips_single_class_targets() {
    let data = dataset(true);
    let model = small_model(Task::GraphClassification, 5);
    let both: Vec<usize> = (0..12).collect();
    let report = evaluate(&model, None, &data, &both).unwrap();
    assert_eq!(report.metric, "roc_auc");
    assert!((0.0..=1.0).contains(&report.mean));
    let ones: Vec<usize> = both.iter().copied().filter(|&i| data.samples[i].targets[0] == 1.0).collect();
    assert!(matches!(
        evaluate(&model, None, &data, &ones),
        Err(TrainError::Metric(MetricError::AllMasked))
    ));
}

#[test]
fn empty_partitions_are_rejected() {
    let data = dataset(false);
    let mut s = split();
    s.valid.clear();
    let r = fit(small_model(Task::GraphRegression, 1), &data, &s, &TrainConfig::default());
    assert!(matches!(r, Err(TrainError::EmptyPartition("valid"))));
}

#[test]
fn history_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let rec = EpochRecord {
        epoch: 1,
        train_loss: 0.5,
        valid_metric: 0.25,
        lr: 1e-4,
        alphas: vec![0.5, 0.6],
    };
    write_history(&path, &[rec.clone(), rec.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let back: EpochRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(back, rec);
}
