use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const ESOL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/esol.csv");
const ESOL_TARGET: &str = "measured log solubility in mols per litre";

fn compt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compt"))
        .args(args)
        .env("COMPT_THREADS", "2")
        .output()
        .expect("run compt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// First `n` ESOL rows reduced to a smiles and a target column.
fn small_csv(dir: &Path, n: usize) -> PathBuf {
    let mut reader = csv::Reader::from_path(ESOL).unwrap();
    let headers = reader.headers().unwrap().clone();
    let s = headers.iter().position(|h| h == "smiles").unwrap();
    let y = headers.iter().position(|h| h == ESOL_TARGET).unwrap();
    let path = dir.join("small.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["smiles", "logs"]).unwrap();
    for r in reader.records().take(n) {
        let r = r.unwrap();
        w.write_record([&r[s], &r[y]]).unwrap();
    }
    w.flush().unwrap();
    path
}

fn write_config(dir: &Path, name: &str, config: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn graph_config(dir: &Path, data: &Path, out: &str) -> PathBuf {
    write_config(
        dir,
        &format!("{out}.json"),
        json!({
            "data": {"path": p(data), "format": "graph_csv", "target_columns": ["logs"]},
            "split": {"kind": "scaffold", "seed": 1},
            "model": {"hidden_dim": 8, "num_heads": 2, "num_layers": 1},
            "train": {"max_epochs": 2, "learning_rate": 1e-3, "batch_size": 8},
            "output_dir": out
        }),
    )
}

#[test]
fn featurize_esol_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("esol.cache");
    let o = compt(&["featurize", "--input", ESOL, "--format", "graph-csv", "--target", ESOL_TARGET, "--out", p(&cache)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "parsed 1128 skipped 0 capped 0 written 1128");
    assert!(cache.exists());
}

#[test]
fn featurize_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "smiles,y\n").unwrap();
    let out = dir.path().join("c");
    let o = compt(&["featurize", "--input", p(&empty), "--format", "graph-csv", "--target", "y", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no usable molecules"), "{}", stderr(&o));

    let o = compt(&["featurize", "--input", p(&empty), "--format", "graph-csv", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = compt(&["featurize", "--input", p(&empty), "--format", "graph-csv", "--target", "nope", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("missing.csv");
    let o = compt(&["featurize", "--input", p(&missing), "--format", "graph-csv", "--target", "y", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oversized_node_molecule_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("nmr.jsonl");
    let big = "C".repeat(150);
    let lines = [
        json!({"smiles": "CCO", "shifts": {"0": 1.2, "1": 3.7}}),
        json!({"smiles": big, "shifts": {"0": 0.9}}),
        json!({"smiles": "CC(=O)C", "shifts": {"0": 2.1, "3": 2.1}}),
    ];
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&input, text).unwrap();
    let out = dir.path().join("nmr.cache");
    let o = compt(&["featurize", "--input", p(&input), "--format", "node-jsonl", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "parsed 2 skipped 0 capped 1 written 2");
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_csv(dir.path(), 40);
    let config = graph_config(dir.path(), &data, "run");
    let o = compt(&["train", "--config", p(&config), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("test rmse ")), "{text}");
    let run = dir.path().join("run");
    for f in ["model.ckpt", "history.jsonl", "metrics.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let first: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "valid_metric", "lr", "alphas"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let metrics: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();

    let cache = dir.path().join("small.cache");
    let o = compt(&["featurize", "--input", p(&data), "--format", "graph-csv", "--target", "logs", "--out", p(&cache)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("model.ckpt");
    let o = compt(&["eval", "--checkpoint", p(&ckpt), "--data", p(&cache), "--partition", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["metric"], "rmse");
    assert_eq!(report, metrics["test"]);
    let o = compt(&["eval", "--checkpoint", p(&ckpt), "--data", p(&cache), "--partition", "bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let input = dir.path().join("in.csv");
    fs::write(&input, "smiles\nCCO\nc1ccccc1O\n").unwrap();
    let out = dir.path().join("pred.csv");
    let o = compt(&["predict", "--checkpoint", p(&ckpt), "--input", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines[0], "smiles,logs");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("CCO,"));
    lines[1].split(',').nth(1).unwrap().parse::<f64>().unwrap();
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_csv(dir.path(), 30);
    let config = graph_config(dir.path(), &data, "a");
    let read = |d: &str| fs::read_to_string(dir.path().join(d).join("metrics.json")).unwrap();
    assert!(compt(&["train", "--config", p(&config), "--seed", "5"]).status.success());
    let first = read("a");
    let history = fs::read(dir.path().join("a/history.jsonl")).unwrap();
    assert!(compt(&["train", "--config", p(&config), "--seed", "5"]).status.success());
    assert_eq!(first, read("a"));
    assert_eq!(history, fs::read(dir.path().join("a/history.jsonl")).unwrap());
    assert!(compt(&["train", "--config", p(&config), "--seed", "6", "--override", "output_dir=b"]).status.success());
    assert_ne!(first, read("b"));
}

#[test]
fn override_switches_off_diffusion() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_csv(dir.path(), 30);
    let config = graph_config(dir.path(), &data, "run");
    let o = compt(&["train", "--config", p(&config), "--override", "model.use_diffusion=false"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(saved["model"]["use_diffusion"], false);

    let o = compt(&["train", "--config", p(&config), "--override", "model.use_difusion=false"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("use_difusion"), "{}", stderr(&o));
    let o = compt(&["train", "--config", p(&config), "--override", "model.num_heads=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mismatched_model_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_csv(dir.path(), 30);
    let config = graph_config(dir.path(), &data, "run");
    assert!(compt(&["train", "--config", p(&config)]).status.success());
    let ckpt = dir.path().join("run/model.ckpt");
    let cache = dir.path().join("c.cache");
    assert!(compt(&["featurize", "--input", p(&data), "--format", "graph-csv", "--target", "logs", "--out", p(&cache)])
        .status
        .success());
    let ok = compt(&["eval", "--checkpoint", p(&ckpt), "--data", p(&cache), "--config", p(&config)]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let o = compt(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&cache), "--config", p(&config), "--override", "model.hidden_dim=4",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));

    let other = dir.path().join("other.cache");
    let o = compt(&[
        "featurize", "--input", p(&data), "--format", "graph-csv", "--target", "logs", "--out", p(&other), "--distance-cap", "6",
    ]);
    assert!(o.status.success());
    let o = compt(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other)]);
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, "not a checkpoint").unwrap();
    let o = compt(&["eval", "--checkpoint", p(&garbage), "--data", p(&cache)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn node_checkpoint_predicts_per_atom() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("nmr.jsonl");
    let mols = ["CCO", "CC(=O)C", "CCN", "c1ccccc1", "CCCl", "OCCO", "CC(C)O", "CCOC", "C=CC", "CC#N", "CCC", "NCCO"];
    let text: String = mols
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}\n", json!({"smiles": s, "shifts": {"0": 1.0 + 0.1 * i as f64}})))
        .collect();
    fs::write(&input, text).unwrap();
    let config = write_config(
        dir.path(),
        "nmr.json",
        json!({
            "data": {"path": p(&input), "format": "node_jsonl"},
            "split": {"kind": "random", "train_fraction": 0.75, "valid_fraction_of_train": 0.2},
            "model": {"hidden_dim": 8, "num_heads": 2, "num_layers": 1, "task": "node_regression"},
            "train": {"max_epochs": 1},
            "output_dir": "nmr"
        }),
    );
    let o = compt(&["train", "--config", p(&config)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test mae "), "{}", stdout(&o));

    let csv_in = dir.path().join("in.csv");
    fs::write(&csv_in, "smiles\nCCO\n").unwrap();
    let out = dir.path().join("pred.csv");
    let ckpt = dir.path().join("nmr/model.ckpt");
    let o = compt(&["predict", "--checkpoint", p(&ckpt), "--input", p(&csv_in), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines[0], "smiles,atom_index,ppm");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[1], i.to_string());
        f[2].parse::<f64>().unwrap();
    }

    let graph = write_config(
        dir.path(),
        "wrong.json",
        json!({
            "data": {"path": p(&input), "format": "node_jsonl"},
            "output_dir": "x"
        }),
    );
    assert_eq!(compt(&["train", "--config", p(&graph)]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_rejects_unknown_ops() {
    let o = compt(&["gradcheck", "--ops", "all"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 20);
    assert!(text.lines().all(|l| l.ends_with("ok")), "{text}");
    assert!(text.contains("encoder_3_layer"));
    let o = compt(&["gradcheck", "--ops", "softmax_rows"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);
    assert_eq!(compt(&["gradcheck", "--ops", "nonsense"]).status.code(), Some(2));
}

#[test]
fn inspect_dumps_message_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_csv(dir.path(), 30);
    let config = graph_config(dir.path(), &data, "run");
    assert!(compt(&["train", "--config", p(&config)]).status.success());
    let ckpt = dir.path().join("run/model.ckpt");
    let o = compt(&["inspect", "--checkpoint", p(&ckpt), "--smiles", "c1ccccc1", "--layer", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let alpha = v["alpha"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&alpha));
    for a in v["alphas"].as_array().unwrap() {
        assert!((0.0..=1.0).contains(&a.as_f64().unwrap()));
    }
    let heads = v["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 2);
    for h in heads {
        let pre = h["combined"].as_array().unwrap();
        let post = h["diffused"].as_array().unwrap();
        assert_eq!(pre.len(), 6);
        for i in 0..6 {
            assert_eq!(pre[i].as_array().unwrap().len(), 6);
            for j in 0..6 {
                if i != j {
                    let (a, b) = (pre[i][j].as_f64().unwrap(), post[i][j].as_f64().unwrap());
                    assert!(b.abs() <= a.abs(), "{a} {b}");
                }
            }
        }
    }
    let o = compt(&["inspect", "--checkpoint", p(&ckpt), "--smiles", "c1ccccc1", "--layer", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = compt(&["inspect", "--checkpoint", p(&ckpt), "--smiles", "C1CC", "--layer", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
