//! Loading labelled molecules, featurizing them in bulk, splitting into
//! train/valid/test and caching featurized data on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chem::{extract_scaffold, parse_smiles, scaffold_key, MolGraph};
use crate::featurize::{build_featurized, node_col, FeaturizeError, FeaturizedGraph, FeaturizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("no usable molecules in dataset")]
    EmptyDataset,
    #[error("bad record on line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error("cache format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("cache was built with featurizer {found}, current featurizer is {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("malformed cache: {0}")]
    Format(String),
}

/// One input record after parsing.
#[derive(Debug, Clone)]
pub struct LabeledMolecule {
    pub smiles: String,
    pub graph: MolGraph,
    /// One entry per target column; `None` where the cell was blank.
    pub graph_targets: Vec<Option<f64>>,
    /// Atom index to value, for node-level tasks.
    pub node_targets: Option<BTreeMap<usize, f64>>,
    /// Zero-based data row (CSV rows after the header, JSONL lines).
    pub source_row: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub molecules: Vec<LabeledMolecule>,
    /// Rows whose SMILES failed to parse or that carried no target.
    pub skipped: usize,
    /// Rows rejected for exceeding the atom limit.
    pub capped: usize,
}

/// Reads a CSV with a header row. Blank target cells become missing;
/// unparseable SMILES and rows without any target are skipped and counted.
pub fn load_graph_csv(path: &Path, smiles_column: &str, target_columns: &[&str]) -> Result<LoadReport, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let smiles_idx = find(smiles_column)?;
    let target_idx = target_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;

    let mut report = LoadReport::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let smiles = record.get(smiles_idx).unwrap_or("").trim().to_string();
        let mut targets = Vec::with_capacity(target_idx.len());
        for &i in &target_idx {
            let cell = record.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                targets.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| DatasetError::BadRecord {
                    line,
                    detail: format!("target {cell:?} is not a number"),
                })?;
                targets.push(Some(v));
            }
        }
        if targets.iter().all(Option::is_none) {
            log::warn!("line {line}: no target values, skipped");
            report.skipped += 1;
            continue;
        }
        match parse_smiles(&smiles) {
            Ok(graph) => report.molecules.push(LabeledMolecule {
                smiles,
                graph,
                graph_targets: targets,
                node_targets: None,
                source_row: row,
            }),
            Err(e) => {
                log::warn!("line {line}: cannot parse {smiles:?}: {e}");
                report.skipped += 1;
            }
        }
    }
    if report.skipped > 0 {
        log::info!("{}: skipped {} rows", path.display(), report.skipped);
    }
    if report.molecules.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(report)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    smiles: String,
    shifts: BTreeMap<String, f64>,
}

/// Reads JSON lines of the form `{"smiles": "CCO", "shifts": {"2": 3.7}}`.
/// Molecules above `max_atoms` are rejected and counted.
pub fn load_node_jsonl(path: &Path, max_atoms: usize) -> Result<LoadReport, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut report = LoadReport::default();
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = row + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| DatasetError::BadRecord { line: line_no, detail };
        let rec: NodeRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let graph = match parse_smiles(&rec.smiles) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("line {line_no}: cannot parse {:?}: {e}", rec.smiles);
                report.skipped += 1;
                continue;
            }
        };
        if graph.atom_count() > max_atoms {
            report.capped += 1;
            continue;
        }
        let mut shifts = BTreeMap::new();
        for (k, v) in rec.shifts {
            let idx: usize = k.parse().map_err(|_| bad(format!("atom index {k:?} is not an integer")))?;
            if idx >= graph.atom_count() {
                return Err(bad(format!(
                    "atom index {idx} out of range for {} atoms",
                    graph.atom_count()
                )));
            }
            shifts.insert(idx, v);
        }
        if shifts.is_empty() {
            report.skipped += 1;
            continue;
        }
        report.molecules.push(LabeledMolecule {
            smiles: rec.smiles,
            graph,
            graph_targets: Vec::new(),
            node_targets: Some(shifts),
            source_row: row,
        });
    }
    if report.molecules.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(report)
}

/// A featurized molecule with flat targets laid out like the model
/// output: `[num_targets]` for graph tasks, `[n]` for node tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub smiles: String,
    pub scaffold: String,
    pub source_row: usize,
    pub graph: FeaturizedGraph,
    pub targets: Vec<f64>,
    /// 1 where a target is present, 0 where missing.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub node_level: bool,
    pub num_targets: usize,
    pub target_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaffolds(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.scaffold.clone()).collect()
    }
}

/// Featurizes records in parallel. Returns the dataset and the number of
/// molecules dropped for exceeding the atom limit.
pub fn featurize_all(
    molecules: &[LabeledMolecule],
    target_names: Vec<String>,
    config: &FeaturizerConfig,
) -> Result<(Dataset, usize), DatasetError> {
    let node_level = molecules.first().is_some_and(|m| m.node_targets.is_some());
    let num_targets = if node_level { 1 } else { target_names.len() };
    let built: Vec<Result<Sample, FeaturizeError>> = molecules
        .par_iter()
        .map(|m| {
            let graph = build_featurized(&m.graph, config)?;
            let (targets, mask) = match &m.node_targets {
                Some(shifts) => {
                    let n = m.graph.atom_count();
                    let mut t = vec![0.0; n];
                    let mut k = vec![0.0; n];
                    for (&i, &v) in shifts {
                        t[i] = v;
                        k[i] = 1.0;
                    }
                    (t, k)
                }
                None => (
                    m.graph_targets.iter().map(|v| v.unwrap_or(0.0)).collect(),
                    m.graph_targets.iter().map(|v| v.is_some() as u8 as f64).collect(),
                ),
            };
            Ok(Sample {
                smiles: m.smiles.clone(),
                scaffold: scaffold_key(&extract_scaffold(&m.graph)),
                source_row: m.source_row,
                graph,
                targets,
                mask,
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(built.len());
    let mut capped = 0;
    for b in built {
        match b {
            Ok(s) => samples.push(s),
            Err(FeaturizeError::TooManyAtoms { .. }) => capped += 1,
        }
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let meta = DatasetMeta {
        node_level,
        num_targets,
        target_names,
    };
    Ok((Dataset { meta, samples }, capped))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideRecord {
    source_row: usize,
    #[serde(default)]
    gasteiger: Option<Vec<f64>>,
    #[serde(default)]
    gasteiger_h: Option<Vec<f64>>,
}

/// Fills the two partial-charge columns from a JSON-lines sidecar of
/// `{"source_row": r, "gasteiger": [...], "gasteiger_h": [...]}` records.
/// Returns the number of molecules updated.
pub fn apply_feature_overrides(data: &mut Dataset, path: &Path) -> Result<usize, DatasetError> {
    let by_row: HashMap<usize, usize> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.source_row, i))
        .collect();
    let reader = BufReader::new(File::open(path)?);
    let mut updated = 0;
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| DatasetError::BadRecord { line: row + 1, detail };
        let rec: OverrideRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let Some(&idx) = by_row.get(&rec.source_row) else {
            continue;
        };
        let x = &mut data.samples[idx].graph.x;
        let n = x.shape()[0];
        let width = x.shape()[1];
        for (col, values) in [(node_col::GASTEIGER, rec.gasteiger), (node_col::GASTEIGER_H, rec.gasteiger_h)] {
            let Some(values) = values else { continue };
            if values.len() != n {
                return Err(bad(format!("{} values for {n} atoms", values.len())));
            }
            for (i, v) in values.into_iter().enumerate() {
                x.data_mut()[i * width + col] = v;
            }
        }
        updated += 1;
    }
    Ok(updated)
}

/// Disjoint index lists covering a dataset exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn partition(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn seeded_hash(key: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Groups indices by scaffold key and hands whole groups, largest first,
/// to the partition with the largest remaining deficit. Equal-size groups
/// are ordered by a seeded hash of their key; equal deficits go to the
/// earlier partition (train, valid, test).
pub fn scaffold_split(keys: &[String], ratios: [f64; 3], seed: u64) -> SplitAssignment {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.as_str()).or_default().push(i);
    }
    let mut groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| {
        b.1.len()
            .cmp(&a.1.len())
            .then_with(|| seeded_hash(a.0, seed).cmp(&seeded_hash(b.0, seed)))
            .then_with(|| a.0.cmp(b.0))
    });
    let n = keys.len() as f64;
    let targets = ratios.map(|r| r * n);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (_, members) in groups {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for p in 0..3 {
            let deficit = targets[p] - parts[p].len() as f64;
            if deficit > best_deficit + 1e-9 {
                best = p;
                best_deficit = deficit;
            }
        }
        parts[best].extend(members);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, valid, test] = parts;
    SplitAssignment { train, valid, test }
}

/// Seeded shuffle, then `train_fraction` of the data for training (of which
/// `valid_fraction_of_train` is held out for early stopping) and the rest
/// for testing. Sizes are floored.
pub fn random_split(n: usize, train_fraction: f64, valid_fraction_of_train: f64, seed: u64) -> SplitAssignment {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let outer = ((train_fraction * n as f64) + 1e-9).floor() as usize;
    let valid = ((valid_fraction_of_train * outer as f64) + 1e-9).floor() as usize;
    let mut train = order[..outer - valid].to_vec();
    let mut valid = order[outer - valid..outer].to_vec();
    let mut test = order[outer..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    SplitAssignment { train, valid, test }
}

const CACHE_MAGIC: &[u8; 4] = b"CMPT";
pub const CACHE_VERSION: u16 = 1;

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    put_u64(buf, v.len() as u64);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.data.len() - self.pos < n {
            return Err(DatasetError::Format("unexpected end of data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, DatasetError> {
        let n = self.u64()?;
        if n > (self.data.len() - self.pos) as u64 {
            return Err(DatasetError::Format(format!("length {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8], DatasetError> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, DatasetError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| DatasetError::Format(e.to_string()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, DatasetError> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DatasetError::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Binary container: magic `CMPT`, u16 format version, featurizer hash,
/// JSON metadata, then length-prefixed sample records.
pub fn cache_featurized(data: &Dataset, config: &FeaturizerConfig, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = Vec::new();
    head.extend_from_slice(CACHE_MAGIC);
    head.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    put_bytes(&mut head, config.hash().as_bytes());
    put_bytes(&mut head, &serde_json::to_vec(&data.meta).expect("metadata serializes"));
    put_u64(&mut head, data.samples.len() as u64);
    w.write_all(&head)?;
    let mut rec = Vec::new();
    for s in &data.samples {
        rec.clear();
        put_u64(&mut rec, s.source_row as u64);
        put_bytes(&mut rec, s.smiles.as_bytes());
        put_bytes(&mut rec, s.scaffold.as_bytes());
        put_u64(&mut rec, s.graph.atom_count() as u64);
        put_f64s(&mut rec, s.graph.x.data());
        put_f64s(&mut rec, s.graph.e.data());
        put_f64s(&mut rec, s.graph.a.data());
        put_f64s(&mut rec, &s.targets);
        put_f64s(&mut rec, &s.mask);
        let mut framed = Vec::with_capacity(rec.len() + 8);
        put_bytes(&mut framed, &rec);
        w.write_all(&framed)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path, config: &FeaturizerConfig) -> Result<Dataset, DatasetError> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 6 || &raw[..4] != CACHE_MAGIC {
        return Err(DatasetError::Format("not a featurized cache file".into()));
    }
    let version = u16::from_le_bytes([raw[4], raw[5]]);
    if version != CACHE_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let mut c = Cursor { data: &raw, pos: 6 };
    let found = c.string()?;
    let expected = config.hash();
    if found != expected {
        return Err(DatasetError::HashMismatch { found, expected });
    }
    let meta: DatasetMeta =
        serde_json::from_slice(c.bytes()?).map_err(|e| DatasetError::Format(format!("metadata: {e}")))?;
    let count = c.u64()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut r = Cursor { data: c.bytes()?, pos: 0 };
        let source_row = r.u64()? as usize;
        let smiles = r.string()?;
        let scaffold = r.string()?;
        let n = r.u64()? as usize;
        let shaped = |shape: Vec<usize>, v: Vec<f64>| {
            Tensor::new(shape, v).map_err(|e| DatasetError::Format(e.to_string()))
        };
        let x = shaped(vec![n, crate::featurize::NODE_FEATURES], r.f64s()?)?;
        let e = shaped(vec![n, n, crate::featurize::EDGE_FEATURES], r.f64s()?)?;
        let a = shaped(vec![n, n], r.f64s()?)?;
        let targets = r.f64s()?;
        let mask = r.f64s()?;
        if targets.len() != mask.len() {
            return Err(DatasetError::Format("target and mask lengths differ".into()));
        }
        samples.push(Sample {
            smiles,
            scaffold,
            source_row,
            graph: FeaturizedGraph { x, e, a },
            targets,
            mask,
        });
    }
    if c.pos != raw.len() {
        return Err(DatasetError::Format("trailing bytes after records".into()));
    }
    Ok(Dataset { meta, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "smiles,logS\nCCO,0.5\nc1ccccc1,-1.2\n");
        let r = load_graph_csv(&p, "smiles", &["logS"]).unwrap();
        assert_eq!(r.molecules.len(), 2);
        assert_eq!(r.molecules[1].graph_targets, vec![Some(-1.2)]);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn csv_missing_cells_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let header: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
        let cells = ["1", "", "0", "", "1", "1", "", "0", "0", "1", "0", "1"];
        let body = format!("smiles,{}\n\"CC(=O)O\",{}\n", header.join(","), cells.join(","));
        let p = write(&dir, "tox.csv", &body);
        let cols: Vec<&str> = header.iter().map(String::as_str).collect();
        let r = load_graph_csv(&p, "smiles", &cols).unwrap();
        let t = &r.molecules[0].graph_targets;
        assert_eq!(t.iter().filter(|v| v.is_some()).count(), 9);
        assert_eq!(t.iter().filter(|v| v.is_none()).count(), 3);
        assert!(matches!(
            load_graph_csv(&p, "SMILES", &cols),
            Err(DatasetError::MissingColumn(c)) if c == "SMILES"
        ));
    }

    #[test]
    fn csv_nothing_parseable() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.csv", "smiles,y\nC1CC,1\nXx,2\n");
        assert!(matches!(load_graph_csv(&p, "smiles", &["y"]), Err(DatasetError::EmptyDataset)));
        let p = write(&dir, "empty.csv", "smiles,y\n");
        assert!(matches!(load_graph_csv(&p, "smiles", &["y"]), Err(DatasetError::EmptyDataset)));
        let p = write(&dir, "mixed.csv", "smiles,y\nC1CC,1\nCC,2\n");
        let r = load_graph_csv(&p, "smiles", &["y"]).unwrap();
        assert_eq!((r.molecules.len(), r.skipped), (1, 1));
        assert_eq!(r.molecules[0].source_row, 1);
    }

    #[test]
    fn node_jsonl_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "n.jsonl", "{\"smiles\":\"CCO\",\"shifts\":{\"2\":3.7}}\n");
        let r = load_node_jsonl(&p, 100).unwrap();
        assert_eq!(r.molecules[0].node_targets.as_ref().unwrap()[&2], 3.7);

        let p = write(&dir, "bad.jsonl", "{\"smiles\":\"CC\",\"shifts\":{\"0\":1}}\n{\"smiles\":\"CCO\",\"shifts\":{\"9\":1.0}}\n");
        assert!(matches!(load_node_jsonl(&p, 100), Err(DatasetError::BadRecord { line: 2, .. })));

        let big = "C".repeat(150);
        let body = format!("{{\"smiles\":\"{big}\",\"shifts\":{{\"0\":1.0}}}}\n{{\"smiles\":\"CC\",\"shifts\":{{\"1\":0.9}}}}\n");
        let p = write(&dir, "big.jsonl", &body);
        let r = load_node_jsonl(&p, 100).unwrap();
        assert_eq!((r.molecules.len(), r.capped), (1, 1));
    }

    fn dataset(smiles: &[&str]) -> Dataset {
        let mols: Vec<LabeledMolecule> = smiles
            .iter()
            .enumerate()
            .map(|(i, s)| LabeledMolecule {
                smiles: s.to_string(),
                graph: parse_smiles(s).unwrap(),
                graph_targets: vec![Some(i as f64), if i % 2 == 0 { None } else { Some(1.0) }],
                node_targets: None,
                source_row: i,
            })
            .collect();
        featurize_all(&mols, vec!["a".into(), "b".into()], &FeaturizerConfig::default())
            .unwrap()
            .0
    }

    #[test]
    fn masks_follow_missing_targets() {
        let d = dataset(&["CCO", "c1ccccc1"]);
        assert_eq!(d.samples[0].mask, vec![1.0, 0.0]);
        assert_eq!(d.samples[1].mask, vec![1.0, 1.0]);
        assert_eq!(d.samples[0].targets, vec![0.0, 0.0]);
        assert_ne!(d.samples[0].scaffold, d.samples[1].scaffold);
    }

    #[test]
    fn cache_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cache");
        let d = dataset(&["CCO", "c1ccccc1N", "C1CC1C(=O)O", "[Na+].[Cl-]"]);
        let cfg = FeaturizerConfig::default();
        cache_featurized(&d, &cfg, &p).unwrap();
        let back = load_cache(&p, &cfg).unwrap();
        assert_eq!(back, d);

        let other = FeaturizerConfig { distance_cap: 5, ..cfg };
        assert!(matches!(load_cache(&p, &other), Err(DatasetError::HashMismatch { .. })));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_cache(&p, &cfg), Err(DatasetError::VersionMismatch { found: 9, .. })));
        bytes[4] = CACHE_VERSION.to_le_bytes()[0];
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_cache(&p, &cfg), Err(DatasetError::Format(_))));
        std::fs::write(&p, b"hello world").unwrap();
        assert!(matches!(load_cache(&p, &cfg), Err(DatasetError::Format(_))));
    }

    #[test]
    fn overrides_fill_charge_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = dataset(&["CCO", "CN"]);
        let p = write(
            &dir,
            "o.jsonl",
            "{\"source_row\":1,\"gasteiger\":[0.1,-0.3],\"gasteiger_h\":[0.0,0.2]}\n{\"source_row\":7,\"gasteiger\":[1]}\n",
        );
        assert_eq!(apply_feature_overrides(&mut d, &p).unwrap(), 1);
        let x = &d.samples[1].graph.x;
        assert_eq!(x.at(&[1, node_col::GASTEIGER]), -0.3);
        assert_eq!(x.at(&[1, node_col::GASTEIGER_H]), 0.2);
        assert_eq!(d.samples[0].graph.x.at(&[0, node_col::GASTEIGER]), 0.0);
        let p = write(&dir, "bad.jsonl", "{\"source_row\":0,\"gasteiger\":[1.0]}\n");
        assert!(matches!(apply_feature_overrides(&mut d, &p), Err(DatasetError::BadRecord { line: 1, .. })));
    }

    fn keys(sizes: &[usize]) -> Vec<String> {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat(format!("g{g}")).take(s))
            .collect()
    }

    #[test]
    fn scaffold_deficit_rule_small_case() {
        let s = scaffold_split(&keys(&[5, 3, 2]), [0.8, 0.1, 0.1], 0);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 2, 0));
    }

    #[test]
    fn acyclic_dataset_goes_to_train() {
        let k = vec!["ACYCLIC".to_string(); 7];
        let s = scaffold_split(&k, [0.8, 0.1, 0.1], 3);
        assert_eq!(s.train.len(), 7);
        assert_eq!(s, scaffold_split(&k, [0.8, 0.1, 0.1], 3));
    }

    #[test]
    fn random_split_sizes() {
        let s = random_split(100, 0.8, 0.05, 1);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (76, 4, 20));
        let t = random_split(100, 0.8, 0.05, 2);
        assert_ne!(s.test, t.test);
        assert_eq!(t.test.len(), 20);
        let s = random_split(10, 0.8, 0.05, 1);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 0, 2));
    }

    proptest! {
        #[test]
        fn scaffold_split_is_pure_and_balanced(
            sizes in proptest::collection::vec(1usize..12, 1..40),
            seed in any::<u64>(),
        ) {
            let k = keys(&sizes);
            let s = scaffold_split(&k, [0.8, 0.1, 0.1], seed);
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..k.len()).collect::<Vec<_>>());
            for (i, part) in [&s.train, &s.valid, &s.test].iter().enumerate() {
                let mine: HashSet<&String> = part.iter().map(|&j| &k[j]).collect();
                for (o, other) in [&s.train, &s.valid, &s.test].iter().enumerate() {
                    if o != i {
                        prop_assert!(other.iter().all(|&j| !mine.contains(&k[j])));
                    }
                }
                let target = [0.8, 0.1, 0.1][i] * k.len() as f64;
                let largest = *sizes.iter().max().unwrap() as f64;
                prop_assert!((part.len() as f64 - target).abs() <= largest + 1e-9);
            }
        }

        #[test]
        fn random_split_covers_once(n in 1usize..300, seed in any::<u64>()) {
            let s = random_split(n, 0.8, 0.05, seed);
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
