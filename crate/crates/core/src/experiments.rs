//! Experiment protocols and confusion-matrix statistics.
//!
//! Every protocol trains one classifier per cell on a prompt-disjoint split,
//! evaluates on a held-out test set shared by all comparable cells, and adds
//! a label-shuffle control. Results carry content hashes of every train and
//! test set so reruns can be compared byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifiers::{self, Architecture, Prepared, TrainConfig};
use crate::dataset::{self, class_labels, make_split, make_split_ordered, nested_prefix, rows_hash, ClassKey, ManifestRow, RowFilter, SplitSpec};
use crate::error::{Error, Result};
use crate::key;
use crate::seed;
use crate::transforms::TransformSpec;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = labels.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("{n} labels need a {n}x{n} count matrix")));
        }
        Ok(Self { labels, counts })
    }

    pub fn from_predictions(labels: Vec<String>, truth: &[usize], predicted: &[usize]) -> Self {
        let mut cm = Self::new(labels);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.counts[t][p] += 1;
        }
        cm
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

/// Row-normalized percentages: entry `(i, j)` is the share of true class `i`
/// predicted as `j`.
pub fn recall_matrix(cm: &ConfusionMatrix) -> Result<Vec<Vec<f64>>> {
    cm.counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::EmptyAxis { axis: "row", index: i });
            }
            Ok(row.iter().map(|&c| 100.0 * c as f64 / total as f64).collect())
        })
        .collect()
}

/// Column-normalized percentages: entry `(i, j)` is the share of predictions
/// `j` whose true class is `i`.
pub fn precision_matrix(cm: &ConfusionMatrix) -> Result<Vec<Vec<f64>>> {
    let n = cm.n();
    let totals: Vec<u64> = (0..n).map(|j| cm.counts.iter().map(|row| row[j]).sum()).collect();
    if let Some(j) = totals.iter().position(|&t| t == 0) {
        return Err(Error::EmptyAxis { axis: "column", index: j });
    }
    Ok(cm
        .counts
        .iter()
        .map(|row| row.iter().zip(&totals).map(|(&c, &t)| 100.0 * c as f64 / t as f64).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Scaling,
    Corruption,
    Structural,
    Ood,
    Language,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Corruption => "corruption",
            ExperimentKind::Structural => "structural",
            ExperimentKind::Ood => "ood",
            ExperimentKind::Language => "language",
        }
    }
}

/// Settings shared by every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Adds a label-shuffle control cell.
    pub shuffle_control: bool,
}

impl ExperimentConfig {
    pub fn new(seed: u64, arch: Architecture, train: TrainConfig) -> Self {
        Self {
            seed,
            arch,
            train,
            shuffle_control: true,
        }
    }

    fn echo(&self) -> Value {
        json!({ "seed": self.seed, "arch": self.arch, "train": self.train, "shuffle_control": self.shuffle_control })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Cell coordinates, e.g. `{"size": 100}` or `{"train_domain": .., "eval_domain": ..}`.
    pub params: BTreeMap<String, Value>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub n_train: usize,
    pub n_test: usize,
    pub train_hash: String,
    pub test_hash: String,
    pub train_seed: u64,
    pub final_train_loss: f64,
}

impl Cell {
    pub fn param(&self, key: &str) -> Option<&Value> {
        self.params.get(key)
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub toolkit_version: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub config: Value,
    /// `1 / n_classes` of the primary task.
    pub chance: f64,
    pub cells: Vec<Cell>,
    pub shuffle_control: Option<Cell>,
}

impl ExperimentResult {
    pub fn cell(&self, pred: impl Fn(&Cell) -> bool) -> Option<&Cell> {
        self.cells.iter().find(|c| pred(c))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(canonical_json(&serde_json::to_value(self)?))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Indented JSON with sorted keys and floats written with 17 significant
/// digits, so equal values always serialize to equal bytes.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, 0, &mut out);
    out.push('\n');
    out
}

fn write_canonical(value: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize, out: &mut String| out.extend(std::iter::repeat_n("  ", d));
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&value.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => out.push_str(&u.to_string()),
            (None, Some(i), _) => out.push_str(&i.to_string()),
            (None, None, Some(f)) => out.push_str(&format!("{f:.16e}")),
            _ => out.push_str(&n.to_string()),
        },
        Value::Array(items) => {
            if items.iter().all(|v| !v.is_object() && !v.is_array()) {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(v, depth + 1, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, v) in items.iter().enumerate() {
                pad(depth + 1, out);
                write_canonical(v, depth + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(depth, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(depth + 1, out);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*k], depth + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(depth, out);
            out.push('}');
        }
    }
}

fn cell_seed(cfg: &ExperimentConfig, key: &str) -> u64 {
    seed::derive(cfg.seed, key!["cell", key])
}

/// Rows and integer targets of one side of a split.
struct Side {
    rows: Vec<ManifestRow>,
    targets: Vec<usize>,
}

impl Side {
    fn new(rows: Vec<ManifestRow>, class_key: ClassKey, labels: &[String]) -> Result<Self> {
        let targets = classifiers::label_indices(&rows, class_key, labels)?;
        Ok(Self { rows, targets })
    }
}

/// A permutation of `targets` in which every true class receives each label
/// as evenly as its count allows.
///
/// A free permutation leaves each class with a random plurality label. On
/// separable classes a network learns that mapping, and the control then
/// scores a multiple of 1/k instead of chance.
pub fn balanced_shuffle<R: rand::Rng>(targets: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut out = vec![0; targets.len()];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut remaining = vec![0usize; k];
    for (i, &t) in targets.iter().enumerate() {
        by_class[t].push(i);
        remaining[t] += 1;
    }
    // Deal labels round-robin, skipping labels already used up.
    for idx in by_class.iter_mut() {
        idx.shuffle(rng);
        let start = rng.random_range(0..k.max(1));
        let mut label = start;
        for &i in idx.iter() {
            let mut tries = 0;
            while remaining[label] == 0 && tries < k {
                label = (label + 1) % k;
                tries += 1;
            }
            out[i] = label;
            remaining[label] -= 1;
            label = (label + 1) % k;
        }
    }
    out
}

/// Trains on prepared inputs and evaluates on a prepared test set.
#[allow(clippy::too_many_arguments)]
fn fit_eval(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    labels: &[String],
    train: &Side,
    train_inputs: &Prepared,
    test: &Side,
    test_inputs: &Prepared,
    seed_key: &str,
    params: BTreeMap<String, Value>,
    targets: Option<&[usize]>,
) -> Result<Cell> {
    let train_seed = cell_seed(cfg, seed_key);
    let targets = targets.unwrap_or(&train.targets);
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train.clone()
    };
    log::info!("training cell {params:?} on {} rows", train.rows.len());
    let ckpt = classifiers::train_prepared(train_inputs, targets, labels.to_vec(), &tc, arch)?;
    let preds = classifiers::predict_prepared(&ckpt, test_inputs)?;
    let confusion = ConfusionMatrix::from_predictions(labels.to_vec(), &test.targets, &preds.predicted);
    Ok(Cell {
        params,
        accuracy: confusion.accuracy(),
        confusion,
        n_train: train.rows.len(),
        n_test: test.rows.len(),
        train_hash: rows_hash(&train.rows),
        test_hash: rows_hash(&test.rows),
        train_seed,
        final_train_loss: ckpt.meta.final_train_loss,
    })
}

/// Label relabelings pooled into one shuffle-control cell.
pub const SHUFFLE_REPLICATES: usize = 5;

/// Label-shuffle control. One balanced permutation is drawn, and replicate
/// `r` trains on it with every label moved `r` steps cyclically; the test
/// confusions are summed. A shuffled model's argmax is decided per class
/// cluster, so a single replicate scores a near-multiple of 1/k. Across the
/// cyclic relabelings each class's prediction visits every label, which
/// pins the pooled accuracy near chance when n_classes replicates are run.
#[allow(clippy::too_many_arguments)]
fn shuffle_control_cell(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    labels: &[String],
    train: &Side,
    train_inputs: &Prepared,
    test: &Side,
    test_inputs: &Prepared,
    seed_key: &str,
    mut params: BTreeMap<String, Value>,
) -> Result<Cell> {
    let k = labels.len();
    let replicates = SHUFFLE_REPLICATES.max(k);
    params.insert("replicates".into(), json!(replicates));
    let base = balanced_shuffle(&train.targets, k, &mut seed::keyed_rng(cfg.seed, key!["label-shuffle", seed_key]));
    let mut pooled: Option<Cell> = None;
    let mut loss = 0.0;
    for r in 0..replicates {
        let targets: Vec<usize> = base.iter().map(|&t| (t + r) % k).collect();
        let cell = fit_eval(cfg, arch, labels, train, train_inputs, test, test_inputs, seed_key, params.clone(), Some(&targets))?;
        loss += cell.final_train_loss / replicates as f64;
        match pooled.as_mut() {
            None => pooled = Some(cell),
            Some(acc) => {
                for (a, b) in acc.confusion.counts.iter_mut().zip(&cell.confusion.counts) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut cell = pooled.expect("at least one replicate");
    cell.accuracy = cell.confusion.accuracy();
    cell.final_train_loss = loss;
    Ok(cell)
}

fn params(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn positions(all: &[ManifestRow], subset: &[ManifestRow]) -> Vec<usize> {
    let index: HashMap<&str, usize> = all.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    subset.iter().map(|r| index[r.id.as_str()]).collect()
}

fn labels_for(rows: &[ManifestRow], filter: &RowFilter, class_key: ClassKey) -> Result<Vec<String>> {
    let filtered: Vec<ManifestRow> = rows.iter().filter(|r| filter.matches(r)).cloned().collect();
    let labels = class_labels(&filtered, class_key);
    if labels.len() < 2 {
        return Err(Error::SingleClass(labels.len()));
    }
    Ok(labels)
}

/// Accuracy against training-set size on nested subsets with one shared
/// test set.
pub fn run_scaling(
    root: &Path,
    rows: &[ManifestRow],
    sizes: &[usize],
    test_per_class: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    if sizes.is_empty() {
        return Err(Error::config("sizes", "needs at least one size"));
    }
    let max = *sizes.iter().max().expect("non-empty");
    let labels = labels_for(rows, &RowFilter::default(), ClassKey::Model)?;
    let spec = SplitSpec {
        train_per_class: max,
        test_per_class,
        class_key: ClassKey::Model,
        filter: RowFilter::default(),
        seed: cfg.seed,
    };
    let (ordered, test_rows) = make_split_ordered(rows, &spec)?;
    let full = nested_prefix(&ordered, max);
    let transform = TransformSpec::none().with_seed(cfg.seed);
    let full_inputs = classifiers::prepare(&cfg.arch, root, &full, &transform)?;
    let test = Side::new(test_rows, ClassKey::Model, &labels)?;
    let test_inputs = classifiers::prepare(&cfg.arch, root, &test.rows, &transform)?;

    let mut cells = Vec::new();
    let mut sorted_sizes = sizes.to_vec();
    sorted_sizes.sort_unstable();
    sorted_sizes.dedup();
    for &n in &sorted_sizes {
        let subset = nested_prefix(&ordered, n);
        let inputs = full_inputs.select(&positions(&full, &subset));
        let train = Side::new(subset, ClassKey::Model, &labels)?;
        let key = format!("train/{}/{n}", transform.label());
        cells.push(fit_eval(
            cfg,
            &cfg.arch,
            &labels,
            &train,
            &inputs,
            &test,
            &test_inputs,
            &key,
            params(&[("size", json!(n))]),
            None,
        )?);
    }
    let shuffle_control = if cfg.shuffle_control {
        let n = sorted_sizes[0];
        let subset = nested_prefix(&ordered, n);
        let inputs = full_inputs.select(&positions(&full, &subset));
        let train = Side::new(subset, ClassKey::Model, &labels)?;
        let key = format!("shuffle/scaling/{n}");
        Some(shuffle_control_cell(cfg, &cfg.arch, &labels, &train, &inputs, &test, &test_inputs, &key, params(&[("size", json!(n))]))?)
    } else {
        None
    };
    Ok(ExperimentResult {
        kind: ExperimentKind::Scaling,
        toolkit_version: TOOLKIT_VERSION.into(),
        seed: cfg.seed,
        corpus_hash: rows_hash(rows),
        config: json!({ "common": cfg.echo(), "sizes": sorted_sizes, "test_per_class": test_per_class }),
        chance: 1.0 / labels.len() as f64,
        cells,
        shuffle_control,
    })
}

/// One cell per transform, the transform applied to train and test alike.
/// A `none` reference cell is added when absent.
pub fn run_corruption_ablation(
    root: &Path,
    rows: &[ManifestRow],
    train_per_class: usize,
    test_per_class: usize,
    specs: &[TransformSpec],
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let mut specs: Vec<TransformSpec> = specs.to_vec();
    if !specs.iter().any(|s| s.kind == crate::transforms::TransformKind::None) {
        specs.insert(0, TransformSpec::none());
    }
    for s in &specs {
        s.validate()?;
    }
    let labels = labels_for(rows, &RowFilter::default(), ClassKey::Model)?;
    let split = make_split(
        rows,
        &SplitSpec {
            train_per_class,
            test_per_class,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: cfg.seed,
        },
    )?;
    let train = Side::new(split.train, ClassKey::Model, &labels)?;
    let test = Side::new(split.test, ClassKey::Model, &labels)?;
    let mut cells = Vec::new();
    let mut shuffle_control = None;
    for spec in &specs {
        let transform = spec.clone().with_seed(cfg.seed);
        let train_inputs = classifiers::prepare(&cfg.arch, root, &train.rows, &transform)?;
        let test_inputs = classifiers::prepare(&cfg.arch, root, &test.rows, &transform)?;
        let key = format!("train/{}/{train_per_class}", transform.label());
        let p = params(&[("transform", json!(transform.label()))]);
        cells.push(fit_eval(cfg, &cfg.arch, &labels, &train, &train_inputs, &test, &test_inputs, &key, p.clone(), None)?);
        if cfg.shuffle_control && shuffle_control.is_none() && spec.kind == crate::transforms::TransformKind::None {
            let key = format!("shuffle/corruption/{train_per_class}");
            shuffle_control = Some(shuffle_control_cell(cfg, &cfg.arch, &labels, &train, &train_inputs, &test, &test_inputs, &key, p)?);
        }
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Corruption,
        toolkit_version: TOOLKIT_VERSION.into(),
        seed: cfg.seed,
        corpus_hash: rows_hash(rows),
        config: json!({
            "common": cfg.echo(),
            "train_per_class": train_per_class,
            "test_per_class": test_per_class,
            "specs": specs,
        }),
        chance: 1.0 / labels.len() as f64,
        cells,
        shuffle_control,
    })
}

/// Rows for no transform and pixel shuffle, plus one per named external
/// directory of precomputed derived images, each for every classifier.
pub fn run_structural_ablation(
    root: &Path,
    rows: &[ManifestRow],
    train_per_class: usize,
    test_per_class: usize,
    external: &[(String, PathBuf)],
    archs: &[Architecture],
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let archs: Vec<Architecture> = if archs.is_empty() { vec![cfg.arch.clone()] } else { archs.to_vec() };
    let labels = labels_for(rows, &RowFilter::default(), ClassKey::Model)?;
    let split = make_split(
        rows,
        &SplitSpec {
            train_per_class,
            test_per_class,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: cfg.seed,
        },
    )?;
    let train = Side::new(split.train, ClassKey::Model, &labels)?;
    let test = Side::new(split.test, ClassKey::Model, &labels)?;
    let mut transforms = vec![("none".to_string(), TransformSpec::none()), ("pixel_shuffle".to_string(), TransformSpec::pixel_shuffle())];
    for (name, dir) in external {
        transforms.push((name.clone(), TransformSpec::external_dir(dir.clone())));
    }
    let mut cells = Vec::new();
    let mut shuffle_control = None;
    for arch in &archs {
        for (name, spec) in &transforms {
            let transform = spec.clone().with_seed(cfg.seed);
            let train_inputs = classifiers::prepare(arch, root, &train.rows, &transform)?;
            let test_inputs = classifiers::prepare(arch, root, &test.rows, &transform)?;
            let key = format!("structural/{name}/{}/{train_per_class}", arch.name());
            let p = params(&[("transform", json!(name)), ("classifier", json!(arch.name()))]);
            cells.push(fit_eval(cfg, arch, &labels, &train, &train_inputs, &test, &test_inputs, &key, p.clone(), None)?);
            if cfg.shuffle_control && shuffle_control.is_none() {
                let key = format!("shuffle/structural/{}", arch.name());
                shuffle_control = Some(shuffle_control_cell(cfg, arch, &labels, &train, &train_inputs, &test, &test_inputs, &key, p)?);
            }
        }
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Structural,
        toolkit_version: TOOLKIT_VERSION.into(),
        seed: cfg.seed,
        corpus_hash: rows_hash(rows),
        config: json!({
            "common": cfg.echo(),
            "train_per_class": train_per_class,
            "test_per_class": test_per_class,
            "external": external.iter().map(|(n, d)| json!({"name": n, "dir": d})).collect::<Vec<_>>(),
            "classifiers": archs,
        }),
        chance: 1.0 / labels.len() as f64,
        cells,
        shuffle_control,
    })
}

/// Train on one domain, evaluate on every domain; plus `n_mixed` baselines
/// trained on an equal-count mixture of all domains.
pub fn run_ood_matrix(
    root: &Path,
    rows: &[ManifestRow],
    per_domain_train: usize,
    per_domain_test: usize,
    n_mixed: Option<usize>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let domains = class_labels(rows, ClassKey::Domain);
    if domains.is_empty() {
        return Err(Error::InsufficientRows {
            what: "domain-labelled rows".into(),
            needed: 1,
            available: 0,
        });
    }
    let labels = labels_for(rows, &RowFilter::default(), ClassKey::Model)?;
    let d = domains.len();
    let n_mixed = n_mixed.unwrap_or(d);
    let per_domain_mixed = per_domain_train / d;
    let transform = TransformSpec::none().with_seed(cfg.seed);

    let mut trains = Vec::with_capacity(d);
    let mut tests = Vec::with_capacity(d);
    for domain in &domains {
        let spec = SplitSpec {
            train_per_class: per_domain_train,
            test_per_class: per_domain_test,
            class_key: ClassKey::Model,
            filter: RowFilter::domain(domain.clone()),
            seed: cfg.seed,
        };
        let (ordered, test_rows) = make_split_ordered(rows, &spec).map_err(|e| match e {
            Error::InsufficientRows { what, needed, available } => Error::InsufficientRows {
                what: format!("{what} in domain `{domain}`"),
                needed,
                available,
            },
            other => other,
        })?;
        let test = Side::new(test_rows, ClassKey::Model, &labels)?;
        let test_inputs = classifiers::prepare(&cfg.arch, root, &test.rows, &transform)?;
        trains.push(ordered);
        tests.push((test, test_inputs));
    }

    let mut cells = Vec::new();
    let mut shuffle_control = None;
    for (i, domain) in domains.iter().enumerate() {
        let train = Side::new(nested_prefix(&trains[i], per_domain_train), ClassKey::Model, &labels)?;
        let inputs = classifiers::prepare(&cfg.arch, root, &train.rows, &transform)?;
        let key = format!("ood/{domain}");
        let ckpt_cells = eval_many(cfg, &labels, &train, &inputs, &tests, &domains, &key, |e| {
            params(&[("train_domain", json!(domain)), ("eval_domain", json!(e))])
        })?;
        cells.extend(ckpt_cells);
        if cfg.shuffle_control && shuffle_control.is_none() {
            let (test, test_inputs) = &tests[i];
            let p = params(&[("train_domain", json!(domain)), ("eval_domain", json!(domain))]);
            shuffle_control = Some(shuffle_control_cell(cfg, &cfg.arch, &labels, &train, &inputs, test, test_inputs, "shuffle/ood", p)?);
        }
    }
    // Mixed baselines draw disjoint slices of each domain's training order.
    for r in 0..n_mixed {
        let mut mixed = Vec::new();
        for ordered in &trains {
            for class in ordered {
                let start = (r * per_domain_mixed) % class.len().max(1);
                mixed.extend(class.iter().cycle().skip(start).take(per_domain_mixed).cloned());
            }
        }
        mixed.sort_by(|a, b| a.id.cmp(&b.id));
        mixed.dedup_by(|a, b| a.id == b.id);
        let train = Side::new(mixed, ClassKey::Model, &labels)?;
        let inputs = classifiers::prepare(&cfg.arch, root, &train.rows, &transform)?;
        let key = format!("ood/mixed/{r}");
        cells.extend(eval_many(cfg, &labels, &train, &inputs, &tests, &domains, &key, |e| {
            params(&[("train_domain", json!("mixed")), ("mixed_index", json!(r)), ("eval_domain", json!(e))])
        })?);
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Ood,
        toolkit_version: TOOLKIT_VERSION.into(),
        seed: cfg.seed,
        corpus_hash: rows_hash(rows),
        config: json!({
            "common": cfg.echo(),
            "per_domain_train": per_domain_train,
            "per_domain_test": per_domain_test,
            "n_mixed": n_mixed,
            "per_domain_mixed": per_domain_mixed,
        }),
        chance: 1.0 / labels.len() as f64,
        cells,
        shuffle_control,
    })
}

/// Trains once and evaluates the checkpoint on several test sets.
#[allow(clippy::too_many_arguments)]
fn eval_many(
    cfg: &ExperimentConfig,
    labels: &[String],
    train: &Side,
    inputs: &Prepared,
    tests: &[(Side, Prepared)],
    names: &[String],
    seed_key: &str,
    mk_params: impl Fn(&str) -> BTreeMap<String, Value>,
) -> Result<Vec<Cell>> {
    let train_seed = cell_seed(cfg, seed_key);
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train.clone()
    };
    log::info!("training {seed_key} on {} rows", train.rows.len());
    let ckpt = classifiers::train_prepared(inputs, &train.targets, labels.to_vec(), &tc, &cfg.arch)?;
    tests
        .iter()
        .zip(names)
        .map(|((test, test_inputs), name)| {
            let preds = classifiers::predict_prepared(&ckpt, test_inputs)?;
            let confusion = ConfusionMatrix::from_predictions(labels.to_vec(), &test.targets, &preds.predicted);
            Ok(Cell {
                params: mk_params(name),
                accuracy: confusion.accuracy(),
                confusion,
                n_train: train.rows.len(),
                n_test: test.rows.len(),
                train_hash: rows_hash(&train.rows),
                test_hash: rows_hash(&test.rows),
                train_seed,
                final_train_loss: ckpt.meta.final_train_loss,
            })
        })
        .collect()
}

/// One language classifier per model.
pub fn run_language_attribution(
    root: &Path,
    rows: &[ManifestRow],
    per_lang_train: usize,
    per_lang_test: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let models = class_labels(rows, ClassKey::Model);
    let transform = TransformSpec::none().with_seed(cfg.seed);
    let mut cells = Vec::new();
    let mut shuffle_control = None;
    let mut n_languages = 0;
    for model in &models {
        let filter = RowFilter::model(model.clone());
        let labels = labels_for(rows, &filter, ClassKey::Language)?;
        n_languages = n_languages.max(labels.len());
        let split = make_split(
            rows,
            &SplitSpec {
                train_per_class: per_lang_train,
                test_per_class: per_lang_test,
                class_key: ClassKey::Language,
                filter,
                seed: cfg.seed,
            },
        )
        .map_err(|e| match e {
            Error::InsufficientRows { what, needed, available } => Error::InsufficientRows {
                what: format!("{what} of model `{model}`"),
                needed,
                available,
            },
            other => other,
        })?;
        let train = Side::new(split.train, ClassKey::Language, &labels)?;
        let test = Side::new(split.test, ClassKey::Language, &labels)?;
        let train_inputs = classifiers::prepare(&cfg.arch, root, &train.rows, &transform)?;
        let test_inputs = classifiers::prepare(&cfg.arch, root, &test.rows, &transform)?;
        let key = format!("language/{model}");
        let p = params(&[("model", json!(model))]);
        cells.push(fit_eval(cfg, &cfg.arch, &labels, &train, &train_inputs, &test, &test_inputs, &key, p.clone(), None)?);
        if cfg.shuffle_control && shuffle_control.is_none() {
            shuffle_control = Some(shuffle_control_cell(cfg, &cfg.arch, &labels, &train, &train_inputs, &test, &test_inputs, "shuffle/language", p)?);
        }
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Language,
        toolkit_version: TOOLKIT_VERSION.into(),
        seed: cfg.seed,
        corpus_hash: rows_hash(rows),
        config: json!({ "common": cfg.echo(), "per_lang_train": per_lang_train, "per_lang_test": per_lang_test }),
        chance: 1.0 / n_languages.max(1) as f64,
        cells,
        shuffle_control,
    })
}

/// Mean of the diagonal and of the off-diagonal of a square accuracy grid.
pub fn diagonal_means(grid: &[Vec<f64>]) -> (f64, f64) {
    let n = grid.len();
    let (mut diag, mut off) = (0.0, 0.0);
    for (i, row) in grid.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_n = (n * n - n).max(1) as f64;
    (diag / n.max(1) as f64, off / off_n)
}

/// The train-domain x eval-domain accuracy grid of an OOD result.
pub fn ood_grid(result: &ExperimentResult) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut domains: Vec<String> = result
        .cells
        .iter()
        .filter_map(|c| c.param_str("eval_domain").map(str::to_string))
        .collect();
    domains.sort();
    domains.dedup();
    let grid = domains
        .iter()
        .map(|t| {
            domains
                .iter()
                .map(|e| {
                    result
                        .cell(|c| c.param_str("train_domain") == Some(t) && c.param_str("eval_domain") == Some(e))
                        .map_or(f64::NAN, |c| c.accuracy)
                })
                .collect()
        })
        .collect();
    (domains, grid)
}

/// Mean accuracy of the mixed baselines on each eval domain.
pub fn ood_mixed(result: &ExperimentResult, domains: &[String]) -> Vec<f64> {
    domains
        .iter()
        .map(|e| {
            let accs: Vec<f64> = result
                .cells
                .iter()
                .filter(|c| c.param_str("train_domain") == Some("mixed") && c.param_str("eval_domain") == Some(e))
                .map(|c| c.accuracy)
                .collect();
            accs.iter().sum::<f64>() / accs.len().max(1) as f64
        })
        .collect()
}

/// Content hashes of every cell's test set, for checking that compared cells
/// share one test set.
pub fn test_hashes(result: &ExperimentResult) -> Vec<&str> {
    result.cells.iter().map(|c| c.test_hash.as_str()).collect()
}

pub use dataset::rows_hash as corpus_hash;
