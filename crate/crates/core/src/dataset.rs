//! Image manifests, prompt-disjoint splits and class labeling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::key;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub model: String,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub language: Option<String>,
    pub prompt_id: u64,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestRow {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<String>,
        model: impl Into<String>,
        domain: Option<&str>,
        language: Option<&str>,
        prompt_id: u64,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            model: model.into(),
            domain: domain.map(str::to_string),
            language: language.map(str::to_string),
            prompt_id,
            extra: BTreeMap::new(),
        }
    }

    pub fn label(&self, key: ClassKey) -> Option<&str> {
        match key {
            ClassKey::Model => Some(&self.model),
            ClassKey::Domain => self.domain.as_deref(),
            ClassKey::Language => self.language.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassKey {
    #[default]
    Model,
    Domain,
    Language,
}

impl ClassKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassKey::Model => "model",
            ClassKey::Domain => "domain",
            ClassKey::Language => "language",
        }
    }
}

/// Equality filter on the three label columns; `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl RowFilter {
    pub fn matches(&self, row: &ManifestRow) -> bool {
        let ok = |want: &Option<String>, have: Option<&str>| want.as_deref().is_none_or(|w| have == Some(w));
        ok(&self.model, Some(&row.model))
            && ok(&self.domain, row.domain.as_deref())
            && ok(&self.language, row.language.as_deref())
    }

    pub fn domain(d: impl Into<String>) -> Self {
        Self {
            domain: Some(d.into()),
            ..Self::default()
        }
    }

    pub fn model(m: impl Into<String>) -> Self {
        Self {
            model: Some(m.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub class_key: ClassKey,
    #[serde(default)]
    pub filter: RowFilter,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ManifestRow>,
    pub test: Vec<ManifestRow>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if row.id.is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty id".into(),
            });
        }
        let rel = Path::new(&row.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("path `{}` escapes the manifest root", row.path),
            });
        }
        if !seen.insert(row.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: row.id,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Sorted distinct labels; a label's index is its class integer.
pub fn class_labels(rows: &[ManifestRow], key: ClassKey) -> Vec<String> {
    rows.iter()
        .filter_map(|r| r.label(key))
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Content hash of a row set, independent of input order.
pub fn rows_hash(rows: &[ManifestRow]) -> String {
    let mut sorted: Vec<&ManifestRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut h = Sha256::new();
    for r in sorted {
        h.update(serde_json::to_vec(r).expect("rows serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Per-class sampling order: prompts shuffled, rows within a prompt sorted by id.
fn class_order(rows: &[&ManifestRow], class: &str, seed: u64) -> Vec<Vec<ManifestRow>> {
    let mut by_prompt: BTreeMap<u64, Vec<ManifestRow>> = BTreeMap::new();
    for r in rows {
        by_prompt.entry(r.prompt_id).or_default().push((*r).clone());
    }
    let mut groups: Vec<Vec<ManifestRow>> = by_prompt
        .into_values()
        .map(|mut g| {
            g.sort_by(|a, b| a.id.cmp(&b.id));
            g
        })
        .collect();
    let mut rng = seed::keyed_rng(seed, key!["split", class]);
    groups.shuffle(&mut rng);
    groups
}

/// Draws `count` rows from the front of `groups`; the prompt that crosses the
/// boundary is consumed entirely so no prompt spans two sides.
fn take_rows(groups: &mut std::collections::VecDeque<Vec<ManifestRow>>, count: usize) -> Option<Vec<ManifestRow>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let group = groups.pop_front()?;
        let need = count - out.len();
        out.extend(group.into_iter().take(need));
    }
    Some(out)
}

/// Like [`make_split`], but returns the training rows of each class in
/// sampling order, so any prefix is itself a valid training subset.
pub fn make_split_ordered(rows: &[ManifestRow], spec: &SplitSpec) -> Result<(Vec<Vec<ManifestRow>>, Vec<ManifestRow>)> {
    let mut sorted: Vec<&ManifestRow> = rows.iter().filter(|r| spec.filter.matches(r)).collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let labelled: Vec<ManifestRow> = sorted.iter().map(|r| (*r).clone()).collect();
    let labels = class_labels(&labelled, spec.class_key);
    if labels.is_empty() {
        return Err(Error::InsufficientRows {
            what: "split (no rows after filtering)".into(),
            needed: 1,
            available: 0,
        });
    }
    let mut train_by_class = Vec::new();
    let mut test = Vec::new();
    for label in &labels {
        let class_rows: Vec<&ManifestRow> = sorted
            .iter()
            .copied()
            .filter(|r| r.label(spec.class_key) == Some(label.as_str()))
            .collect();
        let needed = spec.train_per_class + spec.test_per_class;
        let insufficient = || Error::InsufficientRows {
            what: format!("{} `{label}`", spec.class_key.as_str()),
            needed,
            available: class_rows.len(),
        };
        let mut groups: std::collections::VecDeque<_> = class_order(&class_rows, label, spec.seed).into();
        let test_rows = take_rows(&mut groups, spec.test_per_class).ok_or_else(insufficient)?;
        let train_rows = take_rows(&mut groups, spec.train_per_class).ok_or_else(insufficient)?;
        test.extend(test_rows);
        train_by_class.push(train_rows);
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train_by_class, test))
}

/// Prompt-disjoint, per-class exact split; both sides sorted by id.
pub fn make_split(rows: &[ManifestRow], spec: &SplitSpec) -> Result<Split> {
    let (train_by_class, test) = make_split_ordered(rows, spec)?;
    let mut train: Vec<ManifestRow> = train_by_class.into_iter().flatten().collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Split { train, test })
}

/// First `n` rows of every class from an ordered split, sorted by id.
pub fn nested_prefix(train_by_class: &[Vec<ManifestRow>], n: usize) -> Vec<ManifestRow> {
    let mut out: Vec<ManifestRow> = train_by_class
        .iter()
        .flat_map(|c| c.iter().take(n).cloned())
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(models: usize, per_model: usize, langs: usize) -> Vec<ManifestRow> {
        let mut rows = Vec::new();
        for m in 0..models {
            for p in 0..per_model as u64 {
                for l in 0..langs {
                    let id = format!("m{m}/d/l{l}/{p}");
                    rows.push(ManifestRow::new(
                        id.clone(),
                        format!("{id}.png"),
                        format!("m{m}"),
                        Some("d"),
                        Some(&format!("l{l}")),
                        p,
                    ));
                }
            }
        }
        rows
    }

    #[test]
    fn empty_manifest() {
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn two_lines_in_order() {
        let text = r#"{"id":"b","path":"b.png","model":"x","prompt_id":1}
{"id":"a","path":"a.png","model":"y","domain":"animals","language":"en","prompt_id":0}
"#;
        let rows = parse_manifest(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].id, "b");
        assert_eq!(rows[1].domain.as_deref(), Some("animals"));
    }

    #[test]
    fn duplicate_id_names_line() {
        let mut text = String::new();
        for i in 0..6 {
            text.push_str(&format!(r#"{{"id":"r{i}","path":"r{i}.png","model":"x","prompt_id":{i}}}"#));
            text.push('\n');
        }
        text.push_str(r#"{"id":"r2","path":"z.png","model":"x","prompt_id":9}"#);
        match parse_manifest(&text).unwrap_err() {
            Error::DuplicateId { line, id } => {
                assert_eq!(line, 7);
                assert_eq!(id, "r2");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let text = "{\"id\":\"a\",\"path\":\"a.png\",\"model\":\"x\",\"prompt_id\":0}\nnot json\n";
        assert!(matches!(parse_manifest(text), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn path_must_stay_under_root() {
        let text = r#"{"id":"a","path":"../a.png","model":"x","prompt_id":0}"#;
        assert!(matches!(parse_manifest(text), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn unknown_fields_round_trip() {
        let line = r#"{"id":"a","path":"a.png","model":"x","prompt_id":0,"score":0.5,"tag":"q"}"#;
        let rows = parse_manifest(line).unwrap();
        assert_eq!(rows[0].extra.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &rows).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), rows);
    }

    #[test]
    fn labels_sorted() {
        let mut rows = Vec::new();
        for (i, m) in ["bagel", "janus", "emu"].iter().enumerate() {
            rows.push(ManifestRow::new(format!("{i}"), "p", *m, None, None, 0));
        }
        assert_eq!(class_labels(&rows, ClassKey::Model), vec!["bagel", "emu", "janus"]);
        assert_eq!(class_labels(&rows[..1], ClassKey::Model).len(), 1);
    }

    #[test]
    fn split_counts_exact() {
        let rows = corpus(5, 120, 1);
        let spec = SplitSpec {
            train_per_class: 100,
            test_per_class: 20,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: 1,
        };
        let split = make_split(&rows, &spec).unwrap();
        assert_eq!(split.train.len(), 500);
        assert_eq!(split.test.len(), 100);
        for m in 0..5 {
            let name = format!("m{m}");
            assert_eq!(split.train.iter().filter(|r| r.model == name).count(), 100);
            assert_eq!(split.test.iter().filter(|r| r.model == name).count(), 20);
        }
        assert_eq!(make_split(&rows, &spec).unwrap(), split);
    }

    #[test]
    fn split_is_prompt_disjoint_with_shared_prompts() {
        // Three rows per prompt within a class; counts not multiples of 3.
        let rows = corpus(2, 50, 3);
        let spec = SplitSpec {
            train_per_class: 61,
            test_per_class: 32,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: 9,
        };
        let split = make_split(&rows, &spec).unwrap();
        assert_eq!(split.train.len(), 122);
        assert_eq!(split.test.len(), 64);
        for m in ["m0", "m1"] {
            let tr: HashSet<u64> = split.train.iter().filter(|r| r.model == m).map(|r| r.prompt_id).collect();
            let te: HashSet<u64> = split.test.iter().filter(|r| r.model == m).map(|r| r.prompt_id).collect();
            assert!(tr.is_disjoint(&te));
        }
    }

    #[test]
    fn insufficient_rows_names_class() {
        let mut rows = corpus(3, 30, 1);
        rows.retain(|r| !(r.model == "m1" && r.prompt_id >= 10));
        let spec = SplitSpec {
            train_per_class: 20,
            test_per_class: 5,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: 0,
        };
        match make_split(&rows, &spec).unwrap_err() {
            Error::InsufficientRows { what, .. } => assert!(what.contains("m1"), "{what}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filter_then_split_equals_split_of_filtered() {
        let mut rows = corpus(3, 40, 1);
        for (i, r) in rows.iter_mut().enumerate() {
            r.domain = Some(if i % 2 == 0 { "a".into() } else { "b".into() });
        }
        let spec = SplitSpec {
            train_per_class: 10,
            test_per_class: 5,
            class_key: ClassKey::Model,
            filter: RowFilter::domain("a"),
            seed: 4,
        };
        let direct = make_split(&rows, &spec).unwrap();
        let pre: Vec<_> = rows.iter().filter(|r| r.domain.as_deref() == Some("a")).cloned().collect();
        let unfiltered = SplitSpec {
            filter: RowFilter::default(),
            ..spec
        };
        assert_eq!(make_split(&pre, &unfiltered).unwrap(), direct);
    }

    #[test]
    fn nested_prefixes_are_subsets() {
        let rows = corpus(3, 100, 1);
        let spec = SplitSpec {
            train_per_class: 60,
            test_per_class: 20,
            class_key: ClassKey::Model,
            filter: RowFilter::default(),
            seed: 2,
        };
        let (ordered, _) = make_split_ordered(&rows, &spec).unwrap();
        let small: HashSet<String> = nested_prefix(&ordered, 10).into_iter().map(|r| r.id).collect();
        let large: HashSet<String> = nested_prefix(&ordered, 40).into_iter().map(|r| r.id).collect();
        assert_eq!(small.len(), 30);
        assert!(small.is_subset(&large));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn split_invariant_to_row_order(perm_seed in any::<u64>(), seed in any::<u64>()) {
            let rows = corpus(3, 30, 2);
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut seed::keyed_rng(perm_seed, key!["perm"]));
            let spec = SplitSpec {
                train_per_class: 25,
                test_per_class: 15,
                class_key: ClassKey::Model,
                filter: RowFilter::default(),
                seed,
            };
            let a = make_split(&rows, &spec).unwrap();
            let b = make_split(&shuffled, &spec).unwrap();
            let train_ids: HashSet<&str> = a.train.iter().map(|r| r.id.as_str()).collect();
            prop_assert!(a.test.iter().all(|r| !train_ids.contains(r.id.as_str())));
            prop_assert_eq!(a, b);
        }
    }
}
