//! CSV tables and SVG figures for experiment results.
//!
//! All emitters are pure string builders; [`write_report`] lays the files
//! out on disk. Figure text is derived from the same 4-decimal value the CSV
//! carries, so the two always agree.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{precision_matrix, recall_matrix, Cell, ConfusionMatrix, ExperimentKind, ExperimentResult};
use crate::mllmattr::MllmResult;

/// A labelled grid of percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Table {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.rows.len() || self.values.iter().any(|r| r.len() != self.cols.len()) {
            return Err(Error::Dimension(format!(
                "table `{}` has {} row and {} column labels for a {}-row value grid",
                self.name,
                self.rows.len(),
                self.cols.len(),
                self.values.len()
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("table `{}` has non-finite values", self.name)));
        }
        Ok(())
    }
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// One-decimal display of the 4-decimal CSV value, rounded half away from
/// zero on its decimal digits.
pub fn fmt1(v: f64) -> String {
    let text = fmt4(v);
    let negative = text.starts_with('-');
    let digits: i64 = text.trim_start_matches('-').replace('.', "").parse().expect("formatted float parses");
    let tenths = (digits + 500) / 1000;
    let sign = if negative && tenths != 0 { "-" } else { "" };
    format!("{sign}{}.{}", tenths / 10, tenths % 10)
}

/// Long-format CSV: `table,row,col,value`, row-major within each table.
pub fn emit_csv(tables: &[Table]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Dimension(format!("csv: {e}"));
    w.write_record(["table", "row", "col", "value"]).map_err(csv_err)?;
    for t in tables {
        t.validate()?;
        for (r, row) in t.rows.iter().enumerate() {
            for (c, col) in t.cols.iter().enumerate() {
                w.write_record([t.name.as_str(), row, col, &fmt4(t.values[r][c])]).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Dimension(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cell_label(cell: &Cell, skip: &[&str]) -> String {
    let parts: Vec<String> = cell
        .params
        .iter()
        .filter(|(k, _)| !skip.contains(&k.as_str()))
        .map(|(k, v)| match v.as_str() {
            Some(s) => format!("{k}={s}"),
            None => format!("{k}={v}"),
        })
        .collect();
    parts.join(";")
}

fn param_text(cell: &Cell, key: &str) -> String {
    match cell.param(key) {
        Some(v) => v.as_str().map_or_else(|| v.to_string(), str::to_string),
        None => String::new(),
    }
}

fn push_unique(v: &mut Vec<String>, s: String) -> usize {
    match v.iter().position(|x| *x == s) {
        Some(i) => i,
        None => {
            v.push(s);
            v.len() - 1
        }
    }
}

/// Accuracy (percent) laid out on the two natural axes of each experiment kind.
pub fn accuracy_table(result: &ExperimentResult) -> Table {
    let (row_key, col_key) = match result.kind {
        ExperimentKind::Scaling => ("size", None),
        ExperimentKind::Corruption => ("transform", None),
        ExperimentKind::Structural => ("transform", Some("classifier")),
        ExperimentKind::Ood => ("train_domain", Some("eval_domain")),
        ExperimentKind::Language => ("model", None),
    };
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    for cell in &result.cells {
        let mut row = param_text(cell, row_key);
        if let Some(i) = cell.param("mixed_index") {
            row = format!("{row}#{i}");
        }
        let col = col_key.map_or_else(|| "accuracy".to_string(), |k| param_text(cell, k));
        let r = push_unique(&mut rows, row);
        let c = push_unique(&mut cols, col);
        entries.push((r, c, 100.0 * cell.accuracy));
    }
    let mut values = vec![vec![0.0; cols.len()]; rows.len()];
    for (r, c, v) in entries {
        values[r][c] = v;
    }
    Table {
        name: "accuracy".into(),
        rows,
        cols,
        values,
    }
}

fn confusion_tables(prefix: &str, cm: &ConfusionMatrix) -> Vec<Table> {
    let mut out = vec![Table {
        name: format!("counts:{prefix}"),
        rows: cm.labels.clone(),
        cols: cm.labels.clone(),
        values: cm.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect(),
    }];
    if let Ok(values) = recall_matrix(cm) {
        out.push(Table {
            name: format!("recall:{prefix}"),
            rows: cm.labels.clone(),
            cols: cm.labels.clone(),
            values,
        });
    }
    if let Ok(values) = precision_matrix(cm) {
        out.push(Table {
            name: format!("precision:{prefix}"),
            rows: cm.labels.clone(),
            cols: cm.labels.clone(),
            values,
        });
    }
    out
}

/// The accuracy table, a shuffle-control table, then counts, recall and
/// precision for each cell.
pub fn result_tables(result: &ExperimentResult) -> Vec<Table> {
    let mut tables = vec![accuracy_table(result)];
    if let Some(ctrl) = &result.shuffle_control {
        tables.push(Table {
            name: "shuffle_control".into(),
            rows: vec![cell_label(ctrl, &[])],
            cols: vec!["accuracy".into(), "chance".into()],
            values: vec![vec![100.0 * ctrl.accuracy, 100.0 * result.chance]],
        });
    }
    for cell in &result.cells {
        tables.extend(confusion_tables(&cell_label(cell, &[]), &cell.confusion));
    }
    tables
}

pub fn mllm_tables(result: &MllmResult) -> Vec<Table> {
    let mut tables = vec![Table {
        name: "accuracy".into(),
        rows: result.per_shot.iter().map(|s| format!("{}-shot", s.shots)).collect(),
        cols: vec!["accuracy".into(), "parse_failures".into(), "queries".into()],
        values: result
            .per_shot
            .iter()
            .map(|s| vec![100.0 * s.accuracy, s.n_parse_failures as f64, s.n_queries as f64])
            .collect(),
    }];
    for s in &result.per_shot {
        tables.extend(confusion_tables(&format!("{}-shot", s.shots), &s.confusion));
    }
    tables
}

include!("ramp.rs");

/// Which axis a heatmap's values were normalized along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Row,
    Column,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

impl HeatmapSpec {
    pub fn from_table(table: &Table, normalization: Normalization) -> Self {
        Self {
            title: table.name.clone(),
            row_labels: table.rows.clone(),
            col_labels: table.cols.clone(),
            values: table.values.clone(),
            normalization,
        }
    }
}

/// Ramp index for a percentage, clamped into `[0, 100]`.
pub fn ramp_index(value: f64) -> usize {
    ((value / 100.0).clamp(0.0, 1.0) * 255.0).round() as usize
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL: usize = 56;
const MARGIN_LEFT: usize = 150;
const MARGIN_TOP: usize = 60;

pub fn emit_heatmap_svg(spec: &HeatmapSpec) -> Result<String> {
    Table {
        name: spec.title.clone(),
        rows: spec.row_labels.clone(),
        cols: spec.col_labels.clone(),
        values: spec.values.clone(),
    }
    .validate()?;
    let (nr, nc) = (spec.row_labels.len(), spec.col_labels.len());
    let width = MARGIN_LEFT + nc * CELL + 20;
    let height = MARGIN_TOP + nr * CELL + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let note = match spec.normalization {
        Normalization::Row => " (row-normalized)",
        Normalization::Column => " (column-normalized)",
        Normalization::None => "",
    };
    let _ = writeln!(s, r#"  <text x="{}" y="20" font-size="14">{}{note}</text>"#, MARGIN_LEFT, esc(&spec.title));
    for (j, label) in spec.col_labels.iter().enumerate() {
        let x = MARGIN_LEFT + j * CELL + CELL / 2;
        let _ = writeln!(s, r#"  <text class="col" x="{x}" y="{}" font-size="10" text-anchor="middle">{}</text>"#, MARGIN_TOP - 8, esc(label));
    }
    for (i, label) in spec.row_labels.iter().enumerate() {
        let y = MARGIN_TOP + i * CELL + CELL / 2 + 4;
        let _ = writeln!(s, r#"  <text class="row" x="{}" y="{y}" font-size="10" text-anchor="end">{}</text>"#, MARGIN_LEFT - 6, esc(label));
    }
    for (i, row) in spec.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (MARGIN_LEFT + j * CELL, MARGIN_TOP + i * CELL);
            let [r, g, b] = RAMP[ramp_index(v)];
            let ink = if 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64 > 140.0 { "black" } else { "white" };
            let _ = writeln!(s, r#"  <rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#, hex([r, g, b]));
            let _ = writeln!(
                s,
                r#"  <text class="value" x="{}" y="{}" font-size="12" text-anchor="middle" fill="{ink}">{}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4,
                fmt1(v)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Accuracy against training size on a log-scaled x axis.
pub fn emit_scaling_curve_svg(sizes: &[usize], accuracies: &[f64]) -> Result<String> {
    if sizes.len() != accuracies.len() {
        return Err(Error::Dimension(format!("{} sizes for {} accuracies", sizes.len(), accuracies.len())));
    }
    if sizes.is_empty() {
        return Err(Error::Dimension("scaling curve needs at least one point".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(Error::Dimension("sizes must be positive and strictly increasing".into()));
    }
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let (lo, hi) = ((sizes[0] as f64).log10(), (sizes[sizes.len() - 1] as f64).log10());
    let x_of = |n: usize| {
        if hi > lo {
            left + ((n as f64).log10() - lo) / (hi - lo) * (w - left - right)
        } else {
            left + (w - left - right) / 2.0
        }
    };
    let y_of = |a: f64| top + (1.0 - a.clamp(0.0, 100.0) / 100.0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#);
    let _ = writeln!(s, r#"  <line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - bottom, w - right, h - bottom);
    let _ = writeln!(s, r#"  <line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        let _ = writeln!(s, r#"  <text class="ytick" x="{}" y="{:.2}" font-size="10" text-anchor="end">{tick}</text>"#, left - 6.0, y + 3.0);
    }
    for &n in sizes {
        let _ = writeln!(s, r#"  <text class="xtick" x="{:.2}" y="{}" font-size="10" text-anchor="middle">{n}</text>"#, x_of(n), h - bottom + 16.0);
    }
    let _ = writeln!(s, r#"  <text x="{}" y="{}" font-size="11" text-anchor="middle">training images per class</text>"#, (left + w - right) / 2.0, h - 10.0);
    let points: Vec<String> = sizes.iter().zip(accuracies).map(|(&n, &a)| format!("{:.2},{:.2}", x_of(n), y_of(a))).collect();
    let _ = writeln!(s, r#"  <polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
    for (&n, &a) in sizes.iter().zip(accuracies) {
        let _ = writeln!(s, r#"  <circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"><title>{}</title></circle>"#, x_of(n), y_of(a), fmt1(a));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `tables/<kind>.csv` and `figures/*.svg`.
pub fn write_report(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    write(&out_dir.join("results.json"), &result.to_canonical_json()?)?;
    write_figures(result, out_dir)
}

/// Re-emits tables and figures only; `results.json` is left untouched.
pub fn write_figures(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    let tables = result_tables(result);
    write(&out_dir.join("tables").join(format!("{}.csv", result.kind.as_str())), &emit_csv(&tables)?)?;
    let figures = out_dir.join("figures");
    let acc = &tables[0];
    write(&figures.join("accuracy.svg"), &emit_heatmap_svg(&HeatmapSpec::from_table(acc, Normalization::None))?)?;
    if result.kind == ExperimentKind::Scaling {
        let sizes: Vec<usize> = result.cells.iter().filter_map(|c| c.param("size").and_then(|v| v.as_u64())).map(|v| v as usize).collect();
        let accs: Vec<f64> = result.cells.iter().map(|c| 100.0 * c.accuracy).collect();
        write(&figures.join("scaling.svg"), &emit_scaling_curve_svg(&sizes, &accs)?)?;
    }
    if result.kind != ExperimentKind::Ood {
        for t in &tables {
            let norm = if t.name.starts_with("recall:") {
                Normalization::Row
            } else if t.name.starts_with("precision:") {
                Normalization::Column
            } else {
                continue;
            };
            write(&figures.join(format!("{}.svg", file_stem(&t.name))), &emit_heatmap_svg(&HeatmapSpec::from_table(t, norm))?)?;
        }
    }
    Ok(())
}

pub fn write_mllm_report(result: &MllmResult, out_dir: &Path) -> Result<()> {
    write(&out_dir.join("results.json"), &crate::experiments::canonical_json(&serde_json::to_value(result)?))?;
    let tables = mllm_tables(result);
    write(&out_dir.join("tables").join("mllm.csv"), &emit_csv(&tables)?)?;
    for t in tables.iter().filter(|t| t.name.starts_with("recall:")) {
        write(
            &out_dir.join("figures").join(format!("{}.svg", file_stem(&t.name))),
            &emit_heatmap_svg(&HeatmapSpec::from_table(t, Normalization::Row))?,
        )?;
    }
    Ok(())
}
