use attrib_core::experiments::{recall_matrix, ConfusionMatrix};
use attrib_core::report::{emit_csv, emit_heatmap_svg, fmt1, fmt4, ramp_index, HeatmapSpec, Normalization, Table};
use proptest::prelude::*;

fn table_from_counts(counts: Vec<Vec<u64>>) -> Table {
    let n = counts.len();
    let labels: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
    let cm = ConfusionMatrix::from_counts(labels.clone(), counts).unwrap();
    Table {
        name: "recall:demo".into(),
        rows: labels.clone(),
        cols: labels,
        values: recall_matrix(&cm).unwrap(),
    }
}

/// Figure labels must be the one-decimal rendering of the CSV value, cell by
/// cell in row-major order.
fn check_agreement(table: &Table) {
    let csv_text = emit_csv(std::slice::from_ref(table)).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let csv_values: Vec<String> = rdr.records().map(|r| r.unwrap()[3].to_string()).collect();

    let svg = emit_heatmap_svg(&HeatmapSpec::from_table(table, Normalization::Row)).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let shown: Vec<&str> = doc
        .descendants()
        .filter(|n| n.has_tag_name("text") && n.attribute("class") == Some("value"))
        .map(|n| n.text().unwrap_or(""))
        .collect();
    let rects: Vec<&str> = doc.descendants().filter(|n| n.has_tag_name("rect")).filter_map(|n| n.attribute("fill")).collect();

    assert_eq!(csv_values.len(), shown.len());
    assert_eq!(rects.len(), shown.len());
    for (c, s) in csv_values.iter().zip(&shown) {
        let v: f64 = c.parse().unwrap();
        assert_eq!(fmt4(v), *c);
        assert_eq!(fmt1(v), *s, "csv {c} shown as {s}");
    }
}

#[test]
fn hand_table_agrees() {
    let t = table_from_counts(vec![vec![1, 3, 0], vec![2, 2, 4], vec![0, 1, 7]]);
    check_agreement(&t);
}

#[test]
fn ramp_endpoints_and_midpoint() {
    assert_eq!(ramp_index(-5.0), 0);
    assert_eq!(ramp_index(0.0), 0);
    assert_eq!(ramp_index(50.0), 128);
    assert_eq!(ramp_index(100.0), 255);
    assert_eq!(ramp_index(250.0), 255);
}

#[test]
fn display_rounding_on_ties() {
    assert_eq!(fmt1(12.35), "12.4");
    assert_eq!(fmt1(12.25), "12.3");
    assert_eq!(fmt1(-0.04), "0.0");
    assert_eq!(fmt1(99.95), "100.0");
}

proptest! {
    #[test]
    fn emitters_agree_on_random_tables(counts in (2usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(1u64..400, n), n))) {
        check_agreement(&table_from_counts(counts));
    }
}
