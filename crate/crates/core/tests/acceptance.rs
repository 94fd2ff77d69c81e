//! End-to-end acceptance checks A1 through A12.
//!
//! Runs as a plain binary: one PASS/FAIL line per criterion, exit status 1 if
//! any fails. Synthetic corpora are cached under the cargo target tmpdir, so
//! reruns skip generation.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::Ordering;
use std::time::Instant;

use attrib_core::classifiers::{self, checkpoint, gradcheck, Architecture, SmallConvNetConfig, TrainConfig};
use attrib_core::config::{synthesize, Corpus};
use attrib_core::dataset::{class_labels, ClassKey, ManifestRow};
use attrib_core::experiments::{
    diagonal_means, ood_grid, precision_matrix, recall_matrix, run_corruption_ablation, run_language_attribution,
    run_ood_matrix, run_scaling, run_structural_ablation, Cell, ConfusionMatrix, ExperimentConfig, ExperimentResult,
};
use attrib_core::mllmattr::{
    assemble_few_shot, build_domain_question, build_zero_shot_prompt, few_shot_header, run_mllm_attribution,
    AttributionQuery, AuditLog, FailureStub, MllmRunConfig, Part, RetryPolicy, TruthStub, UniformStub,
};
use attrib_core::synthgen::{CorpusSpec, GeneratorSignature, SignatureSet, LANGUAGE_CODES};
use attrib_core::transforms::{corruption_grid, TransformKind, TransformSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 20250101;
const CORPUS_SEED: u64 = 11;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn corpus(name: &str, set: SignatureSet, domains: usize, languages: usize, per_cell: usize, size: usize) -> Corpus {
    let sigs = set.build(5).expect("signature set");
    corpus_from(name, &sigs, domains, languages, per_cell, size)
}

fn corpus_from(name: &str, sigs: &[GeneratorSignature], domains: usize, languages: usize, per_cell: usize, size: usize) -> Corpus {
    let spec = CorpusSpec {
        domains,
        languages,
        per_cell,
        size,
        seed: CORPUS_SEED,
    };
    let t = Instant::now();
    let c = synthesize(sigs, &spec, &cache_dir().join(name)).expect("corpus");
    eprintln!("  corpus {name}: {} images ready in {:.0}s", c.rows.len(), t.elapsed().as_secs_f64());
    c
}

fn convnet(side: usize) -> Architecture {
    Architecture::ConvNet(SmallConvNetConfig::with_side(side))
}

fn config(side: usize) -> ExperimentConfig {
    ExperimentConfig::new(SEED, convnet(side), TrainConfig::desk())
}

fn cell_acc(r: &ExperimentResult, key: &str, value: &str) -> f64 {
    r.cell(|c| c.param_str(key) == Some(value))
        .unwrap_or_else(|| panic!("no cell with {key} = {value}"))
        .accuracy
}

/// Label-shuffle controls gathered from every experiment for A3.
#[derive(Default)]
struct Controls(Vec<(String, f64, f64)>);

impl Controls {
    fn record(&mut self, what: &str, r: &ExperimentResult) {
        let c: &Cell = r.shuffle_control.as_ref().expect("shuffle control enabled");
        self.0.push((what.to_string(), c.accuracy, r.chance));
    }
}

fn a1_a2(c: &Corpus, controls: &mut Controls) -> (Outcome, Outcome) {
    let r = run_scaling(&c.root, &c.rows, &[100, 300, 1000], 200, &config(64)).expect("scaling run");
    controls.record("scaling", &r);
    let acc: Vec<f64> = [100, 300, 1000]
        .iter()
        .map(|n| r.cell(|c| c.param("size").and_then(|v| v.as_u64()) == Some(*n)).expect("size cell").accuracy)
        .collect();
    let a1 = outcome(acc[2] >= 0.90, format!("1000/class at 64px: {} (need >= 90%)", pct(acc[2])));
    let monotone = acc.windows(2).all(|w| w[1] >= w[0] - 0.03);
    let floor = acc[0] >= r.chance + 0.10;
    let a2 = outcome(
        monotone && floor,
        format!(
            "acc at 100/300/1000 = {}/{}/{} (each >= previous - 3 pts; first >= {})",
            pct(acc[0]),
            pct(acc[1]),
            pct(acc[2]),
            pct(r.chance + 0.10)
        ),
    );
    (a1, a2)
}

fn a3(controls: &Controls) -> Outcome {
    let c = corpus("identical", SignatureSet::Identical, 1, 1, 300, 224);
    let r = run_scaling(&c.root, &c.rows, &[100], 200, &config(32)).expect("identical run");
    let acc = r.cells[0].accuracy;
    let mut ok = (acc - 0.20).abs() <= 0.05;
    let mut detail = format!("identical signatures: {}", pct(acc));
    let mut all = controls.0.clone();
    all.push(("identical".into(), r.shuffle_control.as_ref().expect("control").accuracy, r.chance));
    for (what, a, chance) in &all {
        ok &= (a - chance).abs() <= 0.05;
        detail.push_str(&format!("; shuffled {what} {} vs chance {}", pct(*a), pct(*chance)));
    }
    let kinds = ["scaling", "corruption", "structural", "ood", "language"];
    let covered = kinds.iter().all(|k| all.iter().any(|(w, ..)| w.starts_with(k)));
    outcome(ok && covered, detail)
}

fn a4(c: &Corpus, controls: &mut Controls) -> Outcome {
    let r = run_corruption_ablation(&c.root, &c.rows, 150, 100, &corruption_grid(), &config(64)).expect("corruption run");
    controls.record("corruption", &r);
    let base = cell_acc(&r, "transform", "none");
    let mut ok = true;
    let mut parts = vec![format!("none {}", pct(base))];
    for spec in corruption_grid() {
        if spec.kind == TransformKind::None {
            continue;
        }
        let label = spec.label();
        let acc = cell_acc(&r, "transform", &label);
        let allowed = if spec.kind == TransformKind::ResizeCorrupt && spec.strength <= 32.0 { 0.20 } else { 0.10 };
        ok &= base - acc <= allowed;
        parts.push(format!("{label} {} (drop <= {:.0})", pct(acc), 100.0 * allowed));
    }
    outcome(ok, parts.join(", "))
}

fn a5(controls: &mut Controls) -> Outcome {
    let archs = [convnet(32), Architecture::hist()];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, set, check) in [
        ("palette-only", SignatureSet::PaletteOnly, true),
        ("structure-only", SignatureSet::StructureOnly, false),
    ] {
        let c = corpus(name, set, 1, 1, 300, 224);
        let r = run_structural_ablation(&c.root, &c.rows, 200, 100, &[], &archs, &config(32)).expect("structural run");
        controls.record(&format!("structural/{name}"), &r);
        for arch in ["convnet", "hist"] {
            let cell = r
                .cell(|c| c.param_str("transform") == Some("pixel_shuffle") && c.param_str("classifier") == Some(arch))
                .expect("pixel_shuffle cell");
            let pass = if check { cell.accuracy >= 0.85 } else { cell.accuracy <= r.chance + 0.10 };
            ok &= pass;
            let bound = if check { ">= 85%".to_string() } else { format!("<= {}", pct(r.chance + 0.10)) };
            parts.push(format!("{name} {arch} shuffled {} ({bound})", pct(cell.accuracy)));
        }
    }
    outcome(ok, parts.join(", "))
}

fn a6() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, results) in [
        ("single", (0..20).flat_map(|c| gradcheck::check_case::<f32>(SEED, c)).collect::<Vec<_>>()),
        ("double", (0..20).flat_map(|c| gradcheck::check_case::<f64>(SEED, c)).collect::<Vec<_>>()),
    ] {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        let tol = results[0].tolerance;
        let layers: std::collections::BTreeSet<&str> = results.iter().map(|r| r.name.as_str()).collect();
        ok &= failed.is_empty() && tol <= if label == "single" { 1e-3 } else { 1e-6 };
        parts.push(format!(
            "{label}: {} checks over {} gradients, max rel err {worst:.2e} < {tol:.0e}, {} failed",
            results.len(),
            layers.len(),
            failed.len()
        ));
    }
    outcome(ok, parts.join("; "))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
}

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let counts: Vec<Vec<u64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..500)).collect()).collect();
        let mut counts = counts;
        // keep every row and column non-empty
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] += 1;
        }
        let cm = ConfusionMatrix::from_counts(names(n), counts.clone()).expect("counts");
        let r = recall_matrix(&cm).expect("recall");
        let p = precision_matrix(&cm).expect("precision");
        for i in 0..n {
            worst = worst.max((r[i].iter().sum::<f64>() - 100.0).abs());
            worst = worst.max((p.iter().map(|row| row[i]).sum::<f64>() - 100.0).abs());
        }
        let trace: u64 = (0..n).map(|i| counts[i][i]).sum();
        let total: u64 = counts.iter().flatten().sum();
        exact &= cm.accuracy() == trace as f64 / total as f64;
    }

    let identity = ConfusionMatrix::from_counts(names(2), vec![vec![10, 0], vec![0, 10]]).expect("identity");
    let eye = vec![vec![100.0, 0.0], vec![0.0, 100.0]];
    let hand = ConfusionMatrix::from_counts(names(2), vec![vec![1, 3], vec![2, 2]]).expect("hand");
    let hand_recall = vec![vec![25.0, 75.0], vec![50.0, 50.0]];
    let hand_precision = vec![vec![100.0 / 3.0, 60.0], vec![200.0 / 3.0, 40.0]];
    let mut hand_ok = close(&recall_matrix(&identity).unwrap(), &eye, 1e-12)
        && close(&precision_matrix(&identity).unwrap(), &eye, 1e-12)
        && close(&recall_matrix(&hand).unwrap(), &hand_recall, 1e-9)
        && close(&precision_matrix(&hand).unwrap(), &hand_precision, 1e-9)
        && hand.accuracy() == 3.0 / 8.0;

    // Display of the first row of the five-class recall table, regenerated
    // from its counts; the second class keeps high precision at low recall.
    let table = ConfusionMatrix::from_counts(
        names(5),
        vec![
            vec![16, 48, 304, 181, 451],
            vec![14, 110, 250, 267, 359],
            vec![14, 26, 573, 200, 187],
            vec![11, 57, 288, 470, 174],
            vec![19, 38, 234, 97, 612],
        ],
    )
    .expect("table");
    let tr = recall_matrix(&table).unwrap();
    let tp = precision_matrix(&table).unwrap();
    let shown: Vec<String> = tr[0].iter().map(|v| format!("{v:.1}")).collect();
    hand_ok &= shown == ["1.6", "4.8", "30.4", "18.1", "45.1"] && format!("{:.1}", tr[1][1]) == "11.0" && tp[1][1] > 3.0 * tr[1][1];

    let empty = ConfusionMatrix::from_counts(names(2), vec![vec![0, 0], vec![1, 1]]).expect("empty row");
    let errors_ok = recall_matrix(&empty).is_err() && precision_matrix(&ConfusionMatrix::from_counts(names(2), vec![vec![0, 1], vec![0, 1]]).unwrap()).is_err();

    outcome(
        worst <= 0.01 && exact && hand_ok && errors_ok,
        format!(
            "1000 random matrices: max |sum - 100| = {worst:.2e}, accuracy exact: {exact}; hand cases: {hand_ok}; empty axes rejected: {errors_ok}"
        ),
    )
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn synthetic_rows(models: &[String], groups: u64) -> Vec<ManifestRow> {
    let mut rows = Vec::new();
    for m in models {
        for p in 0..groups {
            rows.push(ManifestRow {
                id: format!("{m}-{p}"),
                path: format!("{m}/{p}.png"),
                model: m.clone(),
                domain: Some("animals".into()),
                language: Some("en".into()),
                prompt_id: p,
                extra: BTreeMap::new(),
            });
        }
    }
    rows
}

fn permutation_index(order: &[usize]) -> usize {
    // Lehmer code
    let mut idx = 0;
    for i in 0..order.len() {
        let smaller = order[i + 1..].iter().filter(|&&v| v < order[i]).count();
        idx = idx * (order.len() - i) + smaller;
    }
    idx
}

fn a8() -> Outcome {
    let candidates: Vec<String> = attrib_core::mllmattr::default_candidates();
    let prompt_ok = build_zero_shot_prompt(&candidates).ok().as_deref() == Some(golden("zero_shot_prompt.txt").as_str());
    let domain_ok = build_domain_question("animals").ok().as_deref() == Some(golden("domain_question_animals.txt").as_str());

    let rows = synthetic_rows(&candidates, 12);
    let load = |r: &ManifestRow| Ok(r.id.clone().into_bytes());
    let mut counting_ok = true;
    for k in 0..=5 {
        let q = AttributionQuery {
            target_id: format!("{}-3", candidates[1]),
            candidates: candidates.clone(),
            shots: k,
            seed: 99,
        };
        let req = assemble_few_shot(&q, &rows, load).expect("assemble");
        let images: Vec<&str> = req.image_ids();
        let texts: Vec<&String> = req.parts.iter().filter_map(|p| if let Part::Text(t) = p { Some(t) } else { None }).collect();
        counting_ok &= images.len() == 5 * k + 1 && req.target_id() == Some(q.target_id.as_str());
        counting_ok &= texts.len() == if k == 0 { 1 } else { 5 * k + 2 };
        if k > 0 {
            counting_ok &= matches!(&req.parts[0], Part::Text(t) if *t == few_shot_header(k));
        }
        // no exemplar shares the target's prompt group
        counting_ok &= images[..images.len() - 1].iter().all(|id| !id.ends_with("-3"));
        // each set covers every candidate once, captioned with its own name
        for s in 0..k {
            let set = &req.parts[1 + 10 * s..1 + 10 * (s + 1)];
            let mut seen: Vec<&str> = Vec::new();
            for pair in set.chunks(2) {
                if let (Part::Image { id, .. }, Part::Text(caption)) = (&pair[0], &pair[1]) {
                    counting_ok &= id.starts_with(&format!("{caption}-"));
                    seen.push(caption);
                } else {
                    counting_ok = false;
                }
            }
            seen.sort_unstable();
            let mut want: Vec<&str> = candidates.iter().map(String::as_str).collect();
            want.sort_unstable();
            counting_ok &= seen == want;
        }
    }
    let short = AttributionQuery {
        target_id: format!("{}-0", candidates[0]),
        candidates: candidates.clone(),
        shots: 12,
        seed: 1,
    };
    counting_ok &= assemble_few_shot(&short, &rows, load).is_err();

    let mut counts = vec![0u64; 120];
    for seed in 0..1000u64 {
        let q = AttributionQuery {
            target_id: format!("{}-0", candidates[0]),
            candidates: candidates.clone(),
            shots: 1,
            seed,
        };
        let req = assemble_few_shot(&q, &rows, load).expect("assemble");
        let order: Vec<usize> = req.parts[1..11]
            .iter()
            .skip(1)
            .step_by(2)
            .map(|p| match p {
                Part::Text(t) => candidates.iter().position(|c| c == t).expect("caption is a candidate"),
                _ => panic!("caption expected"),
            })
            .collect();
        counts[permutation_index(&order)] += 1;
    }
    let expected = 1000.0 / 120.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(119.0).expect("dof").cdf(chi2);

    outcome(
        prompt_ok && domain_ok && counting_ok && p > 0.001,
        format!("zero-shot golden: {prompt_ok}, domain golden: {domain_ok}, counting/exclusion: {counting_ok}, order chi2 {chi2:.1} on 119 dof, p = {p:.3}"),
    )
}

fn a9(controls: &mut Controls) -> Outcome {
    let c = corpus("ood", SignatureSet::Default, 4, 1, 120, 224);
    let r = run_ood_matrix(&c.root, &c.rows, 20, 100, None, &config(32)).expect("ood run");
    controls.record("ood", &r);
    let (domains, grid) = ood_grid(&r);
    let (diag, off) = diagonal_means(&grid);
    outcome(
        diag - off >= 0.05 && off >= r.chance + 0.10,
        format!(
            "{}x{} grid: diagonal mean {}, off-diagonal mean {} (gap >= 5 pts, off >= {})",
            domains.len(),
            domains.len(),
            pct(diag),
            pct(off),
            pct(r.chance + 0.10)
        ),
    )
}

fn a10(controls: &mut Controls) -> Outcome {
    let sigs = SignatureSet::Default.build(5).expect("signatures");
    let c = corpus_from("language", &sigs, 1, 5, 250, 224);
    let r = run_language_attribution(&c.root, &c.rows, 100, 150, &config(32)).expect("language run");
    controls.record("language", &r);
    let mut ok = true;
    let mut parts = Vec::new();
    for sig in &sigs {
        let cell = r.cell(|c| c.param_str("model") == Some(sig.name.as_str())).expect("model cell");
        let marked = sig.language_effect.languages();
        if marked.is_empty() {
            ok &= (cell.accuracy - 0.20).abs() <= 0.05;
            parts.push(format!("{} {} (20 +- 5)", sig.name, pct(cell.accuracy)));
            continue;
        }
        let pair: Vec<usize> = marked
            .iter()
            .map(|&l| cell.confusion.labels.iter().position(|x| x == LANGUAGE_CODES[l as usize]).expect("language label"))
            .collect();
        let counts = &cell.confusion.counts;
        let inside: u64 = pair.iter().map(|&i| pair.iter().map(|&j| counts[i][j]).sum::<u64>()).sum();
        let total: u64 = pair.iter().map(|&i| counts[i].iter().sum::<u64>()).sum();
        let share = inside as f64 / total as f64;
        ok &= cell.accuracy >= 0.35 && share >= 0.75;
        let names: Vec<&str> = pair.iter().map(|&i| cell.confusion.labels[i].as_str()).collect();
        parts.push(format!(
            "{} {} (>= 35%), {} of {} predictions stay in {{{}}} (>= 75%)",
            sig.name,
            pct(cell.accuracy),
            pct(share),
            names.join(","),
            names.join(",")
        ));
    }
    outcome(ok, parts.join(", "))
}

const TINY_SCALING: &str = r#"
version = 1
kind = "scaling"
seed = 5

[corpus.synth]
per_cell = 14
size = 32
dir = "corpus"

[split]
sizes = [4, 8]
test_per_class = 6

[train]
epochs = 3
batch_size = 32

[arch]
kind = "conv_net"
input_side = 16
stage_channels = [4, 8]
"#;

const TINY_CORRUPTION: &str = r#"
version = 1
kind = "corruption"
seed = 5
shuffle_control = false

[corpus.synth]
per_cell = 14
size = 32
dir = "corpus"

[split]
train_per_class = 8
test_per_class = 6

[train]
epochs = 2
batch_size = 32

[arch]
kind = "conv_net"
input_side = 16
stage_channels = [4, 8]

[[transforms]]
kind = "gaussian_noise"
strength = 0.2

[[transforms]]
kind = "pixel_shuffle"
"#;

fn run_cli(dir: &Path, config: &str, workers: usize, out: &str) -> Result<Vec<u8>, String> {
    let cfg_path = dir.join("experiment.toml");
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
    let out_dir = dir.join(out);
    let status = Command::new(env!("CARGO_BIN_EXE_attrib"))
        .args(["--workers", &workers.to_string(), "experiment", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let results = std::fs::read_dir(&out_dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("results.json"))
        .find(|p| p.exists())
        .ok_or("no results.json written")?;
    std::fs::read(results).map_err(|e| e.to_string())
}

fn a11() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, cfg) in [("scaling", TINY_SCALING), ("corruption", TINY_CORRUPTION)] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).expect("dir");
        let runs: Result<Vec<Vec<u8>>, String> = [(1, "w1"), (2, "w2"), (1, "w1-again")]
            .iter()
            .map(|&(w, out)| run_cli(&dir, cfg, w, out))
            .collect();
        match runs {
            Ok(r) => {
                let same = r.windows(2).all(|w| w[0] == w[1]);
                ok &= same;
                parts.push(format!("{name} results.json identical across --workers 1/2/1: {same}"));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name} run failed: {}", e.trim()));
            }
        }
    }

    let c = corpus("identical", SignatureSet::Identical, 1, 1, 300, 224);
    let rows: Vec<ManifestRow> = c.rows.iter().filter(|r| r.prompt_id % 10 == 0).cloned().collect();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    };
    let arch = Architecture::ConvNet(SmallConvNetConfig {
        input_side: 16,
        stage_channels: vec![4, 8],
    });
    let mut round_trip = true;
    for a in [arch, Architecture::hist()] {
        let ckpt = classifiers::train(&c.root, &rows, ClassKey::Model, &TransformSpec::none(), &tc, &a).expect("train");
        let bytes = checkpoint::to_bytes(&ckpt).expect("encode");
        let path = tmp.path().join(format!("{}.ckpt", a.name()));
        checkpoint::save(&ckpt, &path).expect("save");
        let loaded = checkpoint::load(&path).expect("load");
        round_trip &= std::fs::read(&path).expect("read") == bytes
            && checkpoint::to_bytes(&loaded).expect("re-encode") == bytes
            && loaded == ckpt;
    }
    ok &= round_trip;
    parts.push(format!("checkpoint byte round-trip (convnet, hist): {round_trip}"));
    outcome(ok, parts.join("; "))
}

fn a12() -> Outcome {
    let c = corpus("mllm", SignatureSet::Default, 1, 1, 1000, 32);
    let candidates = class_labels(&c.rows, ClassKey::Model);
    let audit = AuditLog::disabled();
    let mut parts = Vec::new();

    let mut truth_cfg = MllmRunConfig::new(100, vec![0, 1, 5], SEED);
    truth_cfg.candidates = candidates.clone();
    let truth = run_mllm_attribution(&c.root, &c.rows, &TruthStub::new(&c.rows), &truth_cfg, &audit).expect("truth run");
    let truth_ok = truth.per_shot.iter().all(|s| s.n_queries == 500 && s.n_correct == 500 && s.accuracy == 1.0);
    parts.push(format!(
        "truth stub {} at shots 0/1/5",
        truth.per_shot.iter().map(|s| pct(s.accuracy)).collect::<Vec<_>>().join("/")
    ));

    let mut uni_cfg = MllmRunConfig::new(1000, vec![0], SEED);
    uni_cfg.candidates = candidates.clone();
    let stub = UniformStub {
        candidates: candidates.clone(),
        seed: SEED,
    };
    let uni = run_mllm_attribution(&c.root, &c.rows, &stub, &uni_cfg, &audit).expect("uniform run");
    let u = &uni.per_shot[0];
    let uni_ok = u.n_queries == 5000 && (u.accuracy - 0.20).abs() <= 0.03;
    parts.push(format!("uniform stub {} over {} queries (20 +- 3)", pct(u.accuracy), u.n_queries));

    let mut fail_cfg = MllmRunConfig::new(20, vec![0, 1], SEED);
    fail_cfg.candidates = candidates.clone();
    fail_cfg.retry = RetryPolicy::immediate();
    let failing = FailureStub::default();
    let fail = run_mllm_attribution(&c.root, &c.rows, &failing, &fail_cfg, &audit).expect("failure run");
    let calls = failing.calls.load(Ordering::Relaxed);
    let fail_ok = fail.per_shot.iter().all(|s| {
        s.n_queries == 100
            && s.n_correct == 0
            && s.accuracy == 0.0
            && s.n_parse_failures == 100
            && s.failures_per_class.iter().all(|&f| f == 20)
    }) && calls == 2 * 100 * fail_cfg.retry.max_attempts;
    parts.push(format!(
        "failure stub {} correct of {} per shot count, {calls} calls",
        fail.per_shot.iter().map(|s| s.n_correct).sum::<usize>(),
        fail.per_shot[0].n_queries
    ));
    outcome(truth_ok && uni_ok && fail_ok, parts.join("; "))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let started = Instant::now();
    let mut controls = Controls::default();
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id, title, o: Outcome, elapsed: f64| {
        println!("{id} {} {title}: {} [{elapsed:.0}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, title, o));
    };

    let t = Instant::now();
    // one corpus serves the scaling and corruption criteria
    match catch_unwind(|| corpus("default", SignatureSet::Default, 1, 1, 1200, 224)) {
        Ok(c) => {
            let mut pair = None;
            let o = guarded(|| {
                pair = Some(a1_a2(&c, &mut controls));
                outcome(true, "")
            });
            let (a1, a2) = pair.unwrap_or_else(|| (outcome(false, o.detail.clone()), outcome(false, o.detail)));
            let e = t.elapsed().as_secs_f64();
            record("A1", "separability floor", a1, e);
            record("A2", "scaling monotonicity", a2, e);
            let t = Instant::now();
            let o = guarded(|| a4(&c, &mut controls));
            record("A4", "corruption robustness", o, t.elapsed().as_secs_f64());
        }
        Err(_) => {
            for (id, title) in [("A1", "separability floor"), ("A2", "scaling monotonicity"), ("A4", "corruption robustness")] {
                record(id, title, outcome(false, "default corpus generation failed"), 0.0);
            }
        }
    }

    let t = Instant::now();
    let o = guarded(|| a5(&mut controls));
    record("A5", "pixel-shuffle dissociation", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(a6);
    record("A6", "gradient checks", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(a7);
    record("A7", "matrix algebra oracles", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(a8);
    record("A8", "prompt goldens and few-shot assembly", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(|| a9(&mut controls));
    record("A9", "OOD structure", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(|| a10(&mut controls));
    record("A10", "language dichotomy", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(a11);
    record("A11", "determinism", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(a12);
    record("A12", "MLLM harness stubs", o, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = guarded(|| a3(&controls));
    record("A3", "chance calibration", o, t.elapsed().as_secs_f64());

    let failed: Vec<&str> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, ..)| *id).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
