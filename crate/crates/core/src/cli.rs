//! The `attrib` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::classifiers::{self, checkpoint, gradcheck, Architecture, Precision, SmallConvNetConfig, TrainConfig};
use crate::config::{self, ClientChoice, ExperimentConfigFile, MllmConfigFile};
use crate::dataset::{self, ClassKey, RowFilter, SplitSpec};
use crate::error::{Error, Result};
use crate::experiments::{self, canonical_json, ConfusionMatrix, ExperimentResult};
use crate::mllmattr::{self, AuditLog, FailureStub, HttpClient, TruthStub, UniformStub, VisionChatClient};
use crate::report;
use crate::synthgen::{CorpusSpec, SignatureSet};
use crate::transforms::TransformSpec;

#[derive(Parser, Debug)]
#[command(name = "attrib", version, about = "Generator attribution experiments on synthetic corpora")]
pub struct Cli {
    /// Worker threads for training and generation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Convnet,
    Hist,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassKeyArg {
    Model,
    Domain,
    Language,
}

impl From<ClassKeyArg> for ClassKey {
    fn from(k: ClassKeyArg) -> Self {
        match k {
            ClassKeyArg::Model => ClassKey::Model,
            ClassKeyArg::Domain => ClassKey::Domain,
            ClassKeyArg::Language => ClassKey::Language,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SignatureArg {
    Default,
    PaletteOnly,
    StructureOnly,
    Identical,
}

impl From<SignatureArg> for SignatureSet {
    fn from(s: SignatureArg) -> Self {
        match s {
            SignatureArg::Default => SignatureSet::Default,
            SignatureArg::PaletteOnly => SignatureSet::PaletteOnly,
            SignatureArg::StructureOnly => SignatureSet::StructureOnly,
            SignatureArg::Identical => SignatureSet::Identical,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus and its manifest.
    Gen {
        #[arg(long, value_enum, default_value = "default")]
        signatures: SignatureArg,
        #[arg(long, default_value_t = 5)]
        models: usize,
        #[arg(long, default_value_t = 1)]
        domains: usize,
        #[arg(long, default_value_t = 1)]
        languages: usize,
        #[arg(long)]
        per_cell: usize,
        #[arg(long, default_value_t = crate::imageio::CANONICAL_SIDE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a prompt-disjoint split and save a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; the held-out rows go to `<out>.test.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        class_key: ClassKeyArg,
        #[arg(long)]
        train_per_class: usize,
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        #[arg(long, value_enum, default_value = "convnet")]
        arch: ArchArg,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "single")]
        precision: PrecisionArg,
    },
    /// Evaluate a checkpoint: confusion matrix and accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Rows to evaluate; defaults to `<checkpoint>.test.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        class_key: ClassKeyArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the five studies from a config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
    /// Query a chat model (or a stub) for attributions.
    Mllm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit tables and figures from a results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the directory of `results`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks and oracle suites.
    Selftest {
        #[arg(long, default_value_t = 20)]
        cases: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: invalid config field `workers`: must be at least 1");
            return 1;
        }
        // A second call in one process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            signatures,
            models,
            domains,
            languages,
            per_cell,
            size,
            seed,
            out,
        } => {
            let sigs = SignatureSet::from(signatures).build(models)?;
            let spec = CorpusSpec {
                domains,
                languages,
                per_cell,
                size,
                seed,
            };
            let corpus = config::synthesize(&sigs, &spec, &out)?;
            println!("wrote {} images to {}", corpus.rows.len(), out.display());
            Ok(())
        }
        Command::Train {
            corpus,
            out,
            class_key,
            train_per_class,
            test_per_class,
            arch,
            side,
            epochs,
            batch_size,
            seed,
            precision,
        } => {
            let rows = dataset::load_manifest(&corpus.join("manifest.jsonl"))?;
            let class_key = ClassKey::from(class_key);
            let split = dataset::make_split(
                &rows,
                &SplitSpec {
                    train_per_class,
                    test_per_class,
                    class_key,
                    filter: RowFilter::default(),
                    seed,
                },
            )?;
            let arch = match arch {
                ArchArg::Convnet => Architecture::ConvNet(SmallConvNetConfig::with_side(side)),
                ArchArg::Hist => Architecture::hist(),
            };
            let tc = TrainConfig {
                epochs,
                batch_size,
                seed,
                precision: precision.into(),
                ..TrainConfig::default()
            };
            let ckpt = classifiers::train(&corpus, &split.train, class_key, &TransformSpec::none().with_seed(seed), &tc, &arch)?;
            checkpoint::save(&ckpt, &out)?;
            let test_path = test_manifest_path(&out);
            dataset::write_manifest(&test_path, &split.test)?;
            println!(
                "trained {} on {} rows (final loss {:.4}); checkpoint {}",
                arch.name(),
                split.train.len(),
                ckpt.meta.final_train_loss,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt_path,
            corpus,
            manifest,
            class_key,
            out,
        } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let manifest = manifest.unwrap_or_else(|| test_manifest_path(&ckpt_path));
            let rows = dataset::load_manifest(&manifest)?;
            let targets = classifiers::label_indices(&rows, class_key.into(), &ckpt.labels)?;
            let preds = classifiers::predict(&ckpt, &corpus, &rows, &TransformSpec::none().with_seed(ckpt.meta.seed))?;
            let cm = ConfusionMatrix::from_predictions(ckpt.labels.clone(), &targets, &preds.predicted);
            print_confusion(&cm);
            println!("accuracy {:.4} ({} / {})", cm.accuracy(), cm.trace(), cm.total());
            if let Some(dir) = out {
                write_text(&dir.join("confusion.json"), &canonical_json(&json!({ "confusion": cm, "accuracy": cm.accuracy() })))?;
                let mut tables = vec![report::Table {
                    name: "counts".into(),
                    rows: cm.labels.clone(),
                    cols: cm.labels.clone(),
                    values: cm.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect(),
                }];
                if let Ok(values) = experiments::recall_matrix(&cm) {
                    tables.push(report::Table {
                        name: "recall".into(),
                        rows: cm.labels.clone(),
                        cols: cm.labels.clone(),
                        values,
                    });
                }
                write_text(&dir.join("tables").join("eval.csv"), &report::emit_csv(&tables)?)?;
            }
            Ok(())
        }
        Command::Experiment {
            config,
            seed,
            out,
            precision,
        } => {
            let mut cfg = ExperimentConfigFile::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            } else {
                cfg.out = base_dir(&config).join(&cfg.out);
            }
            if let Some(p) = precision {
                cfg.train.precision = p.into();
            }
            if cli.workers.is_some() {
                cfg.workers = cli.workers;
            } else if let Some(w) = cfg.workers {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
            }
            let started = Instant::now();
            let result = cfg.run(&base_dir(&config))?;
            let dir = cfg.run_dir();
            report::write_report(&result, &dir)?;
            write_text(&dir.join("config.resolved.json"), &canonical_json(&serde_json::to_value(&cfg)?))?;
            write_run_info(&dir, started, &cfg.hash()?)?;
            print_summary(&result);
            println!("results in {}", dir.display());
            Ok(())
        }
        Command::Mllm { config, seed, out } => {
            let mut cfg = MllmConfigFile::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.out = out.unwrap_or_else(|| base_dir(&config).join(&cfg.out));
            let started = Instant::now();
            let corpus = cfg.corpus.load(&base_dir(&config), &cfg.out, cfg.seed)?;
            let rc = cfg.run_config(&corpus.rows);
            let client: Box<dyn VisionChatClient> = match &cfg.client {
                ClientChoice::Http(e) => Box::new(HttpClient::new(e.clone())?),
                ClientChoice::TruthStub => Box::new(TruthStub::new(&corpus.rows)),
                ClientChoice::UniformStub => Box::new(UniformStub {
                    candidates: rc.candidates.clone(),
                    seed: cfg.seed,
                }),
                ClientChoice::FailureStub => Box::new(FailureStub::default()),
            };
            let dir = cfg.run_dir();
            let audit = AuditLog::create(&dir.join("audit.jsonl"))?;
            let result = mllmattr::run_mllm_attribution(&corpus.root, &corpus.rows, client.as_ref(), &rc, &audit)?;
            report::write_mllm_report(&result, &dir)?;
            if cfg.cooccurrence_per_domain > 0 {
                let co = mllmattr::run_domain_cooccurrence(&corpus.root, &corpus.rows, client.as_ref(), cfg.cooccurrence_per_domain, cfg.seed, &rc.retry, &audit)?;
                let table = report::Table {
                    name: "cooccurrence".into(),
                    rows: co.orig.clone(),
                    cols: co.quest.clone(),
                    values: co.percent(),
                };
                write_text(&dir.join("tables").join("cooccurrence.csv"), &report::emit_csv(std::slice::from_ref(&table))?)?;
                write_text(
                    &dir.join("figures").join("cooccurrence.svg"),
                    &report::emit_heatmap_svg(&report::HeatmapSpec::from_table(&table, report::Normalization::Row))?,
                )?;
            }
            write_text(&dir.join("config.resolved.json"), &canonical_json(&serde_json::to_value(&cfg)?))?;
            write_run_info(&dir, started, "")?;
            for s in &result.per_shot {
                println!(
                    "{}-shot: accuracy {:.4} ({} / {}, {} parse failures)",
                    s.shots, s.accuracy, s.n_correct, s.n_queries, s.n_parse_failures
                );
            }
            println!("results in {}", dir.display());
            Ok(())
        }
        Command::Report { results, out } => {
            let text = std::fs::read_to_string(&results).map_err(|e| Error::io(&results, e))?;
            let dir = out.unwrap_or_else(|| base_dir(&results));
            if let Ok(r) = ExperimentResult::from_json(&text) {
                report::write_figures(&r, &dir)?;
            } else {
                let r: mllmattr::MllmResult = serde_json::from_str(&text)?;
                let tables = report::mllm_tables(&r);
                write_text(&dir.join("tables").join("mllm.csv"), &report::emit_csv(&tables)?)?;
            }
            println!("report written to {}", dir.display());
            Ok(())
        }
        Command::Selftest { cases, seed } => selftest(cases, seed),
    }
}

fn test_manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".test.jsonl");
    PathBuf::from(s)
}

fn write_run_info(dir: &Path, started: Instant, config_hash: &str) -> Result<()> {
    let info = json!({
        "wall_clock_secs": started.elapsed().as_secs_f64(),
        "workers": rayon::current_num_threads(),
        "toolkit_version": experiments::TOOLKIT_VERSION,
        "config_hash": config_hash,
    });
    write_text(&dir.join("run_info.json"), &canonical_json(&info))
}

fn print_confusion(cm: &ConfusionMatrix) {
    let w = cm.labels.iter().map(String::len).max().unwrap_or(0).max(6);
    print!("{:w$}", "");
    for l in &cm.labels {
        print!(" {l:>w$}");
    }
    println!();
    for (l, row) in cm.labels.iter().zip(&cm.counts) {
        print!("{l:w$}");
        for c in row {
            print!(" {c:>w$}");
        }
        println!();
    }
}

fn print_summary(result: &ExperimentResult) {
    let table = report::accuracy_table(result);
    for (r, row) in table.rows.iter().zip(&table.values) {
        let vals: Vec<String> = row.iter().map(|v| report::fmt1(*v)).collect();
        println!("{r}: {}", vals.join(" "));
    }
    if let Some(c) = &result.shuffle_control {
        println!("shuffle control: {:.1} (chance {:.1})", 100.0 * c.accuracy, 100.0 * result.chance);
    }
}

fn selftest(cases: u64, seed: u64) -> Result<()> {
    let mut failed = Vec::new();
    for (label, results) in [
        ("single", (0..cases).flat_map(|c| gradcheck::check_case::<f32>(seed, c)).collect::<Vec<_>>()),
        ("double", (0..cases).flat_map(|c| gradcheck::check_case::<f64>(seed, c)).collect::<Vec<_>>()),
    ] {
        let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        let tol = results.first().map_or(0.0, |r| r.tolerance);
        println!("gradcheck {label}: {} checks over {cases} cases, max relative error {worst:.3e} (tolerance {tol:.0e})", results.len());
        failed.extend(results.into_iter().filter(|r| !r.passed()).map(|r| format!("gradcheck {label} {}", r.name)));
    }

    let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![1, 3], vec![2, 2]])?;
    let recall = experiments::recall_matrix(&cm)?;
    let precision = experiments::precision_matrix(&cm)?;
    let matrix_ok = recall == vec![vec![25.0, 75.0], vec![50.0, 50.0]]
        && (precision[0][0] - 100.0 / 3.0).abs() < 1e-9
        && (precision[0][1] - 60.0).abs() < 1e-9
        && cm.accuracy() == 3.0 / 8.0;
    println!("confusion oracles: {}", if matrix_ok { "ok" } else { "FAILED" });
    if !matrix_ok {
        failed.push("confusion oracles".into());
    }

    let prompt_ok = mllmattr::build_zero_shot_prompt(&mllmattr::default_candidates())? == include_str!("../tests/golden/zero_shot_prompt.txt")
        && mllmattr::build_domain_question("animals")? == include_str!("../tests/golden/domain_question_animals.txt");
    println!("prompt golden files: {}", if prompt_ok { "ok" } else { "FAILED" });
    if !prompt_ok {
        failed.push("prompt golden files".into());
    }

    if failed.is_empty() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(Error::SelfTest(failed.join(", ")))
    }
}
