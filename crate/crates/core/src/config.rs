//! Declarative run configuration (TOML, versioned schema).
//!
//! Relative paths inside a config file resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{Architecture, SmallConvNetConfig, TrainConfig};
use crate::dataset::{self, ManifestRow};
use crate::error::{Error, Result};
use crate::experiments::{self, canonical_json, ExperimentConfig, ExperimentKind, ExperimentResult};
use crate::mllmattr::{EndpointConfig, MllmRunConfig, RetryPolicy};
use crate::synthgen::{self, CorpusSpec, GeneratorSignature, SignatureSet};
use crate::transforms::{corruption_grid, TransformSpec};

pub const SCHEMA_VERSION: u32 = 1;

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::config("version", format!("unsupported schema version {v}; expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

/// A corpus on disk, or one to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    /// Directory holding `manifest.jsonl`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlock {
    #[serde(default)]
    pub signatures: SignatureSet,
    /// Explicit signatures; overrides `signatures` and `n_models`.
    #[serde(default)]
    pub custom: Vec<GeneratorSignature>,
    #[serde(default = "five")]
    pub n_models: usize,
    #[serde(default = "one")]
    pub domains: usize,
    #[serde(default = "one")]
    pub languages: usize,
    pub per_cell: usize,
    #[serde(default = "canonical_side")]
    pub size: usize,
    /// Corpus seed; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<out>/corpus`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn five() -> usize {
    5
}
fn one() -> usize {
    1
}
fn canonical_side() -> usize {
    crate::imageio::CANONICAL_SIDE
}
fn yes() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl SynthBlock {
    pub fn signature_list(&self) -> Result<Vec<GeneratorSignature>> {
        if self.custom.is_empty() {
            self.signatures.build(self.n_models)
        } else {
            Ok(self.custom.clone())
        }
    }
}

/// A loaded corpus: image root plus rows.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CorpusStamp {
    render_revision: u32,
    spec: CorpusSpec,
    signatures: Vec<GeneratorSignature>,
}

/// Generates a corpus, or reuses `dir` when it already holds the same one.
pub fn synthesize(signatures: &[GeneratorSignature], spec: &CorpusSpec, dir: &Path) -> Result<Corpus> {
    let stamp_path = dir.join("corpus.json");
    let stamp = CorpusStamp {
        render_revision: synthgen::RENDER_REVISION,
        spec: spec.clone(),
        signatures: signatures.to_vec(),
    };
    let manifest = dir.join("manifest.jsonl");
    if let Ok(text) = std::fs::read_to_string(&stamp_path) {
        if serde_json::from_str::<CorpusStamp>(&text).ok().as_ref() == Some(&stamp) && manifest.exists() {
            log::info!("reusing corpus at {}", dir.display());
            return Ok(Corpus {
                root: dir.to_path_buf(),
                rows: dataset::load_manifest(&manifest)?,
            });
        }
    }
    log::info!("generating corpus at {}", dir.display());
    let rows = synthgen::generate_corpus(signatures, spec, dir)?;
    std::fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?).map_err(|e| Error::io(&stamp_path, e))?;
    Ok(Corpus {
        root: dir.to_path_buf(),
        rows,
    })
}

impl CorpusSource {
    pub fn load(&self, base: &Path, out: &Path, run_seed: u64) -> Result<Corpus> {
        match (&self.path, &self.synth) {
            (Some(p), None) => {
                let root = base.join(p);
                let rows = dataset::load_manifest(&root.join("manifest.jsonl"))?;
                Ok(Corpus { root, rows })
            }
            (None, Some(s)) => {
                let spec = CorpusSpec {
                    domains: s.domains,
                    languages: s.languages,
                    per_cell: s.per_cell,
                    size: s.size,
                    seed: s.seed.unwrap_or(run_seed),
                };
                let dir = s.dir.as_ref().map_or_else(|| out.join("corpus"), |d| base.join(d));
                synthesize(&s.signature_list()?, &spec, &dir)
            }
            _ => Err(Error::config("corpus", "set exactly one of `path` or `synth`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub train_per_class: usize,
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default = "per_domain_train")]
    pub per_domain_train: usize,
    #[serde(default = "per_domain_test")]
    pub per_domain_test: usize,
    #[serde(default)]
    pub n_mixed: Option<usize>,
    #[serde(default = "per_lang_train")]
    pub per_lang_train: usize,
    #[serde(default = "per_lang_test")]
    pub per_lang_test: usize,
}

fn per_domain_train() -> usize {
    200
}
fn per_domain_test() -> usize {
    100
}
fn per_lang_train() -> usize {
    700
}
fn per_lang_test() -> usize {
    300
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            sizes: Vec::new(),
            train_per_class: 0,
            test_per_class: 0,
            per_domain_train: per_domain_train(),
            per_domain_test: per_domain_test(),
            n_mixed: None,
            per_lang_train: per_lang_train(),
            per_lang_test: per_lang_test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalDir {
    pub name: String,
    pub dir: PathBuf,
}

/// One experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfigFile {
    pub version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub split: SplitSizes,
    #[serde(default = "TrainConfig::desk")]
    pub train: TrainConfig,
    #[serde(default)]
    pub arch: Option<Architecture>,
    /// Corruption specs; defaults to the full grid.
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub external: Vec<ExternalDir>,
    /// Classifiers for the structural study; defaults to convnet + histogram.
    #[serde(default)]
    pub classifiers: Vec<Architecture>,
    #[serde(default = "yes")]
    pub shuffle_control: bool,
}

impl ExperimentConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        check_version(cfg.version)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn arch(&self) -> Architecture {
        self.arch.clone().unwrap_or_else(|| Architecture::ConvNet(SmallConvNetConfig::default()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arch().validate()?;
        for a in &self.classifiers {
            a.validate()?;
        }
        for t in &self.transforms {
            t.validate()?;
        }
        let s = &self.split;
        match self.kind {
            ExperimentKind::Scaling => {
                if s.sizes.is_empty() || s.sizes.contains(&0) {
                    return Err(Error::config("split.sizes", "needs at least one positive size"));
                }
                if s.test_per_class == 0 {
                    return Err(Error::config("split.test_per_class", "must be positive"));
                }
            }
            ExperimentKind::Corruption | ExperimentKind::Structural => {
                if s.train_per_class == 0 {
                    return Err(Error::config("split.train_per_class", "must be positive"));
                }
                if s.test_per_class == 0 {
                    return Err(Error::config("split.test_per_class", "must be positive"));
                }
            }
            ExperimentKind::Ood => {
                if s.per_domain_train == 0 || s.per_domain_test == 0 {
                    return Err(Error::config("split.per_domain_train", "per-domain sizes must be positive"));
                }
            }
            ExperimentKind::Language => {
                if s.per_lang_train == 0 || s.per_lang_test == 0 {
                    return Err(Error::config("split.per_lang_train", "per-language sizes must be positive"));
                }
            }
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config, minus fields
    /// that cannot change results (output location, worker count).
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
            m.remove("workers");
        }
        Ok(hex::encode(Sha256::digest(canonical_json(&v).as_bytes())))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("{}-seed{}", self.kind.as_str(), self.seed))
    }

    /// Loads or synthesizes the corpus and runs the configured study.
    pub fn run(&self, base: &Path) -> Result<ExperimentResult> {
        self.validate()?;
        let corpus = self.corpus.load(base, &self.out, self.seed)?;
        let mut cfg = ExperimentConfig::new(self.seed, self.arch(), self.train.clone());
        cfg.shuffle_control = self.shuffle_control;
        let (root, rows, s) = (&corpus.root, &corpus.rows, &self.split);
        let mut result = match self.kind {
            ExperimentKind::Scaling => experiments::run_scaling(root, rows, &s.sizes, s.test_per_class, &cfg)?,
            ExperimentKind::Corruption => {
                let specs = if self.transforms.is_empty() { corruption_grid() } else { self.transforms.clone() };
                experiments::run_corruption_ablation(root, rows, s.train_per_class, s.test_per_class, &specs, &cfg)?
            }
            ExperimentKind::Structural => {
                let external: Vec<(String, PathBuf)> = self.external.iter().map(|e| (e.name.clone(), base.join(&e.dir))).collect();
                let archs = if self.classifiers.is_empty() {
                    vec![self.arch(), Architecture::hist()]
                } else {
                    self.classifiers.clone()
                };
                experiments::run_structural_ablation(root, rows, s.train_per_class, s.test_per_class, &external, &archs, &cfg)?
            }
            ExperimentKind::Ood => experiments::run_ood_matrix(root, rows, s.per_domain_train, s.per_domain_test, s.n_mixed, &cfg)?,
            ExperimentKind::Language => experiments::run_language_attribution(root, rows, s.per_lang_train, s.per_lang_test, &cfg)?,
        };
        if let Some(m) = result.config.as_object_mut() {
            m.insert("config_hash".into(), serde_json::Value::String(self.hash()?));
        }
        Ok(result)
    }
}

fn toml_field(e: &toml::de::Error) -> String {
    // toml reports unknown or mistyped keys in the message; the span is the
    // best pointer we have otherwise.
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "config".into()
}

/// Which client answers MLLM queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClientChoice {
    Http(EndpointConfig),
    TruthStub,
    UniformStub,
    FailureStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MllmConfigFile {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub corpus: CorpusSource,
    pub client: ClientChoice,
    #[serde(default = "default_queries")]
    pub per_model_queries: usize,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub candidates: Vec<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    /// Images per prompt domain for the domain co-occurrence question; 0 skips it.
    #[serde(default)]
    pub cooccurrence_per_domain: usize,
}

fn default_queries() -> usize {
    1000
}
fn default_shots() -> Vec<usize> {
    vec![0, 1, 5]
}
fn default_in_flight() -> usize {
    4
}

impl MllmConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        check_version(cfg.version)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Candidates default to the five standard names when the corpus has
    /// them all, and to the corpus's model labels otherwise.
    pub fn run_config(&self, rows: &[ManifestRow]) -> MllmRunConfig {
        let mut rc = MllmRunConfig::new(self.per_model_queries, self.shots.clone(), self.seed);
        if !self.candidates.is_empty() {
            rc.candidates = self.candidates.clone();
        } else {
            let models = dataset::class_labels(rows, dataset::ClassKey::Model);
            if !rc.candidates.iter().all(|c| models.contains(c)) {
                rc.candidates = models;
            }
        }
        rc.retry = self.retry.clone();
        rc.in_flight = self.in_flight;
        rc
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("mllm-seed{}", self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALING: &str = r#"
version = 1
kind = "scaling"
seed = 7

[corpus.synth]
per_cell = 10
size = 32

[split]
sizes = [4, 8]
test_per_class = 2

[train]
epochs = 2
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfigFile::parse(SCALING).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Scaling);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.split.per_domain_train, 200);
        assert!(cfg.shuffle_control);
        assert_eq!(cfg.run_dir(), PathBuf::from("out/scaling-seed7"));
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfigFile::parse(SCALING).unwrap();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.workers = Some(3);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn errors_name_the_field() {
        let bad = SCALING.replace("version = 1", "version = 2");
        assert!(matches!(ExperimentConfigFile::parse(&bad), Err(Error::Config { field, .. }) if field == "version"));
        let bad = SCALING.replace("epochs = 2", "epochz = 2");
        match ExperimentConfigFile::parse(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "epochz"),
            other => panic!("{other:?}"),
        }
        let bad = SCALING.replace("sizes = [4, 8]", "sizes = []");
        assert!(matches!(ExperimentConfigFile::parse(&bad).unwrap().validate(), Err(Error::Config { field, .. }) if field == "split.sizes"));
        let bad = SCALING.replace("epochs = 2", "epochs = 2\nlr = -1.0");
        assert!(matches!(ExperimentConfigFile::parse(&bad).unwrap().validate(), Err(Error::Config { field, .. }) if field == "train.lr"));
    }

    #[test]
    fn mllm_config_with_stub() {
        let text = r#"
version = 1
seed = 3
per_model_queries = 10
shots = [0]

[corpus]
path = "corpus"

[client]
kind = "uniform_stub"
"#;
        let cfg = MllmConfigFile::parse(text).unwrap();
        assert_eq!(cfg.client, ClientChoice::UniformStub);
        assert_eq!(cfg.run_config(&[]).candidates, Vec::<String>::new());
        let rows: Vec<ManifestRow> = crate::mllmattr::DEFAULT_CANDIDATES
            .iter()
            .map(|m| ManifestRow::new(format!("{m}/0"), format!("{m}/0.png"), *m, None, None, 0))
            .collect();
        assert_eq!(cfg.run_config(&rows).candidates, crate::mllmattr::default_candidates());
        let http = text.replace("kind = \"uniform_stub\"", "kind = \"http\"\nbase_url = \"http://localhost:8080/chat\"\nmodel = \"m\"\ntoken_env = \"TOKEN\"");
        match MllmConfigFile::parse(&http).unwrap().client {
            ClientChoice::Http(e) => assert_eq!(e.token_env.as_deref(), Some("TOKEN")),
            other => panic!("{other:?}"),
        }
    }
}
