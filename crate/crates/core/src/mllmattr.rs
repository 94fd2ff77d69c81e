//! Attribution queries against multimodal chat models.
//!
//! Prompts are pure functions of their inputs. A query is a [`ChatRequest`]
//! of ordered text and image parts; any [`VisionChatClient`] can answer it,
//! either the HTTP client or one of the deterministic stubs used for tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::ManifestRow;
use crate::error::{Error, Result};
use crate::experiments::ConfusionMatrix;
use crate::key;
use crate::seed;

pub const DEFAULT_CANDIDATES: [&str; 5] = ["BAGEL", "Emu3.5", "Janus-Pro-7B", "MMaDA", "Show-o2"];

pub fn default_candidates() -> Vec<String> {
    DEFAULT_CANDIDATES.iter().map(|s| s.to_string()).collect()
}

/// The zero-shot attribution question, appended after the target image.
pub fn build_zero_shot_prompt(candidates: &[String]) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::config("candidates", "needs at least one model name"));
    }
    let mut s = String::from("This image was generated by one of the following AI image generation models:\n");
    let bullets: Vec<String> = candidates.iter().map(|c| format!("- {c}")).collect();
    s.push_str(&bullets.join("\n"));
    s.push_str("\n\nBased on visual characteristics alone, which model do you think generated this image?\n\n");
    s.push_str(
        "Think step by step about the visual characteristics that distinguish these models \
         (e.g. style, artifacts, color palette, sharpness, composition). \
         Then on the very last line of your response, write only the exact model name from the list above, nothing else.",
    );
    Ok(s)
}

pub fn few_shot_header(k: usize) -> String {
    format!("Below are {k} reference example(s) per model so you can see each model's visual style")
}

pub fn build_domain_question(question_domain: &str) -> Result<String> {
    if question_domain.is_empty() {
        return Err(Error::config("question_domain", "must be non-empty"));
    }
    Ok(format!(
        "In the image, do you see {question_domain}? Answer the question with just yes or no."
    ))
}

/// Case-insensitive prefix match on the trimmed answer.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let t = text.trim().to_lowercase();
    if t.starts_with("yes") {
        Some(true)
    } else if t.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAnswer {
    Candidate(String),
    ParseFailure,
}

/// Matches the last non-empty line against the candidates, ignoring case.
pub fn parse_attribution_response(text: &str, candidates: &[String]) -> ParsedAnswer {
    let Some(last) = text.lines().map(str::trim).rfind(|l| !l.is_empty()) else {
        return ParsedAnswer::ParseFailure;
    };
    candidates
        .iter()
        .find(|c| c.to_lowercase() == last.to_lowercase())
        .map_or(ParsedAnswer::ParseFailure, |c| ParsedAnswer::Candidate(c.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    /// `id` stays local; only the bytes go on the wire.
    Image { id: String, bytes: Vec<u8> },
}

impl Part {
    fn wire(&self) -> Value {
        match self {
            Part::Text(text) => json!({ "type": "text", "text": text }),
            Part::Image { bytes, .. } => json!({
                "type": "image",
                "b64": base64::engine::general_purpose::STANDARD.encode(bytes),
            }),
        }
    }

    fn audit(&self) -> Value {
        match self {
            Part::Text(text) => json!({ "type": "text", "text": text }),
            Part::Image { id, bytes } => json!({ "type": "image", "id": id, "bytes": bytes.len() }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatRequest {
    pub parts: Vec<Part>,
}

impl ChatRequest {
    pub fn image_ids(&self) -> Vec<&str> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Image { id, .. } => Some(id.as_str()),
                Part::Text(_) => None,
            })
            .collect()
    }

    /// The last image is always the one being asked about.
    pub fn target_id(&self) -> Option<&str> {
        self.image_ids().last().copied()
    }

    pub fn wire_parts(&self) -> Vec<Value> {
        self.parts.iter().map(Part::wire).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub status: String,
}

impl ChatResponse {
    pub fn ok(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            status: "ok".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub trait VisionChatClient: Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionQuery {
    pub target_id: String,
    pub candidates: Vec<String>,
    pub shots: usize,
    pub seed: u64,
}

type ImageKey<'a> = (Option<&'a str>, Option<&'a str>, u64);

fn image_key(r: &ManifestRow) -> ImageKey<'_> {
    (r.domain.as_deref(), r.language.as_deref(), r.prompt_id)
}

/// Builds `[header, k x (image, caption) sets, target, question]`, or just
/// `[target, question]` for k = 0.
///
/// Each set shows every candidate's image for one randomly drawn image id
/// (domain, language, prompt) other than the target's, in an order shuffled
/// per set.
pub fn assemble_few_shot(
    query: &AttributionQuery,
    rows: &[ManifestRow],
    load: impl Fn(&ManifestRow) -> Result<Vec<u8>>,
) -> Result<ChatRequest> {
    let target = rows
        .iter()
        .find(|r| r.id == query.target_id)
        .ok_or_else(|| Error::config("target_id", format!("`{}` not in manifest", query.target_id)))?;
    let question = build_zero_shot_prompt(&query.candidates)?;
    let mut parts = Vec::new();
    if query.shots > 0 {
        let target_key = image_key(target);
        let mut by_key: BTreeMap<ImageKey<'_>, HashMap<&str, &ManifestRow>> = BTreeMap::new();
        for r in rows {
            if r.id != target.id && image_key(r) != target_key {
                by_key.entry(image_key(r)).or_default().entry(r.model.as_str()).or_insert(r);
            }
        }
        let eligible: Vec<&HashMap<&str, &ManifestRow>> = by_key
            .values()
            .filter(|m| query.candidates.iter().all(|c| m.contains_key(c.as_str())))
            .collect();
        if eligible.len() < query.shots {
            return Err(Error::InsufficientRows {
                what: format!("exemplar image ids covering all candidates for `{}`", query.target_id),
                needed: query.shots,
                available: eligible.len(),
            });
        }
        let mut rng = seed::keyed_rng(query.seed, key!["exemplar-ids"]);
        let chosen: Vec<_> = eligible.choose_multiple(&mut rng, query.shots).collect();
        parts.push(Part::Text(few_shot_header(query.shots)));
        for (s, set) in chosen.iter().enumerate() {
            let mut order: Vec<&String> = query.candidates.iter().collect();
            order.shuffle(&mut seed::keyed_rng(query.seed, key!["set-order", s]));
            for model in order {
                let row = set[model.as_str()];
                parts.push(Part::Image {
                    id: row.id.clone(),
                    bytes: load(row)?,
                });
                parts.push(Part::Text(model.clone()));
            }
        }
    }
    parts.push(Part::Image {
        id: target.id.clone(),
        bytes: load(target)?,
    });
    parts.push(Part::Text(question));
    Ok(ChatRequest { parts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            base_delay_ms: 0,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: usize) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u64>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::config("endpoint.base_url", "must start with http:// or https://"));
        }
        if self.model.is_empty() {
            return Err(Error::config("endpoint.model", "must be non-empty"));
        }
        Ok(())
    }
}

/// POSTs `{model, parts, temperature?, max_tokens?}` and expects
/// `{text, status}` back.
pub struct HttpClient {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::config("endpoint.token_env", format!("environment variable `{var}` is not set")))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, token, agent })
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({ "model": self.config.model, "parts": request.wire_parts() });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.config.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

impl VisionChatClient for HttpClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut req = self.agent.post(&self.config.base_url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(self.body(request)).map_err(|e| Error::Endpoint(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Endpoint(format!("HTTP {status}")));
        }
        resp.body_mut()
            .read_json::<ChatResponse>()
            .map_err(|e| Error::Endpoint(format!("bad response body: {e}")))
    }
}

/// Answers every query with the true model of the target image.
pub struct TruthStub {
    truth: HashMap<String, String>,
}

impl TruthStub {
    pub fn new(rows: &[ManifestRow]) -> Self {
        Self {
            truth: rows.iter().map(|r| (r.id.clone(), r.model.clone())).collect(),
        }
    }
}

impl VisionChatClient for TruthStub {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let id = request.target_id().ok_or_else(|| Error::Endpoint("no image in request".into()))?;
        let model = self.truth.get(id).ok_or_else(|| Error::Endpoint(format!("unknown image `{id}`")))?;
        Ok(ChatResponse::ok(format!("The palette and texture point to one model.\n{model}")))
    }
}

/// Answers a candidate drawn uniformly, keyed by the target id and the
/// request shape so the answer is reproducible.
pub struct UniformStub {
    pub candidates: Vec<String>,
    pub seed: u64,
}

impl VisionChatClient for UniformStub {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let id = request.target_id().unwrap_or("");
        let mut rng = seed::keyed_rng(self.seed, key!["uniform-stub", id, request.parts.len()]);
        let pick = self.candidates.choose(&mut rng).cloned().unwrap_or_default();
        Ok(ChatResponse::ok(format!("Hard to say.\n{pick}")))
    }
}

/// Fails every call, counting attempts.
#[derive(Default)]
pub struct FailureStub {
    pub calls: AtomicUsize,
}

impl VisionChatClient for FailureStub {
    fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Err(Error::Endpoint("stub endpoint unavailable".into()))
    }
}

/// Wraps a closure as a client.
pub struct FnClient<F>(pub F);

impl<F: Fn(&ChatRequest) -> Result<ChatResponse> + Sync> VisionChatClient for FnClient<F> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (self.0)(request)
    }
}

/// Append-only JSON-lines log of every attempt.
pub struct AuditLog {
    out: Mutex<Option<BufWriter<File>>>,
}

impl AuditLog {
    pub fn disabled() -> Self {
        Self { out: Mutex::new(None) }
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    fn record(&self, value: &Value) {
        let mut guard = self.out.lock().expect("audit lock");
        if let Some(w) = guard.as_mut() {
            if let Err(e) = writeln!(w, "{value}") {
                log::warn!("audit log write failed: {e}");
            }
        }
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(w) = self.out.lock().expect("audit lock").as_mut() {
            w.flush().map_err(|e| Error::io(PathBuf::from("audit log"), e))?;
        }
        Ok(())
    }
}

/// Sends with retries and exponential backoff; `None` once attempts run out.
pub fn chat_with_retries(
    client: &dyn VisionChatClient,
    request: &ChatRequest,
    retry: &RetryPolicy,
    audit: &AuditLog,
    record_id: &str,
) -> Option<ChatResponse> {
    let parts: Vec<Value> = request.parts.iter().map(Part::audit).collect();
    for attempt in 0..retry.max_attempts.max(1) {
        let outcome = client.chat(request);
        let (ok, entry) = match &outcome {
            Ok(r) => (r.is_ok(), json!({ "text": r.text, "status": r.status })),
            Err(e) => (false, json!({ "error": e.to_string() })),
        };
        audit.record(&json!({
            "id": format!("{record_id}#{attempt}"),
            "query": record_id,
            "attempt": attempt,
            "request": parts,
            "response": entry,
        }));
        if ok {
            return outcome.ok();
        }
        if attempt + 1 < retry.max_attempts {
            std::thread::sleep(retry.delay(attempt));
        }
    }
    None
}

/// Runs `f` over `0..n` on up to `workers` threads; results keep index order.
fn run_indexed<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("slots lock")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("slots lock").into_iter().map(|v| v.expect("every index ran")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmRunConfig {
    pub candidates: Vec<String>,
    pub per_model_queries: usize,
    pub shots: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Maximum concurrent requests.
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

impl MllmRunConfig {
    pub fn new(per_model_queries: usize, shots: Vec<usize>, seed: u64) -> Self {
        Self {
            candidates: default_candidates(),
            per_model_queries,
            shots,
            seed,
            retry: RetryPolicy::default(),
            in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotResult {
    pub shots: usize,
    pub n_queries: usize,
    pub n_correct: usize,
    pub n_parse_failures: usize,
    pub accuracy: f64,
    /// Parsed answers only; failures are in `failures_per_class`.
    pub confusion: ConfusionMatrix,
    pub failures_per_class: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmResult {
    pub config: MllmRunConfig,
    pub per_shot: Vec<ShotResult>,
}

/// `per_model_queries` target rows per candidate, drawn reproducibly.
pub fn select_targets(rows: &[ManifestRow], candidates: &[String], per_model: usize, seed: u64) -> Result<Vec<ManifestRow>> {
    let mut out = Vec::new();
    for c in candidates {
        let mut pool: Vec<&ManifestRow> = rows.iter().filter(|r| &r.model == c).collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        if pool.len() < per_model {
            return Err(Error::InsufficientRows {
                what: format!("query targets of model `{c}`"),
                needed: per_model,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut seed::keyed_rng(seed, key!["targets", c.as_str()]));
        out.extend(pool.into_iter().take(per_model).cloned());
    }
    Ok(out)
}

pub fn load_image_bytes(root: &Path, row: &ManifestRow) -> Result<Vec<u8>> {
    let path = root.join(&row.path);
    std::fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Scores every target under every shot count; failures count as wrong.
pub fn run_mllm_attribution(
    root: &Path,
    rows: &[ManifestRow],
    client: &dyn VisionChatClient,
    cfg: &MllmRunConfig,
    audit: &AuditLog,
) -> Result<MllmResult> {
    let candidates = &cfg.candidates;
    if candidates.is_empty() {
        return Err(Error::config("candidates", "needs at least one model name"));
    }
    let targets = select_targets(rows, candidates, cfg.per_model_queries, cfg.seed)?;
    let class_of: HashMap<&str, usize> = candidates.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut per_shot = Vec::new();
    for &shots in &cfg.shots {
        let requests: Vec<(AttributionQuery, ChatRequest)> = targets
            .iter()
            .map(|t| {
                let query = AttributionQuery {
                    target_id: t.id.clone(),
                    candidates: candidates.clone(),
                    shots,
                    seed: seed::derive(cfg.seed, key!["query", t.id.as_str(), shots]),
                };
                let req = assemble_few_shot(&query, rows, |r| load_image_bytes(root, r))?;
                Ok((query, req))
            })
            .collect::<Result<_>>()?;
        let answers = run_indexed(requests.len(), cfg.in_flight, |i| {
            let (q, req) = &requests[i];
            let record = format!("{shots}-shot/{}", q.target_id);
            chat_with_retries(client, req, &cfg.retry, audit, &record)
                .map_or(ParsedAnswer::ParseFailure, |r| parse_attribution_response(&r.text, candidates))
        });
        let mut confusion = ConfusionMatrix::new(candidates.clone());
        let mut failures = vec![0u64; candidates.len()];
        for (t, answer) in targets.iter().zip(&answers) {
            let truth = class_of[t.model.as_str()];
            match answer {
                ParsedAnswer::Candidate(c) => confusion.counts[truth][class_of[c.as_str()]] += 1,
                ParsedAnswer::ParseFailure => failures[truth] += 1,
            }
        }
        let n_correct = confusion.trace() as usize;
        let n_parse_failures = failures.iter().sum::<u64>() as usize;
        per_shot.push(ShotResult {
            shots,
            n_queries: targets.len(),
            n_correct,
            n_parse_failures,
            accuracy: n_correct as f64 / targets.len().max(1) as f64,
            confusion,
            failures_per_class: failures,
        });
    }
    audit.flush()?;
    Ok(MllmResult {
        config: cfg.clone(),
        per_shot,
    })
}

/// Percentage of images from each prompt domain (rows) that the evaluator
/// says contain each queried domain (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub orig: Vec<String>,
    pub quest: Vec<String>,
    pub yes: Vec<Vec<u64>>,
    pub asked: Vec<Vec<u64>>,
    pub unparsed: u64,
}

impl Cooccurrence {
    pub fn percent(&self) -> Vec<Vec<f64>> {
        self.yes
            .iter()
            .zip(&self.asked)
            .map(|(y, a)| y.iter().zip(a).map(|(&y, &a)| if a == 0 { 0.0 } else { 100.0 * y as f64 / a as f64 }).collect())
            .collect()
    }
}

/// Asks every sampled image about every domain; unparseable answers count as
/// "no" and are tallied in `unparsed`.
pub fn run_domain_cooccurrence(
    root: &Path,
    rows: &[ManifestRow],
    client: &dyn VisionChatClient,
    per_domain: usize,
    seed: u64,
    retry: &RetryPolicy,
    audit: &AuditLog,
) -> Result<Cooccurrence> {
    let domains: Vec<String> = rows
        .iter()
        .filter_map(|r| r.domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut yes = vec![vec![0u64; domains.len()]; domains.len()];
    let mut asked = vec![vec![0u64; domains.len()]; domains.len()];
    let mut unparsed = 0;
    for (i, orig) in domains.iter().enumerate() {
        let mut pool: Vec<&ManifestRow> = rows.iter().filter(|r| r.domain.as_ref() == Some(orig)).collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.shuffle(&mut seed::keyed_rng(seed, key!["cooccurrence", orig.as_str()]));
        for row in pool.into_iter().take(per_domain) {
            let bytes = load_image_bytes(root, row)?;
            for (j, q) in domains.iter().enumerate() {
                let req = ChatRequest {
                    parts: vec![
                        Part::Image {
                            id: row.id.clone(),
                            bytes: bytes.clone(),
                        },
                        Part::Text(build_domain_question(q)?),
                    ],
                };
                let answer = chat_with_retries(client, &req, retry, audit, &format!("domain/{}/{q}", row.id));
                asked[i][j] += 1;
                match answer.and_then(|a| parse_yes_no(&a.text)) {
                    Some(true) => yes[i][j] += 1,
                    Some(false) => {}
                    None => unparsed += 1,
                }
            }
        }
    }
    audit.flush()?;
    Ok(Cooccurrence {
        orig: domains.clone(),
        quest: domains,
        yes,
        asked,
        unparsed,
    })
}
