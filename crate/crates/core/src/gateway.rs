//! Urban fetch gateway: turns topic requests into content responses.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{sha256, NodeId};
use crate::content::AppMessage;
use crate::Millis;

pub const DEFAULT_MAX_RETRIES: u8 = 3;
pub const DEFAULT_BACKOFF_BASE_MS: Millis = 60_000;
const JOBS_FILE: &str = "jobs.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LookupError {
    #[error("not found")]
    NotFound,
    #[error("transient: {0}")]
    Transient(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Article {
    pub title: String,
    pub body: String,
}

/// Where article text comes from.
pub trait ArticleSource: Send {
    fn lookup(&mut self, topic: &str) -> Result<Article, LookupError>;
}

/// Corpus file name stem for a topic: ASCII letters and digits are kept and
/// lowercased, every other character becomes `-`. Runs are not collapsed.
pub fn slug(topic: &str) -> String {
    topic
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("article is empty after normalization")]
pub struct EmptyAfterNormalization;

/// Trims the title and reduces the body to plain text: tags and comments are
/// dropped, common entities decoded, runs of blank lines collapsed.
pub fn normalize_article(raw_title: &str, raw_body: &str) -> Result<Article, EmptyAfterNormalization> {
    let title = raw_title.trim().to_string();
    let body = strip_markup(raw_body);
    if title.is_empty() || body.is_empty() {
        return Err(EmptyAfterNormalization);
    }
    Ok(Article { title, body })
}

fn strip_markup(raw: &str) -> String {
    let mut text = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find('<') {
        text.push_str(&rest[..start]);
        let after = &rest[start..];
        let end = if after.starts_with("<!--") {
            after.find("-->").map(|i| i + 3)
        } else {
            after.find('>').map(|i| i + 1)
        };
        match end {
            Some(e) => {
                let tag = &after[..e];
                let name = tag.trim_start_matches('<').split([' ', '>', '/', '\t', '\n']).next().unwrap_or("");
                // opening block tags start a new line
                if matches!(name.to_ascii_lowercase().as_str(), "p" | "br" | "div" | "li" | "h1" | "h2" | "h3" | "h4" | "tr") {
                    text.push('\n');
                }
                rest = &after[e..];
            }
            None => {
                // an unterminated '<' is text
                text.push('<');
                rest = &after[1..];
            }
        }
    }
    text.push_str(rest);
    let text = decode_entities(&text);

    let mut out = String::with_capacity(text.len());
    let mut blank_run = 0;
    for line in text.lines() {
        let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
        if line.is_empty() {
            blank_run += 1;
            continue;
        }
        if !out.is_empty() {
            out.push_str(if blank_run > 0 { "\n\n" } else { "\n" });
        }
        blank_run = 0;
        out.push_str(&line);
    }
    out
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&nbsp;", " ")
        .replace("&amp;", "&")
}

/// Articles read from `<dir>/<slug>.txt`.
#[derive(Clone, Debug)]
pub struct CorpusSource {
    dir: PathBuf,
}

impl CorpusSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CorpusSource { dir: dir.into() }
    }
}

impl ArticleSource for CorpusSource {
    fn lookup(&mut self, topic: &str) -> Result<Article, LookupError> {
        let s = slug(topic);
        if s.is_empty() {
            return Err(LookupError::NotFound);
        }
        let path = self.dir.join(format!("{s}.txt"));
        match fs::read(&path) {
            Ok(bytes) => {
                let raw = String::from_utf8_lossy(&bytes);
                normalize_article(topic, &raw).map_err(|_| LookupError::NotFound)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(LookupError::NotFound),
            Err(e) => Err(LookupError::Transient(e.to_string())),
        }
    }
}

const WORDS: &[&str] = &[
    "river", "energy", "light", "cell", "number", "village", "history", "water", "plant", "market",
    "signal", "school", "season", "method", "system", "value", "growth", "layer", "field", "motion",
    "carbon", "culture", "theory", "pattern", "measure", "border", "climate", "language", "force",
    "harvest", "mineral", "orbit", "species", "trade", "network", "weather", "density", "fraction",
];

/// Deterministic plain-text article of exactly `len` bytes.
pub fn synthetic_text(seed: u64, title: &str, len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(sha256(title.as_bytes())[..8].try_into().unwrap()));
    let mut out = String::with_capacity(len + 16);
    out.push_str(title);
    out.push_str("\n\n");
    let mut words_in_line = 0;
    while out.len() < len {
        let w = WORDS[rng.random_range(0..WORDS.len())];
        out.push_str(w);
        words_in_line += 1;
        if words_in_line == 12 {
            out.push('\n');
            words_in_line = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(len);
    out
}

/// Every topic exists, with a size drawn uniformly from `[min_len, max_len]`
/// by a generator keyed on `(seed, slug)`.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSource {
    pub fn article_len(&self, topic: &str) -> usize {
        let key = sha256(slug(topic).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(key[..8].try_into().unwrap()));
        rng.random_range(self.min_len..=self.max_len)
    }
}

impl ArticleSource for SyntheticSource {
    fn lookup(&mut self, topic: &str) -> Result<Article, LookupError> {
        let title = topic.trim();
        if slug(title).is_empty() {
            return Err(LookupError::NotFound);
        }
        let body = synthetic_text(self.seed, title, self.article_len(title).max(title.len() + 3));
        normalize_article(title, &body).map_err(|_| LookupError::NotFound)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Fetching,
    Done,
    Error { reason: String, retries: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchJob {
    pub request_id: String,
    pub topic: String,
    pub requester: NodeId,
    pub state: JobState,
    pub attempts: u8,
    pub enqueued_at: Millis,
    /// Earliest time the next attempt may run.
    pub next_attempt_at: Millis,
}

impl FetchJob {
    pub fn new(request_id: String, topic: String, requester: NodeId, now: Millis) -> Self {
        FetchJob {
            request_id,
            topic,
            requester,
            state: JobState::Queued,
            attempts: 0,
            enqueued_at: now,
            next_attempt_at: now,
        }
    }

    pub fn is_finished(&self) -> bool {
        match &self.state {
            JobState::Done => true,
            JobState::Error { .. } => self.next_attempt_at == Millis::MAX,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatewayConfig {
    pub max_retries: u8,
    pub backoff_base_ms: Millis,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { max_retries: DEFAULT_MAX_RETRIES, backoff_base_ms: DEFAULT_BACKOFF_BASE_MS }
    }
}

fn error_response(job: &FetchJob, reason: &str) -> AppMessage {
    AppMessage::ContentResponse {
        request_id: job.request_id.clone(),
        topic: job.topic.clone(),
        title: None,
        body: None,
        error: Some(reason.to_string()),
    }
}

/// Runs one attempt. Returns the updated job and, when the job finished, the
/// response to send to the requester (content or error).
pub fn process_job(
    job: &FetchJob,
    source: &mut dyn ArticleSource,
    now: Millis,
    cfg: &GatewayConfig,
) -> (FetchJob, Option<AppMessage>) {
    let mut job = job.clone();
    job.state = JobState::Fetching;
    match source.lookup(&job.topic) {
        Ok(article) => {
            job.state = JobState::Done;
            let msg = AppMessage::ContentResponse {
                request_id: job.request_id.clone(),
                topic: job.topic.clone(),
                title: Some(article.title),
                body: Some(article.body),
                error: None,
            };
            (job, Some(msg))
        }
        Err(LookupError::NotFound) => {
            job.state = JobState::Error { reason: "not_found".into(), retries: job.attempts };
            job.next_attempt_at = Millis::MAX;
            let msg = error_response(&job, "not_found");
            (job, Some(msg))
        }
        Err(LookupError::Transient(e)) => {
            if job.attempts >= cfg.max_retries {
                tracing::warn!(request = %job.request_id, error = %e, "giving up after retries");
                job.state = JobState::Error { reason: "unreachable".into(), retries: job.attempts };
                job.next_attempt_at = Millis::MAX;
                let msg = error_response(&job, "unreachable");
                return (job, Some(msg));
            }
            let delay = cfg.backoff_base_ms.saturating_mul(1 << job.attempts);
            job.attempts += 1;
            job.state = JobState::Error { reason: e, retries: job.attempts };
            job.next_attempt_at = now.saturating_add(delay);
            (job, None)
        }
    }
}

/// Response produced by a finished job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub job: FetchJob,
    pub message: AppMessage,
    /// Time the attempt was scheduled for; stable across re-runs after a crash.
    pub created_at: Millis,
}

/// Sequential job runner with a persistent queue.
#[derive(Debug)]
pub struct Gateway {
    path: PathBuf,
    sync: bool,
    log: File,
    config: GatewayConfig,
    jobs: VecDeque<FetchJob>,
}

impl Gateway {
    pub fn open(dir: impl AsRef<Path>, config: GatewayConfig, sync: bool) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(JOBS_FILE);
        let mut jobs: VecDeque<FetchJob> = VecDeque::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let Ok(job) = serde_json::from_str::<FetchJob>(&line?) else { break };
                match jobs.iter_mut().find(|j| j.request_id == job.request_id) {
                    Some(j) => *j = job,
                    None => jobs.push_back(job),
                }
            }
        }
        jobs.retain(|j| !j.is_finished());
        // compact to the open jobs
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for j in &jobs {
                writeln!(f, "{}", serde_json::to_string(j).expect("job serializes"))?;
            }
            if sync {
                f.sync_all()?;
            }
        }
        fs::rename(&tmp, &path)?;
        let log = OpenOptions::new().append(true).open(&path)?;
        Ok(Gateway { path, sync, log, config, jobs })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn persist(&mut self, job: &FetchJob) -> io::Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(job).expect("job serializes"))?;
        if self.sync {
            self.log.sync_data()?;
        }
        Ok(())
    }

    /// Adds a job unless one for the same request exists. Returns true if added.
    pub fn enqueue(&mut self, job: FetchJob) -> io::Result<bool> {
        if self.jobs.iter().any(|j| j.request_id == job.request_id) {
            return Ok(false);
        }
        self.persist(&job)?;
        self.jobs.push_back(job);
        Ok(true)
    }

    pub fn has_job(&self, request_id: &str) -> bool {
        self.jobs.iter().any(|j| j.request_id == request_id)
    }

    /// Open jobs in arrival order.
    pub fn jobs(&self) -> impl Iterator<Item = &FetchJob> {
        self.jobs.iter()
    }

    pub fn next_due(&self) -> Option<Millis> {
        self.jobs.iter().map(|j| j.next_attempt_at).min()
    }

    /// Runs every job whose attempt is due, in arrival order. The caller must
    /// turn each outbound message into a bundle, then call [`Gateway::finish`].
    pub fn run_due(&mut self, now: Millis, source: &mut dyn ArticleSource) -> io::Result<Vec<Outbound>> {
        let mut out = Vec::new();
        for i in 0..self.jobs.len() {
            let job = self.jobs[i].clone();
            if job.next_attempt_at > now {
                continue;
            }
            let scheduled = job.next_attempt_at;
            let (next, msg) = process_job(&job, source, now, &self.config);
            match msg {
                Some(message) => out.push(Outbound { job: next, message, created_at: scheduled }),
                None => {
                    self.persist(&next)?;
                    self.jobs[i] = next;
                }
            }
        }
        Ok(out)
    }

    /// Records a finished job once its response is safely stored.
    pub fn finish(&mut self, job: &FetchJob) -> io::Result<()> {
        self.persist(job)?;
        self.jobs.retain(|j| j.request_id != job.request_id);
        Ok(())
    }
}
