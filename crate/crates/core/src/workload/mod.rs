//! Synthetic request streams for multi-turn chat and document comprehension.
//!
//! Generators are pure functions of `(config, trace, seed)`: arrivals come
//! from a piecewise-constant Poisson process driven by a [`RateTrace`], and
//! every length or popularity draw uses its own seeded ChaCha stream so that
//! changing one knob does not reshuffle unrelated draws.

mod trace;

pub use trace::{
    ci_pattern, load_ci_trace, load_rate_trace, save_ci_trace, save_rate_trace, CiPattern,
    RatePattern, TraceError,
};

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload parameter: {0}")]
    Invalid(String),
    #[error("rate trace must not be empty")]
    EmptyTrace,
    #[error("zipf sampler needs at least one item")]
    NoItems,
    #[error("request stream I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("request stream line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, WorkloadError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    MultiTurn,
    DocComp,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::MultiTurn => "multiturn",
            TaskKind::DocComp => "doccomp",
        })
    }
}

/// Which end of an over-long context survives truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Keep the most recent tokens.
    #[default]
    Suffix,
    /// Keep the oldest tokens.
    Prefix,
}

/// One prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Epoch seconds.
    pub arrival: f64,
    pub kind: TaskKind,
    /// Conversation id (multi-turn) or document id (doc comprehension).
    pub lineage_id: u64,
    /// Conversation turn, or the question's ordinal for its document. Starts at 1.
    pub turn_index: u32,
    pub context_tokens: u32,
    pub new_tokens: u32,
    pub output_tokens: u32,
    /// Set when the context was cut to fit the window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<Truncation>,
}

impl Request {
    pub fn input_tokens(&self) -> u64 {
        self.context_tokens as u64 + self.new_tokens as u64
    }

    /// Tokens whose KV state is worth keeping after this request is served.
    ///
    /// A conversation keeps everything processed or generated so far; a
    /// document question only shares the document itself.
    pub fn cacheable_tokens(&self, window: u32) -> u32 {
        match self.kind {
            TaskKind::MultiTurn => {
                let all = self.context_tokens as u64 + self.new_tokens as u64 + self.output_tokens as u64;
                all.min(window as u64) as u32
            }
            TaskKind::DocComp => self.context_tokens,
        }
    }
}

/// Requests in arrival order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestStream(pub Vec<Request>);

impl RequestStream {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Request> {
        self.0.iter()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.0 {
            serde_json::to_writer(&mut w, r).map_err(|e| WorkloadError::Json { line: r.id as usize + 1, source: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| WorkloadError::Json { line: i + 1, source: e })?);
        }
        Ok(Self(out))
    }
}

impl<'a> IntoIterator for &'a RequestStream {
    type Item = &'a Request;
    type IntoIter = std::slice::Iter<'a, Request>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Piecewise-constant request rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrace {
    pub start_time: f64,
    /// Seconds per entry of `rates`.
    pub step: f64,
    /// Requests per second.
    pub rates: Vec<f64>,
}

impl RateTrace {
    pub fn new(start_time: f64, step: f64, rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(WorkloadError::EmptyTrace);
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(WorkloadError::Invalid(format!("trace step must be positive, got {step}")));
        }
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(WorkloadError::Invalid(format!("rates must be non-negative, got {r}")));
        }
        Ok(Self { start_time, step, rates })
    }

    pub fn hourly(start_time: f64, rates: Vec<f64>) -> Result<Self> {
        Self::new(start_time, 3_600.0, rates)
    }

    pub fn constant(start_time: f64, duration: f64, rate: f64) -> Result<Self> {
        Self::new(start_time, duration, vec![rate])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.step * self.rates.len() as f64
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    /// Multiply every rate by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.start_time, self.step, self.rates.iter().map(|r| r * factor).collect())
    }

    pub fn rate_at(&self, time: f64) -> f64 {
        let idx = ((time - self.start_time) / self.step).floor();
        let idx = if idx < 0.0 { 0 } else { idx as usize };
        self.rates[idx.min(self.rates.len() - 1)]
    }

    /// Sub-trace covering `[from, to)` entries.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        Self::new(
            self.start_time + from as f64 * self.step,
            self.step,
            self.rates[from..to.min(self.rates.len())].to_vec(),
        )
    }
}

/// Log-normal length distribution in terms of the underlying normal's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub mu: f64,
    pub sigma: f64,
}

impl LengthDist {
    pub fn with_median(median: f64, sigma: f64) -> Self {
        Self { mu: median.ln(), sigma }
    }

    pub fn with_mean(mean: f64, sigma: f64) -> Self {
        Self { mu: mean.ln() - sigma * sigma / 2.0, sigma }
    }

    pub fn mean(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }

    fn sampler(&self) -> Result<LogNormal<f64>> {
        LogNormal::new(self.mu, self.sigma).map_err(|e| WorkloadError::Invalid(format!("length distribution: {e}")))
    }
}

fn draw_len(dist: &LogNormal<f64>, rng: &mut ChaCha8Rng) -> u32 {
    dist.sample(rng).round().clamp(1.0, u32::MAX as f64) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub context_window: u32,
    pub truncation: Truncation,
    /// KV-cache bytes per token (300 kB for a 70B model).
    pub bytes_per_token: u64,
    /// Mean conversation length in turns (geometric).
    pub turn_mean: f64,
    pub turn_cap: u32,
    /// Conversations kept open for new turns at any time.
    pub active_conversations: usize,
    pub user_tokens: LengthDist,
    pub reply_tokens: LengthDist,
    pub zipf_alpha: f64,
    pub documents: usize,
    pub doc_tokens: LengthDist,
    pub question_tokens: LengthDist,
    pub answer_tokens: LengthDist,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self::multiturn()
    }
}

impl WorkloadConfig {
    pub fn multiturn() -> Self {
        Self {
            seed: 0,
            task: TaskKind::MultiTurn,
            context_window: 8_192,
            truncation: Truncation::Suffix,
            bytes_per_token: 300_000,
            turn_mean: 6.0,
            turn_cap: 30,
            active_conversations: 4_000,
            user_tokens: LengthDist::with_median(120.0, 1.0),
            reply_tokens: LengthDist::with_median(300.0, 0.7),
            zipf_alpha: 0.7,
            documents: 50_000,
            doc_tokens: LengthDist::with_mean(5_880.0, 0.25),
            question_tokens: LengthDist::with_median(25.0, 0.5),
            answer_tokens: LengthDist::with_median(20.0, 0.6),
        }
    }

    pub fn doccomp(alpha: f64) -> Self {
        Self {
            task: TaskKind::DocComp,
            zipf_alpha: alpha,
            ..Self::multiturn()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        if self.bytes_per_token == 0 {
            return bad("bytes_per_token must be positive".into());
        }
        if self.context_window < 2 {
            return bad("context_window must be at least 2 tokens".into());
        }
        if self.turn_mean.is_nan() || self.turn_mean < 1.0 || self.turn_cap == 0 {
            return bad("turn_mean must be >= 1 and turn_cap >= 1".into());
        }
        if self.active_conversations == 0 {
            return bad("active_conversations must be positive".into());
        }
        if !(self.zipf_alpha.is_finite() && self.zipf_alpha >= 0.0) {
            return bad(format!("zipf_alpha must be >= 0, got {}", self.zipf_alpha));
        }
        if self.documents == 0 {
            return bad("documents must be positive".into());
        }
        for (name, d) in [
            ("user_tokens", self.user_tokens),
            ("reply_tokens", self.reply_tokens),
            ("doc_tokens", self.doc_tokens),
            ("question_tokens", self.question_tokens),
            ("answer_tokens", self.answer_tokens),
        ] {
            if !(d.mu.is_finite() && d.sigma.is_finite() && d.sigma >= 0.0) {
                return bad(format!("{name} has invalid parameters"));
            }
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const ARRIVAL_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;
const LENGTH_STREAM: u64 = 3;
const DOC_STREAM: u64 = 4;

/// Non-homogeneous Poisson arrivals: each trace step is a homogeneous
/// process at that step's rate, sampled with exponential gaps.
pub fn poisson_arrivals(trace: &RateTrace, seed: u64) -> Result<Vec<f64>> {
    if trace.rates.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    let mut rng = stream(seed, ARRIVAL_STREAM);
    let mut out = Vec::new();
    for (i, &rate) in trace.rates.iter().enumerate() {
        if rate <= 0.0 {
            continue;
        }
        let lo = trace.start_time + i as f64 * trace.step;
        let hi = lo + trace.step;
        let gap = Exp::new(rate).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        let mut t = lo + gap.sample(&mut rng);
        while t < hi {
            out.push(t);
            t += gap.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Zipf-distributed item index with P(k) proportional to (k+1)^-alpha.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n_items: usize, alpha: f64) -> Result<Self> {
        if n_items == 0 {
            return Err(WorkloadError::NoItems);
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(WorkloadError::Invalid(format!("zipf alpha must be >= 0, got {alpha}")));
        }
        let mut cdf = Vec::with_capacity(n_items);
        let mut acc = 0.0;
        for k in 0..n_items {
            acc += ((k + 1) as f64).powf(-alpha);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(Self { cdf })
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    /// Probability mass of item `k`.
    pub fn pmf(&self, k: usize) -> f64 {
        if k == 0 {
            self.cdf[0]
        } else {
            self.cdf[k] - self.cdf[k - 1]
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// One Zipf draw from a fresh stream seeded by `seed`.
pub fn zipf_sample(n_items: usize, alpha: f64, seed: u64) -> Result<usize> {
    let z = ZipfSampler::new(n_items, alpha)?;
    Ok(z.sample(&mut stream(seed, SELECT_STREAM)))
}

struct Conversation {
    id: u64,
    turns_left: u32,
    next_turn: u32,
    history_tokens: u64,
}

/// Multi-turn chat: each arrival continues a randomly chosen open
/// conversation, or opens a new one while fewer than
/// `active_conversations` are open.
pub fn gen_multiturn(config: &WorkloadConfig, trace: &RateTrace, seed: u64) -> Result<RequestStream> {
    config.validate()?;
    let arrivals = poisson_arrivals(trace, seed)?;
    let mut select = stream(seed, SELECT_STREAM);
    let mut lengths = stream(seed, LENGTH_STREAM);
    let user = config.user_tokens.sampler()?;
    let reply = config.reply_tokens.sampler()?;
    let turns = Geometric::new(1.0 / config.turn_mean).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
    let window = config.context_window;

    let mut open: Vec<Conversation> = Vec::with_capacity(config.active_conversations);
    let mut next_id = 0u64;
    let mut out = Vec::with_capacity(arrivals.len());

    for (i, arrival) in arrivals.into_iter().enumerate() {
        let slot = if open.len() < config.active_conversations {
            let total = (1 + turns.sample(&mut select)).min(config.turn_cap as u64) as u32;
            open.push(Conversation {
                id: next_id,
                turns_left: total,
                next_turn: 1,
                history_tokens: 0,
            });
            next_id += 1;
            open.len() - 1
        } else {
            select.random_range(0..open.len())
        };

        let new_tokens = draw_len(&user, &mut lengths).min(window - 1);
        let output_tokens = draw_len(&reply, &mut lengths);
        let conv = &mut open[slot];
        let room = (window - new_tokens) as u64;
        let (context, truncated) = if conv.history_tokens > room {
            (room as u32, Some(config.truncation))
        } else {
            (conv.history_tokens as u32, None)
        };
        out.push(Request {
            id: i as u64,
            arrival,
            kind: TaskKind::MultiTurn,
            lineage_id: conv.id,
            turn_index: conv.next_turn,
            context_tokens: context,
            new_tokens,
            output_tokens,
            truncated,
        });
        conv.history_tokens += new_tokens as u64 + output_tokens as u64;
        conv.next_turn += 1;
        conv.turns_left -= 1;
        if conv.turns_left == 0 {
            open.swap_remove(slot);
        }
    }
    Ok(RequestStream(out))
}

/// Per-document token lengths, fixed for a given seed.
pub fn document_lengths(config: &WorkloadConfig, seed: u64) -> Result<Vec<u32>> {
    let mut rng = stream(seed, DOC_STREAM);
    let dist = config.doc_tokens.sampler()?;
    Ok((0..config.documents).map(|_| draw_len(&dist, &mut rng)).collect())
}

/// Document comprehension: each arrival asks a question about a document
/// chosen by Zipf popularity; the whole document is the reusable context.
pub fn gen_doccomp(config: &WorkloadConfig, trace: &RateTrace, seed: u64) -> Result<RequestStream> {
    config.validate()?;
    let arrivals = poisson_arrivals(trace, seed)?;
    let docs = document_lengths(config, seed)?;
    let zipf = ZipfSampler::new(config.documents, config.zipf_alpha)?;
    let mut select = stream(seed, SELECT_STREAM);
    let mut lengths = stream(seed, LENGTH_STREAM);
    let question = config.question_tokens.sampler()?;
    let answer = config.answer_tokens.sampler()?;
    let window = config.context_window;
    let mut asked: HashMap<u64, u32> = HashMap::new();

    let out = arrivals
        .into_iter()
        .enumerate()
        .map(|(i, arrival)| {
            let doc = zipf.sample(&mut select) as u64;
            let new_tokens = draw_len(&question, &mut lengths).min(window - 1);
            let output_tokens = draw_len(&answer, &mut lengths);
            let full = docs[doc as usize];
            let room = window - new_tokens;
            let (context, truncated) = if full > room {
                (room, Some(config.truncation))
            } else {
                (full, None)
            };
            let n = asked.entry(doc).or_insert(0);
            *n += 1;
            Request {
                id: i as u64,
                arrival,
                kind: TaskKind::DocComp,
                lineage_id: doc,
                turn_index: *n,
                context_tokens: context,
                new_tokens,
                output_tokens,
                truncated,
            }
        })
        .collect();
    Ok(RequestStream(out))
}

/// Dispatch on `config.task`, seeded by `config.seed`.
pub fn generate(config: &WorkloadConfig, trace: &RateTrace) -> Result<RequestStream> {
    match config.task {
        TaskKind::MultiTurn => gen_multiturn(config, trace, config.seed),
        TaskKind::DocComp => gen_doccomp(config, trace, config.seed),
    }
}
