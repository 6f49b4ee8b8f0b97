//! In-process backends for tests and offline runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Completion, CompletionRequest, FinishReason, RewardRequest};
use crate::template::{ANSWER_BEGIN, ANSWER_END, QUESTION_BEGIN, QUESTION_END, STEP3_MARKER, TASK_BEGIN, TASK_END};

type Responder = dyn Fn(&CompletionRequest, usize) -> Result<String, BackendError> + Send + Sync;
type Scorer = dyn Fn(&RewardRequest) -> f64 + Send + Sync;

/// Scripted backend. The responder maps (request, completion index) to a
/// text; outputs longer than `max_tokens` whitespace tokens are cut and
/// reported with [`FinishReason::Length`].
pub struct MockBackend {
    responder: Box<Responder>,
    scorer: Box<Scorer>,
    latency: Duration,
    transient_failures: AtomicUsize,
    fatal_after: Option<usize>,
    calls: AtomicUsize,
    completed: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    log: Mutex<Vec<String>>,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MockBackend {
    pub fn new(responder: impl Fn(&CompletionRequest, usize) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        MockBackend {
            responder: Box::new(responder),
            scorer: Box::new(|r| r.response_text.chars().count() as f64),
            latency: Duration::ZERO,
            transient_failures: AtomicUsize::new(0),
            fatal_after: None,
            calls: AtomicUsize::new(0),
            completed: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Returns the scripted texts in order, cycling if `n` exceeds them.
    pub fn scripted(texts: Vec<String>) -> Self {
        MockBackend::new(move |_, i| Ok(texts[i % texts.len()].clone()))
    }

    pub fn with_scorer(mut self, scorer: impl Fn(&RewardRequest) -> f64 + Send + Sync + 'static) -> Self {
        self.scorer = Box::new(scorer);
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// The next `n` calls fail with a retryable transport error.
    pub fn with_transient_failures(self, n: usize) -> Self {
        self.transient_failures.store(n, Ordering::SeqCst);
        self
    }

    /// Every call after the first `n` successful completion calls fails
    /// fatally, simulating a process kill.
    pub fn with_fatal_after(mut self, n: usize) -> Self {
        self.fatal_after = Some(n);
        self
    }

    /// Total backend invocations, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight_seen(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Prompts of successful completion calls, in arrival order.
    pub fn prompt_log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    fn enter(&self) -> Result<InFlight<'_>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight(&self.in_flight);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let transient = self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if transient {
            return Err(BackendError::Transport("injected transient failure".into()));
        }
        Ok(guard)
    }
}

fn cut_to_tokens(text: &str, max_tokens: u32) -> Completion {
    let mut seen = 0u32;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            if seen == max_tokens {
                return Completion { text: text[..i].trim_end().to_string(), finish_reason: FinishReason::Length };
            }
            seen += 1;
        }
    }
    Completion::stop(text)
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        let _guard = self.enter()?;
        if let Some(limit) = self.fatal_after {
            if self.completed.load(Ordering::SeqCst) >= limit {
                return Err(BackendError::Fatal("injected fault: backend killed".into()));
            }
        }
        let out = (0..request.sampling.n as usize)
            .map(|i| (self.responder)(request, i).map(|t| cut_to_tokens(&t, request.sampling.max_tokens)))
            .collect::<Result<Vec<_>, _>>()?;
        self.completed.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.prompt.clone());
        Ok(out)
    }

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        let _guard = self.enter()?;
        Ok((self.scorer)(request))
    }
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Knobs of [`synthetic_world`]. Rates are probabilities in `[0, 1]`,
/// realized by hashing request content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Generation outputs missing their sentinel blocks.
    pub malformed_rate: f64,
    /// Generated targets that are off by one.
    pub wrong_target_rate: f64,
    /// Questions whose rollouts mostly disagree.
    pub hard_rate: f64,
    /// Rollouts that ramble past any reasonable token limit.
    pub long_rollout_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { malformed_rate: 0.05, wrong_target_rate: 0.2, hard_rate: 0.25, long_rollout_rate: 0.02 }
    }
}

const TASKS: [&str; 6] = [
    "Write a limerick about",
    "Draft a polite email declining",
    "Explain to a child",
    "Summarize in three bullet points",
    "Design a weekly plan for",
    "Compare two approaches to",
];

const SUBJECTS: [&str; 6] =
    ["tide pools", "a late invoice", "why the sky is blue", "compound interest", "learning the violin", "caching"];

/// A deterministic stand-in for a generator, solver, and reward model.
///
/// Generation prompts are answered in the output grammar they ask for with
/// questions of the form `What is A + B?`. Rollouts solve those questions,
/// correctly or not depending on a per-question difficulty draw. Rewards
/// are a hash of the response mixed with its length. Every output depends
/// only on the request and the completion index.
pub fn synthetic_world(config: WorldConfig) -> MockBackend {
    MockBackend::new(move |req, i| Ok(world_respond(&config, req, i))).with_scorer(world_score)
}

fn world_respond(config: &WorldConfig, req: &CompletionRequest, i: usize) -> String {
    let seed = req.sampling.rng_seed.to_le_bytes();
    let idx = (i as u64).to_le_bytes();
    let p = req.prompt.as_bytes();
    let roll = |salt: &[u8]| unit(hash64(&[salt, p, &seed, &idx]));
    let h = hash64(&[b"content", p, &seed, &idx]);
    if req.prompt.contains(QUESTION_BEGIN) {
        let (a, b) = (h % 900 + 10, (h >> 20) % 900 + 10);
        let question = format!("What is {a} + {b}?");
        if roll(b"malformed") < config.malformed_rate {
            return format!("I think a good question is: {question}");
        }
        let mut out = format!("Both seeds involve arithmetic, so I will ask for a sum.\n{QUESTION_BEGIN}{question}{QUESTION_END}");
        if req.prompt.contains(ANSWER_BEGIN) {
            let target = if roll(b"target") < config.wrong_target_rate { a + b + 1 } else { a + b };
            out.push_str(&format!("\n{ANSWER_BEGIN}\\boxed{{{target}}}{ANSWER_END}"));
        }
        return out;
    }
    if req.prompt.contains(STEP3_MARKER) || req.prompt.contains(TASK_BEGIN) {
        let task = format!("{} {}.", TASKS[(h % 6) as usize], SUBJECTS[((h >> 8) % 6) as usize]);
        if roll(b"malformed") < config.malformed_rate {
            return task;
        }
        if req.prompt.contains(STEP3_MARKER) {
            return format!("- Step 1 #Common Elements List#: tone, audience\n- Step 2 #Plan#: combine them\n{STEP3_MARKER} {task} (variant {})", h % 97);
        }
        return format!("Combining the two seeds.\n{TASK_BEGIN}{task} (variant {}){TASK_END}", h % 97);
    }
    if let Some((a, b)) = parse_sum_question(&req.prompt) {
        let q = req.prompt.as_bytes();
        let hard = unit(hash64(&[b"hard", q])) < config.hard_rate;
        if unit(hash64(&[b"long", q, &idx])) < config.long_rollout_rate {
            return format!("Let me add these carefully. {} \\boxed{{{}}}", "and then carry ".repeat(2048), a + b);
        }
        let correct = if hard { roll(b"solve") < 0.3 } else { roll(b"solve") < 0.9 };
        let answer = if correct { a + b } else { a + b + 1 + (h % 3) };
        return format!("Adding {a} and {b} step by step gives {answer}.\nThe answer is \\boxed{{{answer}}}");
    }
    if let Some(label) = category_guess(&req.prompt) {
        return label.to_string();
    }
    format!("Here is a response (draft {}). {}", h % 1000, "More detail. ".repeat((h % 7) as usize))
}

/// Parses `What is A + B?` anywhere in `text`.
pub fn parse_sum_question(text: &str) -> Option<(u64, u64)> {
    let start = text.find("What is ")? + "What is ".len();
    let rest = &text[start..];
    let (a, rest) = rest.split_once(" + ")?;
    let (b, _) = rest.split_once('?')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn category_guess(prompt: &str) -> Option<&'static str> {
    if !prompt.contains("Categories:") {
        return None;
    }
    let body = prompt.rsplit("Instruction:").next().unwrap_or("").to_lowercase();
    Some(if body.contains("story") || body.contains("poem") || body.contains("limerick") {
        "Writing & Storytelling"
    } else if body.contains("code") || body.contains("program") || body.contains("caching") {
        "Technical & Programming"
    } else if body.contains("email") {
        "Communication & Support"
    } else if body.contains("explain") || body.contains("summarize") {
        "Education & Research"
    } else {
        "unsure"
    })
}

fn world_score(req: &RewardRequest) -> f64 {
    let h = hash64(&[b"reward", req.prompt_text.as_bytes(), req.response_text.as_bytes()]);
    let len = req.response_text.chars().count() as f64;
    unit(h) * 10.0 + (len + 1.0).ln()
}
