//! Transcript persistence for hermetic runs.
//!
//! A [`RecordingBackend`] forwards calls and remembers each response under
//! a hash of its request. [`ReplayBackend`] serves a saved transcript and
//! fails on any request it has not seen.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Completion, CompletionRequest, RewardRequest};
use crate::dataset::{write_atomic, DatasetError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Completion { key: String, completions: Vec<Completion> },
    Score { key: String, score: f64 },
}

impl TranscriptEntry {
    fn key(&self) -> &str {
        match self {
            TranscriptEntry::Completion { key, .. } | TranscriptEntry::Score { key, .. } => key,
        }
    }
}

fn key_of<T: Serialize>(tag: &str, request: &T) -> String {
    let body = serde_json::to_vec(request).expect("requests serialize");
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(&body);
    hex::encode(h.finalize())
}

pub fn completion_key(request: &CompletionRequest) -> String {
    key_of("complete", request)
}

pub fn score_key(request: &RewardRequest) -> String {
    key_of("score", request)
}

/// Request-keyed responses. Serialized one entry per line, sorted by key,
/// so the file is independent of call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: BTreeMap<String, TranscriptEntry>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: TranscriptEntry) {
        self.entries.insert(entry.key().to_string(), entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.values()
    }

    pub fn get(&self, key: &str) -> Option<&TranscriptEntry> {
        self.entries.get(key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            out.extend_from_slice(serde_json::to_string(e).expect("entries serialize").as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
        let mut t = Transcript::default();
        let mut offset = 0u64;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            if !line.trim().is_empty() {
                let entry = serde_json::from_str(line.trim_end()).map_err(|e| DatasetError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    offset,
                    message: e.to_string(),
                })?;
                t.insert(entry);
            }
            offset += line.len() as u64;
        }
        Ok(t)
    }
}

pub struct RecordingBackend<B> {
    inner: B,
    transcript: Mutex<Transcript>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, transcript: Mutex::new(Transcript::default()) }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().unwrap().clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        let completions = self.inner.complete(request)?;
        let entry = TranscriptEntry::Completion { key: completion_key(request), completions: completions.clone() };
        self.transcript.lock().unwrap().insert(entry);
        Ok(completions)
    }

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        let score = self.inner.score(request)?;
        self.transcript.lock().unwrap().insert(TranscriptEntry::Score { key: score_key(request), score });
        Ok(score)
    }
}

pub struct ReplayBackend {
    transcript: Transcript,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        ReplayBackend { transcript }
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Transcript::load(path).map(ReplayBackend::new)
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        let key = completion_key(request);
        match self.transcript.get(&key) {
            Some(TranscriptEntry::Completion { completions, .. }) => Ok(completions.clone()),
            _ => Err(BackendError::Fatal(format!("no recorded completion for request {key}"))),
        }
    }

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        let key = score_key(request);
        match self.transcript.get(&key) {
            Some(TranscriptEntry::Score { score, .. }) => Ok(*score),
            _ => Err(BackendError::Fatal(format!("no recorded score for request {key}"))),
        }
    }
}
