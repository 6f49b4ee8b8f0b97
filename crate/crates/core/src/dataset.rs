//! Record types shared by every stage, their line-delimited encoding, and
//! dataset summaries.
//!
//! Each line is one JSON object with a fixed key order: `schema_version`,
//! `kind`, then the record's own fields in declaration order. Floats use the
//! shortest representation that round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::AnswerForm;
use crate::template::TemplateId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line} (byte offset {offset}): {message}")]
    Malformed { path: PathBuf, line: usize, offset: u64, message: String },
    #[error("{path}: line {line}: {message}")]
    Invalid { path: PathBuf, line: usize, message: String },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }

    /// One-based line number for decode errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Malformed { line, .. } | DatasetError::Invalid { line, .. } => Some(*line),
            DatasetError::Io { .. } => None,
        }
    }
}

/// A record type that can be stored in a line-delimited file.
pub trait Record: Serialize + DeserializeOwned {
    /// Value of the `kind` field; a file holds records of a single kind.
    const KIND: &'static str;

    fn record_id(&self) -> &str;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// The fixed instruction-following taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "Writing & Storytelling")]
    WritingStorytelling,
    #[serde(rename = "Technical & Programming")]
    TechnicalProgramming,
    #[serde(rename = "Creative & Design")]
    CreativeDesign,
    #[serde(rename = "Data & Analysis")]
    DataAnalysis,
    #[serde(rename = "Education & Research")]
    EducationResearch,
    #[serde(rename = "Communication & Support")]
    CommunicationSupport,
    #[serde(rename = "Business & Marketing")]
    BusinessMarketing,
    #[serde(rename = "Miscellaneous")]
    Miscellaneous,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::WritingStorytelling,
        Category::TechnicalProgramming,
        Category::CreativeDesign,
        Category::DataAnalysis,
        Category::EducationResearch,
        Category::CommunicationSupport,
        Category::BusinessMarketing,
        Category::Miscellaneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::WritingStorytelling => "Writing & Storytelling",
            Category::TechnicalProgramming => "Technical & Programming",
            Category::CreativeDesign => "Creative & Design",
            Category::DataAnalysis => "Data & Analysis",
            Category::EducationResearch => "Education & Research",
            Category::CommunicationSupport => "Communication & Support",
            Category::BusinessMarketing => "Business & Marketing",
            Category::Miscellaneous => "Miscellaneous",
        }
    }

    /// Matches a taxonomy name loosely: case, `&`/`and`, and punctuation are
    /// ignored.
    pub fn from_label(label: &str) -> Option<Category> {
        let key = label_key(label);
        Category::ALL.into_iter().find(|c| label_key(c.name()) == key)
    }
}

fn label_key(s: &str) -> String {
    s.to_ascii_lowercase()
        .replace(" and ", " ")
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::from_label(s).ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// One human seed prompt. `gold_answer` is kept as written; see
/// [`SeedInstruction::gold_form`] for the parsed answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedInstruction {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl SeedInstruction {
    pub fn gold_form(&self) -> Option<AnswerForm> {
        self.gold_answer.as_deref().and_then(crate::answer::parse_answer)
    }
}

impl Record for SeedInstruction {
    const KIND: &'static str = "seed";

    fn record_id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty seed id".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("seed {} has empty text", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub n: u32,
    pub rng_seed: u64,
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must be in (0, 1]", self.top_p));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if self.n == 0 {
            return Err("n must be positive".into());
        }
        Ok(())
    }

    pub fn with_n(mut self, n: u32) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }
}

/// One generated instruction with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub template_id: TemplateId,
    pub seed_ids: [String; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    pub draw_index: u64,
    pub sampling: SamplingParams,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_answer: Option<AnswerForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub creation_cot: Option<String>,
    pub raw_output: String,
}

impl Record for SyntheticRecord {
    const KIND: &'static str = "synthetic_record";

    fn record_id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err(format!("record {} has an empty question", self.id));
        }
        if self.target_answer.is_some() && !self.template_id.produces_target() {
            return Err(format!("record {}: template {} does not produce a target", self.id, self.template_id));
        }
        self.sampling.validate().map_err(|e| format!("record {}: {e}", self.id))
    }
}

/// Deterministic record id: a content hash of the generation coordinates.
pub fn record_id(template: TemplateId, seed_ids: &[String; 2], rng_seed: u64, sample_index: u64) -> String {
    let mut h = Sha256::new();
    h.update(template.as_str().as_bytes());
    for s in seed_ids {
        h.update([0u8]);
        h.update(s.as_bytes());
    }
    h.update([0u8]);
    h.update(rng_seed.to_le_bytes());
    h.update(sample_index.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// One sampled response to a record's question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub record_id: String,
    pub sample_index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerForm>,
    pub length_chars: u64,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

impl ResponseSample {
    pub fn new(record_id: impl Into<String>, sample_index: u32, text: impl Into<String>) -> Self {
        let text = text.into();
        ResponseSample {
            record_id: record_id.into(),
            sample_index,
            length_chars: text.chars().count() as u64,
            text,
            answer: None,
            truncated: false,
            reward: None,
        }
    }
}

impl Record for ResponseSample {
    const KIND: &'static str = "response_sample";

    fn record_id(&self) -> &str {
        &self.record_id
    }

    fn validate(&self) -> Result<(), String> {
        let n = self.text.chars().count() as u64;
        if n != self.length_chars {
            return Err(format!("length_chars {} != text length {n}", self.length_chars));
        }
        if let Some(r) = self.reward {
            if !r.is_finite() {
                return Err("non-finite reward".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    ScBelowThreshold,
    MajorityTargetMismatch,
    RipBelowQuantile,
    Malformed,
    Duplicate,
    Kept,
}

impl VerdictReason {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictReason::ScBelowThreshold => "sc_below_threshold",
            VerdictReason::MajorityTargetMismatch => "majority_target_mismatch",
            VerdictReason::RipBelowQuantile => "rip_below_quantile",
            VerdictReason::Malformed => "malformed",
            VerdictReason::Duplicate => "duplicate",
            VerdictReason::Kept => "kept",
        }
    }
}

/// Per-record outcome of a filter chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationVerdict {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_answer: Option<AnswerForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rip_score: Option<f64>,
    pub decision: Decision,
    pub reason: VerdictReason,
}

impl CurationVerdict {
    pub fn keep(record_id: impl Into<String>) -> Self {
        CurationVerdict {
            record_id: record_id.into(),
            sc_rate: None,
            majority_answer: None,
            rip_score: None,
            decision: Decision::Keep,
            reason: VerdictReason::Kept,
        }
    }

    pub fn is_kept(&self) -> bool {
        self.decision == Decision::Keep
    }

    pub fn drop_with(mut self, reason: VerdictReason) -> Self {
        debug_assert_ne!(reason, VerdictReason::Kept);
        self.decision = Decision::Drop;
        self.reason = reason;
        self
    }
}

impl Record for CurationVerdict {
    const KIND: &'static str = "curation_verdict";

    fn record_id(&self) -> &str {
        &self.record_id
    }

    fn validate(&self) -> Result<(), String> {
        match (self.decision, self.reason) {
            (Decision::Drop, VerdictReason::Kept) => Err("dropped verdict with reason kept".into()),
            (Decision::Keep, r) if r != VerdictReason::Kept => Err(format!("kept verdict with reason {}", r.as_str())),
            _ => match self.sc_rate {
                Some(r) if !(0.0..=1.0).contains(&r) => Err(format!("sc_rate {r} outside [0, 1]")),
                _ => Ok(()),
            },
        }
    }
}

/// Encodes one record as a canonical line (without the trailing newline).
pub fn encode_line<T: Record>(record: &T) -> Result<String, serde_json::Error> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        schema_version: u32,
        kind: &'a str,
        #[serde(flatten)]
        record: &'a T,
    }
    serde_json::to_string(&Envelope { schema_version: SCHEMA_VERSION, kind: T::KIND, record })
}

/// Decodes one line; the error string does not carry position information.
pub fn decode_line<T: Record>(line: &str) -> Result<T, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let Value::Object(mut map) = value else {
        return Err("expected a JSON object".into());
    };
    check_envelope::<T>(&mut map)?;
    let record: T = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
    record.validate()?;
    Ok(record)
}

fn check_envelope<T: Record>(map: &mut Map<String, Value>) -> Result<(), String> {
    match map.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(other) => return Err(format!("unsupported schema_version {other}")),
        None => return Err("missing schema_version".into()),
    }
    match map.remove("kind") {
        Some(Value::String(k)) if k == T::KIND => Ok(()),
        Some(other) => Err(format!("expected kind {:?}, found {other}", T::KIND)),
        None => Err("missing kind".into()),
    }
}

/// Peeks at the `kind` field of the first non-empty line of a file.
pub fn sniff_kind(path: &Path) -> Result<Option<String>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            offset: 0,
            message: e.to_string(),
        })?;
        return Ok(v.get("kind").and_then(Value::as_str).map(str::to_string));
    }
    Ok(None)
}

/// Streaming reader over a line-delimited record file.
pub struct RecordReader<T> {
    path: PathBuf,
    reader: BufReader<File>,
    line: usize,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
    _marker: PhantomData<T>,
}

impl<T> RecordReader<T> {
    /// One-based line number of the most recently read line.
    pub fn line(&self) -> usize {
        self.line
    }
}

impl<T: Record> Iterator for RecordReader<T> {
    type Item = Result<T, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            let start = self.offset;
            let n = match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(n) => n,
                Err(e) => {
                    self.done = true;
                    return Some(Err(DatasetError::io(&self.path, e)));
                }
            };
            if n == 0 {
                self.done = true;
                return None;
            }
            self.line += 1;
            self.offset += n as u64;
            let malformed = |message: String| DatasetError::Malformed {
                path: self.path.clone(),
                line: self.line,
                offset: start,
                message,
            };
            let text = match std::str::from_utf8(&self.buf) {
                Ok(t) => t.trim_end_matches(['\n', '\r']),
                Err(e) => {
                    self.done = true;
                    return Some(Err(malformed(format!("invalid UTF-8: {e}"))));
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let result = decode_line::<T>(text).map_err(malformed);
            if result.is_err() {
                self.done = true;
            }
            return Some(result);
        }
        None
    }
}

pub fn read_records<T: Record>(path: &Path) -> Result<RecordReader<T>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    Ok(RecordReader {
        path: path.to_path_buf(),
        reader: BufReader::new(file),
        line: 0,
        offset: 0,
        buf: Vec::new(),
        done: false,
        _marker: PhantomData,
    })
}

pub fn read_all<T: Record>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_records(path)?.collect()
}

/// Writes records to `path` atomically (temp file + rename). With
/// `sort_by_id`, records are ordered by [`Record::record_id`] (stable).
pub fn write_records<'a, T, I>(path: &Path, records: I, sort_by_id: bool) -> Result<usize, DatasetError>
where
    T: Record + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut items: Vec<&T> = records.into_iter().collect();
    if sort_by_id {
        items.sort_by(|a, b| a.record_id().cmp(b.record_id()));
    }
    let mut bytes = Vec::new();
    for r in &items {
        let line = encode_line(*r).map_err(|e| DatasetError::Invalid {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)?;
    Ok(items.len())
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let result = (|| {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        let f = f.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(DatasetError::io(path, e));
    }
    Ok(())
}

/// Append-only writer used for checkpointed stage output.
pub struct RecordAppender {
    path: PathBuf,
    file: File,
}

impl RecordAppender {
    /// Opens `path` for appending after truncating it to `committed_len`.
    pub fn open(path: &Path, committed_len: u64) -> Result<Self, DatasetError> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| DatasetError::io(path, e))?;
        file.set_len(committed_len).map_err(|e| DatasetError::io(path, e))?;
        let mut file = file;
        io::Seek::seek(&mut file, io::SeekFrom::End(0)).map_err(|e| DatasetError::io(path, e))?;
        Ok(RecordAppender { path: path.to_path_buf(), file })
    }

    pub fn append<T: Record>(&mut self, records: &[T]) -> Result<(), DatasetError> {
        let mut bytes = Vec::new();
        for r in records {
            let line = encode_line(r).map_err(|e| DatasetError::Invalid {
                path: self.path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            bytes.extend_from_slice(line.as_bytes());
            bytes.push(b'\n');
        }
        self.file.write_all(&bytes).map_err(|e| DatasetError::io(&self.path, e))
    }

    /// Flushes to disk and returns the committed length.
    pub fn commit(&mut self) -> Result<u64, DatasetError> {
        self.file.sync_data().map_err(|e| DatasetError::io(&self.path, e))?;
        self.file.metadata().map(|m| m.len()).map_err(|e| DatasetError::io(&self.path, e))
    }
}

/// Nearest-rank percentile of an ascending slice (`p` in `(0, 100]`).
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthPercentiles {
    pub count: u64,
    pub min: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl LengthPercentiles {
    pub fn from_lengths(lengths: &[u64]) -> Self {
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let at = |p| nearest_rank(&sorted, p).unwrap_or(0);
        LengthPercentiles {
            count: sorted.len() as u64,
            min: sorted.first().copied().unwrap_or(0),
            p50: at(50.0),
            p90: at(90.0),
            p99: at(99.0),
            max: sorted.last().copied().unwrap_or(0),
        }
    }
}

/// Counts over a set of records and verdicts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: u64,
    pub per_template: BTreeMap<String, u64>,
    pub per_category: BTreeMap<String, u64>,
    pub per_answer_kind: BTreeMap<String, u64>,
    pub question_length: LengthPercentiles,
    pub samples: u64,
    pub truncated_samples: u64,
    pub sample_length: LengthPercentiles,
    pub verdicts: u64,
    pub kept: u64,
    pub per_reason: BTreeMap<String, u64>,
}

impl DatasetSummary {
    pub fn keep_ratio(&self) -> Option<f64> {
        (self.verdicts > 0).then(|| self.kept as f64 / self.verdicts as f64)
    }
}

/// Accumulates a [`DatasetSummary`]; builders merge by concatenation.
#[derive(Debug, Clone, Default)]
pub struct SummaryBuilder {
    summary: DatasetSummary,
    question_lengths: Vec<u64>,
    sample_lengths: Vec<u64>,
}

impl SummaryBuilder {
    pub fn add_record(&mut self, r: &SyntheticRecord) {
        let s = &mut self.summary;
        s.records += 1;
        *s.per_template.entry(r.template_id.as_str().to_string()).or_default() += 1;
        let cat = r.category.map(Category::name).unwrap_or("uncategorized");
        *s.per_category.entry(cat.to_string()).or_default() += 1;
        let kind = r.target_answer.as_ref().map(|a| a.kind().as_str()).unwrap_or("none");
        *s.per_answer_kind.entry(kind.to_string()).or_default() += 1;
        self.question_lengths.push(r.question.chars().count() as u64);
    }

    pub fn add_sample(&mut self, r: &ResponseSample) {
        self.summary.samples += 1;
        if r.truncated {
            self.summary.truncated_samples += 1;
        }
        self.sample_lengths.push(r.length_chars);
    }

    pub fn add_verdict(&mut self, v: &CurationVerdict) {
        let s = &mut self.summary;
        s.verdicts += 1;
        if v.is_kept() {
            s.kept += 1;
        }
        *s.per_reason.entry(v.reason.as_str().to_string()).or_default() += 1;
    }

    pub fn merge(&mut self, other: SummaryBuilder) {
        let (a, b) = (&mut self.summary, other.summary);
        a.records += b.records;
        a.samples += b.samples;
        a.truncated_samples += b.truncated_samples;
        a.verdicts += b.verdicts;
        a.kept += b.kept;
        for (dst, src) in [
            (&mut a.per_template, b.per_template),
            (&mut a.per_category, b.per_category),
            (&mut a.per_answer_kind, b.per_answer_kind),
            (&mut a.per_reason, b.per_reason),
        ] {
            for (k, v) in src {
                *dst.entry(k).or_default() += v;
            }
        }
        self.question_lengths.extend(other.question_lengths);
        self.sample_lengths.extend(other.sample_lengths);
    }

    pub fn finish(mut self) -> DatasetSummary {
        self.summary.question_length = LengthPercentiles::from_lengths(&self.question_lengths);
        self.summary.sample_length = LengthPercentiles::from_lengths(&self.sample_lengths);
        self.summary
    }
}

/// Summary of generated records.
pub fn dataset_stats<'a>(records: impl IntoIterator<Item = &'a SyntheticRecord>) -> DatasetSummary {
    let mut b = SummaryBuilder::default();
    records.into_iter().for_each(|r| b.add_record(r));
    b.finish()
}

/// Summary of curation verdicts.
pub fn verdict_stats<'a>(verdicts: impl IntoIterator<Item = &'a CurationVerdict>) -> DatasetSummary {
    let mut b = SummaryBuilder::default();
    verdicts.into_iter().for_each(|v| b.add_verdict(v));
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::parse_answer;

    fn record(i: u64, question: &str) -> SyntheticRecord {
        let seed_ids = [format!("s{i}"), format!("s{}", i + 1)];
        SyntheticRecord {
            id: record_id(TemplateId::ReasoningCotSolve, &seed_ids, 7, i),
            template_id: TemplateId::ReasoningCotSolve,
            seed_ids,
            category: None,
            draw_index: i,
            sampling: SamplingParams { temperature: 0.7, top_p: 0.8, max_tokens: 4096, n: 1, rng_seed: 7 },
            question: question.to_string(),
            target_answer: parse_answer("4"),
            target_response: None,
            creation_cot: Some("thinking".into()),
            raw_output: "raw".into(),
        }
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert_eq!(read_all::<SyntheticRecord>(&p).unwrap().len(), 0);
    }

    #[test]
    fn order_is_preserved_and_sort_flag_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs: Vec<_> = (0..3).map(|i| record(i, &format!("q{i}"))).collect();
        assert_eq!(write_records(&p, &recs, false).unwrap(), 3);
        assert_eq!(read_all::<SyntheticRecord>(&p).unwrap(), recs);

        write_records(&p, &recs, true).unwrap();
        let back = read_all::<SyntheticRecord>(&p).unwrap();
        let ids: Vec<_> = back.iter().map(|r| r.id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn truncated_line_reports_its_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs: Vec<_> = (0..3).map(|i| record(i, "q")).collect();
        write_records(&p, &recs, false).unwrap();
        let bytes = fs::read(&p).unwrap();
        let first_nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        // cut line 2 in half, keep line 3
        let second_nl = first_nl + 1 + bytes[first_nl + 1..].iter().position(|&b| b == b'\n').unwrap();
        let mid = first_nl + 1 + (second_nl - first_nl) / 2;
        let mut broken = bytes[..mid].to_vec();
        broken.push(b'\n');
        broken.extend_from_slice(&bytes[second_nl + 1..]);
        fs::write(&p, &broken).unwrap();

        let results: Vec<_> = read_records::<SyntheticRecord>(&p).unwrap().collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        let err = results[1].as_ref().unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(err.to_string().contains("line 2"));
        assert!(err.to_string().contains(&format!("byte offset {}", first_nl + 1)));
    }

    #[test]
    fn embedded_newline_stays_on_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let r = record(0, "line one\nline two");
        write_records(&p, [&r], false).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_all::<SyntheticRecord>(&p).unwrap(), vec![r]);
    }

    #[test]
    fn encoding_is_canonical() {
        let r = record(3, "q");
        let line = encode_line(&r).unwrap();
        assert!(line.starts_with(r#"{"schema_version":1,"kind":"synthetic_record","id":""#));
        assert_eq!(line, encode_line(&r.clone()).unwrap());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let line = encode_line(&record(0, "q")).unwrap();
        let err = decode_line::<ResponseSample>(&line).unwrap_err();
        assert!(err.contains("expected kind"));
    }

    #[test]
    fn empty_stats_are_zero() {
        let s = dataset_stats(&[]);
        assert_eq!(s, DatasetSummary::default());
        assert_eq!(s.keep_ratio(), None);
    }

    #[test]
    fn keep_ratio_of_answer_consistency_row() {
        let verdicts: Vec<_> = (0..5000)
            .map(|i| {
                let v = CurationVerdict::keep(format!("r{i}"));
                if i < 2926 {
                    v
                } else {
                    v.drop_with(VerdictReason::MajorityTargetMismatch)
                }
            })
            .collect();
        let s = verdict_stats(&verdicts);
        assert_eq!(s.keep_ratio(), Some(0.5852));
        assert_eq!(s.per_reason["kept"] + s.per_reason["majority_target_mismatch"], 5000);
    }

    #[test]
    fn nearest_rank_definition() {
        assert_eq!(nearest_rank(&[1, 2, 3, 4], 50.0), Some(2));
        assert_eq!(nearest_rank(&[1, 2, 3, 4], 100.0), Some(4));
        assert_eq!(nearest_rank(&[5], 1.0), Some(5));
        assert_eq!(nearest_rank(&[], 50.0), None);
    }

    #[test]
    fn category_labels() {
        assert_eq!(Category::from_label("data and analysis"), Some(Category::DataAnalysis));
        assert_eq!(Category::from_label("Writing & Storytelling"), Some(Category::WritingStorytelling));
        assert_eq!(Category::from_label("poetry"), None);
        let json = serde_json::to_string(&Category::BusinessMarketing).unwrap();
        assert_eq!(json, "\"Business & Marketing\"");
    }

    #[test]
    fn appender_truncates_to_committed_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("part.jsonl");
        let mut a = RecordAppender::open(&p, 0).unwrap();
        a.append(&[record(0, "a")]).unwrap();
        let len = a.commit().unwrap();
        a.append(&[record(1, "b")]).unwrap();
        drop(a);
        let a = RecordAppender::open(&p, len).unwrap();
        drop(a);
        assert_eq!(read_all::<SyntheticRecord>(&p).unwrap().len(), 1);
    }
}
