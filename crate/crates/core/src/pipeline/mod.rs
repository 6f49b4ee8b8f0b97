//! Stage orchestration with file checkpoints.
//!
//! Every stage reads the previous stage's files from the output directory
//! and writes its own. Long stages append in chunks; after each chunk the
//! committed byte length of every partial file and the stage cursor are
//! recorded in `manifest.json`. A resumed stage truncates its files to the
//! committed lengths and continues from the cursor, so an interrupted run
//! finishes with the same bytes as an uninterrupted one.

pub mod config;
pub mod stats;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendConfig, FilterKind, RunConfig, TargetMode};

use crate::curation::{
    answer_consistency_filter, best_of_k, build_dpo_pair, majority_vote_target, rip_filter, self_consistency_filter,
    tally_votes, CurationError, SkippedPair,
};
use crate::dataset::{
    read_all, record_id, write_atomic, write_records, CurationVerdict, DatasetError, Record, RecordAppender,
    ResponseSample, SyntheticRecord, VerdictReason,
};
use crate::dedup::RougeDeduper;
use crate::extract::{extract, extract_rollout_answer, ExtractionResult};
use crate::gateway::http::HttpBackend;
use crate::gateway::mock::synthetic_world;
use crate::gateway::replay::{RecordingBackend, ReplayBackend, Transcript};
use crate::gateway::{
    preset_sampling, Backend, CompletionRequest, ErrorClass, Gateway, GatewayError, RewardRequest,
};
use crate::rng::{derive_seed, tag};
use crate::seeds::{load_seed_pool, FewShotSampler, PoolMode, SeedError};
use crate::template::{expected_output_grammar, TemplateError, TemplateId, TemplateSet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const RECORDS: &str = "records.jsonl";
    pub const REJECTS: &str = "generation_rejects.jsonl";
    pub const ROLLOUTS: &str = "rollouts.jsonl";
    pub const SCORED: &str = "scored.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const KEPT: &str = "kept.jsonl";
    pub const FUNNEL: &str = "funnel.json";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const PAIRS_SKIPPED: &str = "pairs_skipped.jsonl";
    pub const STATS: &str = "stats.json";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Rollout,
    Score,
    Filter,
    Pairs,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Rollout => "rollout",
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Pairs => "pairs",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Seeds(#[from] SeedError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{stage} stage: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(
        "{malformed} of the last {window} generations from {template} were malformed; \
         the backend is probably not following the template (recent reasons: {reasons})"
    )]
    MalformationRate { template: TemplateId, malformed: usize, window: usize, reasons: String },
    #[error("{dir} holds a run with config hash {found}, but this config hashes to {expected}")]
    ManifestMismatch { dir: PathBuf, expected: String, found: String },
    #[error("{stage} stage needs the {needs} stage to be complete first")]
    MissingInput { stage: Stage, needs: Stage },
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_)
            | PipelineError::ManifestMismatch { .. }
            | PipelineError::MissingInput { .. }
            | PipelineError::Curation(CurationError::MissingTarget(_))
            | PipelineError::Curation(CurationError::BadThreshold(_))
            | PipelineError::Curation(CurationError::BadQuantile(_))
            | PipelineError::Seeds(SeedError::TooSmall(_))
            | PipelineError::Seeds(SeedError::NoEligibleCategory)
            | PipelineError::Template(TemplateError::Load { .. })
            | PipelineError::Template(TemplateError::BadPlaceholders { .. }) => ErrorClass::Config,
            PipelineError::Gateway { source, .. } | PipelineError::Seeds(SeedError::Gateway(source)) => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub completed: bool,
    /// Units of input consumed: draws for generate, records or samples for
    /// the others.
    pub cursor: u64,
    /// Committed byte length of each output file.
    pub files: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub global_rng_seed: u64,
    pub config: RunConfig,
    pub stages: BTreeMap<Stage, StageCheckpoint>,
}

impl PipelineManifest {
    pub fn new(config: &RunConfig) -> Self {
        PipelineManifest {
            schema_version: crate::dataset::SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config.config_hash(),
            global_rng_seed: config.seed,
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn stage(&self, stage: Stage) -> StageCheckpoint {
        self.stages.get(&stage).cloned().unwrap_or_default()
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|c| c.completed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| {
            PipelineError::Dataset(DatasetError::Malformed {
                path: path.to_path_buf(),
                line: e.line(),
                offset: 0,
                message: e.to_string(),
            })
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        Ok(write_atomic(path, &bytes)?)
    }
}

/// A generation that did not become a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReject {
    pub id: String,
    pub draw_index: u64,
    pub template_id: TemplateId,
    pub seed_ids: [String; 2],
    pub reason: String,
    pub raw_output: String,
}

impl Record for GenerationReject {
    const KIND: &'static str = "generation_reject";

    fn record_id(&self) -> &str {
        &self.id
    }
}

/// Reject reasons that count against the malformation budget.
fn is_malformation(reason: &str) -> bool {
    !matches!(reason, "duplicate" | "marker_collision")
}

/// Per-stage counts in run order: how many units entered and how many
/// survived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub stage: String,
    pub input: u64,
    pub kept: u64,
}

impl FunnelStage {
    pub fn ratio(&self) -> Option<f64> {
        (self.input > 0).then(|| self.kept as f64 / self.input as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    /// False when the stage was already complete.
    pub ran: bool,
    pub produced: u64,
}

pub struct Pipeline {
    config: RunConfig,
    gateway: Gateway,
    templates: TemplateSet,
    recorder: Option<Arc<RecordingBackend<Arc<dyn Backend>>>>,
}

pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Backend>> {
    Ok(match config {
        BackendConfig::Mock { world } => Arc::new(synthetic_world(world.clone())),
        BackendConfig::Http(h) => Arc::new(HttpBackend::new(h.clone()).map_err(|e| PipelineError::Config(e.to_string()))?),
        BackendConfig::Replay { transcript } => Arc::new(ReplayBackend::load(transcript)?),
    })
}

fn id_key(id: &str) -> u64 {
    tag(id)
}

impl Pipeline {
    pub fn new(config: RunConfig, backend: Arc<dyn Backend>) -> Result<Self> {
        config.validate()?;
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let (backend, recorder) = match &config.record_transcript {
            Some(_) => {
                let rec = Arc::new(RecordingBackend::new(backend));
                (rec.clone() as Arc<dyn Backend>, Some(rec))
            }
            None => (backend, None),
        };
        let gateway = Gateway::new(backend, config.gateway.clone());
        Ok(Pipeline { config, gateway, templates, recorder })
    }

    pub fn from_config(config: RunConfig) -> Result<Self> {
        let backend = build_backend(&config.backend)?;
        Pipeline::new(config, backend)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn manifest(&self) -> Result<PipelineManifest> {
        let path = self.path(files::MANIFEST);
        if !path.exists() {
            return Ok(PipelineManifest::new(&self.config));
        }
        let m = PipelineManifest::load(&path)?;
        let expected = self.config.config_hash();
        if m.config_hash != expected {
            return Err(PipelineError::ManifestMismatch {
                dir: self.config.output_dir.clone(),
                expected,
                found: m.config_hash,
            });
        }
        Ok(m)
    }

    fn save(&self, m: &PipelineManifest) -> Result<()> {
        std::fs::create_dir_all(&self.config.output_dir)
            .map_err(|e| DatasetError::Io { path: self.config.output_dir.clone(), source: e })?;
        m.save(&self.path(files::MANIFEST))?;
        self.flush_transcript()
    }

    fn flush_transcript(&self) -> Result<()> {
        if let (Some(rec), Some(path)) = (&self.recorder, &self.config.record_transcript) {
            let mut t = if path.exists() { Transcript::load(path)? } else { Transcript::default() };
            let fresh = rec.transcript();
            if fresh.is_empty() {
                return Ok(());
            }
            for e in fresh.entries() {
                t.insert(e.clone());
            }
            t.save(path)?;
        }
        Ok(())
    }

    fn require(&self, m: &PipelineManifest, stage: Stage, needs: Stage) -> Result<()> {
        if m.is_complete(needs) {
            Ok(())
        } else {
            Err(PipelineError::MissingInput { stage, needs })
        }
    }

    fn open(&self, cp: &StageCheckpoint, name: &str) -> Result<RecordAppender> {
        std::fs::create_dir_all(&self.config.output_dir)
            .map_err(|e| DatasetError::Io { path: self.config.output_dir.clone(), source: e })?;
        Ok(RecordAppender::open(&self.path(name), cp.files.get(name).copied().unwrap_or(0))?)
    }

    fn gw<T>(&self, stage: Stage, r: std::result::Result<T, GatewayError>) -> Result<T> {
        r.map_err(|source| PipelineError::Gateway { stage, source })
    }

    /// Draw, render, complete, and extract until `target_count` records
    /// exist. Rejected generations are logged and replaced by fresh draws.
    pub fn run_generate(&self) -> Result<StageOutcome> {
        let cfg = &self.config;
        let mut m = self.manifest()?;
        if m.is_complete(Stage::Generate) {
            return Ok(StageOutcome { stage: Stage::Generate, ran: false, produced: 0 });
        }
        let pool = load_seed_pool(&cfg.pool, cfg.mode)?;
        let sampler = FewShotSampler::new(&pool, cfg.draw_mode, cfg.seed)?;
        let grammar = expected_output_grammar(cfg.template_id);
        let mut cp = m.stage(Stage::Generate);
        let mut records_out = self.open(&cp, files::RECORDS)?;
        let mut rejects_out = self.open(&cp, files::REJECTS)?;
        let existing: Vec<SyntheticRecord> = read_all(&self.path(files::RECORDS))?;
        let old_rejects: Vec<GenerationReject> = read_all(&self.path(files::REJECTS))?;

        let mut dedup = match cfg.dedup_threshold {
            Some(t) => Some(
                RougeDeduper::new(t, pool.seeds().iter().map(|s| s.text.as_str()))
                    .map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
            None => None,
        };
        let mut ids: HashSet<String> = HashSet::new();
        for r in &existing {
            ids.insert(r.id.clone());
            if let Some(d) = dedup.as_mut() {
                d.admit(&r.question);
            }
        }
        let mut outcomes: Vec<(u64, Option<String>)> = existing.iter().map(|r| (r.draw_index, None)).collect();
        outcomes.extend(old_rejects.iter().map(|r| (r.draw_index, Some(r.reason.clone()))));
        outcomes.sort_by_key(|o| o.0);
        let mut window: VecDeque<Option<String>> = outcomes
            .into_iter()
            .map(|(_, reason)| reason)
            .filter(|r| r.as_deref().map_or(true, is_malformation))
            .collect();
        while window.len() > cfg.malformed_window {
            window.pop_front();
        }

        let mut have = existing.len();
        let mut next = cp.cursor;
        let mut produced = 0u64;
        let base = preset_sampling(cfg.generation_profile).with_n(1);
        while have < cfg.target_count {
            let batch = cfg.chunk_size.min(cfg.target_count - have) as u64;
            let draws: Vec<_> = (next..next + batch).map(|i| sampler.draw(i)).collect();
            let mut rendered = Vec::with_capacity(draws.len());
            let mut requests = Vec::new();
            for d in &draws {
                match self.templates.render(cfg.template_id, d) {
                    Ok(p) => {
                        let sampling = base.clone().with_seed(derive_seed(cfg.seed, &[tag("generate"), d.draw_index]));
                        let mut req = CompletionRequest::new(p.text, sampling).with_think(cfg.think_mode);
                        req.role = cfg.role;
                        rendered.push(Some(requests.len()));
                        requests.push(req);
                    }
                    Err(TemplateError::MarkerCollision { .. }) => rendered.push(None),
                    Err(e) => return Err(e.into()),
                }
            }
            let replies = self.gateway.complete_batch(&requests);
            let replies = replies.into_iter().map(|r| self.gw(Stage::Generate, r)).collect::<Result<Vec<_>>>()?;

            let mut new_records = Vec::new();
            let mut new_rejects = Vec::new();
            for (d, slot) in draws.iter().zip(&rendered) {
                let seed_ids = d.seed_ids();
                let id = record_id(cfg.template_id, &seed_ids, cfg.seed, d.draw_index);
                let reject = |reason: &str, raw: &str| GenerationReject {
                    id: id.clone(),
                    draw_index: d.draw_index,
                    template_id: cfg.template_id,
                    seed_ids: seed_ids.clone(),
                    reason: reason.to_string(),
                    raw_output: raw.to_string(),
                };
                let Some(slot) = slot else {
                    new_rejects.push(reject("marker_collision", ""));
                    continue;
                };
                let request = &requests[*slot];
                let completion = &replies[*slot][0];
                let outcome = if completion.is_truncated() {
                    Err("truncated".to_string())
                } else {
                    match extract(&completion.text, &grammar) {
                        ExtractionResult::Malformed(reason) => Err(reason.as_str().to_string()),
                        ExtractionResult::WellFormed { question, answer, creation_cot } => {
                            if ids.contains(&id) {
                                Err("id_collision".to_string())
                            } else if dedup.as_mut().is_some_and(|dd| !dd.admit(&question)) {
                                Err("duplicate".to_string())
                            } else {
                                Ok(SyntheticRecord {
                                    id: id.clone(),
                                    template_id: cfg.template_id,
                                    seed_ids: seed_ids.clone(),
                                    category: d.category(),
                                    draw_index: d.draw_index,
                                    sampling: request.sampling.clone(),
                                    question,
                                    target_answer: answer,
                                    target_response: None,
                                    creation_cot,
                                    raw_output: completion.text.clone(),
                                })
                            }
                        }
                    }
                };
                match outcome {
                    Ok(r) => {
                        ids.insert(r.id.clone());
                        new_records.push(r);
                        window.push_back(None);
                        have += 1;
                    }
                    Err(reason) => {
                        log::debug!("draw {} rejected: {reason}", d.draw_index);
                        if is_malformation(&reason) {
                            window.push_back(Some(reason.clone()));
                        }
                        new_rejects.push(reject(&reason, &completion.text));
                    }
                }
                while window.len() > cfg.malformed_window {
                    window.pop_front();
                }
                let malformed = window.iter().filter(|w| w.is_some()).count();
                if window.len() >= cfg.malformed_window && malformed as f64 > cfg.malformed_max_rate * window.len() as f64 {
                    let mut recent: BTreeMap<&str, usize> = BTreeMap::new();
                    for r in window.iter().flatten() {
                        *recent.entry(r.as_str()).or_default() += 1;
                    }
                    let reasons = recent.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", ");
                    return Err(PipelineError::MalformationRate {
                        template: cfg.template_id,
                        malformed,
                        window: window.len(),
                        reasons,
                    });
                }
            }
            next += batch;
            produced += new_records.len() as u64;
            records_out.append(&new_records)?;
            rejects_out.append(&new_rejects)?;
            cp.cursor = next;
            cp.files.insert(files::RECORDS.into(), records_out.commit()?);
            cp.files.insert(files::REJECTS.into(), rejects_out.commit()?);
            m.stages.insert(Stage::Generate, cp.clone());
            self.save(&m)?;
            log::info!("generate: {have}/{} records after {next} draws", cfg.target_count);
        }
        cp.completed = true;
        m.stages.insert(Stage::Generate, cp);
        self.save(&m)?;
        Ok(StageOutcome { stage: Stage::Generate, ran: true, produced })
    }

    fn response_request(&self, purpose: &str, record: &SyntheticRecord, n: u32) -> CompletionRequest {
        let cfg = &self.config;
        let sampling = preset_sampling(cfg.rollout_profile)
            .with_n(n)
            .with_seed(derive_seed(cfg.seed, &[tag(purpose), id_key(&record.id)]));
        let mut req = CompletionRequest::new(record.question.clone(), sampling).with_think(cfg.think_mode);
        req.role = cfg.role;
        req
    }

    /// Samples K responses per record, resumable at record granularity.
    pub fn run_rollout(&self) -> Result<StageOutcome> {
        let cfg = &self.config;
        let mut m = self.manifest()?;
        if m.is_complete(Stage::Rollout) {
            return Ok(StageOutcome { stage: Stage::Rollout, ran: false, produced: 0 });
        }
        self.require(&m, Stage::Rollout, Stage::Generate)?;
        let records: Vec<SyntheticRecord> = read_all(&self.path(files::RECORDS))?;
        let mut cp = m.stage(Stage::Rollout);
        let mut out = self.open(&cp, files::ROLLOUTS)?;
        let k = cfg.responses_per_record();
        let mut produced = 0u64;
        for chunk in records[cp.cursor as usize..].chunks(cfg.chunk_size) {
            let requests: Vec<_> = chunk.iter().map(|r| self.response_request("rollout", r, k)).collect();
            let replies = self.gateway.complete_batch(&requests);
            let mut samples = Vec::with_capacity(chunk.len() * k as usize);
            for (record, reply) in chunk.iter().zip(replies) {
                let reply = self.gw(Stage::Rollout, reply)?;
                samples.extend(self.to_samples(record, reply));
            }
            produced += samples.len() as u64;
            out.append(&samples)?;
            cp.cursor += chunk.len() as u64;
            cp.files.insert(files::ROLLOUTS.into(), out.commit()?);
            m.stages.insert(Stage::Rollout, cp.clone());
            self.save(&m)?;
            log::info!("rollout: {}/{} records", cp.cursor, records.len());
        }
        cp.completed = true;
        m.stages.insert(Stage::Rollout, cp);
        self.save(&m)?;
        Ok(StageOutcome { stage: Stage::Rollout, ran: true, produced })
    }

    fn to_samples(&self, record: &SyntheticRecord, reply: Vec<crate::gateway::Completion>) -> Vec<ResponseSample> {
        reply
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let truncated = c.is_truncated();
                let mut s = ResponseSample::new(&record.id, i as u32, c.text);
                s.truncated = truncated;
                if self.config.mode == PoolMode::Reasoning && !s.truncated {
                    s.answer = extract_rollout_answer(&s.text);
                }
                s
            })
            .collect()
    }

    /// Scores every untruncated rollout sample.
    pub fn run_score(&self) -> Result<StageOutcome> {
        let cfg = &self.config;
        let mut m = self.manifest()?;
        if m.is_complete(Stage::Score) {
            return Ok(StageOutcome { stage: Stage::Score, ran: false, produced: 0 });
        }
        self.require(&m, Stage::Score, Stage::Rollout)?;
        let records: Vec<SyntheticRecord> = read_all(&self.path(files::RECORDS))?;
        let questions: HashMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.question.as_str())).collect();
        let samples: Vec<ResponseSample> = read_all(&self.path(files::ROLLOUTS))?;
        let mut cp = m.stage(Stage::Score);
        let mut out = self.open(&cp, files::SCORED)?;
        let mut produced = 0u64;
        let per_chunk = cfg.chunk_size * cfg.responses_per_record() as usize;
        for chunk in samples[cp.cursor as usize..].chunks(per_chunk) {
            let scored = self.score_samples(Stage::Score, &questions, chunk.to_vec())?;
            produced += scored.iter().filter(|s| s.reward.is_some()).count() as u64;
            out.append(&scored)?;
            cp.cursor += chunk.len() as u64;
            cp.files.insert(files::SCORED.into(), out.commit()?);
            m.stages.insert(Stage::Score, cp.clone());
            self.save(&m)?;
        }
        cp.completed = true;
        m.stages.insert(Stage::Score, cp);
        self.save(&m)?;
        Ok(StageOutcome { stage: Stage::Score, ran: true, produced })
    }

    fn score_samples(
        &self,
        stage: Stage,
        questions: &HashMap<&str, &str>,
        mut samples: Vec<ResponseSample>,
    ) -> Result<Vec<ResponseSample>> {
        let targets: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].truncated && !samples[i].text.is_empty()).collect();
        let requests: Vec<RewardRequest> = targets
            .iter()
            .map(|&i| {
                let q = questions.get(samples[i].record_id.as_str()).copied().unwrap_or_default();
                RewardRequest::new(q, samples[i].text.clone())
            })
            .collect();
        for (&i, score) in targets.iter().zip(self.gateway.score_batch(&requests)) {
            samples[i].reward = Some(self.gw(stage, score)?);
        }
        Ok(samples)
    }

    /// Applies the filter chain in order and writes verdicts, kept records,
    /// and the retention funnel.
    pub fn run_filter(&self) -> Result<StageOutcome> {
        let cfg = &self.config;
        let mut m = self.manifest()?;
        if m.is_complete(Stage::Filter) {
            return Ok(StageOutcome { stage: Stage::Filter, ran: false, produced: 0 });
        }
        self.require(&m, Stage::Filter, Stage::Generate)?;
        let records: Vec<SyntheticRecord> = read_all(&self.path(files::RECORDS))?;
        let needs_samples = !cfg.filters.is_empty() || cfg.target_mode != TargetMode::Generated;
        let samples: Vec<ResponseSample> = if !needs_samples {
            Vec::new()
        } else if cfg.needs_scores() {
            self.require(&m, Stage::Filter, Stage::Score)?;
            read_all(&self.path(files::SCORED))?
        } else {
            self.require(&m, Stage::Filter, Stage::Rollout)?;
            read_all(&self.path(files::ROLLOUTS))?
        };
        let mut by_record: HashMap<&str, Vec<ResponseSample>> = HashMap::new();
        for s in &samples {
            by_record.entry(s.record_id.as_str()).or_default().push(s.clone());
        }
        let empty = Vec::new();
        let samples_of = |r: &SyntheticRecord| by_record.get(r.id.as_str()).unwrap_or(&empty);

        let outcome = apply_chain(cfg, &records, &samples_of)?;
        let mut kept = Vec::new();
        for (r, v) in records.iter().zip(&outcome.verdicts) {
            if !v.is_kept() {
                continue;
            }
            let mut r = r.clone();
            let rs = samples_of(&r);
            match cfg.target_mode {
                TargetMode::Generated => {}
                TargetMode::MajorityVote => r.target_answer = majority_vote_target(&tally_votes(rs)),
                TargetMode::BestOfK => {
                    if let Some(i) = best_of_k(rs) {
                        r.target_response = Some(rs[i].text.clone());
                        if cfg.mode == PoolMode::Reasoning {
                            r.target_answer = rs[i].answer.clone();
                        }
                    }
                }
            }
            kept.push(r);
        }
        write_records(&self.path(files::VERDICTS), &outcome.verdicts, false)?;
        write_records(&self.path(files::KEPT), &kept, false)?;
        let mut funnel = serde_json::to_vec_pretty(&outcome.funnel).expect("funnel serializes");
        funnel.push(b'\n');
        write_atomic(&self.path(files::FUNNEL), &funnel)?;
        let mut cp = m.stage(Stage::Filter);
        cp.completed = true;
        cp.cursor = records.len() as u64;
        for name in [files::VERDICTS, files::KEPT, files::FUNNEL] {
            let len = std::fs::metadata(self.path(name)).map(|md| md.len()).unwrap_or(0);
            cp.files.insert(name.into(), len);
        }
        m.stages.insert(Stage::Filter, cp);
        self.save(&m)?;
        Ok(StageOutcome { stage: Stage::Filter, ran: true, produced: kept.len() as u64 })
    }

    /// One preference pair per kept instruction-following record, from
    /// `k_pairs` fresh scored responses.
    pub fn run_pairs(&self) -> Result<StageOutcome> {
        let cfg = &self.config;
        if cfg.mode != PoolMode::InstructionFollowing {
            return Err(PipelineError::Config("pairs are built in instruction_following mode only".into()));
        }
        let mut m = self.manifest()?;
        if m.is_complete(Stage::Pairs) {
            return Ok(StageOutcome { stage: Stage::Pairs, ran: false, produced: 0 });
        }
        self.require(&m, Stage::Pairs, Stage::Filter)?;
        let records: Vec<SyntheticRecord> = read_all(&self.path(files::KEPT))?;
        let questions: HashMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.question.as_str())).collect();
        let mut cp = m.stage(Stage::Pairs);
        let mut pairs_out = self.open(&cp, files::PAIRS)?;
        let mut skipped_out = self.open(&cp, files::PAIRS_SKIPPED)?;
        let mut produced = 0u64;
        for chunk in records[cp.cursor as usize..].chunks(cfg.chunk_size) {
            let requests: Vec<_> = chunk.iter().map(|r| self.response_request("pairs", r, cfg.k_pairs)).collect();
            let replies = self.gateway.complete_batch(&requests);
            let mut all = Vec::new();
            for (record, reply) in chunk.iter().zip(replies) {
                all.extend(self.to_samples(record, self.gw(Stage::Pairs, reply)?));
            }
            let scored = self.score_samples(Stage::Pairs, &questions, all)?;
            let mut pairs = Vec::new();
            let mut skipped = Vec::new();
            for (record, samples) in chunk.iter().zip(scored.chunks(cfg.k_pairs as usize)) {
                match build_dpo_pair(&record.id, &record.question, samples, cfg.rho) {
                    Ok(p) => pairs.push(p),
                    Err(reason) => {
                        log::info!("pair for {} skipped: {}", record.id, reason.as_str());
                        skipped.push(SkippedPair { record_id: record.id.clone(), reason });
                    }
                }
            }
            produced += pairs.len() as u64;
            pairs_out.append(&pairs)?;
            skipped_out.append(&skipped)?;
            cp.cursor += chunk.len() as u64;
            cp.files.insert(files::PAIRS.into(), pairs_out.commit()?);
            cp.files.insert(files::PAIRS_SKIPPED.into(), skipped_out.commit()?);
            m.stages.insert(Stage::Pairs, cp.clone());
            self.save(&m)?;
        }
        cp.completed = true;
        m.stages.insert(Stage::Pairs, cp);
        self.save(&m)?;
        Ok(StageOutcome { stage: Stage::Pairs, ran: true, produced })
    }

    /// Every stage the config calls for, then the stats report.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        let cfg = &self.config;
        let mut done = vec![self.run_generate()?];
        let needs_samples = !cfg.filters.is_empty() || cfg.target_mode != TargetMode::Generated || cfg.mode == PoolMode::InstructionFollowing;
        if needs_samples {
            done.push(self.run_rollout()?);
            if cfg.needs_scores() {
                done.push(self.run_score()?);
            }
        }
        done.push(self.run_filter()?);
        if cfg.mode == PoolMode::InstructionFollowing {
            done.push(self.run_pairs()?);
        }
        stats::write_stats(&cfg.output_dir)?;
        Ok(done)
    }
}

/// Verdicts (one per record, in record order) and the funnel of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub verdicts: Vec<CurationVerdict>,
    pub funnel: Vec<FunnelStage>,
}

/// Runs the filters in order, each over the survivors of the previous one.
/// A dropped record's verdict carries the first failing filter's reason.
pub fn apply_chain<'a>(
    cfg: &RunConfig,
    records: &'a [SyntheticRecord],
    samples_of: &dyn Fn(&SyntheticRecord) -> &'a Vec<ResponseSample>,
) -> Result<ChainOutcome> {
    let mut verdicts: Vec<CurationVerdict> = records.iter().map(|r| CurationVerdict::keep(&r.id)).collect();
    let mut alive: Vec<usize> = (0..records.len()).collect();
    let mut funnel = vec![FunnelStage { stage: "generated".into(), input: records.len() as u64, kept: records.len() as u64 }];
    for filter in &cfg.filters {
        let input = alive.len() as u64;
        let mut survivors = Vec::new();
        match filter {
            FilterKind::SelfConsistency | FilterKind::AnswerConsistency => {
                for &i in &alive {
                    let tally = tally_votes(samples_of(&records[i]));
                    let v = if *filter == FilterKind::SelfConsistency {
                        self_consistency_filter(&records[i].id, &tally, cfg.sc_threshold)?
                    } else {
                        answer_consistency_filter(&records[i], &tally)?
                    };
                    let slot = &mut verdicts[i];
                    slot.sc_rate = v.sc_rate;
                    slot.majority_answer = v.majority_answer.clone();
                    if v.is_kept() {
                        survivors.push(i);
                    } else {
                        *slot = slot.clone().drop_with(v.reason);
                    }
                }
            }
            FilterKind::Rip => {
                let mut scored = Vec::new();
                let mut rewards = Vec::new();
                for &i in &alive {
                    let rs: Vec<f64> = samples_of(&records[i])
                        .iter()
                        .filter(|s| !s.truncated)
                        .filter_map(|s| s.reward)
                        .collect();
                    if rs.is_empty() {
                        verdicts[i] = verdicts[i].clone().drop_with(VerdictReason::Malformed);
                    } else {
                        scored.push(i);
                        rewards.push(rs);
                    }
                }
                for (&i, rv) in scored.iter().zip(rip_filter(&rewards, cfg.rip_quantile)?) {
                    verdicts[i].rip_score = Some(rv.prompt_score);
                    if rv.kept {
                        survivors.push(i);
                    } else {
                        verdicts[i] = verdicts[i].clone().drop_with(VerdictReason::RipBelowQuantile);
                    }
                }
                survivors.sort_unstable();
            }
        }
        funnel.push(FunnelStage { stage: filter.as_str().into(), input, kept: survivors.len() as u64 });
        alive = survivors;
    }
    Ok(ChainOutcome { verdicts, funnel })
}
