//! Run configuration: one TOML file, optionally overridden key by key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::curation::{DEFAULT_RHO, DEFAULT_RIP_QUANTILE, DEFAULT_SC_THRESHOLD};
use crate::gateway::http::HttpConfig;
use crate::gateway::mock::WorldConfig;
use crate::gateway::{GatewayConfig, PromptRole, SamplingProfile, ThinkMode};
use crate::seeds::{DrawMode, PoolMode};
use crate::template::TemplateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    SelfConsistency,
    AnswerConsistency,
    Rip,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::SelfConsistency => "self_consistency",
            FilterKind::AnswerConsistency => "answer_consistency",
            FilterKind::Rip => "rip",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self_consistency" | "sc" => Ok(FilterKind::SelfConsistency),
            "answer_consistency" | "ac" => Ok(FilterKind::AnswerConsistency),
            "rip" => Ok(FilterKind::Rip),
            _ => Err(format!("unknown filter {s:?}")),
        }
    }
}

/// Where a kept reasoning record's training target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The answer the generator wrote next to the question.
    #[default]
    Generated,
    /// The rollout majority answer.
    MajorityVote,
    /// The highest-reward rollout.
    BestOfK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        world: WorldConfig,
    },
    Http(HttpConfig),
    /// Serve a recorded transcript; unseen requests fail.
    Replay { transcript: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { world: WorldConfig::default() }
    }
}

impl BackendConfig {
    pub fn can_score(&self) -> bool {
        match self {
            BackendConfig::Mock { .. } | BackendConfig::Replay { .. } => true,
            BackendConfig::Http(h) => h.reward.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: PoolMode,
    pub template_id: TemplateId,
    pub pool: PathBuf,
    /// Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub target_count: usize,
    #[serde(default = "defaults::k_rollout")]
    pub k_rollout: u32,
    #[serde(default = "defaults::k_score")]
    pub k_score: u32,
    #[serde(default = "defaults::k_pairs")]
    pub k_pairs: u32,
    #[serde(default)]
    pub filters: Vec<FilterKind>,
    #[serde(default)]
    pub draw_mode: DrawMode,
    #[serde(default)]
    pub think_mode: ThinkMode,
    #[serde(default)]
    pub role: PromptRole,
    #[serde(default = "defaults::generation_profile")]
    pub generation_profile: SamplingProfile,
    #[serde(default = "defaults::rollout_profile")]
    pub rollout_profile: SamplingProfile,
    #[serde(default = "defaults::sc_threshold")]
    pub sc_threshold: f64,
    #[serde(default = "defaults::rip_quantile")]
    pub rip_quantile: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default)]
    pub target_mode: TargetMode,
    /// ROUGE-L threshold for dropping near-duplicate questions; off when
    /// absent.
    #[serde(default)]
    pub dedup_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "defaults::malformed_window")]
    pub malformed_window: usize,
    #[serde(default = "defaults::malformed_max_rate")]
    pub malformed_max_rate: f64,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Save every backend exchange here, for later replay.
    #[serde(default)]
    pub record_transcript: Option<PathBuf>,
}

mod defaults {
    use crate::gateway::SamplingProfile;

    pub fn k_rollout() -> u32 {
        16
    }
    pub fn k_score() -> u32 {
        32
    }
    pub fn k_pairs() -> u32 {
        64
    }
    pub fn generation_profile() -> SamplingProfile {
        SamplingProfile::GenThink
    }
    pub fn rollout_profile() -> SamplingProfile {
        SamplingProfile::Rollout
    }
    pub fn sc_threshold() -> f64 {
        super::DEFAULT_SC_THRESHOLD
    }
    pub fn rip_quantile() -> f64 {
        super::DEFAULT_RIP_QUANTILE
    }
    pub fn rho() -> f64 {
        super::DEFAULT_RHO
    }
    pub fn chunk_size() -> usize {
        32
    }
    pub fn malformed_window() -> usize {
        200
    }
    pub fn malformed_max_rate() -> f64 {
        0.5
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| format!("empty key in override {key:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("{p} is not a table in override {key:?}"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML, then applies `key=value` overrides (values are TOML
    /// literals, or bare strings).
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, parse_literal(v)).map_err(PipelineError::Config)?;
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.pool);
        fix(&mut self.output_dir);
        if let Some(p) = self.templates_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.record_transcript.as_mut() {
            fix(p);
        }
        if let BackendConfig::Replay { transcript } = &mut self.backend {
            fix(transcript);
        }
    }

    /// Environment overrides for endpoint settings.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), PipelineError> {
        if let BackendConfig::Http(h) = &mut self.backend {
            if let Some(url) = lookup("INSTRUCTFORGE_BASE_URL") {
                h.base_url = url;
            }
            if let Some(model) = lookup("INSTRUCTFORGE_MODEL") {
                h.model = model;
            }
        }
        if let Some(n) = lookup("INSTRUCTFORGE_MAX_IN_FLIGHT") {
            self.gateway.max_in_flight =
                n.parse().map_err(|_| PipelineError::Config(format!("INSTRUCTFORGE_MAX_IN_FLIGHT={n:?} is not a count")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.template_id.is_reasoning() != (self.mode == PoolMode::Reasoning) {
            return err(format!("template {} does not belong to {} mode", self.template_id, self.mode));
        }
        if self.target_count == 0 {
            return err("target_count must be positive".into());
        }
        for (name, k) in [("k_rollout", self.k_rollout), ("k_score", self.k_score), ("k_pairs", self.k_pairs)] {
            if k == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.chunk_size == 0 || self.malformed_window == 0 {
            return err("chunk_size and malformed_window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sc_threshold) || !(0.0..=1.0).contains(&self.malformed_max_rate) {
            return err("sc_threshold and malformed_max_rate must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.rip_quantile) {
            return err(format!("rip_quantile {} must be in [0, 1)", self.rip_quantile));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return err(format!("rho {} must be >= 0", self.rho));
        }
        if let Some(t) = self.dedup_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return err(format!("dedup_threshold {t} must be in (0, 1]"));
            }
        }
        let mut seen = Vec::new();
        for f in &self.filters {
            if seen.contains(f) {
                return err(format!("filter {f} appears twice"));
            }
            seen.push(*f);
            match f {
                FilterKind::SelfConsistency | FilterKind::AnswerConsistency if self.mode != PoolMode::Reasoning => {
                    return err(format!("filter {f} needs verifiable answers (reasoning mode)"));
                }
                FilterKind::AnswerConsistency if !self.template_id.produces_target() => {
                    return err(format!("filter {f} needs a solve template; {} has no target", self.template_id));
                }
                FilterKind::Rip if !self.backend.can_score() => {
                    return err("filter rip needs a reward endpoint".into());
                }
                _ => {}
            }
        }
        if self.mode == PoolMode::Reasoning {
            if self.target_mode == TargetMode::Generated && !self.template_id.produces_target() {
                return err(format!(
                    "target_mode generated needs a solve template; use majority_vote or best_of_k with {}",
                    self.template_id
                ));
            }
            if self.target_mode == TargetMode::BestOfK && !self.backend.can_score() {
                return err("target_mode best_of_k needs a reward endpoint".into());
            }
        } else if !self.backend.can_score() {
            return err("instruction-following runs need a reward endpoint for pairs".into());
        }
        Ok(())
    }

    pub fn needs_scores(&self) -> bool {
        self.mode == PoolMode::InstructionFollowing
            || self.filters.contains(&FilterKind::Rip)
            || self.target_mode == TargetMode::BestOfK
    }

    /// Responses sampled per record in the rollout stage.
    pub fn responses_per_record(&self) -> u32 {
        match self.mode {
            PoolMode::Reasoning => self.k_rollout,
            PoolMode::InstructionFollowing => self.k_score,
        }
    }

    /// Hex SHA-256 of the resolved configuration, excluding the output
    /// directory.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
mode = "reasoning"
template_id = "reasoning_cot_solve"
pool = "seeds.jsonl"
target_count = 10
filters = ["self_consistency", "answer_consistency"]
"#;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_the_stage_sizes() {
        let c = RunConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!((c.k_rollout, c.k_score, c.k_pairs), (16, 32, 64));
        assert_eq!((c.sc_threshold, c.rip_quantile, c.rho), (0.5, 0.5, 0.2));
        assert_eq!(c.dedup_threshold, None);
        assert_eq!(c.role, PromptRole::User);
    }

    #[test]
    fn overrides_apply_before_validation() {
        let c = RunConfig::from_toml(BASE, &ov(&[("k_rollout", "8"), ("gateway.max_in_flight", "2"), ("seed", "7")])).unwrap();
        assert_eq!((c.k_rollout, c.gateway.max_in_flight, c.seed), (8, 2, 7));
        let bad = RunConfig::from_toml(BASE, &ov(&[("template_id", "reasoning_cot_nosolve")]));
        assert!(matches!(bad, Err(PipelineError::Config(m)) if m.contains("answer_consistency")));
        assert!(RunConfig::from_toml(BASE, &ov(&[("mystery", "1")])).is_err());
    }

    #[test]
    fn chain_mode_mismatch() {
        let text = BASE.replace("reasoning_cot_solve", "if_long_cot").replace("\"reasoning\"", "\"instruction_following\"");
        assert!(RunConfig::from_toml(&text, &[]).is_err());
        let ok = RunConfig::from_toml(&text, &ov(&[("filters", "[\"rip\"]")])).unwrap();
        assert!(ok.needs_scores());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::from_toml(BASE, &[]).unwrap();
        let h = a.config_hash();
        a.output_dir = "/elsewhere".into();
        assert_eq!(a.config_hash(), h);
        a.seed = 1;
        assert_ne!(a.config_hash(), h);
    }
}
