//! Seed pools: loading, category labels, and few-shot draws.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::parse_answer;
use crate::dataset::{read_records, Category, DatasetError, SamplingParams, SeedInstruction};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::rng::{derive_seed, stream, tag};

pub const LABEL_PROMPT: &str = include_str!("../templates/category_label.txt");
const LABEL_SLOT: &str = "{INSTRUCTION}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Reasoning,
    InstructionFollowing,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Reasoning => "reasoning",
            PoolMode::InstructionFollowing => "instruction_following",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reasoning" => Ok(PoolMode::Reasoning),
            "instruction_following" => Ok(PoolMode::InstructionFollowing),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("duplicate seed id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId { id: String, first_line: usize, second_line: usize },
    #[error("line {line}: seed {id:?} is not verifiable: {reason}")]
    Unverifiable { id: String, line: usize, reason: String },
    #[error("seed pool needs at least 2 seeds, found {0}")]
    TooSmall(usize),
    #[error("no category has at least 2 seeds")]
    NoEligibleCategory,
    #[error("category labeling failed: {0}")]
    Gateway(#[from] GatewayError),
}

/// Immutable set of seeds, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedPool {
    pub mode: PoolMode,
    seeds: Vec<SeedInstruction>,
}

impl SeedPool {
    pub fn new(mode: PoolMode, seeds: Vec<SeedInstruction>) -> Self {
        SeedPool { mode, seeds }
    }

    pub fn seeds(&self) -> &[SeedInstruction] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// True iff the seed's gold answer has a closed verifiable form.
pub fn verifiable_filter(seed: &SeedInstruction) -> bool {
    seed.gold_answer.as_deref().and_then(parse_answer).is_some()
}

pub fn load_seed_pool(path: &Path, mode: PoolMode) -> Result<SeedPool, SeedError> {
    let mut reader = read_records::<SeedInstruction>(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut seeds = Vec::new();
    while let Some(seed) = reader.next() {
        let seed = seed?;
        let line = reader.line();
        if let Some(&first_line) = seen.get(&seed.id) {
            return Err(SeedError::DuplicateId { id: seed.id, first_line, second_line: line });
        }
        if mode == PoolMode::Reasoning && !verifiable_filter(&seed) {
            let reason = match seed.gold_answer.as_deref() {
                None => "no gold answer".to_string(),
                Some(a) if a.trim().is_empty() => "empty gold answer".to_string(),
                Some(_) => "gold answer has no closed form".to_string(),
            };
            return Err(SeedError::Unverifiable { id: seed.id, line, reason });
        }
        seen.insert(seed.id.clone(), line);
        seeds.push(seed);
    }
    Ok(SeedPool { mode, seeds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    #[default]
    Uniform,
    /// A category uniformly at random, then two seeds within it.
    SameCategory,
    /// Like `SameCategory`, with categories weighted by size.
    SameCategoryProportional,
}

impl DrawMode {
    pub fn is_same_category(self) -> bool {
        self != DrawMode::Uniform
    }
}

/// Two distinct seeds for one generation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDraw {
    pub seed_a: SeedInstruction,
    pub seed_b: SeedInstruction,
    pub mode: DrawMode,
    /// Seed of the stream this draw was taken from.
    pub rng_seed: u64,
    pub draw_index: u64,
}

impl FewShotDraw {
    pub fn seed_ids(&self) -> [String; 2] {
        [self.seed_a.id.clone(), self.seed_b.id.clone()]
    }

    /// Shared category of a same-category draw.
    pub fn category(&self) -> Option<Category> {
        match (self.seed_a.category, self.seed_b.category) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        }
    }
}

/// Random access to the draw sequence of a pool: the draw at index `i`
/// depends only on the pool, mode, base seed, and `i`.
pub struct FewShotSampler<'a> {
    pool: &'a SeedPool,
    mode: DrawMode,
    rng_seed: u64,
    /// Eligible categories with their member indices, in taxonomy order.
    groups: Vec<(Category, Vec<usize>)>,
    /// Members of eligible categories, in pool order.
    eligible: Vec<usize>,
}

impl<'a> FewShotSampler<'a> {
    pub fn new(pool: &'a SeedPool, mode: DrawMode, rng_seed: u64) -> Result<Self, SeedError> {
        if pool.len() < 2 {
            return Err(SeedError::TooSmall(pool.len()));
        }
        let mut groups = Vec::new();
        let mut eligible = Vec::new();
        if mode.is_same_category() {
            let mut by_cat: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
            for (i, s) in pool.seeds.iter().enumerate() {
                if let Some(c) = s.category {
                    by_cat.entry(c).or_default().push(i);
                }
            }
            for (c, members) in by_cat {
                if members.len() < 2 {
                    log::warn!("category {c} has {} seed(s); excluded from same-category draws", members.len());
                    continue;
                }
                eligible.extend_from_slice(&members);
                groups.push((c, members));
            }
            if groups.is_empty() {
                return Err(SeedError::NoEligibleCategory);
            }
            eligible.sort_unstable();
        }
        Ok(FewShotSampler { pool, mode, rng_seed, groups, eligible })
    }

    pub fn eligible_categories(&self) -> Vec<Category> {
        self.groups.iter().map(|(c, _)| *c).collect()
    }

    pub fn draw(&self, draw_index: u64) -> FewShotDraw {
        let seed = derive_seed(self.rng_seed, &[tag("fewshot"), draw_index]);
        let mut rng = stream(seed);
        let (a, b) = match self.mode {
            DrawMode::Uniform => {
                let pick = index::sample(&mut rng, self.pool.len(), 2);
                (pick.index(0), pick.index(1))
            }
            DrawMode::SameCategory => {
                let members = &self.groups[rng.gen_range(0..self.groups.len())].1;
                let pick = index::sample(&mut rng, members.len(), 2);
                (members[pick.index(0)], members[pick.index(1)])
            }
            DrawMode::SameCategoryProportional => {
                let first = self.eligible[rng.gen_range(0..self.eligible.len())];
                let cat = self.pool.seeds[first].category;
                let members = &self.groups.iter().find(|(c, _)| Some(*c) == cat).expect("eligible seed has a group").1;
                let others: Vec<usize> = members.iter().copied().filter(|&m| m != first).collect();
                (first, others[rng.gen_range(0..others.len())])
            }
        };
        FewShotDraw {
            seed_a: self.pool.seeds[a].clone(),
            seed_b: self.pool.seeds[b].clone(),
            mode: self.mode,
            rng_seed: seed,
            draw_index,
        }
    }
}

/// The first `count` draws of the sequence keyed by `rng_seed`.
pub fn sample_fewshot(pool: &SeedPool, mode: DrawMode, rng_seed: u64, count: usize) -> Result<Vec<FewShotDraw>, SeedError> {
    let sampler = FewShotSampler::new(pool, mode, rng_seed)?;
    Ok((0..count as u64).map(|i| sampler.draw(i)).collect())
}

pub fn label_prompt(seed_text: &str) -> String {
    LABEL_PROMPT.replacen(LABEL_SLOT, seed_text.trim(), 1)
}

/// Maps a labeling reply to a category; anything outside the taxonomy is
/// `Miscellaneous`.
pub fn parse_label(reply: &str) -> Category {
    let line = reply.trim().lines().next().unwrap_or("").trim();
    let line = line.trim_start_matches(['-', '*', ' ']).trim_end_matches('.');
    Category::from_label(line).unwrap_or(Category::Miscellaneous)
}

/// Labels every uncategorized seed with one backend call each. Seeds that
/// already carry a category are left alone.
pub fn assign_categories(pool: &SeedPool, gateway: &Gateway, sampling: &SamplingParams) -> Result<SeedPool, SeedError> {
    let todo: Vec<usize> = (0..pool.len()).filter(|&i| pool.seeds[i].category.is_none()).collect();
    let requests: Vec<CompletionRequest> = todo
        .iter()
        .map(|&i| CompletionRequest::new(label_prompt(&pool.seeds[i].text), sampling.clone().with_n(1)))
        .collect();
    let replies = gateway.complete_batch(&requests);
    let mut seeds = pool.seeds.clone();
    for (&i, reply) in todo.iter().zip(replies) {
        let reply = reply?;
        seeds[i].category = Some(parse_label(&reply[0].text));
    }
    Ok(SeedPool { mode: pool.mode, seeds })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::dataset::write_records;
    use crate::gateway::mock::MockBackend;
    use crate::gateway::GatewayConfig;

    fn seed(id: &str, cat: Option<Category>) -> SeedInstruction {
        SeedInstruction { id: id.into(), text: format!("text of {id}"), category: cat, gold_answer: None }
    }

    #[test]
    fn verifiable_examples() {
        let with = |a: &str| SeedInstruction { gold_answer: Some(a.into()), ..seed("s", None) };
        for a in ["1", "A", "False", "2(n-1)(n-2)/(n(n+1))"] {
            assert!(verifiable_filter(&with(a)), "{a}");
        }
        assert!(!verifiable_filter(&with("We first show the claim holds for n = 1.\n\nThen by induction the result follows.")));
        assert!(!verifiable_filter(&with("")));
        assert!(!verifiable_filter(&seed("s", None)));
    }

    #[test]
    fn load_rejects_duplicates_with_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seeds.jsonl");
        let seeds = vec![seed("a", None), seed("b", None), seed("a", None)];
        write_records(&p, &seeds, false).unwrap();
        match load_seed_pool(&p, PoolMode::InstructionFollowing) {
            Err(SeedError::DuplicateId { id, first_line, second_line }) => {
                assert_eq!((id.as_str(), first_line, second_line), ("a", 1, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reasoning_pool_requires_gold_answers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seeds.jsonl");
        let good = SeedInstruction { gold_answer: Some("3/4".into()), ..seed("a", None) };
        write_records(&p, &[good.clone(), seed("b", None)], false).unwrap();
        assert!(matches!(load_seed_pool(&p, PoolMode::Reasoning), Err(SeedError::Unverifiable { line: 2, .. })));
        write_records(&p, &[good.clone(), SeedInstruction { id: "c".into(), ..good }], false).unwrap();
        assert_eq!(load_seed_pool(&p, PoolMode::Reasoning).unwrap().len(), 2);
    }

    #[test]
    fn two_seed_pool_gives_the_unique_pair() {
        let pool = SeedPool::new(PoolMode::InstructionFollowing, vec![seed("a", None), seed("b", None)]);
        for d in sample_fewshot(&pool, DrawMode::Uniform, 3, 20).unwrap() {
            let ids: BTreeSet<_> = d.seed_ids().into_iter().collect();
            assert_eq!(ids, ["a".to_string(), "b".to_string()].into());
        }
        let one = SeedPool::new(PoolMode::InstructionFollowing, vec![seed("a", None)]);
        assert!(matches!(sample_fewshot(&one, DrawMode::Uniform, 3, 1), Err(SeedError::TooSmall(1))));
    }

    #[test]
    fn draws_are_deterministic() {
        let pool = SeedPool::new(PoolMode::InstructionFollowing, (0..10).map(|i| seed(&i.to_string(), None)).collect());
        let a = sample_fewshot(&pool, DrawMode::Uniform, 42, 50).unwrap();
        assert_eq!(a, sample_fewshot(&pool, DrawMode::Uniform, 42, 50).unwrap());
        assert_ne!(a, sample_fewshot(&pool, DrawMode::Uniform, 43, 50).unwrap());
        assert!(a.iter().all(|d| d.seed_a.id != d.seed_b.id));
    }

    /// Two Writing seeds, two Data seeds, and a lone Technical seed.
    fn five_seed_pool() -> SeedPool {
        use Category::*;
        SeedPool::new(
            PoolMode::InstructionFollowing,
            vec![
                seed("w1", Some(WritingStorytelling)),
                seed("t1", Some(TechnicalProgramming)),
                seed("w2", Some(WritingStorytelling)),
                seed("d1", Some(DataAnalysis)),
                seed("d2", Some(DataAnalysis)),
            ],
        )
    }

    #[test]
    fn singleton_category_is_never_drawn() {
        let pool = five_seed_pool();
        let allowed: BTreeSet<(&str, &str)> =
            [("w1", "w2"), ("w2", "w1"), ("d1", "d2"), ("d2", "d1")].into_iter().collect();
        for mode in [DrawMode::SameCategory, DrawMode::SameCategoryProportional] {
            let sampler = FewShotSampler::new(&pool, mode, 5).unwrap();
            assert_eq!(sampler.eligible_categories(), [Category::WritingStorytelling, Category::DataAnalysis]);
            let mut seen = BTreeSet::new();
            for i in 0..400 {
                let d = sampler.draw(i);
                let pair = (d.seed_a.id.as_str(), d.seed_b.id.as_str());
                assert!(allowed.contains(&pair), "{pair:?}");
                assert!(d.category().is_some());
                seen.insert((d.seed_a.id.clone(), d.seed_b.id.clone()));
            }
            assert_eq!(seen.len(), 4, "every ordered eligible pair appears");
        }
    }

    #[test]
    fn category_draws_are_uniform() {
        use Category::*;
        let mut seeds = Vec::new();
        for (c, n) in [(WritingStorytelling, 40), (DataAnalysis, 2), (BusinessMarketing, 10), (Miscellaneous, 5)] {
            seeds.extend((0..n).map(|i| seed(&format!("{c}-{i}"), Some(c))));
        }
        let pool = SeedPool::new(PoolMode::InstructionFollowing, seeds);
        let draws = sample_fewshot(&pool, DrawMode::SameCategory, 11, 8000).unwrap();
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        for d in &draws {
            *counts.entry(d.category().unwrap()).or_default() += 1;
        }
        let expected = 8000.0 / 4.0;
        let chi2: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom; 16.27 is the 0.999 quantile
        assert!(chi2 < 16.27, "{counts:?} chi2={chi2}");
    }

    #[test]
    fn labels() {
        assert_eq!(parse_label("Writing & Storytelling"), Category::WritingStorytelling);
        assert_eq!(parse_label("  technical and programming.\nbecause"), Category::TechnicalProgramming);
        assert_eq!(parse_label("poetry"), Category::Miscellaneous);
        assert!(label_prompt("Write a short story").ends_with("Instruction:\nWrite a short story"));
    }

    #[test]
    fn assignment_is_plumbed_and_idempotent() {
        let mock = Arc::new(MockBackend::new(|req, _| {
            Ok(if req.prompt.contains("short story") { "Writing & Storytelling" } else { "poetry" }.to_string())
        }));
        let gw = Gateway::new(mock.clone(), GatewayConfig::default());
        let mut story = seed("a", None);
        story.text = "Write a short story about a lighthouse.".into();
        let pool = SeedPool::new(PoolMode::InstructionFollowing, vec![story, seed("b", None)]);
        let params = crate::gateway::preset_sampling(crate::gateway::SamplingProfile::IfGeneration);
        let labeled = assign_categories(&pool, &gw, &params).unwrap();
        assert_eq!(labeled.seeds()[0].category, Some(Category::WritingStorytelling));
        assert_eq!(labeled.seeds()[1].category, Some(Category::Miscellaneous));
        let calls = mock.calls();
        assert_eq!(assign_categories(&labeled, &gw, &params).unwrap(), labeled);
        assert_eq!(mock.calls(), calls);
    }
}
