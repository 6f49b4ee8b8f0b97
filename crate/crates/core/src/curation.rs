//! Filters and target builders over sampled responses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{answers_equivalent, AnswerForm};
use crate::dataset::{CurationVerdict, Record, ResponseSample, SyntheticRecord, VerdictReason};

pub const DEFAULT_SC_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RIP_QUANTILE: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("record {0} has no target answer; answer consistency needs a solve template")]
    MissingTarget(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("keep quantile {0} outside [0, 1)")]
    BadQuantile(f64),
    #[error("record {record_id}: reward {value} is not finite")]
    NonFiniteReward { record_id: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub representative: AnswerForm,
    pub count: usize,
    pub members: Vec<usize>,
}

/// Answers grouped into equivalence clusters. Clusters are in founding
/// order; `total` counts every sample, including unparseable ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoteTally {
    pub clusters: Vec<Cluster>,
    pub total: usize,
}

impl VoteTally {
    /// Largest cluster; the earliest-founded wins ties.
    pub fn majority(&self) -> Option<&Cluster> {
        self.clusters.iter().fold(None, |best: Option<&Cluster>, c| match best {
            Some(b) if b.count >= c.count => Some(b),
            _ => Some(c),
        })
    }

    pub fn sc_rate(&self) -> f64 {
        match (self.majority(), self.total) {
            (Some(m), t) if t > 0 => m.count as f64 / t as f64,
            _ => 0.0,
        }
    }
}

/// Greedy first-fit clustering: each answer joins the first cluster whose
/// representative it is equivalent to, else founds a new one.
pub fn tally_answers<'a>(answers: impl IntoIterator<Item = Option<&'a AnswerForm>>) -> VoteTally {
    let mut tally = VoteTally::default();
    for (i, answer) in answers.into_iter().enumerate() {
        tally.total += 1;
        let Some(a) = answer else { continue };
        match tally.clusters.iter_mut().find(|c| answers_equivalent(&c.representative, a)) {
            Some(c) => {
                c.count += 1;
                c.members.push(i);
            }
            None => tally.clusters.push(Cluster { representative: a.clone(), count: 1, members: vec![i] }),
        }
    }
    tally
}

/// Tallies the final answers of `samples`. Truncated samples count toward
/// the total but never vote.
pub fn tally_votes(samples: &[ResponseSample]) -> VoteTally {
    tally_answers(samples.iter().map(|s| if s.truncated { None } else { s.answer.as_ref() }))
}

fn check_unit(t: f64) -> Result<(), CurationError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CurationError::BadThreshold(t))
    }
}

/// Keeps iff a majority exists and `majority / K >= threshold`.
pub fn self_consistency_filter(record_id: &str, tally: &VoteTally, threshold: f64) -> Result<CurationVerdict, CurationError> {
    check_unit(threshold)?;
    let mut v = CurationVerdict::keep(record_id);
    v.sc_rate = Some(tally.sc_rate());
    v.majority_answer = tally.majority().map(|m| m.representative.clone());
    if v.majority_answer.is_none() || tally.sc_rate() < threshold {
        v = v.drop_with(VerdictReason::ScBelowThreshold);
    }
    Ok(v)
}

/// Keeps iff the majority answer is equivalent to the record's target.
pub fn answer_consistency_filter(record: &SyntheticRecord, tally: &VoteTally) -> Result<CurationVerdict, CurationError> {
    let target = record.target_answer.as_ref().ok_or_else(|| CurationError::MissingTarget(record.id.clone()))?;
    let mut v = CurationVerdict::keep(&record.id);
    v.sc_rate = Some(tally.sc_rate());
    v.majority_answer = tally.majority().map(|m| m.representative.clone());
    let agrees = v.majority_answer.as_ref().is_some_and(|m| answers_equivalent(m, target));
    if !agrees {
        v = v.drop_with(VerdictReason::MajorityTargetMismatch);
    }
    Ok(v)
}

/// The majority answer, for records whose target is set by vote.
pub fn majority_vote_target(tally: &VoteTally) -> Option<AnswerForm> {
    tally.majority().map(|m| m.representative.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipVerdict {
    pub prompt_score: f64,
    /// Fraction of the batch scoring strictly lower.
    pub quantile_rank: f64,
    pub kept: bool,
}

/// A prompt's score: the lowest reward among its responses.
pub fn rip_prompt_score(rewards: &[f64]) -> Option<f64> {
    rewards.iter().copied().reduce(f64::min)
}

/// The score a prompt needs to survive: the `(⌊q·n⌋ + 1)`-th smallest score,
/// so that for distinct scores exactly `n − ⌊q·n⌋` prompts are kept.
pub fn rip_cutoff(scores: &[f64], keep_quantile: f64) -> Result<Option<f64>, CurationError> {
    if !(0.0..1.0).contains(&keep_quantile) {
        return Err(CurationError::BadQuantile(keep_quantile));
    }
    if scores.is_empty() {
        return Ok(None);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((keep_quantile * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok(Some(sorted[rank]))
}

/// RIP over a batch: one verdict per entry of `rewards` (each the rewards of
/// one prompt's responses, non-empty). Prompts tied at the cut are kept.
pub fn rip_filter(rewards: &[Vec<f64>], keep_quantile: f64) -> Result<Vec<RipVerdict>, CurationError> {
    for (i, rs) in rewards.iter().enumerate() {
        if let Some(&bad) = rs.iter().find(|r| !r.is_finite()) {
            return Err(CurationError::NonFiniteReward { record_id: format!("#{i}"), value: bad });
        }
    }
    let scores: Vec<f64> = rewards.iter().map(|rs| rip_prompt_score(rs).expect("non-empty rewards")).collect();
    let cut = rip_cutoff(&scores, keep_quantile)?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .map(|&s| RipVerdict {
            prompt_score: s,
            quantile_rank: sorted.partition_point(|&x| x < s) as f64 / n,
            kept: cut.is_some_and(|c| s >= c),
        })
        .collect())
}

fn usable(samples: &[ResponseSample]) -> impl Iterator<Item = (usize, &ResponseSample, f64)> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.truncated)
        .filter_map(|(i, s)| s.reward.filter(|r| r.is_finite()).map(|r| (i, s, r)))
}

/// Index of the highest-reward sample; ties go to the shorter, then the
/// earlier sample. Truncated and unscored samples are ignored.
pub fn best_of_k(samples: &[ResponseSample]) -> Option<usize> {
    usable(samples)
        .min_by(|(i, a, ra), (j, b, rb)| rb.total_cmp(ra).then(a.length_chars.cmp(&b.length_chars)).then(i.cmp(j)))
        .map(|(i, _, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSkip {
    /// Fewer than two scored, untruncated samples.
    TooFewSamples,
    /// The rule picked the same sample for both sides.
    Degenerate,
}

impl PairSkip {
    pub fn as_str(self) -> &'static str {
        match self {
            PairSkip::TooFewSamples => "too_few_samples",
            PairSkip::Degenerate => "degenerate",
        }
    }
}

/// A rule choosing (chosen, rejected) sample indices from scored samples.
pub trait PairStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn select(&self, samples: &[ResponseSample]) -> Result<(usize, usize), PairSkip>;
}

/// Chosen: the shortest sample whose reward is within `rho·(max − min)` of
/// the best. Rejected: the lowest reward, ties to the longest then earliest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthBand {
    pub rho: f64,
}

impl PairStrategy for LengthBand {
    fn name(&self) -> &'static str {
        "length_band"
    }

    fn select(&self, samples: &[ResponseSample]) -> Result<(usize, usize), PairSkip> {
        let pool: Vec<_> = usable(samples).collect();
        if pool.len() < 2 {
            return Err(PairSkip::TooFewSamples);
        }
        let max = pool.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        let min = pool.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let band = max - self.rho * (max - min);
        let chosen = pool
            .iter()
            .filter(|p| p.2 >= band)
            .min_by(|(i, a, ra), (j, b, rb)| a.length_chars.cmp(&b.length_chars).then(rb.total_cmp(ra)).then(i.cmp(j)))
            .expect("the best sample is in the band")
            .0;
        let rejected = pool
            .iter()
            .min_by(|(i, a, ra), (j, b, rb)| ra.total_cmp(rb).then(b.length_chars.cmp(&a.length_chars)).then(i.cmp(j)))
            .expect("non-empty")
            .0;
        if chosen == rejected {
            return Err(PairSkip::Degenerate);
        }
        Ok((chosen, rejected))
    }
}

/// Alternative rule: rank by min-max normalized reward minus
/// `rho · length / max_length`; chosen is the best, rejected the worst.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthPenalty {
    pub rho: f64,
}

impl PairStrategy for LengthPenalty {
    fn name(&self) -> &'static str {
        "length_penalty"
    }

    fn select(&self, samples: &[ResponseSample]) -> Result<(usize, usize), PairSkip> {
        let pool: Vec<_> = usable(samples).collect();
        if pool.len() < 2 {
            return Err(PairSkip::TooFewSamples);
        }
        let max = pool.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        let min = pool.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let longest = pool.iter().map(|p| p.1.length_chars).max().unwrap_or(0).max(1) as f64;
        let score = |r: f64, len: u64| {
            let norm = if max > min { (r - min) / (max - min) } else { 0.0 };
            norm - self.rho * len as f64 / longest
        };
        let scored: Vec<(usize, f64)> = pool.iter().map(|(i, s, r)| (*i, score(*r, s.length_chars))).collect();
        let chosen = scored.iter().min_by(|(i, a), (j, b)| b.total_cmp(a).then(i.cmp(j))).unwrap().0;
        let rejected = scored.iter().min_by(|(i, a), (j, b)| a.total_cmp(b).then(i.cmp(j))).unwrap().0;
        if chosen == rejected {
            return Err(PairSkip::Degenerate);
        }
        Ok((chosen, rejected))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub record_id: String,
    pub prompt: String,
    pub chosen: ResponseSample,
    pub rejected: ResponseSample,
    pub rho: f64,
    pub strategy: String,
}

impl Record for PreferencePair {
    const KIND: &'static str = "preference_pair";

    fn record_id(&self) -> &str {
        &self.record_id
    }

    fn validate(&self) -> Result<(), String> {
        if self.chosen.sample_index == self.rejected.sample_index {
            return Err("chosen and rejected are the same sample".into());
        }
        if self.chosen.reward.is_none() || self.rejected.reward.is_none() {
            return Err("pair member without a reward".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub record_id: String,
    pub reason: PairSkip,
}

impl Record for SkippedPair {
    const KIND: &'static str = "skipped_pair";

    fn record_id(&self) -> &str {
        &self.record_id
    }
}

pub fn build_pair_with(
    strategy: &dyn PairStrategy,
    record_id: &str,
    prompt: &str,
    samples: &[ResponseSample],
    rho: f64,
) -> Result<PreferencePair, PairSkip> {
    let (c, r) = strategy.select(samples)?;
    Ok(PreferencePair {
        record_id: record_id.to_string(),
        prompt: prompt.to_string(),
        chosen: samples[c].clone(),
        rejected: samples[r].clone(),
        rho,
        strategy: strategy.name().to_string(),
    })
}

/// One preference pair under the [`LengthBand`] rule.
pub fn build_dpo_pair(record_id: &str, prompt: &str, samples: &[ResponseSample], rho: f64) -> Result<PreferencePair, PairSkip> {
    build_pair_with(&LengthBand { rho }, record_id, prompt, samples, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::parse_answer;

    fn answers(xs: &[&str]) -> Vec<Option<AnswerForm>> {
        xs.iter().map(|x| parse_answer(x)).collect()
    }

    fn tally(xs: &[&str]) -> VoteTally {
        let a = answers(xs);
        tally_answers(a.iter().map(Option::as_ref))
    }

    pub(crate) fn scored(rewards: &[f64], lengths: &[usize]) -> Vec<ResponseSample> {
        rewards
            .iter()
            .zip(lengths)
            .enumerate()
            .map(|(i, (&r, &len))| {
                let mut s = ResponseSample::new("r", i as u32, "x".repeat(len));
                s.reward = Some(r);
                s
            })
            .collect()
    }

    #[test]
    fn nine_of_sixteen() {
        let mut xs = vec!["42"; 9];
        xs.extend(["41", "40", "41", "oops", "39", "38", "37"]);
        let t = tally(&xs);
        assert_eq!(t.total, 16);
        assert_eq!(t.majority().unwrap().count, 9);
        assert_eq!(t.sc_rate(), 0.5625);
        let counted: usize = t.clusters.iter().map(|c| c.count).sum();
        assert_eq!(counted, 15);
    }

    #[test]
    fn equivalent_forms_share_a_cluster() {
        let t = tally(&["1/2", "2/4", "0.5"]);
        assert_eq!(t.clusters.len(), 1);
        assert_eq!(t.clusters[0].members, [0, 1, 2]);
        let none = tally(&["prose", "more prose"]);
        assert!(none.majority().is_none());
        assert_eq!(none.sc_rate(), 0.0);
    }

    #[test]
    fn ties_go_to_the_first_cluster() {
        let t = tally(&["3", "4", "4", "3"]);
        assert_eq!(t.majority().unwrap().representative.canonical(), "3");
    }

    #[test]
    fn truncated_samples_count_but_do_not_vote() {
        let mut samples: Vec<_> = (0..4)
            .map(|i| {
                let mut s = ResponseSample::new("r", i, "\\boxed{7}");
                s.answer = parse_answer("7");
                s
            })
            .collect();
        samples[3].truncated = true;
        let t = tally_votes(&samples);
        assert_eq!((t.total, t.majority().unwrap().count), (4, 3));
    }

    fn sc(agree: usize, k: usize) -> CurationVerdict {
        let mut xs = vec!["5"; agree];
        xs.extend((0..k - agree).map(|_| "nope"));
        self_consistency_filter("r", &tally(&xs), DEFAULT_SC_THRESHOLD).unwrap()
    }

    #[test]
    fn sc_boundary_is_inclusive() {
        assert!(sc(8, 16).is_kept());
        assert_eq!(sc(8, 16).sc_rate, Some(0.5));
        let v = sc(7, 16);
        assert_eq!(v.reason, VerdictReason::ScBelowThreshold);
        assert!(!self_consistency_filter("r", &tally(&["x y"]), 0.5).unwrap().is_kept());
        assert!(self_consistency_filter("r", &tally(&["1"]), 1.5).is_err());
    }

    fn record_with_target(target: Option<&str>) -> SyntheticRecord {
        use crate::dataset::SamplingParams;
        use crate::template::TemplateId;
        SyntheticRecord {
            id: "rec".into(),
            template_id: TemplateId::ReasoningCotSolve,
            seed_ids: ["a".into(), "b".into()],
            category: None,
            draw_index: 0,
            sampling: SamplingParams { temperature: 0.6, top_p: 0.95, max_tokens: 16, n: 1, rng_seed: 0 },
            question: "q".into(),
            target_answer: target.and_then(parse_answer),
            target_response: None,
            creation_cot: None,
            raw_output: String::new(),
        }
    }

    #[test]
    fn answer_consistency() {
        let keep = answer_consistency_filter(&record_with_target(Some("4")), &tally(&["4", "4", "5"])).unwrap();
        assert!(keep.is_kept());
        let drop = answer_consistency_filter(&record_with_target(Some("4")), &tally(&["5", "5", "4"])).unwrap();
        assert_eq!(drop.reason, VerdictReason::MajorityTargetMismatch);
        let empty = answer_consistency_filter(&record_with_target(Some("4")), &tally(&["?"])).unwrap();
        assert!(!empty.is_kept());
        assert!(matches!(
            answer_consistency_filter(&record_with_target(None), &tally(&["4"])),
            Err(CurationError::MissingTarget(_))
        ));
    }

    #[test]
    fn rip_examples() {
        assert_eq!(rip_prompt_score(&[0.2, 0.5, 0.9]), Some(0.2));
        let kept = |scores: &[f64]| -> Vec<f64> {
            let rewards: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s]).collect();
            rip_filter(&rewards, 0.5).unwrap().iter().filter(|v| v.kept).map(|v| v.prompt_score).collect()
        };
        assert_eq!(kept(&[1.0, 2.0, 3.0, 4.0]), [3.0, 4.0]);
        assert_eq!(kept(&[1.0, 3.0, 2.0, 3.0, 4.0]), [3.0, 3.0, 4.0]);
        assert_eq!(kept(&[]), Vec::<f64>::new());
        assert!(rip_filter(&[vec![1.0]], 1.0).is_err());
        assert!(rip_filter(&[vec![f64::NAN]], 0.5).is_err());
        let v = rip_filter(&[vec![1.0], vec![2.0]], 0.5).unwrap();
        assert_eq!((v[0].quantile_rank, v[1].quantile_rank), (0.0, 0.5));
    }

    #[test]
    fn best_of_k_rules() {
        assert_eq!(best_of_k(&scored(&[1.0, 3.0, 2.0], &[5, 5, 5])), Some(1));
        assert_eq!(best_of_k(&scored(&[3.0, 3.0], &[120, 80])), Some(1));
        assert_eq!(best_of_k(&scored(&[3.0, 3.0], &[80, 80])), Some(0));
        assert_eq!(best_of_k(&scored(&[-1.0], &[3])), Some(0));
        assert_eq!(best_of_k(&[]), None);
    }

    #[test]
    fn dpo_worked_example() {
        let s = scored(&[10.0, 9.9, 5.0], &[900, 300, 200]);
        let p = build_dpo_pair("r", "p", &s, 0.2).unwrap();
        assert_eq!((p.chosen.sample_index, p.rejected.sample_index), (1, 2));
    }

    #[test]
    fn dpo_edge_cases() {
        let strict = build_dpo_pair("r", "p", &scored(&[10.0, 9.9, 5.0], &[900, 300, 200]), 0.0).unwrap();
        assert_eq!(strict.chosen.sample_index, 0);
        let even = build_dpo_pair("r", "p", &scored(&[1.0, 1.0], &[50, 20]), 0.2).unwrap();
        assert_eq!((even.chosen.sample_index, even.rejected.sample_index), (1, 0));
        assert_eq!(build_dpo_pair("r", "p", &scored(&[1.0, 1.0], &[20, 20]), 0.2), Err(PairSkip::Degenerate));
        assert_eq!(build_dpo_pair("r", "p", &scored(&[1.0], &[20]), 0.2), Err(PairSkip::TooFewSamples));
    }

    #[test]
    fn length_penalty_alternative() {
        let s = scored(&[10.0, 9.9, 5.0], &[900, 300, 200]);
        let p = build_pair_with(&LengthPenalty { rho: 0.2 }, "r", "p", &s, 0.2).unwrap();
        assert_eq!((p.chosen.sample_index, p.rejected.sample_index, p.strategy.as_str()), (1, 2, "length_penalty"));
    }
}
