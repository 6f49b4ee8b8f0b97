//! Run reports: retention funnel, answer kinds, and length percentiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{files, FunnelStage, GenerationReject, PipelineError, Result};
use crate::curation::{PreferencePair, SkippedPair};
use crate::dataset::{
    read_records, sniff_kind, write_atomic, CurationVerdict, DatasetError, DatasetSummary, Record, ResponseSample,
    SummaryBuilder, SyntheticRecord,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub draws: u64,
    pub records: u64,
    pub rejected: u64,
    pub reject_reasons: BTreeMap<String, u64>,
}

impl GenerationStats {
    pub fn reject_rate(&self) -> Option<f64> {
        (self.draws > 0).then(|| self.rejected as f64 / self.draws as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub generation: GenerationStats,
    pub summary: DatasetSummary,
    pub funnel: Vec<FunnelStage>,
    pub pairs: u64,
    pub pairs_skipped: u64,
    pub skip_reasons: BTreeMap<String, u64>,
}

fn each<T: Record>(path: &Path, mut f: impl FnMut(T)) -> Result<()> {
    for r in read_records::<T>(path)? {
        f(r?);
    }
    Ok(())
}

/// Files of a run directory that feed the report.
fn expand(dir: &Path) -> Vec<PathBuf> {
    let samples = if dir.join(files::SCORED).exists() { files::SCORED } else { files::ROLLOUTS };
    [files::RECORDS, files::REJECTS, samples, files::VERDICTS, files::PAIRS, files::PAIRS_SKIPPED]
        .into_iter()
        .map(|n| dir.join(n))
        .filter(|p| p.exists())
        .collect()
}

/// Builds a report over run directories and individual record files. Each
/// file's contents are identified by its `kind` field.
pub fn run_stats(paths: &[PathBuf]) -> Result<StatsReport> {
    let mut report = StatsReport::default();
    let mut builder = SummaryBuilder::default();
    let mut funnel_files = Vec::new();
    let mut inputs = Vec::new();
    for p in paths {
        if p.is_dir() {
            inputs.extend(expand(p));
            let f = p.join(files::FUNNEL);
            if f.exists() {
                funnel_files.push(f);
            }
        } else {
            inputs.push(p.clone());
        }
    }
    for path in &inputs {
        match sniff_kind(path)?.as_deref() {
            None => {}
            Some(SyntheticRecord::KIND) => each(path, |r: SyntheticRecord| {
                report.generation.records += 1;
                builder.add_record(&r);
            })?,
            Some(GenerationReject::KIND) => each(path, |r: GenerationReject| {
                report.generation.rejected += 1;
                *report.generation.reject_reasons.entry(r.reason).or_default() += 1;
            })?,
            Some(ResponseSample::KIND) => each(path, |s: ResponseSample| builder.add_sample(&s))?,
            Some(CurationVerdict::KIND) => each(path, |v: CurationVerdict| builder.add_verdict(&v))?,
            Some(PreferencePair::KIND) => each(path, |_: PreferencePair| report.pairs += 1)?,
            Some(SkippedPair::KIND) => each(path, |s: SkippedPair| {
                report.pairs_skipped += 1;
                *report.skip_reasons.entry(s.reason.as_str().to_string()).or_default() += 1;
            })?,
            Some(other) => {
                return Err(PipelineError::Dataset(DatasetError::Invalid {
                    path: path.clone(),
                    line: 1,
                    message: format!("no report for record kind {other:?}"),
                }))
            }
        }
    }
    report.generation.draws = report.generation.records + report.generation.rejected;
    report.summary = builder.finish();
    for f in funnel_files {
        let text = std::fs::read_to_string(&f).map_err(|e| DatasetError::Io { path: f.clone(), source: e })?;
        let stages: Vec<FunnelStage> = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            path: f.clone(),
            line: e.line(),
            offset: 0,
            message: e.to_string(),
        })?;
        report.funnel.extend(stages);
    }
    if report.funnel.is_empty() && report.summary.verdicts > 0 {
        let s = &report.summary;
        report.funnel.push(FunnelStage { stage: "curation".into(), input: s.verdicts, kept: s.kept });
    }
    Ok(report)
}

/// Writes `stats.json` for a run directory.
pub fn write_stats(dir: &Path) -> Result<StatsReport> {
    let report = run_stats(&[dir.to_path_buf()])?;
    let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(files::STATS), &bytes)?;
    Ok(report)
}

fn pct(r: Option<f64>) -> String {
    r.map(|r| format!("{:.1}%", r * 100.0)).unwrap_or_else(|| "n/a".into())
}

pub fn render_funnel(funnel: &[FunnelStage]) -> String {
    let mut out = String::new();
    for s in funnel {
        let _ = writeln!(out, "  {:<20} {:>8} -> {:>8}  {:>6}", s.stage, s.input, s.kept, pct(s.ratio()));
    }
    out
}

/// Human-readable rendering of a report.
pub fn render_report(r: &StatsReport) -> String {
    let mut out = String::new();
    let g = &r.generation;
    let _ = writeln!(out, "generation: {} draws, {} records, {} rejected ({})", g.draws, g.records, g.rejected, pct(g.reject_rate()));
    for (reason, n) in &g.reject_reasons {
        let _ = writeln!(out, "  {reason:<20} {n:>8}");
    }
    let s = &r.summary;
    if !r.funnel.is_empty() {
        let _ = writeln!(out, "funnel:");
        out.push_str(&render_funnel(&r.funnel));
    }
    if !s.per_answer_kind.is_empty() {
        let _ = writeln!(out, "answer kinds:");
        for (k, n) in &s.per_answer_kind {
            let _ = writeln!(out, "  {k:<20} {n:>8}");
        }
    }
    if !s.per_category.is_empty() {
        let _ = writeln!(out, "categories:");
        for (k, n) in &s.per_category {
            let _ = writeln!(out, "  {k:<24} {n:>8}");
        }
    }
    let q = &s.question_length;
    let _ = writeln!(out, "question chars: n={} min={} p50={} p90={} p99={} max={}", q.count, q.min, q.p50, q.p90, q.p99, q.max);
    let l = &s.sample_length;
    let _ = writeln!(
        out,
        "samples: {} ({} truncated); chars p50={} p90={} p99={} max={}",
        s.samples, s.truncated_samples, l.p50, l.p90, l.p99, l.max
    );
    let _ = writeln!(out, "verdicts: {} kept of {} ({})", s.kept, s.verdicts, pct(s.keep_ratio()));
    for (reason, n) in &s.per_reason {
        let _ = writeln!(out, "  {reason:<24} {n:>8}");
    }
    if r.pairs + r.pairs_skipped > 0 {
        let _ = writeln!(out, "pairs: {} built, {} skipped", r.pairs, r.pairs_skipped);
    }
    out
}
