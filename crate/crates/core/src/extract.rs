//! Pulls questions and answers out of raw model output.

use serde::{Deserialize, Serialize};

use crate::answer::{matching_brace, parse_answer, AnswerForm};
use crate::template::{
    Block, OutputGrammar, ANSWER_BEGIN, ANSWER_END, QUESTION_BEGIN, QUESTION_END, STEP3_MARKER, TASK_BEGIN,
    TASK_END,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedReason {
    MissingBlock,
    MultipleBlocks,
    EmptyQuestion,
    UnparseableAnswer,
}

impl MalformedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            MalformedReason::MissingBlock => "missing_block",
            MalformedReason::MultipleBlocks => "multiple_blocks",
            MalformedReason::EmptyQuestion => "empty_question",
            MalformedReason::UnparseableAnswer => "unparseable_answer",
        }
    }
}

/// Outcome of [`extract`]: either the grammar's fields or a malformation.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractionResult {
    WellFormed {
        question: String,
        answer: Option<AnswerForm>,
        /// Text preceding the first sentinel (the model's planning), if any.
        creation_cot: Option<String>,
    },
    Malformed(MalformedReason),
}

impl ExtractionResult {
    pub fn question(&self) -> Option<&str> {
        match self {
            ExtractionResult::WellFormed { question, .. } => Some(question),
            ExtractionResult::Malformed(_) => None,
        }
    }

    pub fn answer(&self) -> Option<&AnswerForm> {
        match self {
            ExtractionResult::WellFormed { answer, .. } => answer.as_ref(),
            ExtractionResult::Malformed(_) => None,
        }
    }

    pub fn malformed_reason(&self) -> Option<MalformedReason> {
        match self {
            ExtractionResult::Malformed(r) => Some(*r),
            ExtractionResult::WellFormed { .. } => None,
        }
    }
}

/// Content between the unique `begin`…`end` pair, with the byte index of
/// `begin`.
fn unique_block<'a>(text: &'a str, begin: &str, end: &str) -> Result<(usize, &'a str), MalformedReason> {
    let mut starts = text.match_indices(begin).map(|(i, _)| i);
    let start = starts.next().ok_or(MalformedReason::MissingBlock)?;
    if starts.next().is_some() {
        return Err(MalformedReason::MultipleBlocks);
    }
    let body_start = start + begin.len();
    let rel_end = text[body_start..].find(end).ok_or(MalformedReason::MissingBlock)?;
    if text[body_start + rel_end + end.len()..].contains(end) {
        return Err(MalformedReason::MultipleBlocks);
    }
    Ok((start, &text[body_start..body_start + rel_end]))
}

/// Splits off a leading `<think>…</think>` section.
fn split_think(raw: &str) -> (Option<&str>, &str) {
    let trimmed = raw.trim_start();
    if let Some(rest) = trimmed.strip_prefix("<think>") {
        if let Some(end) = rest.find("</think>") {
            return (Some(&rest[..end]), &rest[end + "</think>".len()..]);
        }
    }
    (None, raw)
}

pub fn extract(raw_output: &str, grammar: &OutputGrammar) -> ExtractionResult {
    match extract_inner(raw_output, grammar) {
        Ok(r) => r,
        Err(reason) => ExtractionResult::Malformed(reason),
    }
}

fn extract_inner(raw_output: &str, grammar: &OutputGrammar) -> Result<ExtractionResult, MalformedReason> {
    let (think, body) = split_think(raw_output);
    let (first_sentinel, question) = if grammar.requires(Block::Step3Block) {
        let mut hits = body.match_indices(STEP3_MARKER).map(|(i, _)| i);
        let at = hits.next().ok_or(MalformedReason::MissingBlock)?;
        if hits.next().is_some() {
            return Err(MalformedReason::MultipleBlocks);
        }
        (at, &body[at + STEP3_MARKER.len()..])
    } else if grammar.requires(Block::BeginEndBlock) {
        unique_block(body, TASK_BEGIN, TASK_END)?
    } else {
        unique_block(body, QUESTION_BEGIN, QUESTION_END)?
    };
    let question = question.trim();
    if question.is_empty() {
        return Err(MalformedReason::EmptyQuestion);
    }
    let answer = if grammar.requires(Block::AnswerBlock) {
        let (_, content) = unique_block(body, ANSWER_BEGIN, ANSWER_END)?;
        let inner = last_boxed(content).unwrap_or(content);
        Some(parse_answer(inner).ok_or(MalformedReason::UnparseableAnswer)?)
    } else {
        None
    };
    let before = body[..first_sentinel].trim().trim_end_matches('-').trim();
    let creation_cot = match (think.map(str::trim).filter(|t| !t.is_empty()), before.is_empty()) {
        (Some(t), true) => Some(t.to_string()),
        (Some(t), false) => Some(format!("{t}\n\n{before}")),
        (None, false) => Some(before.to_string()),
        (None, true) => None,
    };
    Ok(ExtractionResult::WellFormed { question: question.to_string(), answer, creation_cot })
}

/// Content of the last complete `\boxed{…}` in `text`.
pub fn last_boxed(text: &str) -> Option<&str> {
    let mut best: Option<&str> = None;
    let mut search = 0;
    while let Some(rel) = text[search..].find("\\boxed") {
        let after = search + rel + "\\boxed".len();
        let open = after + (text[after..].len() - text[after..].trim_start().len());
        if text[open..].starts_with('{') {
            if let Some(close) = matching_brace(text, open) {
                best = Some(&text[open + 1..close]);
                search = close + 1;
                continue;
            }
            // an unterminated box is the last box
            best = None;
            break;
        }
        search = after;
    }
    best
}

/// The final answer of a solution: the parse of its last boxed expression.
pub fn extract_rollout_answer(solution_text: &str) -> Option<AnswerForm> {
    last_boxed(solution_text).and_then(parse_answer)
}
