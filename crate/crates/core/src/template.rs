//! Prompt templates for instruction generation.
//!
//! The template texts live in `templates/<id>.txt` and are embedded at build
//! time; [`TemplateSet::from_dir`] loads replacements from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::FewShotDraw;

pub const PLACEHOLDER_1: &str = "{INSTRUCTION 1}";
pub const PLACEHOLDER_2: &str = "{INSTRUCTION 2}";

pub const QUESTION_BEGIN: &str = "[New Question Begin]";
pub const QUESTION_END: &str = "[New Question End]";
pub const ANSWER_BEGIN: &str = "[Final Answer to New Question Begin]";
pub const ANSWER_END: &str = "[Final Answer to New Question End]";
pub const TASK_BEGIN: &str = "<begin>";
pub const TASK_END: &str = "</end>";
pub const STEP3_MARKER: &str = "Step 3 #Synthetic Prompt#:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ReasoningCotSolve,
    ReasoningSelfInstruct,
    ReasoningCotNosolve,
    ReasoningSelfInstructThenSolve,
    IfLongCot,
    IfShortCot,
    IfNoCot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::ReasoningCotSolve,
        TemplateId::ReasoningSelfInstruct,
        TemplateId::ReasoningCotNosolve,
        TemplateId::ReasoningSelfInstructThenSolve,
        TemplateId::IfLongCot,
        TemplateId::IfShortCot,
        TemplateId::IfNoCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ReasoningCotSolve => "reasoning_cot_solve",
            TemplateId::ReasoningSelfInstruct => "reasoning_self_instruct",
            TemplateId::ReasoningCotNosolve => "reasoning_cot_nosolve",
            TemplateId::ReasoningSelfInstructThenSolve => "reasoning_self_instruct_then_solve",
            TemplateId::IfLongCot => "if_long_cot",
            TemplateId::IfShortCot => "if_short_cot",
            TemplateId::IfNoCot => "if_no_cot",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    /// Templates that ask the model to answer its own question.
    pub fn produces_target(self) -> bool {
        matches!(self, TemplateId::ReasoningCotSolve | TemplateId::ReasoningSelfInstructThenSolve)
    }

    pub fn is_reasoning(self) -> bool {
        matches!(
            self,
            TemplateId::ReasoningCotSolve
                | TemplateId::ReasoningSelfInstruct
                | TemplateId::ReasoningCotNosolve
                | TemplateId::ReasoningSelfInstructThenSolve
        )
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateId::ReasoningCotSolve => include_str!("../templates/reasoning_cot_solve.txt"),
            TemplateId::ReasoningSelfInstruct => include_str!("../templates/reasoning_self_instruct.txt"),
            TemplateId::ReasoningCotNosolve => include_str!("../templates/reasoning_cot_nosolve.txt"),
            TemplateId::ReasoningSelfInstructThenSolve => {
                include_str!("../templates/reasoning_self_instruct_then_solve.txt")
            }
            TemplateId::IfLongCot => include_str!("../templates/if_long_cot.txt"),
            TemplateId::IfShortCot => include_str!("../templates/if_short_cot.txt"),
            TemplateId::IfNoCot => include_str!("../templates/if_no_cot.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

/// A sentinel-delimited region the extractor must locate in model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    QuestionBlock,
    AnswerBlock,
    BeginEndBlock,
    Step3Block,
}

impl Block {
    pub fn sentinels(self) -> &'static [&'static str] {
        match self {
            Block::QuestionBlock => &[QUESTION_BEGIN, QUESTION_END],
            Block::AnswerBlock => &[ANSWER_BEGIN, ANSWER_END],
            Block::BeginEndBlock => &[TASK_BEGIN, TASK_END],
            Block::Step3Block => &[STEP3_MARKER],
        }
    }
}

/// The set of blocks a template's output is expected to contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputGrammar {
    pub blocks: BTreeSet<Block>,
}

impl OutputGrammar {
    pub fn requires(&self, block: Block) -> bool {
        self.blocks.contains(&block)
    }

    pub fn sentinels(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.blocks.iter().flat_map(|b| b.sentinels().iter().copied())
    }
}

pub fn expected_output_grammar(id: TemplateId) -> OutputGrammar {
    let blocks: &[Block] = match id {
        TemplateId::ReasoningCotSolve | TemplateId::ReasoningSelfInstructThenSolve => {
            &[Block::QuestionBlock, Block::AnswerBlock]
        }
        TemplateId::ReasoningSelfInstruct | TemplateId::ReasoningCotNosolve => &[Block::QuestionBlock],
        TemplateId::IfNoCot | TemplateId::IfShortCot => &[Block::BeginEndBlock],
        TemplateId::IfLongCot => &[Block::Step3Block],
    };
    OutputGrammar { blocks: blocks.iter().copied().collect() }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("seed {slot} is empty")]
    EmptySeed { slot: usize },
    #[error("marker_collision: seed {slot} contains the sentinel {marker:?}")]
    MarkerCollision { slot: usize, marker: &'static str },
    #[error("template {template} must contain each placeholder exactly once")]
    BadPlaceholders { template: TemplateId },
    #[error("template {template}: {message}")]
    Load { template: TemplateId, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub text: String,
}

/// The seven template texts, keyed by id.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let texts = TemplateId::ALL.into_iter().map(|id| (id, id.builtin_text().to_string())).collect();
        TemplateSet { texts }
    }

    /// Loads `<id>.txt` for each template that exists in `dir`; missing files
    /// fall back to the built-in text. `\r\n` is normalized to `\n`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| TemplateError::Load { template: id, message: e.to_string() })?;
            let text = text.replace("\r\n", "\n");
            check_placeholders(id, &text)?;
            set.texts.insert(id, text);
        }
        Ok(set)
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    pub fn render(&self, id: TemplateId, draw: &FewShotDraw) -> Result<RenderedPrompt, TemplateError> {
        self.render_texts(id, &draw.seed_a.text, &draw.seed_b.text)
    }

    /// Substitutes the two seed texts into the template in a single pass, so
    /// placeholder-like text inside a seed is never re-expanded.
    pub fn render_texts(&self, id: TemplateId, first: &str, second: &str) -> Result<RenderedPrompt, TemplateError> {
        let grammar = expected_output_grammar(id);
        let seeds = [first.trim(), second.trim()];
        for (i, seed) in seeds.iter().enumerate() {
            if seed.is_empty() {
                return Err(TemplateError::EmptySeed { slot: i + 1 });
            }
            if let Some(marker) = grammar.sentinels().find(|m| seed.contains(m)) {
                return Err(TemplateError::MarkerCollision { slot: i + 1, marker });
            }
        }
        let template = self.text(id);
        let p1 = template.find(PLACEHOLDER_1).ok_or(TemplateError::BadPlaceholders { template: id })?;
        let p2 = template.find(PLACEHOLDER_2).ok_or(TemplateError::BadPlaceholders { template: id })?;
        let mut slots = [(p1, PLACEHOLDER_1.len(), seeds[0]), (p2, PLACEHOLDER_2.len(), seeds[1])];
        slots.sort_by_key(|s| s.0);
        let mut text = String::with_capacity(template.len() + first.len() + second.len());
        let mut cursor = 0;
        for (pos, len, seed) in slots {
            text.push_str(&template[cursor..pos]);
            text.push_str(seed);
            cursor = pos + len;
        }
        text.push_str(&template[cursor..]);
        Ok(RenderedPrompt { template_id: id, text })
    }
}

fn check_placeholders(id: TemplateId, text: &str) -> Result<(), TemplateError> {
    let ok = text.matches(PLACEHOLDER_1).count() == 1 && text.matches(PLACEHOLDER_2).count() == 1;
    if ok {
        Ok(())
    } else {
        Err(TemplateError::BadPlaceholders { template: id })
    }
}
