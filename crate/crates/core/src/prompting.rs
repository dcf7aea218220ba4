//! Byte-exact prompt construction for the three pipeline stages.
//!
//! Rendered grammar, with `\n` as the only line terminator:
//!
//! ```text
//! {head}
//! ===
//! Context: {caption}
//! Question: {question}
//! ...stage fields...
//! ===
//! Context: {caption}
//! Question: {question}
//! {cue}:
//! ```
//!
//! Every block (examples, then the input) is preceded by a `===` line. Field
//! order per stage:
//!
//! | stage | example fields | input ends with |
//! |-------|----------------|-----------------|
//! | 1 | Context, Question, Answer, Rationale | `Rationale:` |
//! | 2 | Context, Question, Rationale | `Rationale:` |
//! | 3 | Context, Question, Rationale, Answer | `Answer:` |
//! | 3 without rationale | Context, Question, Answer | `Answer:` |
//!
//! The final cue line has no trailing space and no trailing newline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_hash;

pub const SEPARATOR: &str = "===";

pub const DEFAULT_STAGE1_HEAD: &str =
    "Please generate the rationale according to the context, question and answer.";
pub const DEFAULT_STAGE2_HEAD: &str =
    "Please generate the rationale according to the context and question.";
pub const DEFAULT_STAGE3_HEAD: &str =
    "Please answer the question according to the context and rationale.";
pub const DEFAULT_STAGE3_ABLATION_HEAD: &str =
    "Please answer the question according to the context.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt head is empty")]
    EmptyHead,
    #[error("{block}: field `{field}` is required for {stage}")]
    MissingField {
        stage: PromptStage,
        block: BlockRef,
        field: Field,
    },
    #[error("{block}: field `{field}` is not allowed for {stage}")]
    UnexpectedField {
        stage: PromptStage,
        block: BlockRef,
        field: Field,
    },
    #[error("{block}: field `{field}` contains a line break")]
    MultilineField { block: BlockRef, field: Field },
    #[error("head contains a line break")]
    MultilineHead,
    #[error("malformed prompt text at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Seeds { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Stage1Rationale,
    Stage2Rationale,
    Stage3Answer,
}

impl PromptStage {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStage::Stage1Rationale => "stage1_rationale",
            PromptStage::Stage2Rationale => "stage2_rationale",
            PromptStage::Stage3Answer => "stage3_answer",
        }
    }
}

impl std::fmt::Display for PromptStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Context,
    Question,
    Answer,
    Rationale,
}

impl Field {
    pub fn label(self) -> &'static str {
        match self {
            Field::Context => "Context",
            Field::Question => "Question",
            Field::Answer => "Answer",
            Field::Rationale => "Rationale",
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef {
    Example(usize),
    Input,
}

impl std::fmt::Display for BlockRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockRef::Example(i) => write!(f, "example {i}"),
            BlockRef::Input => f.write_str("input"),
        }
    }
}

/// One solved example or the unsolved input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleBlock {
    pub caption: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl ExampleBlock {
    pub fn new(
        caption: impl Into<String>,
        question: impl Into<String>,
        answer: Option<String>,
        rationale: Option<String>,
    ) -> Self {
        Self {
            caption: caption.into(),
            question: question.into(),
            answer,
            rationale,
        }
    }

    fn get(&self, f: Field) -> Option<&str> {
        match f {
            Field::Context => Some(&self.caption),
            Field::Question => Some(&self.question),
            Field::Answer => self.answer.as_deref(),
            Field::Rationale => self.rationale.as_deref(),
        }
    }
}

/// Field layout for one prompt variant.
#[derive(Debug, Clone, Copy)]
struct Layout {
    example: &'static [Field],
    input: &'static [Field],
    cue: Field,
}

const STAGE1: Layout = Layout {
    example: &[Field::Context, Field::Question, Field::Answer, Field::Rationale],
    input: &[Field::Context, Field::Question, Field::Answer],
    cue: Field::Rationale,
};
const STAGE2: Layout = Layout {
    example: &[Field::Context, Field::Question, Field::Rationale],
    input: &[Field::Context, Field::Question],
    cue: Field::Rationale,
};
const STAGE3: Layout = Layout {
    example: &[Field::Context, Field::Question, Field::Rationale, Field::Answer],
    input: &[Field::Context, Field::Question, Field::Rationale],
    cue: Field::Answer,
};
const STAGE3_NO_RATIONALE: Layout = Layout {
    example: &[Field::Context, Field::Question, Field::Answer],
    input: &[Field::Context, Field::Question],
    cue: Field::Answer,
};

fn layout(stage: PromptStage, no_rationale: bool) -> Layout {
    match (stage, no_rationale) {
        (PromptStage::Stage1Rationale, _) => STAGE1,
        (PromptStage::Stage2Rationale, _) => STAGE2,
        (PromptStage::Stage3Answer, false) => STAGE3,
        (PromptStage::Stage3Answer, true) => STAGE3_NO_RATIONALE,
    }
}

const ALL_FIELDS: [Field; 4] = [Field::Context, Field::Question, Field::Answer, Field::Rationale];

/// A validated prompt. Construct with [`build_stage1`], [`build_stage2`] or
/// [`build_stage3`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    stage: PromptStage,
    no_rationale: bool,
    head: String,
    examples: Vec<ExampleBlock>,
    input: ExampleBlock,
    rendered: String,
    rendered_hash: String,
}

impl Prompt {
    fn new(
        stage: PromptStage,
        no_rationale: bool,
        head: &str,
        examples: Vec<ExampleBlock>,
        input: ExampleBlock,
    ) -> Result<Self, PromptError> {
        if head.trim().is_empty() {
            return Err(PromptError::EmptyHead);
        }
        if head.contains(['\n', '\r']) {
            return Err(PromptError::MultilineHead);
        }
        let lay = layout(stage, no_rationale);
        for (i, ex) in examples.iter().enumerate() {
            check_block(stage, BlockRef::Example(i), ex, lay.example)?;
        }
        check_block(stage, BlockRef::Input, &input, lay.input)?;
        let mut p = Self {
            stage,
            no_rationale,
            head: head.to_owned(),
            examples,
            input,
            rendered: String::new(),
            rendered_hash: String::new(),
        };
        p.rendered = render_blocks(&p.head, &p.examples, &p.input, lay);
        p.rendered_hash = content_hash(&p.rendered);
        Ok(p)
    }

    pub fn stage(&self) -> PromptStage {
        self.stage
    }

    pub fn is_ablation(&self) -> bool {
        self.no_rationale
    }

    pub fn head(&self) -> &str {
        &self.head
    }

    pub fn examples(&self) -> &[ExampleBlock] {
        &self.examples
    }

    pub fn input(&self) -> &ExampleBlock {
        &self.input
    }

    /// The rendered text.
    pub fn render(&self) -> &str {
        &self.rendered
    }

    /// SHA-256 hex of [`Prompt::render`].
    pub fn rendered_hash(&self) -> &str {
        &self.rendered_hash
    }
}

fn check_block(
    stage: PromptStage,
    block: BlockRef,
    b: &ExampleBlock,
    allowed: &[Field],
) -> Result<(), PromptError> {
    for field in ALL_FIELDS {
        match (b.get(field), allowed.contains(&field)) {
            (Some(v), true) => {
                if v.trim().is_empty() {
                    return Err(PromptError::MissingField { stage, block, field });
                }
                if v.contains(['\n', '\r']) {
                    return Err(PromptError::MultilineField { block, field });
                }
            }
            (None, true) => return Err(PromptError::MissingField { stage, block, field }),
            (Some(_), false) => return Err(PromptError::UnexpectedField { stage, block, field }),
            (None, false) => {}
        }
    }
    Ok(())
}

fn render_blocks(head: &str, examples: &[ExampleBlock], input: &ExampleBlock, lay: Layout) -> String {
    let mut out = String::with_capacity(256 * (examples.len() + 1));
    out.push_str(head);
    out.push('\n');
    let field_line = |out: &mut String, b: &ExampleBlock, f: Field| {
        // presence checked at construction
        let _ = writeln!(out, "{}: {}", f.label(), b.get(f).unwrap_or_default());
    };
    for ex in examples {
        out.push_str(SEPARATOR);
        out.push('\n');
        for &f in lay.example {
            field_line(&mut out, ex, f);
        }
    }
    out.push_str(SEPARATOR);
    out.push('\n');
    for &f in lay.input {
        field_line(&mut out, input, f);
    }
    out.push_str(lay.cue.label());
    out.push(':');
    out
}

/// Render a prompt. Equivalent to [`Prompt::render`].
pub fn render(p: &Prompt) -> &str {
    p.render()
}

/// Context, Question, Answer, Rationale examples; the input carries its gold answer.
pub fn build_stage1(
    head: &str,
    examples: Vec<ExampleBlock>,
    input: ExampleBlock,
) -> Result<Prompt, PromptError> {
    Prompt::new(PromptStage::Stage1Rationale, false, head, examples, input)
}

/// Context, Question, Rationale examples; no answers anywhere.
pub fn build_stage2(
    head: &str,
    examples: Vec<ExampleBlock>,
    input: ExampleBlock,
) -> Result<Prompt, PromptError> {
    Prompt::new(PromptStage::Stage2Rationale, false, head, examples, input)
}

/// Context, Question, Rationale, Answer examples. With `no_rationale` every
/// block must omit its rationale and the layout drops the field.
pub fn build_stage3(
    head: &str,
    examples: Vec<ExampleBlock>,
    input: ExampleBlock,
    no_rationale: bool,
) -> Result<Prompt, PromptError> {
    Prompt::new(PromptStage::Stage3Answer, no_rationale, head, examples, input)
}

/// A rendered prompt split back into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub head: String,
    pub examples: Vec<ExampleBlock>,
    pub input: ExampleBlock,
    /// Label of the trailing bare cue line.
    pub cue: String,
}

/// Inverse of rendering: recovers head, example blocks, input block and cue.
pub fn parse_rendered(text: &str) -> Result<ParsedPrompt, PromptError> {
    let lines: Vec<&str> = text.split('\n').collect();
    let perr = |line: usize, message: &str| PromptError::Parse {
        line,
        message: message.to_owned(),
    };
    let head = lines.first().copied().unwrap_or_default().to_owned();
    let mut blocks: Vec<Vec<(usize, &str)>> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if *line == SEPARATOR {
            blocks.push(Vec::new());
        } else {
            blocks
                .last_mut()
                .ok_or_else(|| perr(i + 1, "expected separator after head"))?
                .push((i + 1, line));
        }
    }
    let mut input_lines = blocks.pop().ok_or_else(|| perr(1, "no blocks"))?;
    let (cue_line, cue) = input_lines.pop().ok_or_else(|| perr(lines.len(), "empty input block"))?;
    let cue = cue
        .strip_suffix(':')
        .filter(|c| !c.contains(' '))
        .ok_or_else(|| perr(cue_line, "last line is not a bare cue"))?
        .to_owned();
    let parse_block = |b: &[(usize, &str)]| -> Result<ExampleBlock, PromptError> {
        let mut out = ExampleBlock::new("", "", None, None);
        for &(n, line) in b {
            let (label, value) = line
                .split_once(": ")
                .ok_or_else(|| perr(n, "expected `Label: value`"))?;
            match label {
                "Context" => out.caption = value.to_owned(),
                "Question" => out.question = value.to_owned(),
                "Answer" => out.answer = Some(value.to_owned()),
                "Rationale" => out.rationale = Some(value.to_owned()),
                _ => return Err(perr(n, "unknown label")),
            }
        }
        Ok(out)
    };
    Ok(ParsedPrompt {
        head,
        examples: blocks.iter().map(|b| parse_block(b)).collect::<Result<_, _>>()?,
        input: parse_block(&input_lines)?,
        cue,
    })
}

/// Stage-1 seed example: a fully written solved block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExample {
    pub caption: String,
    pub question: String,
    pub answer: String,
    pub rationale: String,
}

impl SeedExample {
    pub fn to_block(&self) -> ExampleBlock {
        ExampleBlock::new(
            self.caption.clone(),
            self.question.clone(),
            Some(self.answer.clone()),
            Some(self.rationale.clone()),
        )
    }
}

const BUILTIN_SEEDS: &str = include_str!("../data/seeds.jsonl");

/// The stage-1 seed examples shipped with the crate.
pub fn default_seeds() -> Vec<SeedExample> {
    BUILTIN_SEEDS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("built-in seeds parse"))
        .collect()
}

/// Reads a line-delimited seed-example file.
pub fn load_seeds(path: &Path) -> Result<Vec<SeedExample>, PromptError> {
    let seeds_err = |message: String| PromptError::Seeds {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| seeds_err(e.to_string()))?;
    let mut seeds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seed: SeedExample =
            serde_json::from_str(line).map_err(|e| seeds_err(format!("line {}: {e}", i + 1)))?;
        check_block(
            PromptStage::Stage1Rationale,
            BlockRef::Example(seeds.len()),
            &seed.to_block(),
            STAGE1.example,
        )
        .map_err(|e| seeds_err(format!("line {}: {e}", i + 1)))?;
        seeds.push(seed);
    }
    if seeds.is_empty() {
        return Err(seeds_err("no seed examples".into()));
    }
    Ok(seeds)
}
