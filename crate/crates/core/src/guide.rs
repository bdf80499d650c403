//! Model inputs for the three generation modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{concatenate_notes, Admission};
use crate::entity::{EntitySpan, SemanticType};
use crate::esg::Esg;

pub const OPEN_TAG: &str = "{{";
pub const CLOSE_TAG: &str = "}}";
pub const GENERATION_CUE: &str = "### BRIEF HOSPITAL COURSE:\n";

pub const NON_GUIDED_INSTRUCTION: &str = "Generate the BRIEF HOSPITAL COURSE summary.";
pub const GUIDED_INSTRUCTION: &str =
    "Generate the BRIEF HOSPITAL COURSE summary using only the medical entities (PROBLEMS, TREATMENTS, and TESTS) provided.";
pub const SPEER_INSTRUCTION: &str = "Retrieve a subset of the medical entities in double brackets {{ }} and use them to generate the next sentence of the BRIEF HOSPITAL COURSE summary.";

#[derive(Debug, Error)]
pub enum GuideError {
    #[error("span {index} [{start}, {end}) ({surface:?}) is out of bounds for text of {len} chars")]
    OutOfBounds {
        index: usize,
        start: usize,
        end: usize,
        surface: String,
        len: usize,
    },
    #[error("span {index} [{start}, {end}) overlaps or precedes the previous span")]
    Unordered { index: usize, start: usize, end: usize },
    #[error("span {index} surface {surface:?} does not match the text")]
    SurfaceMismatch { index: usize, surface: String },
    #[error("{0} mode requires {1}")]
    MissingGuidance(Mode, &'static str),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    NonGuided,
    Guided,
    Speer,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NonGuided, Mode::Guided, Mode::Speer];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NonGuided => "NON_GUIDED",
            Mode::Guided => "GUIDED",
            Mode::Speer => "SPEER",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Mode::NonGuided => NON_GUIDED_INSTRUCTION,
            Mode::Guided => GUIDED_INSTRUCTION,
            Mode::Speer => SPEER_INSTRUCTION,
        }
    }

    /// Generation length limit recorded with each built input. Sentence
    /// plans double the allowance.
    pub fn max_new_tokens(self) -> usize {
        match self {
            Mode::Speer => 2048,
            _ => 1024,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = GuideError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "NON_GUIDED" => Ok(Mode::NonGuided),
            "GUIDED" => Ok(Mode::Guided),
            "SPEER" => Ok(Mode::Speer),
            _ => Err(GuideError::UnknownMode(s.to_owned())),
        }
    }
}

/// Salient ESGs grouped by type; each entry is the ESG's surfaces joined by
/// `"; "`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceList {
    pub problems: Vec<String>,
    pub treatments: Vec<String>,
    pub tests: Vec<String>,
}

impl GuidanceList {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, (title, entries)) in [("PROBLEMS", &self.problems), ("TREATMENTS", &self.treatments), ("TESTS", &self.tests)]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(title);
            out.push_str(":\n");
            for e in entries {
                out.push_str(e);
                out.push('\n');
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.problems.len() + self.treatments.len() + self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Groups salient ESGs under their semantic type. With a seed the ESG order
/// is shuffled deterministically (training); without one, input order is
/// kept (inference).
pub fn build_guidance(salient_esgs: &[Esg], seed: Option<u64>) -> GuidanceList {
    let mut order: Vec<&Esg> = salient_esgs.iter().collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut list = GuidanceList::default();
    for esg in order {
        let entry = esg.surfaces.join("; ");
        match esg.semantic_type {
            SemanticType::Problem => list.problems.push(entry),
            SemanticType::Treatment => list.treatments.push(entry),
            SemanticType::Test => list.tests.push(entry),
        }
    }
    list
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSpan {
    /// Character offsets of `{{surface}}` in the tagged text.
    pub start: usize,
    pub end: usize,
    pub esg_id: usize,
    /// Surface as it appears between the tags.
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSource {
    pub text: String,
    pub tagged_spans: Vec<TaggedSpan>,
}

impl TaggedSource {
    /// The tagged text with tags removed.
    pub fn untagged(&self) -> String {
        strip_tags(&self.text)
    }

    /// Character offsets of each tagged surface in [`Self::untagged`].
    pub fn untagged_ranges(&self) -> Vec<(usize, usize)> {
        self.tagged_spans
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let start = s.start - 4 * k;
                (start, start + s.surface.chars().count())
            })
            .collect()
    }
}

/// Separates adjacent identical braces with a space so that `{{` and `}}`
/// never occur in untagged text.
pub fn escape_braces(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev = None;
    for c in text.chars() {
        if (c == '{' || c == '}') && prev == Some(c) {
            out.push(' ');
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

/// Removes every `{{` and `}}`, scanning left to right.
pub fn strip_tags(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if i + 1 < chars.len() && (chars[i] == '{' || chars[i] == '}') && chars[i + 1] == chars[i] {
            i += 2;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

/// Wraps each mention in `{{ }}`. The source is brace-escaped first; offsets
/// of the input spans refer to the unescaped text.
pub fn embed_tags(text: &str, mentions: &[(&EntitySpan, usize)]) -> Result<TaggedSource, GuideError> {
    let chars: Vec<char> = text.chars().collect();
    let mut prev_end = 0;
    for (index, (span, _)) in mentions.iter().enumerate() {
        if span.start >= span.end || span.end > chars.len() {
            return Err(GuideError::OutOfBounds {
                index,
                start: span.start,
                end: span.end,
                surface: span.surface.clone(),
                len: chars.len(),
            });
        }
        if index > 0 && span.start < prev_end {
            return Err(GuideError::Unordered {
                index,
                start: span.start,
                end: span.end,
            });
        }
        if chars[span.start..span.end].iter().collect::<String>() != span.surface {
            return Err(GuideError::SurfaceMismatch {
                index,
                surface: span.surface.clone(),
            });
        }
        prev_end = span.end;
    }

    let mut out = String::with_capacity(text.len() + 4 * mentions.len());
    let mut out_len = 0usize;
    let mut next = mentions.iter().peekable();
    let mut open: Option<(usize, usize, String)> = None;
    let mut tagged_spans = Vec::with_capacity(mentions.len());
    let mut prev_literal: Option<char> = None;

    for (i, &c) in chars.iter().enumerate() {
        if let Some((_, end_at, _)) = &open {
            if *end_at == i {
                let (start, _, surface) = open.take().expect("open span");
                out.push_str(CLOSE_TAG);
                out_len += 2;
                let (_, esg_id) = next.next().expect("span being closed");
                tagged_spans.push(TaggedSpan {
                    start,
                    end: out_len,
                    esg_id: *esg_id,
                    surface,
                });
            }
        }
        // The escape space goes before the brace, outside any span.
        if (c == '{' || c == '}') && prev_literal == Some(c) {
            out.push(' ');
            out_len += 1;
        }
        if open.is_none() {
            if let Some((span, _)) = next.peek() {
                if span.start == i {
                    open = Some((out_len, span.end, String::new()));
                    out.push_str(OPEN_TAG);
                    out_len += 2;
                }
            }
        }
        out.push(c);
        out_len += 1;
        if let Some((_, _, surface)) = &mut open {
            if (c == '{' || c == '}') && surface.ends_with(c) {
                surface.push(' ');
            }
            surface.push(c);
        }
        prev_literal = Some(c);
    }
    if let Some((start, _, surface)) = open.take() {
        out.push_str(CLOSE_TAG);
        out_len += 2;
        let (_, esg_id) = next.next().expect("span being closed");
        tagged_spans.push(TaggedSpan {
            start,
            end: out_len,
            esg_id: *esg_id,
            surface,
        });
    }

    Ok(TaggedSource {
        text: out,
        tagged_spans,
    })
}

/// Every mention of every given ESG, sorted by start, paired with its ESG id.
pub fn salient_mentions(salient_esgs: &[Esg]) -> Vec<(&EntitySpan, usize)> {
    let mut out: Vec<(&EntitySpan, usize)> = salient_esgs
        .iter()
        .flat_map(|e| e.mentions.iter().map(move |m| (m, e.esg_id)))
        .collect();
    out.sort_by_key(|(m, _)| (m.start, m.end));
    out
}

/// Role markers wrapped around the prompt for a given model family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatTemplate {
    pub system_prefix: String,
    pub user_prefix: String,
    pub user_suffix: String,
    pub assistant_prefix: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            system_prefix: String::new(),
            user_prefix: String::new(),
            user_suffix: "\n\n".into(),
            assistant_prefix: String::new(),
        }
    }
}

/// `system_prefix + user_prefix + instruction + source [+ guidance] +
/// user_suffix + assistant_prefix + "### BRIEF HOSPITAL COURSE:\n"`.
///
/// The source is the concatenated notes, or the tagged text in SPEER mode.
pub fn build_input(
    mode: Mode,
    admission: &Admission,
    guidance: Option<&GuidanceList>,
    tagged: Option<&TaggedSource>,
    template: &ChatTemplate,
) -> Result<String, GuideError> {
    let source = match mode {
        Mode::Speer => tagged
            .ok_or(GuideError::MissingGuidance(mode, "a tagged source"))?
            .text
            .clone(),
        _ => escape_braces(&concatenate_notes(admission)),
    };
    let mut body = format!("{}\n\n{}", mode.instruction(), source);
    if mode == Mode::Guided {
        let g = guidance.ok_or(GuideError::MissingGuidance(mode, "a guidance list"))?;
        body.push_str("\n\n");
        body.push_str(&g.render());
    }
    Ok(format!(
        "{}{}{}{}{}{}",
        template.system_prefix, template.user_prefix, body, template.user_suffix, template.assistant_prefix, GENERATION_CUE
    ))
}

/// One line of the built-input JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltInput {
    pub admission_id: String,
    pub mode: Mode,
    pub input: String,
    pub oracle_target: Option<String>,
    pub max_new_tokens: usize,
}
