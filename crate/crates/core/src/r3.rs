//! Retrieve-Realize-Repeat output: alternating entity-plan and sentence lines.
//!
//! ```text
//! ### Entities 1: {{span}} {{span}}
//! ### Sentence 1: <sentence 1>
//! ### Entities 2: {{span}}
//! ### Sentence 2: <sentence 2>
//! ```
//!
//! The summary is the sentence lines joined with single spaces.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EmbeddingCache, EmbeddingProvider, EntityError, EntityExtractor, EntitySpan};
use crate::esg::Esg;
use crate::guide::{strip_tags, TaggedSource, CLOSE_TAG, OPEN_TAG};

const ENTITIES_PREFIX: &str = "### Entities";
const SENTENCE_PREFIX: &str = "### Sentence";

#[derive(Debug, Error)]
pub enum R3Error {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("output ended after line {line}: {message}")]
    Truncated { line: usize, message: String },
    #[error("oracle plans require a reference summary")]
    MissingReference,
    #[error(transparent)]
    Entity(#[from] EntityError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePlan {
    pub index: usize,
    pub planned_entities: Vec<String>,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeerOutput {
    pub plans: Vec<SentencePlan>,
    pub summary: String,
}

impl SpeerOutput {
    pub fn from_plans(plans: Vec<SentencePlan>) -> Self {
        let summary = plans.iter().map(|p| p.sentence.as_str()).collect::<Vec<_>>().join(" ");
        Self { plans, summary }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

impl std::str::FromStr for ParseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(ParseMode::Strict),
            "lenient" => Ok(ParseMode::Lenient),
            other => Err(format!("unknown parse mode {other:?}")),
        }
    }
}

pub fn serialize_r3(plans: &[SentencePlan]) -> String {
    let mut out = String::new();
    for p in plans {
        out.push_str(&format!("{ENTITIES_PREFIX} {}:", p.index));
        for e in &p.planned_entities {
            out.push_str(&format!(" {OPEN_TAG}{e}{CLOSE_TAG}"));
        }
        out.push('\n');
        out.push_str(&format!("{SENTENCE_PREFIX} {}: {}\n", p.index, p.sentence));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineKind {
    Entities,
    Sentence,
}

/// `### Entities <k>: rest` / `### Sentence <k>: rest`.
struct Tagged<'a> {
    kind: LineKind,
    index: Result<usize, String>,
    rest: Result<&'a str, String>,
}

fn classify(line: &str) -> Option<Tagged<'_>> {
    let (kind, after) = if let Some(a) = line.strip_prefix(ENTITIES_PREFIX) {
        (LineKind::Entities, a)
    } else if let Some(a) = line.strip_prefix(SENTENCE_PREFIX) {
        (LineKind::Sentence, a)
    } else {
        return None;
    };
    let Some((idx, rest)) = after.split_once(':') else {
        return Some(Tagged {
            kind,
            index: Err("missing ':' after index".into()),
            rest: Err("missing ':'".into()),
        });
    };
    let idx = idx.trim();
    let index = idx
        .parse::<usize>()
        .map_err(|_| format!("invalid index {idx:?}"))
        .and_then(|i| if i == 0 { Err("index must start at 1".into()) } else { Ok(i) });
    Some(Tagged {
        kind,
        index,
        rest: Ok(rest),
    })
}

/// Parses `{{a}} {{b}}`; anything outside tags is an error.
pub fn parse_entity_list(rest: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut s = rest.trim_start();
    while !s.is_empty() {
        let Some(after_open) = s.strip_prefix(OPEN_TAG) else {
            return Err(format!("unexpected text {s:?} outside {{{{ }}}}"));
        };
        let Some(close) = after_open.find(CLOSE_TAG) else {
            return Err("unclosed '{{'".into());
        };
        let inner = &after_open[..close];
        if inner.contains(OPEN_TAG) {
            return Err("nested '{{'".into());
        }
        if inner.trim().is_empty() {
            return Err("empty entity".into());
        }
        out.push(inner.to_owned());
        s = after_open[close + CLOSE_TAG.len()..].trim_start();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedR3 {
    pub output: SpeerOutput,
    pub warnings: Vec<String>,
}

pub fn parse_r3(text: &str, mode: ParseMode) -> Result<ParsedR3, R3Error> {
    match mode {
        ParseMode::Strict => parse_strict(text).map(|output| ParsedR3 {
            output,
            warnings: Vec::new(),
        }),
        ParseMode::Lenient => Ok(parse_lenient(text)),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end()))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_strict(text: &str) -> Result<SpeerOutput, R3Error> {
    let bad = |line: usize, message: String| R3Error::Malformed { line, message };
    let mut plans = Vec::new();
    let mut pending: Option<(usize, Vec<String>)> = None;
    let mut last_line = 0;

    for (no, line) in lines(text) {
        last_line = no;
        let Some(tagged) = classify(line) else {
            return Err(bad(no, format!("expected '{ENTITIES_PREFIX}' or '{SENTENCE_PREFIX}' line, found {line:?}")));
        };
        let index = tagged.index.map_err(|m| bad(no, m))?;
        let rest = tagged.rest.map_err(|m| bad(no, m))?;
        match (tagged.kind, pending.take()) {
            (LineKind::Entities, None) => {
                let expected = plans.len() + 1;
                if index != expected {
                    return Err(bad(no, format!("expected index {expected}, found {index}")));
                }
                let entities = parse_entity_list(rest).map_err(|m| bad(no, m))?;
                pending = Some((index, entities));
            }
            (LineKind::Entities, Some((k, _))) => {
                return Err(bad(no, format!("expected '{SENTENCE_PREFIX} {k}:' before the next entity plan")));
            }
            (LineKind::Sentence, None) => {
                return Err(bad(no, format!("expected '{ENTITIES_PREFIX} {}:' before a sentence", plans.len() + 1)));
            }
            (LineKind::Sentence, Some((k, entities))) => {
                if index != k {
                    return Err(bad(no, format!("expected index {k}, found {index}")));
                }
                let sentence = rest.trim();
                if sentence.is_empty() {
                    return Err(bad(no, "empty sentence".into()));
                }
                plans.push(SentencePlan {
                    index,
                    planned_entities: entities,
                    sentence: sentence.to_owned(),
                });
            }
        }
    }
    if let Some((k, _)) = pending {
        return Err(R3Error::Truncated {
            line: last_line,
            message: format!("'{ENTITIES_PREFIX} {k}:' has no sentence"),
        });
    }
    Ok(SpeerOutput::from_plans(plans))
}

/// Harvests every sentence line in order, pairing it with the entity line
/// right before it when that line parses. Never fails; every deviation from
/// the strict grammar becomes a warning.
fn parse_lenient(text: &str) -> ParsedR3 {
    let mut warnings = Vec::new();
    let mut plans: Vec<SentencePlan> = Vec::new();
    let mut pending: Option<Vec<String>> = None;

    for (no, line) in lines(text) {
        let Some(tagged) = classify(line) else {
            warnings.push(format!("line {no}: ignored unrecognized text {line:?}"));
            continue;
        };
        let expected = plans.len() + 1;
        match tagged.index {
            Ok(i) if i != expected => warnings.push(format!("line {no}: expected index {expected}, found {i}")),
            Err(m) => warnings.push(format!("line {no}: {m}")),
            Ok(_) => {}
        }
        match tagged.kind {
            LineKind::Entities => {
                if pending.is_some() {
                    warnings.push(format!("line {no}: entity plan without a sentence discarded"));
                }
                pending = Some(match tagged.rest.and_then(parse_entity_list) {
                    Ok(e) => e,
                    Err(m) => {
                        warnings.push(format!("line {no}: malformed entity plan ({m}); using an empty plan"));
                        Vec::new()
                    }
                });
            }
            LineKind::Sentence => {
                let sentence = match tagged.rest {
                    Ok(r) => r.trim(),
                    Err(_) => line[SENTENCE_PREFIX.len()..].trim_start_matches(|c: char| c.is_ascii_digit() || c.is_whitespace()),
                };
                let entities = pending.take().unwrap_or_else(|| {
                    warnings.push(format!("line {no}: sentence without an entity plan"));
                    Vec::new()
                });
                if sentence.is_empty() {
                    warnings.push(format!("line {no}: empty sentence skipped"));
                    continue;
                }
                plans.push(SentencePlan {
                    index: plans.len() + 1,
                    planned_entities: entities,
                    sentence: sentence.to_owned(),
                });
            }
        }
    }
    if pending.is_some() {
        warnings.push("trailing entity plan without a sentence".into());
    }
    ParsedR3 {
        output: SpeerOutput::from_plans(plans),
        warnings,
    }
}

pub trait SentenceSplitter: Send + Sync {
    /// Character ranges of each sentence, trimmed of surrounding whitespace.
    fn split(&self, text: &str) -> Vec<(usize, usize)>;
}

/// Breaks after `.`, `!` or `?` when followed by whitespace and then an
/// uppercase letter or digit, unless the word ending there is on the
/// abbreviation stoplist. Line breaks also end a sentence.
#[derive(Debug, Clone)]
pub struct RuleSentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for RuleSentenceSplitter {
    fn default() -> Self {
        Self {
            abbreviations: ["dr.", "mg.", "vs.", "pt."].into_iter().map(String::from).collect(),
        }
    }
}

impl RuleSentenceSplitter {
    fn is_abbreviation(&self, chars: &[char], dot: usize) -> bool {
        let start = chars[..dot]
            .iter()
            .rposition(|c| c.is_whitespace())
            .map_or(0, |p| p + 1);
        let word: String = chars[start..=dot].iter().flat_map(|c| c.to_lowercase()).collect();
        self.abbreviations.contains(&word)
    }
}

impl SentenceSplitter for RuleSentenceSplitter {
    fn split(&self, text: &str) -> Vec<(usize, usize)> {
        let chars: Vec<char> = text.chars().collect();
        let mut cuts = Vec::new();
        for i in 0..chars.len() {
            let c = chars[i];
            if c == '\n' {
                cuts.push(i + 1);
            } else if matches!(c, '.' | '!' | '?') {
                let ws_end = chars[i + 1..]
                    .iter()
                    .position(|c| !c.is_whitespace())
                    .map(|p| i + 1 + p);
                if let Some(j) = ws_end {
                    let next = chars[j];
                    if j > i + 1 && (next.is_uppercase() || next.is_ascii_digit()) && !(c == '.' && self.is_abbreviation(&chars, i)) {
                        cuts.push(i + 1);
                    }
                }
            }
        }
        cuts.push(chars.len());
        let mut out = Vec::new();
        let mut start = 0;
        for cut in cuts {
            if cut <= start {
                continue;
            }
            let mut s = start;
            let mut e = cut;
            while s < e && chars[s].is_whitespace() {
                s += 1;
            }
            while e > s && chars[e - 1].is_whitespace() {
                e -= 1;
            }
            if s < e {
                out.push((s, e));
            }
            start = cut;
        }
        out
    }
}

fn char_slice(chars: &[char], range: (usize, usize)) -> String {
    chars[range.0..range.1].iter().collect()
}

/// Per-sentence plans from the reference: each sentence lists, left to
/// right, its mentions that are exact matches or ≥ `threshold` synonyms of a
/// surface in some salient ESG. Duplicates within a sentence are kept.
pub fn extract_oracle_plans(
    reference: Option<&str>,
    salient_esgs: &[Esg],
    extractor: &dyn EntityExtractor,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
    splitter: &dyn SentenceSplitter,
) -> Result<Vec<SentencePlan>, R3Error> {
    let reference = reference.ok_or(R3Error::MissingReference)?;
    let chars: Vec<char> = reference.chars().collect();
    let surfaces: Vec<&str> = salient_esgs.iter().flat_map(|e| e.surfaces.iter().map(String::as_str)).collect();
    let mut cache = EmbeddingCache::new(provider);
    let mut plans = Vec::new();
    for (k, range) in splitter.split(reference).into_iter().enumerate() {
        let sentence = char_slice(&chars, range);
        let mut planned = Vec::new();
        for m in extractor.extract("reference", &sentence)? {
            let mut hit = false;
            for s in &surfaces {
                if cache.is_synonym(&m.surface, s, threshold)? {
                    hit = true;
                    break;
                }
            }
            if hit {
                planned.push(m.surface);
            }
        }
        plans.push(SentencePlan {
            index: k + 1,
            planned_entities: planned,
            sentence: collapse_whitespace(&sentence),
        });
    }
    Ok(plans)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// LLM-free generator: walks salient ESGs by frequency rank and, for each one
/// not yet covered, emits the source sentence holding its first tagged
/// mention. The plan lists every salient ESG first mentioned in that
/// sentence, which then count as covered.
pub fn mock_generate(tagged: &TaggedSource, salient_esgs: &[Esg], splitter: &dyn SentenceSplitter) -> SpeerOutput {
    let untagged = tagged.untagged();
    let chars: Vec<char> = untagged.chars().collect();
    let sentences = splitter.split(&untagged);
    let ranges = tagged.untagged_ranges();
    let sentence_of = |pos: usize| sentences.iter().position(|&(s, e)| s <= pos && pos < e);

    let salient: HashSet<usize> = salient_esgs.iter().map(|e| e.esg_id).collect();
    let mut order: Vec<&Esg> = salient_esgs.iter().collect();
    order.sort_by_key(|e| (e.freq_rank.unwrap_or(usize::MAX), e.esg_id));

    let mut covered: HashSet<usize> = HashSet::new();
    let mut plans = Vec::new();
    for esg in order {
        if covered.contains(&esg.esg_id) {
            continue;
        }
        let Some(first) = tagged.tagged_spans.iter().position(|t| t.esg_id == esg.esg_id) else {
            continue;
        };
        let Some(sid) = sentence_of(ranges[first].0) else {
            continue;
        };
        let (s, e) = sentences[sid];
        let mut planned = Vec::new();
        for (k, t) in tagged.tagged_spans.iter().enumerate() {
            let (ms, _) = ranges[k];
            if ms >= s && ms < e && salient.contains(&t.esg_id) && covered.insert(t.esg_id) {
                planned.push(t.surface.clone());
            }
        }
        plans.push(SentencePlan {
            index: plans.len() + 1,
            planned_entities: planned,
            sentence: collapse_whitespace(&char_slice(&chars, (s, e))),
        });
    }
    SpeerOutput::from_plans(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Synonym,
    None,
}

impl MatchKind {
    pub fn matched(self) -> bool {
        self != MatchKind::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCheck {
    pub surface: String,
    pub grounded: MatchKind,
    pub realized: MatchKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub index: usize,
    pub entities: Vec<EntityCheck>,
    pub unplanned: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTotals {
    pub planned: usize,
    pub grounded_exact: usize,
    pub grounded_synonym: usize,
    pub realized_exact: usize,
    pub realized_synonym: usize,
    pub unplanned: usize,
}

impl PlanTotals {
    pub fn grounded(&self) -> usize {
        self.grounded_exact + self.grounded_synonym
    }

    pub fn realized(&self) -> usize {
        self.realized_exact + self.realized_synonym
    }

    pub fn add(&mut self, other: &PlanTotals) {
        self.planned += other.planned;
        self.grounded_exact += other.grounded_exact;
        self.grounded_synonym += other.grounded_synonym;
        self.realized_exact += other.realized_exact;
        self.realized_synonym += other.realized_synonym;
        self.unplanned += other.unplanned;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValidationReport {
    pub plans: Vec<PlanCheck>,
    pub totals: PlanTotals,
}

fn best_match(cache: &mut EmbeddingCache<'_>, surface: &str, pool: &[String], threshold: f64) -> Result<MatchKind, EntityError> {
    if pool.iter().any(|p| p == surface) {
        return Ok(MatchKind::Exact);
    }
    for p in pool {
        if cache.similarity(surface, p)? >= threshold {
            return Ok(MatchKind::Synonym);
        }
    }
    Ok(MatchKind::None)
}

/// Checks each plan against the tagged source (grounding) and its own
/// sentence (realization), reporting exact and synonym matches separately.
pub fn validate_plans(
    output: &SpeerOutput,
    tagged: &TaggedSource,
    extractor: &dyn EntityExtractor,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<PlanValidationReport, R3Error> {
    let tagged_surfaces: Vec<String> = {
        let mut seen = HashSet::new();
        tagged
            .tagged_spans
            .iter()
            .filter(|t| seen.insert(t.surface.as_str()))
            .map(|t| t.surface.clone())
            .collect()
    };
    let mut cache = EmbeddingCache::new(provider);
    let mut totals = PlanTotals::default();
    let mut checks = Vec::with_capacity(output.plans.len());
    for plan in &output.plans {
        let sentence_spans: Vec<EntitySpan> = extractor.extract("sentence", &strip_tags(&plan.sentence))?;
        let sentence_surfaces: Vec<String> = sentence_spans.iter().map(|s| s.surface.clone()).collect();
        let mut entities = Vec::with_capacity(plan.planned_entities.len());
        for surface in &plan.planned_entities {
            let grounded = best_match(&mut cache, surface, &tagged_surfaces, threshold)?;
            let realized = best_match(&mut cache, surface, &sentence_surfaces, threshold)?;
            totals.planned += 1;
            match grounded {
                MatchKind::Exact => totals.grounded_exact += 1,
                MatchKind::Synonym => totals.grounded_synonym += 1,
                MatchKind::None => {}
            }
            match realized {
                MatchKind::Exact => totals.realized_exact += 1,
                MatchKind::Synonym => totals.realized_synonym += 1,
                MatchKind::None => {}
            }
            entities.push(EntityCheck {
                surface: surface.clone(),
                grounded,
                realized,
            });
        }
        let mut unplanned = Vec::new();
        for s in &sentence_surfaces {
            if !best_match(&mut cache, s, &plan.planned_entities, threshold)?.matched() {
                unplanned.push(s.clone());
            }
        }
        totals.unplanned += unplanned.len();
        checks.push(PlanCheck {
            index: plan.index,
            entities,
            unplanned,
        });
    }
    Ok(PlanValidationReport { plans: checks, totals })
}

/// Model-output JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputRecord {
    pub admission_id: String,
    pub mode: crate::guide::Mode,
    pub output: String,
}

/// Parsed-output JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub admission_id: String,
    pub mode: crate::guide::Mode,
    pub summary: String,
    pub plans: Vec<SentencePlan>,
    pub warnings: Vec<String>,
}
