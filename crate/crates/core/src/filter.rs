//! Coarse section filtering to a token budget.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{concatenate_notes, render_note_header, Admission, Note, Tokenizer};

pub const DEFAULT_BUDGET: usize = 8192;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("section scoring requires a non-empty reference")]
    MissingReference,
    #[error("{sections} sections but {scores} scores")]
    Misaligned { sections: usize, scores: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A header line (without its line terminator) and everything up to the next
/// header line. `header + body` reproduces the original text exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub note_id: String,
    pub ordinal: usize,
    pub header: String,
    pub body: String,
}

impl Section {
    pub fn text(&self) -> String {
        format!("{}{}", self.header, self.body)
    }
}

/// Section-start rule: at most six words, and either ends with `:` or at
/// least 80% of its letters are uppercase.
pub fn is_header_line(line: &str) -> bool {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.split_whitespace().count() > 6 {
        return false;
    }
    if trimmed.ends_with(':') {
        return true;
    }
    let letters = trimmed.chars().filter(|c| c.is_alphabetic());
    let (upper, total) = letters.fold((0usize, 0usize), |(u, t), c| (u + usize::from(c.is_uppercase()), t + 1));
    total > 0 && upper * 5 >= total * 4
}

pub fn segment_sections(note: &Note) -> Vec<Section> {
    let mut sections: Vec<Section> = Vec::new();
    let mut current: Option<Section> = None;
    for line in note.body.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        let content = content.strip_suffix('\r').unwrap_or(content);
        if is_header_line(content) {
            sections.extend(current.take());
            current = Some(Section {
                note_id: note.note_id.clone(),
                ordinal: sections.len(),
                header: content.to_owned(),
                body: line[content.len()..].to_owned(),
            });
        } else {
            current
                .get_or_insert_with(|| Section {
                    note_id: note.note_id.clone(),
                    ordinal: sections.len(),
                    header: String::new(),
                    body: String::new(),
                })
                .body
                .push_str(line);
        }
    }
    sections.extend(current);
    sections
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N F1 on lowercased whitespace tokens with multiset overlap; 0 when
/// either side has no n-grams.
pub fn rouge_f1(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n == 1 || n == 2, "ROUGE order must be 1 or 2");
    let cand: Vec<String> = candidate.split_whitespace().map(str::to_lowercase).collect();
    let refs: Vec<String> = reference.split_whitespace().map(str::to_lowercase).collect();
    if cand.len() < n || refs.len() < n {
        return 0.0;
    }
    let c = ngram_counts(&cand, n);
    let r = ngram_counts(&refs, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = (cand.len() - n + 1) + (refs.len() - n + 1);
    // 2PR/(P+R) with P = o/|c|, R = o/|r| reduces to 2o/(|c|+|r|).
    2.0 * overlap as f64 / total as f64
}

pub trait SectionScorer: Send + Sync {
    fn score(&self, section: &Section, reference: Option<&str>) -> Result<f64, FilterError>;
}

/// Mean of ROUGE-1 and ROUGE-2 F1 between the section text and the reference.
pub fn score_section_oracle(section: &Section, reference: &str) -> Result<f64, FilterError> {
    if reference.trim().is_empty() {
        return Err(FilterError::MissingReference);
    }
    let text = section.text();
    Ok((rouge_f1(&text, reference, 1) + rouge_f1(&text, reference, 2)) / 2.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl SectionScorer for OracleScorer {
    fn score(&self, section: &Section, reference: Option<&str>) -> Result<f64, FilterError> {
        score_section_oracle(section, reference.ok_or(FilterError::MissingReference)?)
    }
}

/// Reference-free scorer: 1.0 for allow-listed headers, 0.0 for deny-listed
/// ones, 0.5 otherwise. Headers are compared lowercased with a trailing colon
/// removed.
#[derive(Debug, Clone)]
pub struct HeuristicScorer {
    keep: HashSet<String>,
    drop: HashSet<String>,
}

fn normalize_header(h: &str) -> String {
    h.trim().trim_end_matches(':').trim().to_lowercase()
}

impl HeuristicScorer {
    pub fn new<I, J, S, T>(keep: I, drop: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            keep: keep.into_iter().map(|h| normalize_header(h.as_ref())).collect(),
            drop: drop.into_iter().map(|h| normalize_header(h.as_ref())).collect(),
        }
    }

    /// One header per line; blank lines and `#` comments ignored.
    pub fn read_list(path: &Path) -> Result<Vec<String>, FilterError> {
        Ok(fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect())
    }
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self::new(
            [
                "hospital course",
                "brief hospital course",
                "history of present illness",
                "hpi",
                "assessment and plan",
                "assessment",
                "plan",
                "impression",
                "chief complaint",
            ],
            ["disclosure", "patient disclosure", "consent", "billing", "attestation", "administrative", "procedure details"],
        )
    }
}

impl SectionScorer for HeuristicScorer {
    fn score(&self, section: &Section, _reference: Option<&str>) -> Result<f64, FilterError> {
        let h = normalize_header(&section.header);
        Ok(if self.keep.contains(&h) {
            1.0
        } else if self.drop.contains(&h) {
            0.0
        } else {
            0.5
        })
    }
}

/// Indices in removal order: ascending score, later position first on ties.
pub fn removal_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Per input section, whether it survived.
    pub kept: Vec<bool>,
    pub token_count: usize,
    /// Set when even the single best section exceeds the budget.
    pub truncated: bool,
}

impl FilterOutcome {
    pub fn survivors<'a, T>(&self, items: &'a [T]) -> Vec<&'a T> {
        items.iter().zip(&self.kept).filter(|(_, &k)| k).map(|(s, _)| s).collect()
    }
}

/// Removes items along `removal_order(scores)` until `measure(kept)` fits the
/// budget, never removing the last one.
fn greedy_remove(scores: &[f64], budget: usize, mut measure: impl FnMut(&[bool]) -> usize) -> FilterOutcome {
    let mut kept = vec![true; scores.len()];
    let mut count = measure(&kept);
    let order = removal_order(scores);
    let mut remaining = scores.len();
    for &idx in &order {
        if count <= budget || remaining <= 1 {
            break;
        }
        kept[idx] = false;
        remaining -= 1;
        count = measure(&kept);
    }
    FilterOutcome {
        truncated: count > budget,
        kept,
        token_count: count,
    }
}

/// Budget over the summed token counts of section texts (header + body).
pub fn filter_to_budget(
    sections: &[Section],
    scores: &[f64],
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<FilterOutcome, FilterError> {
    if sections.len() != scores.len() {
        return Err(FilterError::Misaligned {
            sections: sections.len(),
            scores: scores.len(),
        });
    }
    let counts: Vec<usize> = sections.iter().map(|s| tokenizer.count(&s.text())).collect();
    Ok(greedy_remove(scores, budget, |kept| {
        counts.iter().zip(kept).filter(|(_, &k)| k).map(|(c, _)| c).sum()
    }))
}

/// Every section of every note, in note order then ordinal.
pub fn admission_sections(admission: &Admission) -> Vec<Section> {
    admission.notes.iter().flat_map(segment_sections).collect()
}

/// Rebuilds an admission from surviving sections. Notes left with no
/// non-blank text are dropped.
pub fn rebuild_admission(admission: &Admission, sections: &[Section], kept: &[bool]) -> Admission {
    let mut bodies: HashMap<&str, String> = HashMap::new();
    for (s, _) in sections.iter().zip(kept).filter(|(_, &k)| k) {
        bodies.entry(s.note_id.as_str()).or_default().push_str(&s.text());
    }
    let notes = admission
        .notes
        .iter()
        .filter_map(|n| {
            let body = bodies.remove(n.note_id.as_str())?;
            (!body.trim().is_empty()).then(|| Note { body, ..n.clone() })
        })
        .collect();
    Admission {
        notes,
        ..admission.clone()
    }
}

/// Token count of `concatenate_notes(rebuild_admission(..))` without
/// building it. Valid only for tokenizers that split on whitespace: every
/// section but a note's last ends in a newline and blocks are joined by a
/// blank line, so counts add up.
fn rendered_count(admission: &Admission, sections: &[Section], section_tokens: &[usize], kept: &[bool], tokenizer: &dyn Tokenizer) -> usize {
    let mut body_tokens: HashMap<&str, (usize, bool)> = HashMap::new();
    for ((s, &n), _) in sections.iter().zip(section_tokens).zip(kept).filter(|(_, &k)| k) {
        let entry = body_tokens.entry(s.note_id.as_str()).or_default();
        entry.0 += n;
        entry.1 |= n > 0;
    }
    let survivors: Vec<(&Note, usize)> = admission
        .notes
        .iter()
        .filter_map(|n| match body_tokens.get(n.note_id.as_str()) {
            Some(&(tokens, true)) => Some((n, tokens)),
            _ => None,
        })
        .collect();
    let (Some(first), Some(last)) = (survivors.first(), survivors.last()) else {
        return 0;
    };
    let total_days = (last.0.date - first.0.date).num_days() + 1;
    survivors
        .iter()
        .map(|(n, tokens)| {
            let day = (n.date - first.0.date).num_days() + 1;
            let header = render_note_header(n, day, total_days).expect("survivors keep date order");
            tokenizer.count(&header) + tokens
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionDecision {
    pub note_id: String,
    pub ordinal: usize,
    pub header: String,
    pub score: f64,
    pub kept: bool,
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub admission_id: String,
    pub budget: usize,
    pub original_tokens: usize,
    pub final_tokens: usize,
    pub truncated: bool,
    pub sections: Vec<SectionDecision>,
}

/// Scores every section and removes the lowest scoring until the rendered
/// concatenation of the remaining notes fits `budget`.
pub fn filter_admission(
    admission: &Admission,
    scorer: &dyn SectionScorer,
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<(Admission, FilterReport), FilterError> {
    let sections = admission_sections(admission);
    let reference = admission.reference_summary.as_deref();
    let scores = sections
        .iter()
        .map(|s| scorer.score(s, reference))
        .collect::<Result<Vec<_>, _>>()?;

    // Whitespace-only sections go first so the last survivor always has text.
    let removal_scores: Vec<f64> = sections
        .iter()
        .zip(&scores)
        .map(|(s, &score)| if s.text().trim().is_empty() { f64::NEG_INFINITY } else { score })
        .collect();

    let original_tokens = tokenizer.count(&concatenate_notes(admission));
    let outcome = if tokenizer.splits_on_whitespace() {
        let section_tokens: Vec<usize> = sections.iter().map(|s| tokenizer.count(&s.text())).collect();
        greedy_remove(&removal_scores, budget, |kept| {
            rendered_count(admission, &sections, &section_tokens, kept, tokenizer)
        })
    } else {
        greedy_remove(&removal_scores, budget, |kept| {
            let rebuilt = rebuild_admission(admission, &sections, kept);
            tokenizer.count(&concatenate_notes(&rebuilt))
        })
    };
    let filtered = rebuild_admission(admission, &sections, &outcome.kept);
    let report = FilterReport {
        admission_id: admission.admission_id.clone(),
        budget,
        original_tokens,
        final_tokens: outcome.token_count,
        truncated: outcome.truncated,
        sections: sections
            .iter()
            .zip(&scores)
            .zip(&outcome.kept)
            .map(|((s, &score), &kept)| SectionDecision {
                note_id: s.note_id.clone(),
                ordinal: s.ordinal,
                header: s.header.clone(),
                score,
                kept,
            })
            .collect(),
    };
    Ok((filtered, report))
}
