//! Admission records: loading, note headers, chronological concatenation and
//! token counting.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate admission_id {admission_id}")]
    DuplicateAdmission { line: usize, admission_id: String },
    #[error("day index {day_index} outside 1..={total_days}")]
    DayOutOfRange { day_index: i64, total_days: i64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file line {line}: {message}")]
    Vocab { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub title: String,
    pub date: NaiveDate,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admission {
    pub admission_id: String,
    pub notes: Vec<Note>,
    pub reference_summary: Option<String>,
}

impl Admission {
    /// Number of calendar days covered by the notes, counting both ends.
    pub fn total_days(&self) -> i64 {
        match (self.notes.first(), self.notes.last()) {
            (Some(first), Some(last)) => (last.date - first.date).num_days() + 1,
            _ => 0,
        }
    }

    /// 1-based day of each note relative to the first note.
    pub fn day_indices(&self) -> Vec<i64> {
        let Some(first) = self.notes.first() else {
            return Vec::new();
        };
        self.notes
            .iter()
            .map(|n| (n.date - first.date).num_days() + 1)
            .collect()
    }
}

/// Text → tokens. Budgets are expressed in whatever unit the tokenizer counts.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// True when no token ever spans whitespace, so the count of a
    /// whitespace-joined text is the sum of the counts of its parts.
    fn splits_on_whitespace(&self) -> bool {
        false
    }
}

/// Maximal non-whitespace runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn splits_on_whitespace(&self) -> bool {
        true
    }
}

/// Greedy longest-match subword tokenizer over a vocabulary file (one piece
/// per line). Each whitespace-delimited word is split into the longest
/// vocabulary pieces available; characters not covered by any piece become
/// single-character tokens.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    pieces: HashSet<String>,
    max_piece_chars: usize,
}

impl VocabTokenizer {
    pub fn new<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let pieces: HashSet<String> = pieces
            .into_iter()
            .map(Into::into)
            .filter(|p| !p.is_empty())
            .collect();
        let max_piece_chars = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Self {
            pieces,
            max_piece_chars,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        let mut pieces = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let piece = line.trim_end_matches(['\r', '\n']);
            if piece.chars().any(char::is_whitespace) {
                return Err(CorpusError::Vocab {
                    line: i + 1,
                    message: "pieces may not contain whitespace".into(),
                });
            }
            if !piece.is_empty() {
                pieces.push(piece.to_owned());
            }
        }
        Ok(Self::new(pieces))
    }
}

impl Tokenizer for VocabTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let longest = (i + 1..=chars.len().min(i + self.max_piece_chars))
                    .rev()
                    .find(|&j| self.pieces.contains(&chars[i..j].iter().collect::<String>()));
                let j = longest.unwrap_or(i + 1);
                out.push(chars[i..j].iter().collect());
                i = j;
            }
        }
        out
    }
    fn splits_on_whitespace(&self) -> bool {
        true
    }
}

pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

const REQUIRED_NOTE_FIELDS: [&str; 4] = ["note_id", "title", "date", "body"];

fn malformed(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        message: message.into(),
    }
}

fn string_field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, line: usize, ctx: &str) -> Result<&'a str, CorpusError> {
    match obj.get(key) {
        None => Err(malformed(line, format!("missing field {ctx}{key}"))),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(malformed(line, format!("field {ctx}{key}: expected string"))),
    }
}

/// Validates one JSONL record and returns the admission with notes sorted by
/// date (stable on ties).
fn parse_admission_line(text: &str, line: usize) -> Result<Admission, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(line, format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(line, "expected a JSON object"))?;

    let admission_id = string_field(obj, "admission_id", line, "")?.to_owned();
    let notes_value = obj
        .get("notes")
        .ok_or_else(|| malformed(line, "missing field notes"))?;
    let notes_array = notes_value
        .as_array()
        .ok_or_else(|| malformed(line, "field notes: expected array"))?;
    if notes_array.is_empty() {
        return Err(malformed(line, "field notes: empty"));
    }

    let reference_summary = match obj.get("reference_summary") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(malformed(line, "field reference_summary: expected string or null")),
    };

    let mut notes = Vec::with_capacity(notes_array.len());
    let mut seen_ids = HashSet::new();
    for (i, note) in notes_array.iter().enumerate() {
        let ctx = format!("notes[{i}].");
        let note_obj = note
            .as_object()
            .ok_or_else(|| malformed(line, format!("field notes[{i}]: expected object")))?;
        for key in REQUIRED_NOTE_FIELDS {
            string_field(note_obj, key, line, &ctx)?;
        }
        let note_id = string_field(note_obj, "note_id", line, &ctx)?.to_owned();
        let date_text = string_field(note_obj, "date", line, &ctx)?;
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d")
            .map_err(|_| malformed(line, format!("field {ctx}date: expected YYYY-MM-DD, got {date_text:?}")))?;
        let body = string_field(note_obj, "body", line, &ctx)?.to_owned();
        if body.trim().is_empty() {
            return Err(malformed(line, format!("field {ctx}body: empty")));
        }
        if !seen_ids.insert(note_id.clone()) {
            return Err(malformed(line, format!("field {ctx}note_id: duplicate {note_id:?}")));
        }
        notes.push(Note {
            note_id,
            title: string_field(note_obj, "title", line, &ctx)?.to_owned(),
            date,
            body,
        });
    }
    notes.sort_by_key(|n| n.date);

    Ok(Admission {
        admission_id,
        notes,
        reference_summary,
    })
}

pub fn read_admissions<R: Read>(reader: R) -> Result<Vec<Admission>, CorpusError> {
    let mut out = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let admission = parse_admission_line(&line, i + 1)?;
        if ids.insert(admission.admission_id.clone(), i + 1).is_some() {
            return Err(CorpusError::DuplicateAdmission {
                line: i + 1,
                admission_id: admission.admission_id,
            });
        }
        out.push(admission);
    }
    Ok(out)
}

pub fn load_admissions(path: &Path) -> Result<Vec<Admission>, CorpusError> {
    read_admissions(File::open(path)?)
}

pub fn write_admissions<W: Write>(mut writer: W, admissions: &[Admission]) -> std::io::Result<()> {
    for a in admissions {
        serde_json::to_writer(&mut writer, a)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Three header lines followed by a blank line:
///
/// ```text
/// === NOTE: <title> ===
/// DATE: <YYYY-MM-DD>
/// Day <i> of <n> (On Admission)
///
/// ```
pub fn render_note_header(note: &Note, day_index: i64, total_days: i64) -> Result<String, CorpusError> {
    if day_index < 1 || day_index > total_days {
        return Err(CorpusError::DayOutOfRange {
            day_index,
            total_days,
        });
    }
    let mut position = format!("Day {day_index} of {total_days}");
    // Single-day stays carry both annotations.
    if day_index == 1 {
        position.push_str(" (On Admission)");
    }
    if day_index == total_days {
        position.push_str(" (On Discharge)");
    }
    Ok(format!(
        "=== NOTE: {} ===\nDATE: {}\n{}\n\n",
        note.title,
        note.date.format("%Y-%m-%d"),
        position
    ))
}

pub const NOTE_SEPARATOR: &str = "\n\n";

/// Header + body blocks in chronological order separated by one blank line.
pub fn concatenate_notes(admission: &Admission) -> String {
    let total = admission.total_days();
    let mut out = String::new();
    for (i, (note, day)) in admission.notes.iter().zip(admission.day_indices()).enumerate() {
        if i > 0 {
            out.push_str(NOTE_SEPARATOR);
        }
        // Loaded admissions are date-sorted, so the day is always in range.
        let header = render_note_header(note, day, total).expect("notes sorted by date");
        out.push_str(&header);
        out.push_str(&note.body);
    }
    out
}

/// Character ranges of each note block (header + body) inside the output of
/// [`concatenate_notes`].
pub fn note_char_ranges(admission: &Admission) -> Vec<Range<usize>> {
    let total = admission.total_days();
    let sep = NOTE_SEPARATOR.chars().count();
    let mut pos = 0;
    let mut out = Vec::with_capacity(admission.notes.len());
    for (i, (note, day)) in admission.notes.iter().zip(admission.day_indices()).enumerate() {
        if i > 0 {
            pos += sep;
        }
        let header = render_note_header(note, day, total).expect("notes sorted by date");
        let len = header.chars().count() + note.body.chars().count();
        out.push(pos..pos + len);
        pos += len;
    }
    out
}
