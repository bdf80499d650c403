//! Entity-grounded evaluation against source synonym groups.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EmbeddingCache, EmbeddingProvider, EntityError, EntitySpan};
use crate::esg::Esg;
use crate::guide::Mode;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty report")]
    Empty,
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub aligned_esg_ids: BTreeSet<usize>,
    /// One entry per summary mention, in input order.
    pub mention_esgs: Vec<Option<usize>>,
    pub unaligned_mentions: Vec<EntitySpan>,
    pub total_mentions: usize,
    /// Mentions with more than one ESG at or above the threshold.
    pub multi_candidate: usize,
}

impl AlignmentResult {
    /// Builds a result directly from per-mention assignments.
    pub fn from_assignments(mentions: &[EntitySpan], assigned: &[Option<usize>]) -> Self {
        assert_eq!(mentions.len(), assigned.len());
        let mut out = Self {
            total_mentions: mentions.len(),
            mention_esgs: assigned.to_vec(),
            ..Self::default()
        };
        for (m, a) in mentions.iter().zip(assigned) {
            match a {
                Some(id) => {
                    out.aligned_esg_ids.insert(*id);
                }
                None => out.unaligned_mentions.push(m.clone()),
            }
        }
        out
    }
}

/// Maps each mention to the ESG holding an identical surface, otherwise to
/// the ESG of the most similar surface at or above `threshold`. Equal best
/// scores go to the lower esg_id.
pub fn align_to_source(
    summary_spans: &[EntitySpan],
    source_esgs: &[Esg],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<AlignmentResult, EntityError> {
    let mut by_id: Vec<&Esg> = source_esgs.iter().collect();
    by_id.sort_by_key(|e| e.esg_id);
    let mut cache = EmbeddingCache::new(provider);
    let mut assigned = Vec::with_capacity(summary_spans.len());
    let mut multi = 0;
    for m in summary_spans {
        if let Some(e) = by_id.iter().find(|e| e.contains_surface(&m.surface)) {
            assigned.push(Some(e.esg_id));
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        let mut candidates = 0;
        for e in &by_id {
            let mut top = f64::NEG_INFINITY;
            for s in &e.surfaces {
                top = top.max(cache.similarity(&m.surface, s)?);
            }
            if top >= threshold {
                candidates += 1;
                if best.map_or(true, |(b, _)| top > b) {
                    best = Some((top, e.esg_id));
                }
            }
        }
        if candidates > 1 {
            multi += 1;
        }
        assigned.push(best.map(|(_, id)| id));
    }
    let mut out = AlignmentResult::from_assignments(summary_spans, &assigned);
    out.multi_candidate = multi;
    Ok(out)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    let (p, r) = (p?, r?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

fn overlap(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> usize {
    a.intersection(b).count()
}

/// Share of reference-aligned ESGs that the model also covers.
pub fn sgr(reference: &AlignmentResult, model: &AlignmentResult) -> Option<f64> {
    ratio(
        overlap(&reference.aligned_esg_ids, &model.aligned_esg_ids),
        reference.aligned_esg_ids.len(),
    )
}

/// Share of model mentions with no source synonym. Counts mentions, so a
/// repeated hallucination is penalized each time.
pub fn hallucination_rate(model: &AlignmentResult) -> Option<f64> {
    ratio(model.unaligned_mentions.len(), model.total_mentions)
}

/// Returns (precision, f1).
pub fn sgp_f1(reference: &AlignmentResult, model: &AlignmentResult) -> (Option<f64>, Option<f64>) {
    let precision = ratio(
        overlap(&reference.aligned_esg_ids, &model.aligned_esg_ids),
        model.aligned_esg_ids.len(),
    );
    (precision, harmonic(precision, sgr(reference, model)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn adherence(model: &AlignmentResult, guidance: &BTreeSet<usize>) -> Adherence {
    let hit = overlap(&model.aligned_esg_ids, guidance);
    let recall = ratio(hit, guidance.len());
    let precision = ratio(hit, model.aligned_esg_ids.len());
    Adherence {
        recall,
        precision,
        f1: harmonic(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub admission_id: String,
    pub mode: Mode,
    pub sgr: Option<f64>,
    pub hr: Option<f64>,
    pub sgp: Option<f64>,
    pub f1: Option<f64>,
    pub adh_recall: Option<f64>,
    pub adh_precision: Option<f64>,
    pub adh_f1: Option<f64>,
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(default)]
    pub multi_candidate: usize,
}

impl EvalRow {
    fn columns(&self) -> [Option<f64>; 10] {
        [
            self.sgr,
            self.hr,
            self.sgp,
            self.f1,
            self.adh_recall,
            self.adh_precision,
            self.adh_f1,
            Some(self.tokens as f64),
            self.rouge1,
            self.rouge2,
        ]
    }
}

/// Null-excluding means, with the number of rows behind each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rows: usize,
    pub sgr: Option<f64>,
    pub hr: Option<f64>,
    pub sgp: Option<f64>,
    pub f1: Option<f64>,
    pub adh_recall: Option<f64>,
    pub adh_precision: Option<f64>,
    pub adh_f1: Option<f64>,
    pub tokens: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub counts: AggregateCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateCounts {
    pub sgr: usize,
    pub hr: usize,
    pub sgp: usize,
    pub f1: usize,
    pub adh_recall: usize,
    pub adh_precision: usize,
    pub adh_f1: usize,
    pub tokens: usize,
    pub rouge1: usize,
    pub rouge2: usize,
}

pub fn aggregate(rows: &[EvalRow]) -> Result<Aggregate, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sums = [0.0; 10];
    let mut counts = [0usize; 10];
    for row in rows {
        for (k, v) in row.columns().into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    Ok(Aggregate {
        rows: rows.len(),
        sgr: mean(0),
        hr: mean(1),
        sgp: mean(2),
        f1: mean(3),
        adh_recall: mean(4),
        adh_precision: mean(5),
        adh_f1: mean(6),
        tokens: mean(7),
        rouge1: mean(8),
        rouge2: mean(9),
        counts: AggregateCounts {
            sgr: counts[0],
            hr: counts[1],
            sgp: counts[2],
            f1: counts[3],
            adh_recall: counts[4],
            adh_precision: counts[5],
            adh_f1: counts[6],
            tokens: counts[7],
            rouge1: counts[8],
            rouge2: counts[9],
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Result<Self, MetricsError> {
        let aggregate = aggregate(&rows)?;
        Ok(Self { rows, aggregate })
    }
}

pub const REPORT_HEADER: [&str; 10] = [
    "admission_id",
    "mode",
    "sgr",
    "hr",
    "sgp",
    "f1",
    "adh_recall",
    "adh_precision",
    "adh_f1",
    "tokens",
];

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the per-admission table plus a final `aggregate` row. Nulls are
/// empty cells.
pub fn write_report_csv<W: Write>(writer: W, report: &EvalReport, with_rouge: bool) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REPORT_HEADER.to_vec();
    if with_rouge {
        header.extend(["rouge1", "rouge2"]);
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.admission_id.clone(),
            r.mode.to_string(),
            cell(r.sgr),
            cell(r.hr),
            cell(r.sgp),
            cell(r.f1),
            cell(r.adh_recall),
            cell(r.adh_precision),
            cell(r.adh_f1),
            r.tokens.to_string(),
        ];
        if with_rouge {
            rec.extend([cell(r.rouge1), cell(r.rouge2)]);
        }
        w.write_record(&rec)?;
    }
    let a = &report.aggregate;
    let modes: BTreeSet<String> = report.rows.iter().map(|r| r.mode.to_string()).collect();
    let mut rec = vec![
        "aggregate".to_owned(),
        modes.into_iter().collect::<Vec<_>>().join("+"),
        cell(a.sgr),
        cell(a.hr),
        cell(a.sgp),
        cell(a.f1),
        cell(a.adh_recall),
        cell(a.adh_precision),
        cell(a.adh_f1),
        cell(a.tokens),
    ];
    if with_rouge {
        rec.extend([cell(a.rouge1), cell(a.rouge2)]);
    }
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}
