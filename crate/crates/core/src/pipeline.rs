//! Stage functions behind the CLI. Every stage reads earlier artifacts from
//! the output directory and writes its own; output lines follow input order
//! whatever the worker count.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{GuidanceSource, PipelineConfig, ScorerChoice, TokenizerChoice};
use crate::corpus::{self, concatenate_notes, note_char_ranges, Admission, Tokenizer, VocabTokenizer, WhitespaceTokenizer};
use crate::entity::{
    extract_entities, EmbeddingProvider, EntitySpan, HashedNgramProvider, LexiconExtractor, PrecomputedProvider, SemanticType,
};
use crate::esg::{group_mentions, label_salience, rank_and_truncate, rehydrate, Esg, EsgEntry, EsgRecord};
use crate::filter::{filter_admission, rouge_f1, FilterReport, HeuristicScorer, OracleScorer, SectionScorer};
use crate::guide::{build_guidance, build_input, embed_tags, salient_mentions, strip_tags, BuiltInput, ChatTemplate, Mode, TaggedSource};
use crate::metrics::{adherence, align_to_source, hallucination_rate, sgp_f1, sgr, write_report_csv, Aggregate, EvalReport, EvalRow};
use crate::r3::{
    extract_oracle_plans, mock_generate, parse_r3, serialize_r3, validate_plans, ModelOutputRecord, ParseMode, ParsedRecord,
    PlanValidationReport, RuleSentenceSplitter, SentencePlan,
};
use crate::select::{featurize, predict, sweep_thresholds, train_with_history, write_pr_csv, AdmissionStats, EsgScore, PredictionRecord, SalienceModel, TrainConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("expected {what} file; run `{producer}` first (missing {})", path.display())]
    MissingArtifact {
        what: &'static str,
        producer: &'static str,
        path: PathBuf,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{stage}: admission {admission_id}: {message}")]
    Admission {
        stage: &'static str,
        admission_id: String,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } | PipelineError::Usage(_) => 2,
            PipelineError::Admission { .. } | PipelineError::Data { .. } => 3,
            PipelineError::Invariant(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at(stage: &'static str, admission_id: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Admission {
        stage,
        admission_id: admission_id.to_owned(),
        message: e.to_string(),
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// A stage output: file name, what it holds, and the subcommand producing it.
#[derive(Debug, Clone, Copy)]
pub struct Artifact {
    pub file: &'static str,
    pub what: &'static str,
    pub producer: &'static str,
}

macro_rules! artifacts {
    ($($name:ident = $file:literal, $what:literal, $producer:literal;)*) => {
        $(pub const $name: Artifact = Artifact { file: $file, what: $what, producer: $producer };)*
    };
}

artifacts! {
    ADMISSIONS = "admissions.jsonl", "admissions", "ingest";
    FILTERED = "filtered.jsonl", "filtered admissions", "filter";
    FILTER_REPORT = "filter_report.jsonl", "filter report", "filter";
    ENTITIES = "entities.jsonl", "entities", "extract";
    ESGS = "esgs.jsonl", "ESG", "esg";
    LABELED = "esgs_labeled.jsonl", "labeled ESG", "label";
    PREDICTIONS = "predictions.jsonl", "predictions", "select";
    PR_CURVE = "pr_curve.csv", "PR curve", "pr-curve";
    TAGGED = "tagged.jsonl", "tagged source", "tag";
    ORACLE_TARGETS = "oracle_targets.jsonl", "oracle target", "oracle-target";
    MODEL_OUTPUTS = "model_outputs.jsonl", "model outputs", "mockgen";
    PARSED = "parsed.jsonl", "parsed outputs", "parse";
    PLAN_VALIDATION = "plan_validation.jsonl", "plan validation", "parse";
    REPORT_CSV = "report.csv", "evaluation report", "eval";
    REPORT_JSON = "report.json", "evaluation report", "eval";
}

pub fn inputs_file(mode: Mode) -> String {
    format!("inputs_{}.jsonl", mode.as_str().to_lowercase())
}

/// One span inside an entities record; offsets are characters of the
/// concatenated source (or of the reference summary).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEntry {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub admission_id: String,
    pub doc_id: String,
    pub spans: Vec<SpanEntry>,
}

pub const SOURCE_DOC: &str = "source";
pub const REFERENCE_DOC: &str = "reference";

impl EntityRecord {
    fn new(admission_id: &str, doc_id: &str, spans: &[EntitySpan]) -> Self {
        Self {
            admission_id: admission_id.to_owned(),
            doc_id: doc_id.to_owned(),
            spans: spans
                .iter()
                .map(|s| SpanEntry {
                    start: s.start,
                    end: s.end,
                    surface: s.surface.clone(),
                    semantic_type: s.semantic_type,
                })
                .collect(),
        }
    }

    fn spans(&self) -> Vec<EntitySpan> {
        self.spans
            .iter()
            .map(|s| EntitySpan {
                doc_id: self.doc_id.clone(),
                start: s.start,
                end: s.end,
                surface: s.surface.clone(),
                semantic_type: s.semantic_type,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct AdmissionEntities {
    source: Vec<EntitySpan>,
    reference: Option<Vec<EntitySpan>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedRecord {
    pub admission_id: String,
    #[serde(flatten)]
    pub tagged: TaggedSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTargetRecord {
    pub admission_id: String,
    pub target: String,
    pub plans: Vec<SentencePlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValidationRecord {
    pub admission_id: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub report: PlanValidationReport,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| data_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| data_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| data_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| PipelineError::Invariant(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| data_err(path, e))?;
    }
    w.flush().map_err(|e| data_err(path, e))
}

pub struct Pipeline {
    cfg: PipelineConfig,
    pool: rayon::ThreadPool,
    splitter: RuleSentenceSplitter,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate().map_err(PipelineError::Usage)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| PipelineError::Usage(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        Ok(Self {
            cfg,
            pool,
            splitter: RuleSentenceSplitter::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn path(&self, artifact: Artifact) -> PathBuf {
        self.cfg.outputs.join(artifact.file)
    }

    fn require(&self, artifact: Artifact) -> Result<PathBuf> {
        let path = self.path(artifact);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact {
                what: artifact.what,
                producer: artifact.producer,
                path,
            })
        }
    }

    fn read<T: DeserializeOwned>(&self, artifact: Artifact) -> Result<Vec<T>> {
        read_jsonl(&self.require(artifact)?)
    }

    fn prepare_outputs(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.outputs).map_err(|e| data_err(&self.cfg.outputs, e))
    }

    fn write<T: Serialize>(&self, artifact: Artifact, items: &[T]) -> Result<()> {
        self.prepare_outputs()?;
        write_jsonl(&self.path(artifact), items)
    }

    /// Maps in parallel, keeping input order; the first failure in input
    /// order wins so diagnostics do not depend on scheduling.
    fn par_map<T, U, F>(&self, items: &[T], f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync + Send,
    {
        let results: Vec<Result<U>> = self.pool.install(|| items.par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    fn extractor(&self) -> Result<LexiconExtractor> {
        let path = self
            .cfg
            .gazetteer
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("this stage needs an entity lexicon; pass --gazetteer".into()))?;
        LexiconExtractor::from_tsv(path).map_err(|e| data_err(path, e))
    }

    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match &self.cfg.embeddings {
            Some(path) => Box::new(PrecomputedProvider::from_jsonl(path).map_err(|e| data_err(path, e))?),
            None => Box::new(HashedNgramProvider::default()),
        })
    }

    fn tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self.cfg.tokenizer {
            TokenizerChoice::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerChoice::Vocab => {
                let path = self.cfg.vocab.as_ref().ok_or_else(|| PipelineError::Usage("--vocab is required".into()))?;
                Box::new(VocabTokenizer::from_file(path).map_err(|e| data_err(path, e))?)
            }
        })
    }

    fn load_admissions(&self, artifact: Artifact) -> Result<Vec<Admission>> {
        let path = self.require(artifact)?;
        corpus::load_admissions(&path).map_err(|e| data_err(&path, e))
    }

    /// The notes entities are extracted from: filtered when configured.
    fn source_admissions(&self) -> Result<Vec<Admission>> {
        self.load_admissions(if self.cfg.use_filtered { FILTERED } else { ADMISSIONS })
    }

    fn load_entities(&self) -> Result<HashMap<String, AdmissionEntities>> {
        let mut out: HashMap<String, AdmissionEntities> = HashMap::new();
        for rec in self.read::<EntityRecord>(ENTITIES)? {
            let slot = out.entry(rec.admission_id.clone()).or_default();
            match rec.doc_id.as_str() {
                SOURCE_DOC => slot.source = rec.spans(),
                REFERENCE_DOC => slot.reference = Some(rec.spans()),
                other => {
                    return Err(data_err(&self.path(ENTITIES), format!("unknown doc_id {other:?}")));
                }
            }
        }
        Ok(out)
    }

    /// Labeled ESGs when available, otherwise the unlabeled ones.
    fn load_esg_records(&self) -> Result<Vec<EsgRecord>> {
        if self.path(LABELED).is_file() {
            self.read(LABELED)
        } else {
            self.read(ESGS)
        }
    }

    fn esg_map(&self) -> Result<HashMap<String, Vec<EsgEntry>>> {
        Ok(self.load_esg_records()?.into_iter().map(|r| (r.admission_id, r.esgs)).collect())
    }

    /// The salient ESG ids per admission, from oracle labels or predictions.
    fn salient_map(&self) -> Result<HashMap<String, Option<BTreeSet<usize>>>> {
        match self.cfg.guidance {
            GuidanceSource::Oracle => Ok(self
                .read::<EsgRecord>(LABELED)?
                .into_iter()
                .map(|r| {
                    let labeled = r.esgs.iter().all(|e| e.salient.is_some());
                    let ids = r.esgs.iter().filter(|e| e.salient == Some(true)).map(|e| e.esg_id).collect();
                    (r.admission_id, labeled.then_some(ids))
                })
                .collect()),
            GuidanceSource::Predicted => Ok(self
                .read::<PredictionRecord>(PREDICTIONS)?
                .into_iter()
                .map(|r| {
                    let ids = r.salient_ids(self.cfg.salience_threshold).into_iter().collect();
                    (r.admission_id, Some(ids))
                })
                .collect()),
        }
    }

    pub fn ingest(&self) -> Result<String> {
        let path = self
            .cfg
            .corpus
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("ingest needs an admissions file; pass --corpus".into()))?;
        let admissions = corpus::load_admissions(path).map_err(|e| data_err(path, e))?;
        self.prepare_outputs()?;
        let out = self.path(ADMISSIONS);
        let file = File::create(&out).map_err(|e| data_err(&out, e))?;
        let mut w = BufWriter::new(file);
        corpus::write_admissions(&mut w, &admissions).map_err(|e| data_err(&out, e))?;
        w.flush().map_err(|e| data_err(&out, e))?;
        Ok(format!("ingested {} admissions", admissions.len()))
    }

    pub fn filter(&self) -> Result<String> {
        let admissions = self.load_admissions(ADMISSIONS)?;
        let tokenizer = self.tokenizer()?;
        let scorer: Box<dyn SectionScorer> = match self.cfg.scorer {
            ScorerChoice::Oracle => Box::new(OracleScorer),
            ScorerChoice::Heuristic => {
                let read = |p: &Option<PathBuf>| -> Result<Option<Vec<String>>> {
                    p.as_ref()
                        .map(|p| HeuristicScorer::read_list(p).map_err(|e| data_err(p, e)))
                        .transpose()
                };
                match (read(&self.cfg.keep_headers)?, read(&self.cfg.drop_headers)?) {
                    (None, None) => Box::new(HeuristicScorer::default()),
                    (keep, drop) => Box::new(HeuristicScorer::new(keep.unwrap_or_default(), drop.unwrap_or_default())),
                }
            }
        };
        let budget = self.cfg.budget;
        let results: Vec<(Admission, FilterReport)> = self.par_map(&admissions, |a| {
            let (filtered, report) = filter_admission(a, scorer.as_ref(), budget, tokenizer.as_ref()).map_err(|e| at("filter", &a.admission_id, &e))?;
            if report.final_tokens > budget && !report.truncated {
                return Err(PipelineError::Invariant(format!(
                    "admission {} left at {} tokens without a truncation flag",
                    a.admission_id, report.final_tokens
                )));
            }
            Ok((filtered, report))
        })?;
        let truncated = results.iter().filter(|(_, r)| r.truncated).count();
        let (filtered, reports): (Vec<Admission>, Vec<FilterReport>) = results.into_iter().unzip();
        self.prepare_outputs()?;
        let out = self.path(FILTERED);
        let mut w = BufWriter::new(File::create(&out).map_err(|e| data_err(&out, e))?);
        corpus::write_admissions(&mut w, &filtered).map_err(|e| data_err(&out, e))?;
        w.flush().map_err(|e| data_err(&out, e))?;
        self.write(FILTER_REPORT, &reports)?;
        Ok(format!("filtered {} admissions to {budget} tokens ({truncated} truncated)", filtered.len()))
    }

    pub fn extract(&self) -> Result<String> {
        let admissions = self.source_admissions()?;
        let extractor = self.extractor()?;
        let records: Vec<Vec<EntityRecord>> = self.par_map(&admissions, |a| {
            let id = &a.admission_id;
            let source = extract_entities(SOURCE_DOC, &concatenate_notes(a), &extractor).map_err(|e| at("extract", id, &e))?;
            let mut recs = vec![EntityRecord::new(id, SOURCE_DOC, &source)];
            if let Some(reference) = &a.reference_summary {
                let spans = extract_entities(REFERENCE_DOC, reference, &extractor).map_err(|e| at("extract", id, &e))?;
                recs.push(EntityRecord::new(id, REFERENCE_DOC, &spans));
            }
            Ok(recs)
        })?;
        let records: Vec<EntityRecord> = records.into_iter().flatten().collect();
        let mentions: usize = records.iter().map(|r| r.spans.len()).sum();
        self.write(ENTITIES, &records)?;
        Ok(format!("extracted {mentions} mentions from {} admissions", admissions.len()))
    }

    pub fn esg(&self) -> Result<String> {
        let admissions = self.source_admissions()?;
        let entities = self.load_entities()?;
        let provider = self.provider()?;
        let (threshold, cap) = (self.cfg.synonym_threshold, self.cfg.esg_cap);
        let records: Vec<EsgRecord> = self.par_map(&admissions, |a| {
            let id = &a.admission_id;
            let ents = entities.get(id).ok_or_else(|| at("esg", id, &"no entities; re-run `extract`"))?;
            let esgs = group_mentions(&ents.source, provider.as_ref(), threshold).map_err(|e| at("esg", id, &e))?;
            let esgs = rank_and_truncate(esgs, cap).map_err(|e| at("esg", id, &e))?;
            Ok(EsgRecord {
                admission_id: id.clone(),
                esgs: esgs.iter().map(|e| EsgEntry::from_esg(e, None)).collect(),
            })
        })?;
        let total: usize = records.iter().map(|r| r.esgs.len()).sum();
        self.write(ESGS, &records)?;
        Ok(format!("formed {total} ESGs over {} admissions", records.len()))
    }

    pub fn label(&self) -> Result<String> {
        let records: Vec<EsgRecord> = self.read(ESGS)?;
        let entities = self.load_entities()?;
        let provider = self.provider()?;
        let threshold = self.cfg.synonym_threshold;
        let labeled: Vec<(EsgRecord, bool)> = self.par_map(&records, |r| {
            let id = &r.admission_id;
            let ents = entities.get(id).ok_or_else(|| at("label", id, &"no entities; re-run `extract`"))?;
            let Some(reference) = &ents.reference else {
                return Ok((r.clone(), false));
            };
            let esgs = rehydrate(&r.esgs, &ents.source);
            let labels = label_salience(&esgs, Some(reference), provider.as_ref(), threshold).map_err(|e| at("label", id, &e))?;
            let esgs = r
                .esgs
                .iter()
                .zip(labels)
                .map(|(e, l)| EsgEntry {
                    salient: Some(l.salient),
                    ..e.clone()
                })
                .collect();
            Ok((
                EsgRecord {
                    admission_id: id.clone(),
                    esgs,
                },
                true,
            ))
        })?;
        let unlabeled = labeled.iter().filter(|(_, ok)| !ok).count();
        let records: Vec<EsgRecord> = labeled.into_iter().map(|(r, _)| r).collect();
        let salient: usize = records.iter().flat_map(|r| &r.esgs).filter(|e| e.salient == Some(true)).count();
        self.write(LABELED, &records)?;
        let mut msg = format!("labeled {} admissions, {salient} salient ESGs", records.len() - unlabeled);
        if unlabeled > 0 {
            msg.push_str(&format!("; {unlabeled} without a reference left unlabeled"));
        }
        Ok(msg)
    }

    /// Rehydrated ESGs and featurization context for each admission.
    fn featurized(&self, records: &[EsgRecord]) -> Result<Vec<(String, Vec<(EsgEntry, crate::select::FeatureVector)>)>> {
        let admissions: HashMap<String, Admission> = self.source_admissions()?.into_iter().map(|a| (a.admission_id.clone(), a)).collect();
        let entities = self.load_entities()?;
        self.par_map(records, |r| {
            let id = &r.admission_id;
            let adm = admissions.get(id).ok_or_else(|| at("select", id, &"admission missing from the source notes"))?;
            let ents = entities.get(id).ok_or_else(|| at("select", id, &"no entities; re-run `extract`"))?;
            let stats = AdmissionStats {
                note_ranges: note_char_ranges(adm),
                esg_count: r.esgs.len(),
                source_len: concatenate_notes(adm).chars().count(),
            };
            let esgs = rehydrate(&r.esgs, &ents.source);
            Ok((id.clone(), r.esgs.iter().cloned().zip(esgs.iter().map(|e| featurize(e, &stats))).collect()))
        })
    }

    pub fn train_select(&self) -> Result<String> {
        let records: Vec<EsgRecord> = self.read(LABELED)?;
        let examples: Vec<_> = self
            .featurized(&records)?
            .into_iter()
            .flat_map(|(_, rows)| rows)
            .filter_map(|(entry, x)| entry.salient.map(|y| (x, y)))
            .collect();
        let cfg = TrainConfig {
            epochs: self.cfg.epochs,
            learning_rate: self.cfg.learning_rate,
            seed: self.cfg.seed,
        };
        let path = self.cfg.model_path();
        let (model, losses) = train_with_history(&examples, cfg).map_err(|e| data_err(&self.path(LABELED), e))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| data_err(parent, e))?;
        }
        fs::write(&path, model.to_json() + "\n").map_err(|e| data_err(&path, e))?;
        Ok(format!(
            "trained on {} ESGs; loss {:.4} -> {:.4}",
            examples.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        ))
    }

    pub fn select(&self) -> Result<String> {
        let path = self.cfg.model_path();
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                what: "salience model",
                producer: "train-select",
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| data_err(&path, e))?;
        let model = SalienceModel::from_json(&text).map_err(|e| data_err(&path, e))?;
        let records = self.load_esg_records()?;
        let predictions: Vec<PredictionRecord> = self
            .featurized(&records)?
            .into_iter()
            .map(|(admission_id, rows)| PredictionRecord {
                admission_id,
                scores: rows
                    .iter()
                    .map(|(e, x)| EsgScore {
                        esg_id: e.esg_id,
                        score: predict(&model, x),
                    })
                    .collect(),
            })
            .collect();
        let threshold = self.cfg.salience_threshold;
        let selected: usize = predictions.iter().map(|p| p.salient_ids(threshold).len()).sum();
        self.write(PREDICTIONS, &predictions)?;
        Ok(format!("scored {} admissions; {selected} ESGs at or above {threshold}", predictions.len()))
    }

    pub fn pr_curve(&self) -> Result<String> {
        let labels: HashMap<(String, usize), bool> = self
            .read::<EsgRecord>(LABELED)?
            .into_iter()
            .flat_map(|r| {
                let id = r.admission_id;
                r.esgs.into_iter().filter_map(move |e| e.salient.map(|s| ((id.clone(), e.esg_id), s)))
            })
            .collect();
        let mut pairs = Vec::new();
        for p in self.read::<PredictionRecord>(PREDICTIONS)? {
            for s in &p.scores {
                if let Some(&y) = labels.get(&(p.admission_id.clone(), s.esg_id)) {
                    pairs.push((s.score, y));
                }
            }
        }
        let points = sweep_thresholds(&pairs).map_err(|e| data_err(&self.path(PREDICTIONS), e))?;
        self.prepare_outputs()?;
        let out = self.path(PR_CURVE);
        let file = File::create(&out).map_err(|e| data_err(&out, e))?;
        write_pr_csv(BufWriter::new(file), &points).map_err(|e| data_err(&out, e))?;
        Ok(format!("wrote {} PR points", points.len()))
    }

    /// Source admissions joined with their entities, ESGs and salient ids.
    fn salient_context(&self, stage: &'static str) -> Result<Vec<SalientContext>> {
        let admissions = self.source_admissions()?;
        let entities = self.load_entities()?;
        let esgs = self.esg_map()?;
        let salient = self.salient_map()?;
        admissions
            .into_iter()
            .map(|a| {
                let id = a.admission_id.clone();
                let ents = entities.get(&id).cloned().ok_or_else(|| at(stage, &id, "no entities; re-run `extract`"))?;
                let entries = esgs.get(&id).ok_or_else(|| at(stage, &id, "no ESGs; re-run `esg`"))?;
                let all = rehydrate(entries, &ents.source);
                let ids = salient
                    .get(&id)
                    .ok_or_else(|| at(stage, &id, "no salience labels or predictions"))?
                    .clone()
                    .ok_or_else(|| at(stage, &id, "no oracle labels (no reference summary); use --guidance predicted"))?;
                let salient_esgs = all.iter().filter(|e| ids.contains(&e.esg_id)).cloned().collect();
                Ok(SalientContext {
                    admission: a,
                    entities: ents,
                    esgs: all,
                    salient_ids: ids,
                    salient_esgs,
                })
            })
            .collect()
    }

    pub fn tag(&self) -> Result<String> {
        let contexts = self.salient_context("tag")?;
        let records: Vec<TaggedRecord> = self.par_map(&contexts, |c| {
            let id = &c.admission.admission_id;
            let tagged = embed_tags(&concatenate_notes(&c.admission), &salient_mentions(&c.salient_esgs)).map_err(|e| at("tag", id, &e))?;
            Ok(TaggedRecord {
                admission_id: id.clone(),
                tagged,
            })
        })?;
        let tags: usize = records.iter().map(|r| r.tagged.tagged_spans.len()).sum();
        self.write(TAGGED, &records)?;
        Ok(format!("placed {tags} tags over {} admissions", records.len()))
    }

    fn tagged_map(&self) -> Result<HashMap<String, TaggedSource>> {
        Ok(self.read::<TaggedRecord>(TAGGED)?.into_iter().map(|r| (r.admission_id, r.tagged)).collect())
    }

    fn oracle_plans(&self, c: &SalientContext, extractor: &LexiconExtractor, provider: &dyn EmbeddingProvider) -> Result<Option<Vec<SentencePlan>>> {
        let Some(reference) = c.admission.reference_summary.as_deref() else {
            return Ok(None);
        };
        extract_oracle_plans(Some(reference), &c.salient_esgs, extractor, provider, self.cfg.synonym_threshold, &self.splitter)
            .map(Some)
            .map_err(|e| at("oracle-target", &c.admission.admission_id, &e))
    }

    pub fn oracle_target(&self) -> Result<String> {
        let contexts = self.salient_context("oracle-target")?;
        let extractor = self.extractor()?;
        let provider = self.provider()?;
        let records: Vec<Option<OracleTargetRecord>> = self.par_map(&contexts, |c| {
            let Some(plans) = self.oracle_plans(c, &extractor, provider.as_ref())? else {
                return Ok(None);
            };
            let target = serialize_r3(&plans);
            let back = parse_r3(&target, ParseMode::Strict).map_err(|e| PipelineError::Invariant(format!("{}: oracle target does not parse: {e}", c.admission.admission_id)))?;
            if back.output.plans != plans {
                return Err(PipelineError::Invariant(format!("{}: oracle target does not round-trip", c.admission.admission_id)));
            }
            Ok(Some(OracleTargetRecord {
                admission_id: c.admission.admission_id.clone(),
                target,
                plans,
            }))
        })?;
        let skipped = records.iter().filter(|r| r.is_none()).count();
        let records: Vec<OracleTargetRecord> = records.into_iter().flatten().collect();
        self.write(ORACLE_TARGETS, &records)?;
        Ok(format!("wrote {} oracle targets ({skipped} admissions without a reference)", records.len()))
    }

    pub fn prompt(&self, mode: Mode, shuffle_guidance: bool) -> Result<String> {
        let contexts = self.salient_context("prompt")?;
        let template = match &self.cfg.template {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
                serde_json::from_str::<ChatTemplate>(&text).map_err(|e| data_err(p, e))?
            }
            None => ChatTemplate::default(),
        };
        let tagged = if mode == Mode::Speer { Some(self.tagged_map()?) } else { None };
        let (extractor, provider) = if mode == Mode::Speer {
            (Some(self.extractor()?), Some(self.provider()?))
        } else {
            (None, None)
        };
        let seed = shuffle_guidance.then_some(self.cfg.seed);
        let inputs: Vec<BuiltInput> = self.par_map(&contexts, |c| {
            let id = &c.admission.admission_id;
            let guidance = (mode == Mode::Guided).then(|| build_guidance(&c.salient_esgs, seed));
            let tagged_source = match &tagged {
                Some(map) => Some(map.get(id).ok_or_else(|| at("prompt", id, &"no tagged source; re-run `tag`"))?),
                None => None,
            };
            let input = build_input(mode, &c.admission, guidance.as_ref(), tagged_source, &template).map_err(|e| at("prompt", id, &e))?;
            let oracle_target = match (&extractor, &provider) {
                (Some(ex), Some(pr)) => self.oracle_plans(c, ex, pr.as_ref())?.map(|p| serialize_r3(&p)),
                _ => c.admission.reference_summary.clone(),
            };
            Ok(BuiltInput {
                admission_id: id.clone(),
                mode,
                input,
                oracle_target,
                max_new_tokens: mode.max_new_tokens(),
            })
        })?;
        self.prepare_outputs()?;
        write_jsonl(&self.cfg.outputs.join(inputs_file(mode)), &inputs)?;
        Ok(format!("built {} {mode} inputs", inputs.len()))
    }

    pub fn mockgen(&self) -> Result<String> {
        let contexts = self.salient_context("mockgen")?;
        let tagged = self.tagged_map()?;
        let records: Vec<ModelOutputRecord> = self.par_map(&contexts, |c| {
            let id = &c.admission.admission_id;
            let t = tagged.get(id).ok_or_else(|| at("mockgen", id, &"no tagged source; re-run `tag`"))?;
            let out = mock_generate(t, &c.salient_esgs, &self.splitter);
            Ok(ModelOutputRecord {
                admission_id: id.clone(),
                mode: Mode::Speer,
                output: serialize_r3(&out.plans),
            })
        })?;
        self.write(MODEL_OUTPUTS, &records)?;
        Ok(format!("generated {} mock outputs", records.len()))
    }

    pub fn parse(&self, input: Option<&Path>) -> Result<String> {
        let outputs: Vec<ModelOutputRecord> = match input {
            Some(p) => read_jsonl(p)?,
            None => self.read(MODEL_OUTPUTS)?,
        };
        let mode = self.cfg.parse_mode;
        let parsed: Vec<ParsedRecord> = self.par_map(&outputs, |o| {
            if o.mode != Mode::Speer {
                return Ok(ParsedRecord {
                    admission_id: o.admission_id.clone(),
                    mode: o.mode,
                    summary: o.output.trim().to_owned(),
                    plans: Vec::new(),
                    warnings: Vec::new(),
                });
            }
            let p = parse_r3(&o.output, mode).map_err(|e| at("parse", &o.admission_id, &e))?;
            Ok(ParsedRecord {
                admission_id: o.admission_id.clone(),
                mode: o.mode,
                summary: p.output.summary,
                plans: p.output.plans,
                warnings: p.warnings,
            })
        })?;
        let warnings: usize = parsed.iter().map(|p| p.warnings.len()).sum();
        self.write(PARSED, &parsed)?;

        let mut msg = format!("parsed {} outputs ({warnings} warnings)", parsed.len());
        if parsed.iter().any(|p| p.mode == Mode::Speer) && self.path(TAGGED).is_file() {
            let tagged = self.tagged_map()?;
            let extractor = self.extractor()?;
            let provider = self.provider()?;
            let threshold = self.cfg.synonym_threshold;
            let speer: Vec<&ParsedRecord> = parsed.iter().filter(|p| p.mode == Mode::Speer).collect();
            let reports: Vec<PlanValidationRecord> = self.par_map(&speer, |p| {
                let id = &p.admission_id;
                let t = tagged.get(id).ok_or_else(|| at("parse", id, &"no tagged source; re-run `tag`"))?;
                let out = crate::r3::SpeerOutput {
                    plans: p.plans.clone(),
                    summary: p.summary.clone(),
                };
                let report = validate_plans(&out, t, &extractor, provider.as_ref(), threshold).map_err(|e| at("parse", id, &e))?;
                Ok(PlanValidationRecord {
                    admission_id: id.clone(),
                    mode: p.mode,
                    report,
                })
            })?;
            let mut totals = crate::r3::PlanTotals::default();
            for r in &reports {
                totals.add(&r.report.totals);
            }
            self.write(PLAN_VALIDATION, &reports)?;
            msg.push_str(&format!(
                "; plans grounded {}/{}, realized {}/{}",
                totals.grounded(),
                totals.planned,
                totals.realized(),
                totals.planned
            ));
        }
        Ok(msg)
    }

    pub fn eval(&self, with_rouge: bool) -> Result<Aggregate> {
        let parsed: Vec<ParsedRecord> = self.read(PARSED)?;
        let contexts: HashMap<String, SalientContext> = self
            .salient_context("eval")?
            .into_iter()
            .map(|c| (c.admission.admission_id.clone(), c))
            .collect();
        let extractor = self.extractor()?;
        let provider = self.provider()?;
        let tokenizer = self.tokenizer()?;
        let threshold = self.cfg.synonym_threshold;
        let rows: Vec<EvalRow> = self.par_map(&parsed, |p| {
            let id = &p.admission_id;
            let c = contexts.get(id).ok_or_else(|| at("eval", id, &"admission missing from the source notes"))?;
            let err = |e: &dyn std::fmt::Display| at("eval", id, e);
            let summary = strip_tags(&p.summary);
            let model_spans = extract_entities("summary", &summary, &extractor).map_err(|e| err(&e))?;
            let model = align_to_source(&model_spans, &c.esgs, provider.as_ref(), threshold).map_err(|e| err(&e))?;
            let reference = match &c.entities.reference {
                Some(spans) => Some(align_to_source(spans, &c.esgs, provider.as_ref(), threshold).map_err(|e| err(&e))?),
                None => None,
            };
            let (sgr_v, sgp, f1) = match &reference {
                Some(r) => {
                    let (sgp, f1) = sgp_f1(r, &model);
                    (sgr(r, &model), sgp, f1)
                }
                None => (None, None, None),
            };
            let adh = (p.mode != Mode::NonGuided).then(|| adherence(&model, &c.salient_ids)).unwrap_or_default();
            let rouge = |n| {
                c.admission
                    .reference_summary
                    .as_deref()
                    .filter(|_| with_rouge)
                    .map(|r| rouge_f1(&summary, r, n))
            };
            Ok(EvalRow {
                admission_id: id.clone(),
                mode: p.mode,
                sgr: sgr_v,
                hr: hallucination_rate(&model),
                sgp,
                f1,
                adh_recall: adh.recall,
                adh_precision: adh.precision,
                adh_f1: adh.f1,
                tokens: tokenizer.count(&summary),
                rouge1: rouge(1),
                rouge2: rouge(2),
                multi_candidate: model.multi_candidate,
            })
        })?;
        let report = EvalReport::new(rows).map_err(|e| data_err(&self.path(PARSED), e))?;
        self.prepare_outputs()?;
        let csv_path = self.path(REPORT_CSV);
        let file = File::create(&csv_path).map_err(|e| data_err(&csv_path, e))?;
        write_report_csv(BufWriter::new(file), &report, with_rouge).map_err(|e| data_err(&csv_path, e))?;
        let json_path = self.path(REPORT_JSON);
        let json = serde_json::to_string_pretty(&report).map_err(|e| PipelineError::Invariant(e.to_string()))?;
        fs::write(&json_path, json + "\n").map_err(|e| data_err(&json_path, e))?;
        Ok(report.aggregate)
    }
}

struct SalientContext {
    admission: Admission,
    entities: AdmissionEntities,
    esgs: Vec<Esg>,
    salient_ids: BTreeSet<usize>,
    salient_esgs: Vec<Esg>,
}

