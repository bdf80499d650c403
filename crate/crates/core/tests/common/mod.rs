#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use speer::corpus::{Admission, Note};
use speer::entity::{EmbeddingProvider, EntitySpan, SemanticType};

pub fn span(doc: &str, start: usize, surface: &str, ty: SemanticType) -> EntitySpan {
    EntitySpan {
        doc_id: doc.into(),
        start,
        end: start + surface.chars().count(),
        surface: surface.into(),
        semantic_type: ty,
    }
}

pub fn note(id: &str, date: &str, body: &str) -> Note {
    Note {
        note_id: id.into(),
        title: format!("Note {id}"),
        date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
        body: body.into(),
    }
}

pub fn admission(id: &str, notes: Vec<Note>, reference: Option<&str>) -> Admission {
    Admission {
        admission_id: id.into(),
        notes,
        reference_summary: reference.map(String::from),
    }
}

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ne", "ru", "ta", "vo", "si", "pe", "du", "xa", "bri", "sto", "gle"];

/// Families of surfaces: a random stem plus near variants (case change,
/// suffix, one-letter edit), so the synonym graph has real structure.
pub fn random_surfaces(rng: &mut ChaCha8Rng, max_unique: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    while out.len() < max_unique {
        let stem: String = (0..rng.gen_range(2..=5)).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        let mut family = vec![stem.clone()];
        for _ in 0..rng.gen_range(0..=3) {
            let v = match rng.gen_range(0..4) {
                0 => stem.to_uppercase(),
                1 => format!("{stem}s"),
                2 => format!("{stem} {}", SYLLABLES.choose(rng).unwrap()),
                _ => {
                    let mut c: Vec<char> = stem.chars().collect();
                    let i = rng.gen_range(0..c.len());
                    c[i] = *['a', 'e', 'o', 'z'].choose(rng).unwrap();
                    c.into_iter().collect()
                }
            };
            family.push(v);
        }
        for s in family {
            if out.len() < max_unique && !out.contains(&s) {
                out.push(s);
            }
        }
    }
    out
}

/// Non-overlapping mentions of the given surfaces laid out left to right.
pub fn random_mentions(rng: &mut ChaCha8Rng, surfaces: &[String], extra: usize) -> Vec<EntitySpan> {
    let mut picks: Vec<&String> = surfaces.iter().collect();
    for _ in 0..extra {
        picks.push(surfaces.choose(rng).unwrap());
    }
    picks.shuffle(rng);
    let mut pos = 0;
    picks
        .into_iter()
        .map(|s| {
            pos += rng.gen_range(1..20);
            let ty = *SemanticType::ALL.choose(rng).unwrap();
            let sp = span("src", pos, s, ty);
            pos = sp.end;
            sp
        })
        .collect()
}

pub fn dot_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Partition of `surfaces` into connected components of the thresholded
/// similarity graph, by repeated label relaxation.
pub fn partition_oracle(surfaces: &[String], provider: &dyn EmbeddingProvider, threshold: f64) -> BTreeSet<BTreeSet<String>> {
    let vecs: Vec<Vec<f64>> = surfaces.iter().map(|s| provider.embed(s).unwrap()).collect();
    let n = surfaces.len();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j && dot_cos(&vecs[i], &vecs[j]) >= threshold && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: HashMap<usize, BTreeSet<String>> = HashMap::new();
    for (i, l) in label.into_iter().enumerate() {
        groups.entry(l).or_default().insert(surfaces[i].clone());
    }
    groups.into_values().collect()
}

pub fn distinct(spans: &[EntitySpan]) -> Vec<String> {
    let mut seen = Vec::new();
    for s in spans {
        if !seen.contains(&s.surface) {
            seen.push(s.surface.clone());
        }
    }
    seen
}

/// A synthetic admission run through extraction, grouping and labeling.
pub struct Prepared {
    pub admission: Admission,
    pub source: String,
    pub esgs: Vec<speer::esg::Esg>,
    pub salient: Vec<speer::esg::Esg>,
}

pub fn lexicon() -> speer::entity::LexiconExtractor {
    speer::entity::LexiconExtractor::new(speer::synth::gazetteer())
}

pub fn prepare(admission: Admission, extractor: &dyn speer::entity::EntityExtractor, provider: &dyn EmbeddingProvider) -> Prepared {
    use speer::esg::{group_mentions, label_salience, rank_and_truncate};
    let source = speer::corpus::concatenate_notes(&admission);
    let spans = speer::entity::extract_entities("source", &source, extractor).unwrap();
    let esgs = rank_and_truncate(group_mentions(&spans, provider, 0.75).unwrap(), 1024).unwrap();
    let reference = admission.reference_summary.as_deref().unwrap_or("");
    let ref_spans = speer::entity::extract_entities("reference", reference, extractor).unwrap();
    let labels = label_salience(&esgs, Some(&ref_spans), provider, 0.75).unwrap();
    let salient = esgs.iter().zip(&labels).filter(|(_, l)| l.salient).map(|(e, _)| e.clone()).collect();
    Prepared {
        admission,
        source,
        esgs,
        salient,
    }
}

pub fn synth_admissions(n: usize, seed: u64) -> Vec<speer::synth::SynthAdmission> {
    speer::synth::generate(&speer::synth::SynthConfig {
        admissions: n,
        seed,
        long_fraction: 0.0,
        ..Default::default()
    })
}
