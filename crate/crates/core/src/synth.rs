//! Deterministic synthetic admissions with a matching lexicon.
//!
//! Each concept has a canonical surface plus variants (case changes,
//! plurals) that the default embedding provider places above the synonym
//! threshold, while distinct concepts stay below it. The generator records
//! which concepts the reference summary mentions, so it doubles as a label
//! oracle.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Admission, Note};
use crate::entity::SemanticType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Concept {
    pub canonical: &'static str,
    pub variants: &'static [&'static str],
    pub semantic_type: SemanticType,
}

impl Concept {
    pub fn surfaces(&self) -> impl Iterator<Item = &'static str> + '_ {
        std::iter::once(self.canonical).chain(self.variants.iter().copied())
    }
}

const fn concept(canonical: &'static str, variants: &'static [&'static str], semantic_type: SemanticType) -> Concept {
    Concept {
        canonical,
        variants,
        semantic_type,
    }
}

use SemanticType::{Problem, Test, Treatment};

pub const CONCEPTS: &[Concept] = &[
    concept("pneumonia", &["Pneumonia", "PNEUMONIA"], Problem),
    concept("atrial fibrillation", &["Atrial Fibrillation", "atrial fibrillations"], Problem),
    concept("acute kidney injury", &["Acute Kidney Injury", "acute kidney injuries"], Problem),
    concept("cellulitis", &["Cellulitis"], Problem),
    concept("hyperkalemia", &["Hyperkalemia"], Problem),
    concept("sepsis", &["Sepsis", "SEPSIS"], Problem),
    concept("delirium", &["Delirium"], Problem),
    concept("chest pain", &["Chest Pain", "CHEST PAIN"], Problem),
    concept("dyspnea", &["Dyspnea"], Problem),
    concept("anemia", &["Anemia", "ANEMIA"], Problem),
    concept("urinary tract infection", &["Urinary Tract Infection", "urinary tract infections"], Problem),
    concept("diabetes mellitus", &["Diabetes Mellitus", "DIABETES MELLITUS"], Problem),
    concept("pulmonary embolism", &["Pulmonary Embolism", "pulmonary emboli"], Problem),
    concept("heart failure", &["Heart Failure", "HEART FAILURE"], Problem),
    concept("gastrointestinal bleed", &["Gastrointestinal Bleed", "gastrointestinal bleeds"], Problem),
    concept("chest x-ray", &["Chest X-ray", "chest x-rays"], Test),
    concept("WBC", &["wbc", "Wbc"], Test),
    concept("blood cultures", &["blood culture", "Blood Cultures"], Test),
    concept("CT scan", &["CT scans", "ct scan"], Test),
    concept("echocardiogram", &["Echocardiogram", "echocardiograms"], Test),
    concept("troponin", &["Troponin", "troponins"], Test),
    concept("lactate", &["Lactate", "LACTATE"], Test),
    concept("MRI", &["mri", "Mri"], Test),
    concept("urinalysis", &["Urinalysis", "URINALYSIS"], Test),
    concept("creatinine", &["Creatinine", "creatinines"], Test),
    concept("hemoglobin", &["Hemoglobin", "HEMOGLOBIN"], Test),
    concept("vancomycin", &["Vancomycin", "VANCOMYCIN"], Treatment),
    concept("ceftriaxone", &["Ceftriaxone", "CEFTRIAXONE"], Treatment),
    concept("heparin drip", &["Heparin Drip", "heparin drips"], Treatment),
    concept("furosemide", &["Furosemide", "FUROSEMIDE"], Treatment),
    concept("insulin sliding scale", &["Insulin Sliding Scale", "insulin sliding scales"], Treatment),
    concept("metoprolol", &["Metoprolol", "METOPROLOL"], Treatment),
    concept("IV fluids", &["iv fluids", "IV fluid"], Treatment),
    concept("lisinopril", &["Lisinopril"], Treatment),
    concept("aspirin", &["Aspirin", "ASPIRIN"], Treatment),
    concept("prednisone", &["Prednisone", "PREDNISONE"], Treatment),
    concept("albuterol nebulizers", &["Albuterol Nebulizers", "albuterol nebulizer"], Treatment),
    concept("packed red blood cells", &["Packed Red Blood Cells", "packed red blood cell"], Treatment),
];

const PROBLEM_TEMPLATES: &[&str] = &[
    "Patient evaluated for {} overnight.",
    "Team remains concerned about {} at this time.",
    "History notable for {} per family.",
    "Ongoing management of {} discussed on rounds.",
];

const TEST_TEMPLATES: &[&str] = &[
    "Repeat {} ordered this morning.",
    "Results of the {} reviewed with the team.",
    "Will trend {} daily.",
    "Findings on {} discussed with the patient.",
];

const TREATMENT_TEMPLATES: &[&str] = &[
    "Started on {} today.",
    "Continued {} without complication.",
    "Dose of {} adjusted by pharmacy.",
    "Tolerating {} well per nursing.",
];

const FILLER: &[&str] = &[
    "Resting comfortably in bed.",
    "Family updated at bedside.",
    "Tolerating a regular diet.",
    "Ambulating in the hallway with assistance.",
    "No acute events overnight.",
    "Vital signs stable this shift.",
    "Plan discussed with the attending physician.",
    "Will continue to monitor closely.",
    "Patient asked appropriate questions.",
    "Call light within reach and bed in low position.",
    "Heart rate 82 and blood pressure 124/76.",
    "Slept through most of the night.",
    "Social work following for disposition.",
    "Reports feeling somewhat better today.",
    "Case management aware of discharge needs.",
];

const NOTE_TYPES: &[(&str, &[&str])] = &[
    ("Admission History and Physical", &["CHIEF COMPLAINT:", "HISTORY OF PRESENT ILLNESS:", "SOCIAL HISTORY:", "PHYSICAL EXAM:", "ASSESSMENT AND PLAN:"]),
    ("Progress Note", &["SUBJECTIVE:", "OBJECTIVE:", "LABS", "ASSESSMENT AND PLAN:"]),
    ("Nursing Progress Note", &["Overnight events:", "Neuro:", "Cardiovascular:", "Plan:"]),
    ("Consult Note", &["REASON FOR CONSULT:", "HISTORY:", "RECOMMENDATIONS:"]),
    ("Radiology Report", &["INDICATION:", "FINDINGS:", "IMPRESSION:"]),
];

const REFERENCE_TEMPLATES: &[&str] = &[
    "The patient was admitted with {}.",
    "During the stay the team addressed {}.",
    "Course was notable for {}.",
    "Management included {}.",
];

/// Which concepts the reference summary covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SalienceRule {
    /// Mentioned by the reference with a probability that grows with the
    /// concept's source mention count.
    Graded,
    /// Exactly the concepts with at least this many source mentions.
    CountAtLeast(usize),
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub admissions: usize,
    pub seed: u64,
    pub min_concepts: usize,
    pub max_concepts: usize,
    pub max_mentions: usize,
    /// Share of admissions padded far past the default token budget.
    pub long_fraction: f64,
    pub salience: SalienceRule,
    /// Adds reference-only concepts absent from the source.
    pub unsupported: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            admissions: 40,
            seed: 7,
            min_concepts: 6,
            max_concepts: 14,
            max_mentions: 6,
            long_fraction: 0.2,
            salience: SalienceRule::Graded,
            unsupported: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthAdmission {
    pub admission: Admission,
    /// Canonical surface to source mention count.
    pub mention_counts: BTreeMap<&'static str, usize>,
    /// Canonical surfaces the reference mentions and the source supports.
    pub salient: Vec<&'static str>,
}

pub fn gazetteer() -> Vec<(&'static str, SemanticType)> {
    CONCEPTS.iter().flat_map(|c| c.surfaces().map(move |s| (s, c.semantic_type))).collect()
}

pub fn write_gazetteer<W: Write>(mut w: W) -> std::io::Result<()> {
    writeln!(w, "# surface\ttype")?;
    for (s, t) in gazetteer() {
        writeln!(w, "{s}\t{t}")?;
    }
    Ok(())
}

fn fill(template: &str, surface: &str) -> String {
    template.replacen("{}", surface, 1)
}

fn mention_sentence(rng: &mut ChaCha8Rng, c: &Concept) -> String {
    let templates = match c.semantic_type {
        Problem => PROBLEM_TEMPLATES,
        Test => TEST_TEMPLATES,
        Treatment => TREATMENT_TEMPLATES,
    };
    let surface = *c.surfaces().collect::<Vec<_>>().choose(rng).expect("non-empty");
    fill(templates.choose(rng).expect("non-empty"), surface)
}

struct Draft {
    title: &'static str,
    headers: &'static [&'static str],
    sections: Vec<Vec<String>>,
}

pub fn generate(cfg: &SynthConfig) -> Vec<SynthAdmission> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date");
    (0..cfg.admissions).map(|k| generate_one(&mut rng, cfg, k, base)).collect()
}

fn generate_one(rng: &mut ChaCha8Rng, cfg: &SynthConfig, k: usize, base: NaiveDate) -> SynthAdmission {
    let long = rng.gen_bool(cfg.long_fraction);
    let days = if long { rng.gen_range(8..=14) } else { rng.gen_range(1..=5) };
    let start = base + Days::new(7 * k as u64);

    let mut drafts: Vec<(NaiveDate, Draft)> = Vec::new();
    for d in 0..days {
        let per_day = if long { rng.gen_range(3..=5) } else { rng.gen_range(1..=2) };
        for _ in 0..per_day {
            let &(title, headers) = NOTE_TYPES.choose(rng).expect("non-empty");
            let filler_per_section = if long { 20..=45 } else { 1..=4 };
            let sections = headers
                .iter()
                .map(|_| {
                    let n = rng.gen_range(filler_per_section.clone());
                    (0..n).map(|_| FILLER.choose(rng).expect("non-empty").to_string()).collect()
                })
                .collect();
            drafts.push((
                start + Days::new(d as u64),
                Draft {
                    title,
                    headers,
                    sections,
                },
            ));
        }
    }

    let n_concepts = rng.gen_range(cfg.min_concepts..=cfg.max_concepts).min(CONCEPTS.len());
    let mut pool: Vec<&Concept> = CONCEPTS.iter().collect();
    pool.shuffle(rng);
    let (present, absent) = pool.split_at(n_concepts);

    let mut mention_counts = BTreeMap::new();
    for c in present {
        let count = rng.gen_range(1..=cfg.max_mentions);
        mention_counts.insert(c.canonical, count);
        for _ in 0..count {
            let note = rng.gen_range(0..drafts.len());
            let sections = &mut drafts[note].1.sections;
            let s = rng.gen_range(0..sections.len());
            let at = rng.gen_range(0..=sections[s].len());
            sections[s].insert(at, mention_sentence(rng, c));
        }
    }

    let salient: Vec<&'static str> = present
        .iter()
        .filter(|c| {
            let count = mention_counts[c.canonical];
            match cfg.salience {
                SalienceRule::CountAtLeast(m) => count >= m,
                SalienceRule::Graded => rng.gen_bool((0.15 + 0.2 * count as f64).min(0.95)),
            }
        })
        .map(|c| c.canonical)
        .collect();

    let mut reference_sentences: Vec<String> = salient
        .iter()
        .map(|canon| {
            let c = CONCEPTS.iter().find(|c| c.canonical == *canon).expect("known concept");
            let surface = *c.surfaces().collect::<Vec<_>>().choose(rng).expect("non-empty");
            fill(REFERENCE_TEMPLATES.choose(rng).expect("non-empty"), surface)
        })
        .collect();
    if cfg.unsupported && !absent.is_empty() && rng.gen_bool(0.5) {
        let c = absent.choose(rng).expect("non-empty");
        reference_sentences.push(fill("Follow up for {} was arranged as an outpatient.", c.canonical));
    }
    reference_sentences.push("Discharged home in stable condition.".into());

    let notes = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (date, d))| {
            let mut body = String::new();
            for (h, sentences) in d.headers.iter().zip(&d.sections) {
                body.push_str(h);
                body.push('\n');
                for chunk in sentences.chunks(6) {
                    body.push_str(&chunk.join(" "));
                    body.push('\n');
                }
            }
            Note {
                note_id: format!("a{k:03}-n{i:02}"),
                title: d.title.to_owned(),
                date,
                body: body.trim_end().to_owned(),
            }
        })
        .collect();

    SynthAdmission {
        admission: Admission {
            admission_id: format!("a{k:03}"),
            notes,
            reference_summary: Some(reference_sentences.join(" ")),
        },
        mention_counts,
        salient,
    }
}
