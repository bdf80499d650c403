//! Feature-based ESG salience classifier and precision–recall sweeps.
//!
//! The model is plain logistic regression trained with full-batch gradient
//! descent, so results are reproducible bit for bit given the seed. Scores
//! from any other selector can be injected through [`PredictionRecord`].

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::SemanticType;
use crate::esg::Esg;

pub const FEATURE_DIM: usize = 8;
pub const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_SALIENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("training data needs at least one positive and one negative example")]
    SingleClass,
    #[error("no positive labels; recall is undefined")]
    NoPositives,
    #[error("unsupported model feature_version {0}")]
    FeatureVersion(u32),
    #[error("model has {0} weights, expected {FEATURE_DIM}")]
    WeightCount(usize),
    #[error("non-finite model parameters")]
    NonFinite,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// `[ln(1+count), rank/K, PROBLEM, TEST, TREATMENT, note fraction,
///   first position, ln(1+|surfaces|)]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

/// Per-admission context needed by [`featurize`].
#[derive(Debug, Clone)]
pub struct AdmissionStats {
    /// Character range of each note inside the concatenated source.
    pub note_ranges: Vec<Range<usize>>,
    /// Number of ESGs after ranking (K).
    pub esg_count: usize,
    /// Character length of the concatenated source.
    pub source_len: usize,
}

pub fn featurize(esg: &Esg, stats: &AdmissionStats) -> FeatureVector {
    let rank = esg.freq_rank.unwrap_or(stats.esg_count) as f64;
    let k = stats.esg_count.max(1) as f64;
    let notes_hit = stats
        .note_ranges
        .iter()
        .filter(|r| esg.mentions.iter().any(|m| r.contains(&m.start)))
        .count();
    let doc_freq = if stats.note_ranges.is_empty() {
        0.0
    } else {
        notes_hit as f64 / stats.note_ranges.len() as f64
    };
    let position = if stats.source_len == 0 || esg.mentions.is_empty() {
        0.0
    } else {
        esg.first_offset() as f64 / stats.source_len as f64
    };
    let one_hot = |t: SemanticType| if esg.semantic_type == t { 1.0 } else { 0.0 };
    FeatureVector([
        (1.0 + esg.mention_count as f64).ln(),
        rank / k,
        one_hot(SemanticType::Problem),
        one_hot(SemanticType::Test),
        one_hot(SemanticType::Treatment),
        doc_freq,
        position,
        (1.0 + esg.surfaces.len() as f64).ln(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalienceModel {
    pub weights: [f64; FEATURE_DIM],
    pub bias: f64,
    pub training: Option<TrainConfig>,
}

/// On-disk model: `{"weights": [f64; 8], "bias": f64, "feature_version": 1}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    weights: Vec<f64>,
    bias: f64,
    feature_version: u32,
}

impl SalienceModel {
    pub fn zeros() -> Self {
        Self {
            weights: [0.0; FEATURE_DIM],
            bias: 0.0,
            training: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            weights: self.weights.to_vec(),
            bias: self.bias,
            feature_version: FEATURE_VERSION,
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.feature_version != FEATURE_VERSION {
            return Err(SelectError::FeatureVersion(file.feature_version).into());
        }
        let weights: [f64; FEATURE_DIM] = file
            .weights
            .as_slice()
            .try_into()
            .map_err(|_| SelectError::WeightCount(file.weights.len()))?;
        if !file.bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(SelectError::NonFinite.into());
        }
        Ok(Self {
            weights,
            bias: file.bias,
            training: None,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logit(weights: &[f64; FEATURE_DIM], bias: f64, x: &FeatureVector) -> f64 {
    weights.iter().zip(&x.0).map(|(w, v)| w * v).sum::<f64>() + bias
}

pub fn predict(model: &SalienceModel, features: &FeatureVector) -> f64 {
    sigmoid(logit(&model.weights, model.bias, features))
}

/// Mean logistic loss and its gradient with respect to `(weights, bias)`.
pub fn loss_and_gradient(
    weights: &[f64; FEATURE_DIM],
    bias: f64,
    examples: &[(FeatureVector, bool)],
) -> (f64, [f64; FEATURE_DIM], f64) {
    let n = examples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    let mut grad_b = 0.0;
    for (x, y) in examples {
        let y = if *y { 1.0 } else { 0.0 };
        let z = logit(weights, bias, x);
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, v) in grad.iter_mut().zip(&x.0) {
            *g += r * v;
        }
        grad_b += r;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad, grad_b / n)
}

/// Trains and also returns the loss before each epoch plus the final loss.
pub fn train_with_history(
    examples: &[(FeatureVector, bool)],
    config: TrainConfig,
) -> Result<(SalienceModel, Vec<f64>), SelectError> {
    let positives = examples.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == examples.len() {
        return Err(SelectError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = [0.0; FEATURE_DIM];
    for w in &mut weights {
        *w = rng.gen_range(-0.01..0.01);
    }
    let mut bias = 0.0;
    let mut history = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grad, grad_b) = loss_and_gradient(&weights, bias, examples);
        history.push(loss);
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
        bias -= config.learning_rate * grad_b;
    }
    history.push(loss_and_gradient(&weights, bias, examples).0);
    if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(SelectError::NonFinite);
    }
    Ok((
        SalienceModel {
            weights,
            bias,
            training: Some(config),
        },
        history,
    ))
}

pub fn train(examples: &[(FeatureVector, bool)], config: TrainConfig) -> Result<SalienceModel, SelectError> {
    train_with_history(examples, config).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Predicted positive iff `score >= threshold`. One point per distinct score
/// in ascending order, plus a 0.0 lower endpoint when every score is above it
/// and a `+inf` upper endpoint (empty prediction, precision 1.0).
pub fn sweep_thresholds(scores: &[(f64, bool)]) -> Result<Vec<PrPoint>, SelectError> {
    let positives = scores.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return Err(SelectError::NoPositives);
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Walk from the highest score down, accumulating confusion counts.
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let point = |t: f64, tp: usize, fp: usize| PrPoint {
        threshold: t,
        precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: tp as f64 / positives as f64,
    };
    points.push(point(f64::INFINITY, 0, 0));
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0.total_cmp(&t).is_eq() {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(t, tp, fp));
    }
    if sorted.last().is_some_and(|&(s, _)| s > 0.0) {
        points.push(point(0.0, tp, fp));
    }
    points.reverse();
    Ok(points)
}

pub fn write_pr_csv<W: Write>(writer: W, points: &[PrPoint]) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "precision", "recall"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsgScore {
    pub esg_id: usize,
    pub score: f64,
}

/// One line of the prediction JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub admission_id: String,
    pub scores: Vec<EsgScore>,
}

impl PredictionRecord {
    pub fn salient_ids(&self, threshold: f64) -> Vec<usize> {
        self.scores.iter().filter(|s| s.score >= threshold).map(|s| s.esg_id).collect()
    }
}
