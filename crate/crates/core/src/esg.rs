//! Entity Synonym Groups: connected components of the mention synonym graph.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{cosine_similarity, EmbeddingCache, EmbeddingProvider, EntityError, EntitySpan, SemanticType};

pub const DEFAULT_SYNONYM_THRESHOLD: f64 = 0.75;
pub const DEFAULT_ESG_CAP: usize = 1024;

#[derive(Debug, Error)]
pub enum EsgError {
    #[error("oracle labeling requires a reference")]
    MissingReference,
    #[error("ESG cap must be at least 1")]
    ZeroCap,
    #[error(transparent)]
    Entity(#[from] EntityError),
}

/// One node per distinct surface (in order of first appearance); undirected
/// edges stored as `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl SynonymGraph {
    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esg {
    pub esg_id: usize,
    /// Distinct surfaces, in order of first mention.
    pub surfaces: Vec<String>,
    pub mentions: Vec<EntitySpan>,
    pub semantic_type: SemanticType,
    pub mention_count: usize,
    pub freq_rank: Option<usize>,
}

impl Esg {
    pub fn first_offset(&self) -> usize {
        self.mentions.iter().map(|m| m.start).min().unwrap_or(usize::MAX)
    }

    pub fn contains_surface(&self, surface: &str) -> bool {
        self.surfaces.iter().any(|s| s == surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalienceLabel {
    pub esg_id: usize,
    pub salient: bool,
}

fn distinct_surfaces(spans: &[EntitySpan]) -> Vec<String> {
    let mut seen = HashSet::new();
    spans
        .iter()
        .filter(|s| seen.insert(s.surface.as_str()))
        .map(|s| s.surface.clone())
        .collect()
}

/// Edge between distinct surfaces iff cosine ≥ `threshold`. Exact duplicates
/// share a node.
pub fn build_synonym_graph(
    spans: &[EntitySpan],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<SynonymGraph, EsgError> {
    let nodes = distinct_surfaces(spans);
    let vectors = nodes
        .iter()
        .map(|s| provider.embed(s))
        .collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<Vec<(usize, usize)>> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in i + 1..nodes.len() {
                if cosine_similarity(&vectors[i], &vectors[j])? >= threshold {
                    row.push((i, j));
                }
            }
            Ok(row)
        })
        .collect::<Result<_, EntityError>>()?;

    Ok(SynonymGraph {
        nodes,
        edges: rows.into_iter().flatten().collect(),
    })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller root so component roots are their minimum node.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn dominant_type(mentions: &[EntitySpan]) -> SemanticType {
    let mut counts: BTreeMap<SemanticType, usize> = BTreeMap::new();
    for m in mentions {
        *counts.entry(m.semantic_type).or_default() += 1;
    }
    // Ties resolve PROBLEM > TREATMENT > TEST.
    let priority = |t: SemanticType| match t {
        SemanticType::Problem => 2,
        SemanticType::Treatment => 1,
        SemanticType::Test => 0,
    };
    counts
        .into_iter()
        .max_by_key(|&(t, c)| (c, priority(t)))
        .map(|(t, _)| t)
        .unwrap_or(SemanticType::Problem)
}

/// One ESG per connected component, numbered by the first appearance of any
/// of its surfaces. Spans whose surface is not a graph node are ignored.
pub fn form_esgs(graph: &SynonymGraph, spans: &[EntitySpan]) -> Vec<Esg> {
    let mut dsu = DisjointSet::new(graph.nodes.len());
    for &(a, b) in &graph.edges {
        dsu.union(a, b);
    }

    let mut component_of_root: HashMap<usize, usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for node in 0..graph.nodes.len() {
        let root = dsu.find(node);
        let c = *component_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[c].push(node);
    }

    let index = graph.node_index();
    let mut mentions: Vec<Vec<EntitySpan>> = vec![Vec::new(); members.len()];
    for span in spans {
        if let Some(&node) = index.get(span.surface.as_str()) {
            mentions[component_of_root[&dsu.find(node)]].push(span.clone());
        }
    }

    members
        .into_iter()
        .zip(mentions)
        .enumerate()
        .map(|(esg_id, (nodes, mentions))| Esg {
            esg_id,
            surfaces: nodes.into_iter().map(|n| graph.nodes[n].clone()).collect(),
            semantic_type: dominant_type(&mentions),
            mention_count: mentions.len(),
            mentions,
            freq_rank: None,
        })
        .collect()
}

/// Convenience: graph + components in one call.
pub fn group_mentions(spans: &[EntitySpan], provider: &dyn EmbeddingProvider, threshold: f64) -> Result<Vec<Esg>, EsgError> {
    let graph = build_synonym_graph(spans, provider, threshold)?;
    Ok(form_esgs(&graph, spans))
}

/// Sorts by mention count (descending), then earliest first mention, then
/// smallest surface; assigns `freq_rank` 1..=K and keeps the first `cap`.
pub fn rank_and_truncate(mut esgs: Vec<Esg>, cap: usize) -> Result<Vec<Esg>, EsgError> {
    if cap == 0 {
        return Err(EsgError::ZeroCap);
    }
    esgs.sort_by(|a, b| {
        b.mention_count
            .cmp(&a.mention_count)
            .then(a.first_offset().cmp(&b.first_offset()))
            .then_with(|| a.surfaces.iter().min().cmp(&b.surfaces.iter().min()))
    });
    for (i, e) in esgs.iter_mut().enumerate() {
        e.freq_rank = Some(i + 1);
    }
    esgs.truncate(cap);
    Ok(esgs)
}

/// Salient iff some surface of the ESG is an exact match of, or has cosine ≥
/// `threshold` with, some reference mention. `None` means the admission has
/// no reference summary.
pub fn label_salience(
    source_esgs: &[Esg],
    reference_spans: Option<&[EntitySpan]>,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Vec<SalienceLabel>, EsgError> {
    let reference_spans = reference_spans.ok_or(EsgError::MissingReference)?;
    let reference = distinct_surfaces(reference_spans);
    let mut cache = EmbeddingCache::new(provider);
    source_esgs
        .iter()
        .map(|esg| {
            let mut salient = false;
            'outer: for s in &esg.surfaces {
                for r in &reference {
                    if cache.is_synonym(s, r, threshold)? {
                        salient = true;
                        break 'outer;
                    }
                }
            }
            Ok(SalienceLabel {
                esg_id: esg.esg_id,
                salient,
            })
        })
        .collect()
}

/// Serialized ESG without its mention list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsgEntry {
    pub esg_id: usize,
    pub surfaces: Vec<String>,
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
    pub mention_count: usize,
    pub freq_rank: usize,
    pub salient: Option<bool>,
}

/// One line of the ESG JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsgRecord {
    pub admission_id: String,
    pub esgs: Vec<EsgEntry>,
}

impl EsgEntry {
    pub fn from_esg(esg: &Esg, salient: Option<bool>) -> Self {
        Self {
            esg_id: esg.esg_id,
            surfaces: esg.surfaces.clone(),
            semantic_type: esg.semantic_type,
            mention_count: esg.mention_count,
            freq_rank: esg.freq_rank.unwrap_or(0),
            salient,
        }
    }
}

/// Rebuilds full ESGs from their serialized entries and the admission's
/// source spans.
pub fn rehydrate(entries: &[EsgEntry], spans: &[EntitySpan]) -> Vec<Esg> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        for s in &e.surfaces {
            owner.insert(s.as_str(), i);
        }
    }
    let mut mentions: Vec<Vec<EntitySpan>> = vec![Vec::new(); entries.len()];
    for span in spans {
        if let Some(&i) = owner.get(span.surface.as_str()) {
            mentions[i].push(span.clone());
        }
    }
    entries
        .iter()
        .zip(mentions)
        .map(|(e, mentions)| Esg {
            esg_id: e.esg_id,
            surfaces: e.surfaces.clone(),
            semantic_type: e.semantic_type,
            mention_count: e.mention_count,
            mentions,
            freq_rank: Some(e.freq_rank),
        })
        .collect()
}
