mod common;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{distinct, dot_cos, partition_oracle, random_mentions, random_surfaces, span};
use speer::entity::{EmbeddingProvider, HashedNgramProvider, SemanticType};
use speer::esg::*;

fn partition(esgs: &[Esg]) -> BTreeSet<BTreeSet<String>> {
    esgs.iter().map(|e| e.surfaces.iter().cloned().collect()).collect()
}

#[test]
fn components_match_label_relaxation() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut merged = 0;
    for _ in 0..60 {
        let n = rng.gen_range(1..=40);
        let surfaces = random_surfaces(&mut rng, n);
        let extra = rng.gen_range(0..30);
        let spans = random_mentions(&mut rng, &surfaces, extra);
        let esgs = group_mentions(&spans, &provider, DEFAULT_SYNONYM_THRESHOLD).unwrap();
        assert_eq!(partition(&esgs), partition_oracle(&distinct(&spans), &provider, DEFAULT_SYNONYM_THRESHOLD));
        merged += esgs.iter().filter(|e| e.surfaces.len() > 1).count();
    }
    // the generator must actually produce synonym families
    assert!(merged > 60, "only {merged} multi-surface groups");
}

#[test]
fn graph_invariants() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let surfaces = random_surfaces(&mut rng, 25);
        let spans = random_mentions(&mut rng, &surfaces, 10);
        let g = build_synonym_graph(&spans, &provider, 0.75).unwrap();
        assert_eq!(g.nodes, distinct(&spans));
        let edges: BTreeSet<(usize, usize)> = g.edges.iter().copied().collect();
        assert_eq!(edges.len(), g.edges.len());
        for i in 0..g.nodes.len() {
            for j in i + 1..g.nodes.len() {
                let sim = dot_cos(&provider.embed(&g.nodes[i]).unwrap(), &provider.embed(&g.nodes[j]).unwrap());
                assert_eq!(edges.contains(&(i, j)), sim >= 0.75, "{} / {}", g.nodes[i], g.nodes[j]);
            }
        }
        assert!(g.edges.iter().all(|&(a, b)| a < b));
    }
}

#[test]
fn mentions_are_conserved() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let surfaces = random_surfaces(&mut rng, 30);
        let spans = random_mentions(&mut rng, &surfaces, 40);
        let esgs = group_mentions(&spans, &provider, 0.75).unwrap();
        assert_eq!(esgs.iter().map(|e| e.mention_count).sum::<usize>(), spans.len());
        for e in &esgs {
            assert_eq!(e.mention_count, e.mentions.len());
            assert!(e.mentions.iter().all(|m| e.contains_surface(&m.surface)));
        }
    }
}

#[test]
fn ranking_matches_sorted_keys() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let surfaces = random_surfaces(&mut rng, 30);
        let spans = random_mentions(&mut rng, &surfaces, 60);
        let esgs = group_mentions(&spans, &provider, 0.75).unwrap();
        let mut keys: Vec<(std::cmp::Reverse<usize>, usize, String)> = esgs
            .iter()
            .map(|e| {
                let first = e.mentions.iter().map(|m| m.start).min().unwrap();
                (std::cmp::Reverse(e.mention_count), first, e.surfaces.iter().min().unwrap().clone())
            })
            .collect();
        keys.sort();
        let cap = rng.gen_range(1..=esgs.len());
        let ranked = rank_and_truncate(esgs, cap).unwrap();
        assert_eq!(ranked.len(), cap);
        for (i, e) in ranked.iter().enumerate() {
            assert_eq!(e.freq_rank, Some(i + 1));
            assert_eq!(e.mention_count, keys[i].0 .0);
            assert_eq!(e.first_offset(), keys[i].1);
        }
    }
}

#[test]
fn default_cap_keeps_1024() {
    let spans: Vec<_> = (0..1100).map(|i| span("s", i * 10, &format!("q{i:04}z"), SemanticType::Test)).collect();
    // distinct-enough surfaces would be costly to embed; identity grouping is enough here
    let esgs: Vec<Esg> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| Esg {
            esg_id: i,
            surfaces: vec![s.surface.clone()],
            mentions: vec![s.clone()],
            semantic_type: s.semantic_type,
            mention_count: 1,
            freq_rank: None,
        })
        .collect();
    let ranked = rank_and_truncate(esgs, DEFAULT_ESG_CAP).unwrap();
    assert_eq!(ranked.len(), 1024);
    assert_eq!(ranked.last().unwrap().freq_rank, Some(1024));
    assert!(matches!(rank_and_truncate(vec![], 0), Err(EsgError::ZeroCap)));
}

#[test]
fn salience_matches_brute_force() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..30 {
        let surfaces = random_surfaces(&mut rng, 30);
        let spans = random_mentions(&mut rng, &surfaces, 10);
        let esgs = group_mentions(&spans, &provider, 0.75).unwrap();
        let reference_surfaces = random_surfaces(&mut rng, 8);
        let mut reference = random_mentions(&mut rng, &reference_surfaces, 0);
        reference.extend(random_mentions(&mut rng, &surfaces[..3.min(surfaces.len())], 0));
        let labels = label_salience(&esgs, Some(&reference), &provider, 0.75).unwrap();
        for (e, l) in esgs.iter().zip(&labels) {
            let expected = e.surfaces.iter().any(|s| {
                reference.iter().any(|r| {
                    r.surface == *s || dot_cos(&provider.embed(s).unwrap(), &provider.embed(&r.surface).unwrap()) >= 0.75
                })
            });
            assert_eq!(l.salient, expected);
            assert_eq!(l.esg_id, e.esg_id);
        }
    }
}

#[test]
fn wbc_example() {
    let provider = HashedNgramProvider::default();
    let spans = vec![
        span("s", 0, "WBC", SemanticType::Test),
        span("s", 10, "wbc", SemanticType::Test),
        span("s", 20, "fever", SemanticType::Problem),
    ];
    let esgs = rank_and_truncate(group_mentions(&spans, &provider, 0.75).unwrap(), 1024).unwrap();
    assert_eq!(esgs.len(), 2);
    assert_eq!(esgs[0].surfaces, ["WBC", "wbc"]);
    assert_eq!(esgs[0].semantic_type, SemanticType::Test);
    let labels = label_salience(&esgs, Some(&[span("r", 0, "Wbc", SemanticType::Test)]), &provider, 0.75).unwrap();
    assert_eq!(labels.iter().map(|l| l.salient).collect::<Vec<_>>(), [true, false]);
    assert!(matches!(label_salience(&esgs, None, &provider, 0.75), Err(EsgError::MissingReference)));
}

#[test]
fn record_json_round_trip() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let surfaces = random_surfaces(&mut rng, 20);
    let spans = random_mentions(&mut rng, &surfaces, 20);
    let esgs = rank_and_truncate(group_mentions(&spans, &provider, 0.75).unwrap(), 1024).unwrap();
    let record = EsgRecord {
        admission_id: "a1".into(),
        esgs: esgs.iter().map(|e| EsgEntry::from_esg(e, Some(e.esg_id % 2 == 0))).collect(),
    };
    let line = serde_json::to_string(&record).unwrap();
    assert!(line.contains("\"type\":"));
    let back: EsgRecord = serde_json::from_str(&line).unwrap();
    assert_eq!(back, record);
    let rebuilt = rehydrate(&back.esgs, &spans);
    for (a, b) in esgs.iter().zip(&rebuilt) {
        assert_eq!(a.esg_id, b.esg_id);
        assert_eq!(a.mentions, b.mentions);
        assert_eq!(a.freq_rank, b.freq_rank);
    }
    assert!(serde_json::from_str::<EsgRecord>(r#"{"admission_id":"a","esgs":[],"extra":1}"#).is_err());
}

#[test]
fn raising_thresholds_never_merges_or_adds() {
    let provider = HashedNgramProvider::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let surfaces = random_surfaces(&mut rng, 30);
        let spans = random_mentions(&mut rng, &surfaces, 5);
        let reference = random_mentions(&mut rng, &surfaces[..8], 0);
        let mut prev_groups = 0;
        let mut prev_salient = usize::MAX;
        for t in [0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 1.0] {
            let esgs = group_mentions(&spans, &provider, t).unwrap();
            assert!(esgs.len() >= prev_groups, "threshold {t} merged groups");
            prev_groups = esgs.len();
            let fixed = group_mentions(&spans, &provider, 0.75).unwrap();
            let salient = label_salience(&fixed, Some(&reference), &provider, t).unwrap().iter().filter(|l| l.salient).count();
            assert!(salient <= prev_salient);
            prev_salient = salient;
        }
    }
}

#[test]
fn empty_reference_labels_nothing() {
    let provider = HashedNgramProvider::default();
    let spans = vec![span("s", 0, "fever", SemanticType::Problem)];
    let esgs = group_mentions(&spans, &provider, 0.75).unwrap();
    assert!(label_salience(&esgs, Some(&[]), &provider, 0.75).unwrap().iter().all(|l| !l.salient));
}
