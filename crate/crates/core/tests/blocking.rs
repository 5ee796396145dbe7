use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringwatch_core::attribute::{AttributeRecord, AttributeSchema, RawRegistrationEvent, RawValue, UserId};
use ringwatch_core::edges::{heuristic_edges, BlockingIndex};
use ringwatch_core::graph::{AddOutcome, Graph};
use rustc_hash::FxHashMap;

fn population(n: u64, seed: u64) -> Vec<AttributeRecord> {
    let schema = AttributeSchema::default_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = [
        ("ip", 400),
        ("device_id", 600),
        ("dob_hash", 300),
        ("referral_code", 80),
        ("bank_hash", 900),
        ("user_agent", 20),
    ];
    (1..=n)
        .map(|id| {
            let mut attributes = BTreeMap::new();
            for (name, pool) in pools {
                if rng.gen_bool(0.7) {
                    let v = format!("{name}-{}", rng.gen_range(0..pool));
                    attributes.insert(name.to_string(), vec![RawValue::Text(v)]);
                }
            }
            let ev = RawRegistrationEvent {
                user_id: UserId::new(id),
                registered_at: id as i64 * 10,
                attributes,
            };
            schema.normalize(&ev).unwrap()
        })
        .collect()
}

#[test]
fn blocking_is_complete_against_cross_join() {
    let schema = AttributeSchema::default_schema();
    let blocking: Vec<String> = schema.blocking_attributes().map(|s| s.name.clone()).collect();
    let recs = population(5000, 11);
    let mut index = BlockingIndex::new(&schema);
    let mut total = 0usize;
    for (i, r) in recs.iter().enumerate() {
        let cands = index.candidates(r);
        assert!(!cands.candidates.contains_key(&r.user_id));
        for earlier in &recs[..i] {
            let shares = blocking.iter().any(|a| r.get(a).matches(earlier.get(a)));
            assert_eq!(
                shares,
                cands.candidates.contains_key(&earlier.user_id),
                "pair ({}, {})",
                earlier.user_id,
                r.user_id
            );
            total += shares as usize;
        }
        index.insert(r);
    }
    assert!(total > 10_000, "population too sparse to be a meaningful check: {total}");
}

#[test]
fn heuristic_edges_only_join_exact_matches_and_are_canonical() {
    let schema = AttributeSchema::default_schema();
    let recs = population(2000, 5);
    let by_id: FxHashMap<UserId, AttributeRecord> = recs.iter().map(|r| (r.user_id, r.clone())).collect();
    let mut index = BlockingIndex::new(&schema);
    let mut graph = Graph::new();
    let mut emitted = 0;
    for r in &recs {
        graph.add_vertex(r.user_id, r.registered_at).unwrap();
        let cands = index.candidates(r);
        let out = heuristic_edges(r, &cands, &by_id, &schema.heuristic_priority);
        assert!(out.missing.is_empty());
        for e in out.edges {
            assert!(e.lo < e.hi);
            assert_eq!(e.score, 1.0);
            let (a, b) = (&by_id[&e.lo], &by_id[&e.hi]);
            assert!(a.get(&e.source_feature).matches(b.get(&e.source_feature)));
            // the label is the first matching feature in priority order
            let first = schema
                .heuristic_priority
                .iter()
                .find(|f| a.get(f).matches(b.get(f)))
                .unwrap();
            assert_eq!(first, &e.source_feature);
            assert!(matches!(graph.add_edge(e.clone()).unwrap(), AddOutcome::Added(_)));
            assert_eq!(graph.add_edge(e).unwrap(), AddOutcome::Duplicate);
            emitted += 1;
        }
        index.insert(r);
    }
    assert!(emitted > 100);
}
