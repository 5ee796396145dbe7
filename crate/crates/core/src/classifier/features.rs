//! Pairwise comparison features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::{AttributeRecord, AttributeSchema, AttributeSpec, NormalizedValue};

/// Comparator outputs for one user pair, in schema declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeatureVector {
    /// `<new>_<old>`.
    pub edge_id: String,
    pub schema_version: u32,
    pub features: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("schema version mismatch: records at v{left} and v{right}, schema at v{schema}")]
    SchemaMismatch { left: u32, right: u32, schema: u32 },
    #[error("cannot build features for a user paired with itself")]
    SameUser,
}

/// Bound on string length for the edit-distance comparator.
const LEVENSHTEIN_BOUND: usize = 64;

pub fn build_features(
    new: &AttributeRecord,
    old: &AttributeRecord,
    schema: &AttributeSchema,
) -> Result<EdgeFeatureVector, FeatureError> {
    if new.user_id == old.user_id {
        return Err(FeatureError::SameUser);
    }
    if new.schema_version != schema.version || old.schema_version != schema.version {
        return Err(FeatureError::SchemaMismatch {
            left: new.schema_version,
            right: old.schema_version,
            schema: schema.version,
        });
    }
    let features = schema
        .attributes
        .iter()
        .map(|spec| compare(spec, new.get(&spec.name), old.get(&spec.name)))
        .collect();
    Ok(EdgeFeatureVector {
        edge_id: format!("{}_{}", new.user_id, old.user_id),
        schema_version: schema.version,
        features,
    })
}

/// Applies the attribute's comparator. Absence on either side is no evidence.
pub fn compare(spec: &AttributeSpec, a: &NormalizedValue, b: &NormalizedValue) -> f64 {
    use NormalizedValue::*;
    if a.is_absent() || b.is_absent() {
        return 0.0;
    }
    match spec.comparator.as_str() {
        "exact" => f64::from(u8::from(a == b)),
        "jaccard" => match (a, b) {
            (TokenSet(x), TokenSet(y)) => {
                let union = x.union(y).count();
                if union == 0 {
                    1.0
                } else {
                    x.intersection(y).count() as f64 / union as f64
                }
            }
            _ => 0.0,
        },
        "levenshtein" => match (a, b) {
            (Exact(x), Exact(y)) => levenshtein_similarity(x, y),
            _ => 0.0,
        },
        "numeric_exp" => match (a, b) {
            (Numeric(x), Numeric(y)) => {
                let scale = spec.scale.unwrap_or(1.0);
                (-(x - y).abs() / scale).exp()
            }
            _ => 0.0,
        },
        _ => 0.0,
    }
}

/// `1 - d / max(len)` over the first 64 characters of each side.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().take(LEVENSHTEIN_BOUND).collect();
    let b: Vec<char> = b.chars().take(LEVENSHTEIN_BOUND).collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    1.0 - prev[b.len()] as f64 / longest as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::{RawRegistrationEvent, RawValue, UserId};
    use proptest::prelude::*;

    fn rec(id: u64, attrs: &[(&str, RawValue)]) -> AttributeRecord {
        let schema = AttributeSchema::default_schema();
        schema
            .normalize(&RawRegistrationEvent {
                user_id: UserId::new(id),
                registered_at: id as i64,
                attributes: attrs.iter().map(|(k, v)| (k.to_string(), vec![v.clone()])).collect(),
            })
            .unwrap()
    }

    fn text(s: &str) -> RawValue {
        RawValue::Text(s.to_string())
    }

    fn full(id: u64) -> AttributeRecord {
        rec(
            id,
            &[
                ("ip", text("1.2.3.4")),
                ("device_id", text("dev")),
                ("dob_hash", text("1990-01-01")),
                ("name_token_set", text("ram kumar")),
                ("referral_code", text("REF1")),
                ("bank_hash", text("acct")),
                ("user_agent", text("Mozilla/5.0")),
                ("geo_cell", RawValue::Number(17.0)),
            ],
        )
    }

    #[test]
    fn identical_records_score_one_everywhere() {
        let schema = AttributeSchema::default_schema();
        let fv = build_features(&full(1), &full(2), &schema).unwrap();
        assert_eq!(fv.features, vec![1.0; 8]);
        assert_eq!(fv.edge_id, "1_2");
    }

    #[test]
    fn both_missing_is_zero() {
        let schema = AttributeSchema::default_schema();
        let fv = build_features(&rec(1, &[]), &rec(2, &[]), &schema).unwrap();
        assert_eq!(fv.features, vec![0.0; 8]);
    }

    #[test]
    fn jaccard_partial_name() {
        let schema = AttributeSchema::default_schema();
        let a = rec(1, &[("name_token_set", text("ram kumar"))]);
        let b = rec(2, &[("name_token_set", text("ram k"))]);
        // {ram} / {ram, kumar, k}
        let expected = 1.0 / 3.0;
        let fv = build_features(&a, &b, &schema).unwrap();
        assert!((fv.features[3] - expected).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_known_values() {
        assert_eq!(levenshtein_similarity("kitten", "sitting"), 1.0 - 3.0 / 7.0);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
        assert_eq!(levenshtein_similarity("abc", ""), 0.0);
    }

    #[test]
    fn numeric_distance_encoding() {
        let schema = AttributeSchema::default_schema();
        let a = rec(1, &[("geo_cell", RawValue::Number(10.0))]);
        let b = rec(2, &[("geo_cell", RawValue::Number(15.0))]);
        let fv = build_features(&a, &b, &schema).unwrap();
        assert!((fv.features[7] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let schema = AttributeSchema::default_schema();
        let mut b = full(2);
        b.schema_version = 7;
        let err = build_features(&full(1), &b, &schema).unwrap_err();
        assert_eq!(err, FeatureError::SchemaMismatch { left: 1, right: 7, schema: 1 });
        assert!(err.to_string().contains("v1") && err.to_string().contains("v7"));
    }

    fn arb_record(id: u64) -> impl Strategy<Value = AttributeRecord> {
        (
            prop::option::of("[ab]"),
            prop::option::of("[ab]"),
            prop::option::of("[a-c ]{0,6}"),
            prop::option::of("[a-c]{0,5}"),
            prop::option::of(0.0f64..20.0),
        )
            .prop_map(move |(ip, dev, name, ua, geo)| {
                let mut attrs = Vec::new();
                if let Some(v) = ip {
                    attrs.push(("ip", text(&v)));
                }
                if let Some(v) = dev {
                    attrs.push(("device_id", text(&v)));
                }
                if let Some(v) = name {
                    attrs.push(("name_token_set", text(&v)));
                }
                if let Some(v) = ua {
                    attrs.push(("user_agent", text(&v)));
                }
                if let Some(v) = geo {
                    attrs.push(("geo_cell", RawValue::Number(v)));
                }
                rec(id, &attrs)
            })
    }

    proptest! {
        #[test]
        fn features_are_symmetric_and_bounded(a in arb_record(1), b in arb_record(2)) {
            let schema = AttributeSchema::default_schema();
            let ab = build_features(&a, &b, &schema).unwrap();
            let ba = build_features(&b, &a, &schema).unwrap();
            prop_assert_eq!(&ab.features, &ba.features);
            prop_assert!(ab.features.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert_eq!(ab.features.len(), schema.attributes.len());
        }
    }
}
