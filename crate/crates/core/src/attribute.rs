//! User and attribute domain model.
//!
//! Raw registration payloads arrive as loosely typed attribute lists. They are
//! normalized against an [`AttributeSchema`] into an [`AttributeRecord`] whose
//! values are directly comparable: multi-valued attributes are collapsed,
//! sensitive values are replaced by keyed digests, and missing attributes are
//! carried as an explicit [`NormalizedValue::Absent`] marker.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::num::NonZeroU64;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

/// Strictly positive user identifier. The total order doubles as the
/// connected-component label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct UserId(NonZeroU64);

impl UserId {
    pub fn new(id: u64) -> Option<Self> {
        NonZeroU64::new(id).map(UserId)
    }

    pub fn get(self) -> u64 {
        self.0.get()
    }
}

impl TryFrom<u64> for UserId {
    type Error = String;

    fn try_from(value: u64) -> Result<Self, Self::Error> {
        UserId::new(value).ok_or_else(|| "user id must be strictly positive".to_string())
    }
}

impl From<UserId> for u64 {
    fn from(id: UserId) -> u64 {
        id.get()
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for UserId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw: u64 = s.trim().parse().map_err(|e| format!("bad user id {s:?}: {e}"))?;
        UserId::try_from(raw)
    }
}

/// One raw attribute value as submitted by the registration frontend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    /// A value observed at a specific time (epoch ms).
    Timed { value: String, at: i64 },
    /// A value that was digested upstream with the same keyed hash.
    Digest { digest: String },
    Text(String),
    Number(f64),
}

impl RawValue {
    fn text(&self) -> String {
        match self {
            RawValue::Timed { value, .. } => value.clone(),
            RawValue::Digest { digest } => digest.clone(),
            RawValue::Text(s) => s.clone(),
            RawValue::Number(n) => format_number(*n),
        }
    }

    fn observed_at(&self, default: i64) -> i64 {
        match self {
            RawValue::Timed { at, .. } => *at,
            _ => default,
        }
    }
}

fn format_number(n: f64) -> String {
    if n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRegistrationEvent {
    #[serde(default)]
    pub user_id: Option<UserId>,
    pub registered_at: i64,
    #[serde(default)]
    pub attributes: BTreeMap<String, Vec<RawValue>>,
}

/// A comparable attribute value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", content = "value", rename_all = "snake_case")]
pub enum NormalizedValue {
    Absent,
    Exact(String),
    Hashed(String),
    Numeric(f64),
    TokenSet(BTreeSet<String>),
}

impl NormalizedValue {
    pub fn is_absent(&self) -> bool {
        matches!(self, NormalizedValue::Absent)
    }

    /// Keys under which this value is indexed for candidate generation.
    /// Absent values produce none.
    pub fn blocking_keys(&self) -> Vec<String> {
        match self {
            NormalizedValue::Absent => Vec::new(),
            NormalizedValue::Exact(s) | NormalizedValue::Hashed(s) => vec![s.clone()],
            NormalizedValue::Numeric(n) => vec![format!("{:016x}", n.to_bits())],
            NormalizedValue::TokenSet(tokens) => tokens.iter().cloned().collect(),
        }
    }

    /// Exact equality that never matches on absence.
    pub fn matches(&self, other: &NormalizedValue) -> bool {
        !self.is_absent() && self == other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub user_id: UserId,
    pub registered_at: i64,
    pub schema_version: u32,
    pub attrs: BTreeMap<String, NormalizedValue>,
}

impl AttributeRecord {
    pub fn get(&self, name: &str) -> &NormalizedValue {
        self.attrs.get(name).unwrap_or(&NormalizedValue::Absent)
    }

    /// Wraps the record back into a registration event. Normalizing the
    /// result reproduces this record.
    pub fn to_raw_event(&self) -> RawRegistrationEvent {
        let mut attributes = BTreeMap::new();
        for (name, value) in &self.attrs {
            let raw = match value {
                NormalizedValue::Absent => continue,
                NormalizedValue::Exact(s) => vec![RawValue::Text(s.clone())],
                NormalizedValue::Hashed(d) => vec![RawValue::Digest { digest: d.clone() }],
                NormalizedValue::Numeric(n) => vec![RawValue::Number(*n)],
                NormalizedValue::TokenSet(tokens) => {
                    vec![RawValue::Text(tokens.iter().cloned().collect::<Vec<_>>().join(" "))]
                }
            };
            attributes.insert(name.clone(), raw);
        }
        RawRegistrationEvent {
            user_id: Some(self.user_id),
            registered_at: self.registered_at,
            attributes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueClass {
    Exact,
    Hashed,
    Numeric,
    TokenSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationRule {
    /// Keep the most recently observed value verbatim (trimmed).
    Latest,
    /// Keyed digest of the latest value, lowercased and trimmed first.
    Hash,
    LowercaseTrim,
    /// Union of lowercase alphanumeric tokens across all values.
    Tokenize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownAttributePolicy {
    #[default]
    Drop,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub class: ValueClass,
    pub rule: NormalizationRule,
    #[serde(default)]
    pub blocking: bool,
    pub comparator: String,
    /// Distance scale for the numeric comparator.
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub version: u32,
    #[serde(default)]
    pub unknown_attributes: UnknownAttributePolicy,
    #[serde(default)]
    pub hash_key: String,
    pub attributes: Vec<AttributeSpec>,
    /// Heuristic edge features, highest priority first.
    #[serde(default)]
    pub heuristic_priority: Vec<String>,
    /// Features whose heuristic edges indicate a shared device.
    #[serde(default)]
    pub device_features: Vec<String>,
}

pub const COMPARATORS: &[&str] = &["exact", "jaccard", "levenshtein", "numeric_exp"];

impl AttributeSchema {
    /// The desk-scale schema used by the synthetic generator.
    pub fn default_schema() -> Self {
        use NormalizationRule::*;
        use ValueClass::*;
        let spec = |name: &str, class, rule, blocking, comparator: &str, scale| AttributeSpec {
            name: name.to_string(),
            class,
            rule,
            blocking,
            comparator: comparator.to_string(),
            scale,
        };
        AttributeSchema {
            version: 1,
            unknown_attributes: UnknownAttributePolicy::Drop,
            hash_key: "ringwatch-default-key".to_string(),
            attributes: vec![
                spec("ip", Exact, Latest, true, "exact", None),
                spec("device_id", Exact, LowercaseTrim, true, "exact", None),
                spec("dob_hash", Hashed, Hash, true, "exact", None),
                spec("name_token_set", TokenSet, Tokenize, false, "jaccard", None),
                spec("referral_code", Exact, LowercaseTrim, true, "exact", None),
                spec("bank_hash", Hashed, Hash, true, "exact", None),
                spec("user_agent", Exact, LowercaseTrim, false, "levenshtein", None),
                spec("geo_cell", Numeric, Latest, false, "numeric_exp", Some(5.0)),
            ],
            heuristic_priority: vec![
                "device_id".to_string(),
                "bank_hash".to_string(),
                "ip".to_string(),
            ],
            device_features: vec!["device_id".to_string()],
        }
    }

    pub fn spec(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn blocking_attributes(&self) -> impl Iterator<Item = &AttributeSpec> {
        self.attributes.iter().filter(|a| a.blocking)
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaLoadError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Collects every structural problem with the schema.
    pub fn validate(&self) -> Result<(), Vec<SchemaViolation>> {
        let mut violations = Vec::new();
        let mut seen = HashSet::new();
        for attr in &self.attributes {
            if !seen.insert(attr.name.as_str()) {
                violations.push(SchemaViolation::DuplicateName(attr.name.clone()));
            }
            if !COMPARATORS.contains(&attr.comparator.as_str()) {
                violations.push(SchemaViolation::UndefinedComparator {
                    attribute: attr.name.clone(),
                    comparator: attr.comparator.clone(),
                });
            } else if !comparator_accepts(&attr.comparator, attr.class) {
                violations.push(SchemaViolation::ComparatorClassMismatch {
                    attribute: attr.name.clone(),
                    comparator: attr.comparator.clone(),
                });
            }
            if !rule_produces(attr.rule, attr.class) {
                violations.push(SchemaViolation::RuleClassMismatch(attr.name.clone()));
            }
            if attr.comparator == "numeric_exp" && !attr.scale.is_some_and(|s| s > 0.0 && s.is_finite()) {
                violations.push(SchemaViolation::BadScale(attr.name.clone()));
            }
        }
        if !self.attributes.iter().any(|a| a.blocking) {
            violations.push(SchemaViolation::NoBlockingAttribute);
        }
        for feature in &self.heuristic_priority {
            match self.spec(feature) {
                None => violations.push(SchemaViolation::UnknownHeuristicFeature(feature.clone())),
                Some(spec) if !spec.blocking => {
                    violations.push(SchemaViolation::HeuristicNotBlocking(feature.clone()))
                }
                Some(_) => {}
            }
        }
        for feature in &self.device_features {
            if self.spec(feature).is_none() {
                violations.push(SchemaViolation::UnknownHeuristicFeature(feature.clone()));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Normalizes one registration event.
    pub fn normalize(&self, event: &RawRegistrationEvent) -> Result<AttributeRecord, NormalizeError> {
        let user_id = event.user_id.ok_or(NormalizeError::MissingUserId)?;
        if self.unknown_attributes == UnknownAttributePolicy::Reject {
            if let Some(name) = event.attributes.keys().find(|k| self.spec(k).is_none()) {
                return Err(NormalizeError::UnknownAttribute(name.clone()));
            }
        }
        let mut attrs = BTreeMap::new();
        for spec in &self.attributes {
            let values = event.attributes.get(&spec.name).map(Vec::as_slice).unwrap_or(&[]);
            let value = self.normalize_value(spec, values, event.registered_at)?;
            attrs.insert(spec.name.clone(), value);
        }
        Ok(AttributeRecord {
            user_id,
            registered_at: event.registered_at,
            schema_version: self.version,
            attrs,
        })
    }

    fn normalize_value(
        &self,
        spec: &AttributeSpec,
        values: &[RawValue],
        registered_at: i64,
    ) -> Result<NormalizedValue, NormalizeError> {
        if values.is_empty() {
            return Ok(NormalizedValue::Absent);
        }
        let malformed = |reason: String| NormalizeError::Malformed {
            attribute: spec.name.clone(),
            reason,
        };
        if spec.rule == NormalizationRule::Tokenize {
            let tokens = values.iter().flat_map(|v| tokenize(&v.text()).collect::<Vec<_>>()).collect();
            return Ok(NormalizedValue::TokenSet(tokens));
        }
        let latest = latest_value(values, registered_at);
        match spec.rule {
            NormalizationRule::Hash => {
                if let RawValue::Digest { digest } = latest {
                    let ok = digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_hexdigit());
                    if !ok {
                        return Err(malformed(format!("digest {digest:?} is not 64 hex characters")));
                    }
                    return Ok(NormalizedValue::Hashed(digest.to_ascii_lowercase()));
                }
                let text = latest.text().trim().to_lowercase();
                Ok(NormalizedValue::Hashed(keyed_digest(&self.hash_key, &text)))
            }
            NormalizationRule::Latest | NormalizationRule::LowercaseTrim => {
                let mut text = latest.text().trim().to_string();
                if spec.rule == NormalizationRule::LowercaseTrim {
                    text = text.to_lowercase();
                }
                match spec.class {
                    ValueClass::Numeric => {
                        let n = match latest {
                            RawValue::Number(n) => *n,
                            _ => text
                                .parse::<f64>()
                                .map_err(|_| malformed(format!("{text:?} is not numeric")))?,
                        };
                        if !n.is_finite() {
                            return Err(malformed(format!("{text:?} is not finite")));
                        }
                        Ok(NormalizedValue::Numeric(n))
                    }
                    _ => Ok(NormalizedValue::Exact(text)),
                }
            }
            NormalizationRule::Tokenize => unreachable!("handled above"),
        }
    }
}

/// Most recent value; ties broken by the larger text so list order never matters.
fn latest_value(values: &[RawValue], registered_at: i64) -> &RawValue {
    values
        .iter()
        .max_by(|a, b| {
            a.observed_at(registered_at)
                .cmp(&b.observed_at(registered_at))
                .then_with(|| a.text().cmp(&b.text()))
        })
        .expect("non-empty")
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// HMAC-SHA256 of `value` under `key`, hex encoded.
pub fn keyed_digest(key: &str, value: &str) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    mac.update(value.as_bytes());
    hex::encode(mac.finalize().into_bytes())
}

fn comparator_accepts(comparator: &str, class: ValueClass) -> bool {
    match comparator {
        "exact" => true,
        "jaccard" => class == ValueClass::TokenSet,
        "levenshtein" => class == ValueClass::Exact,
        "numeric_exp" => class == ValueClass::Numeric,
        _ => false,
    }
}

fn rule_produces(rule: NormalizationRule, class: ValueClass) -> bool {
    match rule {
        NormalizationRule::Hash => class == ValueClass::Hashed,
        NormalizationRule::Tokenize => class == ValueClass::TokenSet,
        NormalizationRule::Latest | NormalizationRule::LowercaseTrim => {
            matches!(class, ValueClass::Exact | ValueClass::Numeric)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("duplicate attribute name {0:?}")]
    DuplicateName(String),
    #[error("attribute {attribute:?} references undefined comparator {comparator:?}")]
    UndefinedComparator { attribute: String, comparator: String },
    #[error("comparator {comparator:?} cannot compare the value class of {attribute:?}")]
    ComparatorClassMismatch { attribute: String, comparator: String },
    #[error("normalization rule of {0:?} does not produce its declared value class")]
    RuleClassMismatch(String),
    #[error("numeric comparator on {0:?} needs a positive finite scale")]
    BadScale(String),
    #[error("no blocking attribute")]
    NoBlockingAttribute,
    #[error("heuristic feature {0:?} is not a schema attribute")]
    UnknownHeuristicFeature(String),
    #[error("heuristic feature {0:?} is not a blocking attribute")]
    HeuristicNotBlocking(String),
}

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("registration event has no user_id")]
    MissingUserId,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("malformed value for attribute {attribute:?}: {reason}")]
    Malformed { attribute: String, reason: String },
}

#[derive(Debug, Error)]
pub enum SchemaLoadError {
    #[error("schema parse error: {0}")]
    Json(#[from] serde_json::Error),
}
