#![allow(dead_code)]

use std::collections::BTreeMap;

use ringwatch_core::attribute::{RawRegistrationEvent, RawValue, UserId};
use ringwatch_core::detector::ClusterId;
use ringwatch_service::ServiceConfig;

pub const T0: i64 = 1_700_000_000_000;

pub fn uid(n: u64) -> UserId {
    UserId::new(n).unwrap()
}

pub fn cid(n: u64) -> ClusterId {
    ClusterId(uid(n))
}

/// Event for user `id` registered `id` seconds after T0.
pub fn ev(id: u64, attrs: &[(&str, &str)]) -> RawRegistrationEvent {
    let attributes: BTreeMap<String, Vec<RawValue>> = attrs
        .iter()
        .map(|(k, v)| (k.to_string(), vec![RawValue::Text(v.to_string())]))
        .collect();
    RawRegistrationEvent {
        user_id: UserId::new(id),
        registered_at: T0 + id as i64 * 1000,
        attributes,
    }
}

pub fn quiet_config() -> ServiceConfig {
    let mut cfg = ServiceConfig::default();
    cfg.cadence.batch_interval_ms = 0;
    cfg.cadence.sample_daily = false;
    cfg
}
