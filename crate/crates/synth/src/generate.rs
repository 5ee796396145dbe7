//! Seeded population generator with planted rings.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use ringwatch_core::attribute::{RawRegistrationEvent, RawValue, UserId};

use crate::spec::{PopulationSpec, SpecError};
use crate::truth::GroundTruth;

const DAY_MS: i64 = 86_400_000;
const SYLLABLES: [&str; 16] = [
    "ka", "ri", "mo", "ta", "ne", "lu", "sa", "vi", "do", "pe", "zo", "ha", "mi", "ro", "che", "an",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub events: Vec<RawRegistrationEvent>,
    pub truth: GroundTruth,
}

/// Attribute values before they are turned into an event.
#[derive(Clone, Debug)]
struct Persona {
    ip: String,
    device: String,
    bank: Option<String>,
    dob: String,
    first: String,
    last: String,
    ua: String,
    geo: u32,
    referral: Option<String>,
}

enum Slot {
    Benign { family: Option<usize> },
    Ring { ring: u32 },
}

struct Gen<'a> {
    spec: &'a PopulationSpec,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn syllables(&mut self, n: usize) -> String {
        (0..n).map(|_| *SYLLABLES.choose(&mut self.rng).expect("non-empty")).collect()
    }

    fn ip(&mut self) -> String {
        let b: [u8; 4] = self.rng.gen();
        format!("{}.{}.{}.{}", b[0], b[1], b[2], b[3])
    }

    fn device(&mut self) -> String {
        format!("{:016x}", self.rng.gen::<u64>())
    }

    fn bank(&mut self) -> String {
        format!("acct-{:012}", self.rng.gen_range(0..1_000_000_000_000u64))
    }

    fn dob(&mut self) -> String {
        let y = self.rng.gen_range(1950..=2005);
        let m = self.rng.gen_range(1..=12);
        let d = self.rng.gen_range(1..=28);
        format!("{y}-{m:02}-{d:02}")
    }

    fn user_agent(&mut self) -> String {
        // skewed towards a few popular builds
        let u: f64 = self.rng.gen();
        let i = ((u * u) * f64::from(self.spec.background.user_agent_pool)) as u32;
        format!(
            "Mozilla/5.0 (Linux; Android {}; SM-A{}) Chrome/{}.0",
            8 + i % 7,
            100 + (i * 37) % 900,
            90 + i % 30
        )
    }

    fn benign_referral(&mut self) -> Option<String> {
        let b = &self.spec.background;
        self.rng
            .gen_bool(b.referral_rate)
            .then(|| format!("ref{}", self.rng.gen_range(0..b.referral_pool)))
    }

    fn persona(&mut self) -> Persona {
        let bank = self.rng.gen_bool(self.spec.background.bank_rate).then(|| self.bank());
        let first_len = self.rng.gen_range(2..=3);
        Persona {
            ip: self.ip(),
            device: self.device(),
            bank,
            dob: self.dob(),
            first: self.syllables(first_len),
            last: self.syllables(3),
            ua: self.user_agent(),
            geo: self.rng.gen_range(0..self.spec.background.geo_cells),
            referral: self.benign_referral(),
        }
    }

    fn ring_persona(&mut self, ring: u32) -> Persona {
        let mut p = self.persona();
        p.bank = Some(self.bank());
        p.referral = Some(format!("ring{ring}"));
        p
    }

    /// A member account: each attribute comes from the ring persona with its
    /// reuse probability, otherwise it is drawn fresh.
    fn member(&mut self, ring: &Persona) -> (Persona, Option<String>) {
        let r = self.spec.reuse.clone();
        let fresh = self.persona();
        let mut take = |p: f64| self.rng.gen_bool(p);
        let ip = if take(r.ip) { ring.ip.clone() } else { fresh.ip };
        let device = if take(r.device_id) { ring.device.clone() } else { fresh.device };
        let bank = if take(r.bank_hash) { ring.bank.clone() } else { fresh.bank };
        let dob = if take(r.dob) { ring.dob.clone() } else { fresh.dob };
        let reuse_name = take(r.name);
        let ua = if take(r.user_agent) { ring.ua.clone() } else { fresh.ua };
        let near = take(r.geo);
        let referral = if take(r.referral_code) { ring.referral.clone() } else { fresh.referral };
        let (first, last, suffix) = if reuse_name {
            let suffix = self.rng.gen_bool(0.5).then(|| self.rng.gen_range(1..100).to_string());
            (ring.first.clone(), ring.last.clone(), suffix)
        } else {
            (fresh.first, fresh.last, None)
        };
        let geo = if near {
            let jitter: i64 = self.rng.gen_range(-3..=3);
            (i64::from(ring.geo) + jitter).clamp(0, i64::from(self.spec.background.geo_cells) - 1) as u32
        } else {
            fresh.geo
        };
        let p = Persona {
            ip,
            device,
            bank,
            dob,
            first,
            last,
            ua,
            geo,
            referral,
        };
        (p, suffix)
    }
}

fn event(user: u64, at: i64, p: &Persona, name_suffix: Option<&str>) -> RawRegistrationEvent {
    let text = |s: &str| vec![RawValue::Text(s.to_string())];
    let mut attributes = BTreeMap::new();
    attributes.insert("ip".to_string(), text(&p.ip));
    attributes.insert("device_id".to_string(), text(&p.device));
    attributes.insert("dob_hash".to_string(), text(&p.dob));
    let name = match name_suffix {
        Some(s) => format!("{} {} {s}", p.first, p.last),
        None => format!("{} {}", p.first, p.last),
    };
    attributes.insert("name_token_set".to_string(), text(&name));
    if let Some(b) = &p.bank {
        attributes.insert("bank_hash".to_string(), text(b));
    }
    if let Some(r) = &p.referral {
        attributes.insert("referral_code".to_string(), text(r));
    }
    attributes.insert("user_agent".to_string(), text(&p.ua));
    attributes.insert("geo_cell".to_string(), vec![RawValue::Number(f64::from(p.geo))]);
    RawRegistrationEvent {
        user_id: UserId::new(user),
        registered_at: at,
        attributes,
    }
}

pub fn ring_sizes(spec: &PopulationSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let r = &spec.ring_size;
    let extra_mean = r.mean - f64::from(r.min);
    let geo = Geometric::new(1.0 / (1.0 + extra_mean)).expect("probability in (0, 1]");
    (0..spec.rings)
        .map(|_| (u64::from(r.min) + geo.sample(rng)).min(u64::from(r.max)) as u32)
        .collect()
}

pub fn generate(spec: &PopulationSpec) -> Result<Population, SpecError> {
    spec.validate()?;
    let mut g = Gen {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let sizes = ring_sizes(spec, &mut g.rng);
    let ring_users: u64 = sizes.iter().map(|&s| u64::from(s)).sum();
    if ring_users > spec.users {
        return Err(SpecError::Infeasible {
            ring_users,
            users: spec.users,
        });
    }
    let span = i64::from(spec.span_days) * DAY_MS;
    let gap = Exp::new(1.0 / (spec.ring_gap_minutes * 60_000.0)).expect("positive rate");

    // (offset ms, slot)
    let mut slots: Vec<(i64, Slot)> = Vec::with_capacity(spec.users as usize);
    for (ring, &size) in sizes.iter().enumerate() {
        let mut t = g.rng.gen_range(0..span);
        for _ in 0..size {
            slots.push((t, Slot::Ring { ring: ring as u32 }));
            t += gap.sample(&mut g.rng).ceil() as i64;
        }
    }
    let benign = spec.users - ring_users;
    let mut in_family = (benign as f64 * spec.background.family_rate).round() as u64;
    let mut families = 0usize;
    let mut family_of: Vec<Option<usize>> = Vec::with_capacity(benign as usize);
    while in_family >= 2 {
        let size = g.rng.gen_range(2..=spec.background.family_max).min(in_family as u32);
        family_of.extend(std::iter::repeat_n(Some(families), size as usize));
        families += 1;
        in_family -= u64::from(size);
    }
    family_of.resize(benign as usize, None);
    for family in family_of {
        slots.push((g.rng.gen_range(0..span), Slot::Benign { family }));
    }
    // stable sort keeps ring members that share a timestamp in order
    slots.sort_by_key(|(t, _)| *t);

    let ring_personas: Vec<Persona> = (0..spec.rings).map(|r| g.ring_persona(r)).collect();
    let family_devices: Vec<String> = (0..families).map(|_| g.device()).collect();
    let mut events = Vec::with_capacity(slots.len());
    let mut truth = Vec::with_capacity(slots.len());
    for (i, (t, slot)) in slots.iter().enumerate() {
        let user = i as u64 + 1;
        let at = spec.start_ms + t;
        match *slot {
            Slot::Benign { family } => {
                let mut p = g.persona();
                if let Some(f) = family {
                    p.device = family_devices[f].clone();
                }
                events.push(event(user, at, &p, None));
                truth.push(None);
            }
            Slot::Ring { ring } => {
                let (p, suffix) = g.member(&ring_personas[ring as usize]);
                events.push(event(user, at, &p, suffix.as_deref()));
                truth.push(Some(ring));
            }
        }
    }
    Ok(Population {
        events,
        truth: GroundTruth::new(truth),
    })
}

pub fn write_events(events: &[RawRegistrationEvent], out: &mut impl Write) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events(input: impl BufRead) -> io::Result<Vec<RawRegistrationEvent>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(users: u64, rings: u32) -> PopulationSpec {
        PopulationSpec {
            users,
            rings,
            ..PopulationSpec::default()
        }
    }

    #[test]
    fn no_rings_means_all_benign() {
        let pop = generate(&small(100, 0)).unwrap();
        assert_eq!(pop.events.len(), 100);
        assert!(pop.truth.mi_pairs().is_empty());
    }

    #[test]
    fn forced_ip_reuse_is_shared() {
        let mut spec = small(10, 1);
        spec.ring_size.min = 4;
        spec.ring_size.mean = 4.0;
        spec.ring_size.max = 4;
        spec.reuse.ip = 1.0;
        let pop = generate(&spec).unwrap();
        let members = &pop.truth.ring_members()[&0];
        assert_eq!(members.len(), 4);
        let ips: std::collections::BTreeSet<String> = members
            .iter()
            .map(|u| format!("{:?}", pop.events[u.get() as usize - 1].attributes["ip"]))
            .collect();
        assert_eq!(ips.len(), 1);
    }

    #[test]
    fn events_are_time_ordered_with_consecutive_ids() {
        let pop = generate(&small(2_000, 40)).unwrap();
        for (i, w) in pop.events.windows(2).enumerate() {
            assert!(w[0].registered_at <= w[1].registered_at);
            assert_eq!(w[0].user_id.unwrap().get(), i as u64 + 1);
        }
    }

    #[test]
    fn infeasible_when_rings_overflow() {
        let mut spec = small(30, 10);
        spec.ring_size.mean = 40.0;
        spec.ring_size.max = 100;
        assert!(matches!(generate(&spec), Err(SpecError::Infeasible { .. })));
    }

    #[test]
    fn ndjson_round_trip() {
        let pop = generate(&small(50, 2)).unwrap();
        let mut buf = Vec::new();
        write_events(&pop.events, &mut buf).unwrap();
        assert_eq!(read_events(&buf[..]).unwrap(), pop.events);
    }
}
