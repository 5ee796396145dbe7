use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingSizes {
    pub min: u32,
    /// Mean of the geometric distribution, including `min`.
    pub mean: f64,
    pub max: u32,
}

impl Default for RingSizes {
    fn default() -> Self {
        RingSizes {
            min: 2,
            mean: 5.0,
            max: 500,
        }
    }
}

/// Probability that a ring member reuses the ring's value for each attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reuse {
    pub ip: f64,
    pub device_id: f64,
    pub bank_hash: f64,
    pub dob: f64,
    pub name: f64,
    pub user_agent: f64,
    pub geo: f64,
    pub referral_code: f64,
}

impl Default for Reuse {
    fn default() -> Self {
        Reuse {
            ip: 0.7,
            device_id: 0.5,
            bank_hash: 0.3,
            dob: 0.6,
            name: 0.7,
            user_agent: 0.8,
            geo: 0.8,
            referral_code: 0.8,
        }
    }
}

impl Reuse {
    pub fn uniform(p: f64) -> Self {
        Reuse {
            ip: p,
            device_id: p,
            bank_hash: p,
            dob: p,
            name: p,
            user_agent: p,
            geo: p,
            referral_code: p,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("ip", self.ip),
            ("device_id", self.device_id),
            ("bank_hash", self.bank_hash),
            ("dob", self.dob),
            ("name", self.name),
            ("user_agent", self.user_agent),
            ("geo", self.geo),
            ("referral_code", self.referral_code),
        ]
    }
}

/// How benign users look and collide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Background {
    /// Fraction of benign users living in a family that shares one device.
    pub family_rate: f64,
    pub family_max: u32,
    pub bank_rate: f64,
    pub referral_rate: f64,
    pub referral_pool: u32,
    pub user_agent_pool: u32,
    pub geo_cells: u32,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            family_rate: 0.004,
            family_max: 3,
            bank_rate: 0.6,
            referral_rate: 0.2,
            referral_pool: 5_000,
            user_agent_pool: 300,
            geo_cells: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub users: u64,
    pub rings: u32,
    pub ring_size: RingSizes,
    pub reuse: Reuse,
    pub background: Background,
    pub seed: u64,
    /// Epoch milliseconds of the first registration window.
    pub start_ms: i64,
    pub span_days: u32,
    /// Mean gap between consecutive registrations of one ring, minutes.
    pub ring_gap_minutes: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            users: 100_000,
            rings: 500,
            ring_size: RingSizes::default(),
            reuse: Reuse::default(),
            background: Background::default(),
            seed: 42,
            start_ms: 1_700_000_000_000,
            span_days: 7,
            ring_gap_minutes: 30.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("reading {0}: {1}")]
    Io(String, std::io::Error),
    #[error("parsing spec: {0}")]
    Parse(#[from] Box<toml::de::Error>),
    #[error("{0} = {1} is not a probability")]
    Probability(&'static str, f64),
    #[error("ring sizes need 2 <= min <= mean <= max, got min {min}, mean {mean}, max {max}")]
    RingSizes { min: u32, mean: f64, max: u32 },
    #[error("{ring_users} ring members do not fit in {users} users")]
    Infeasible { ring_users: u64, users: u64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

impl PopulationSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let spec: PopulationSpec = toml::from_str(text).map_err(Box::new)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let r = &self.ring_size;
        if !(2 <= r.min && f64::from(r.min) <= r.mean && r.mean <= f64::from(r.max)) {
            return Err(SpecError::RingSizes {
                min: r.min,
                mean: r.mean,
                max: r.max,
            });
        }
        let b = &self.background;
        let probs = self.reuse.fields().into_iter().chain([
            ("family_rate", b.family_rate),
            ("bank_rate", b.bank_rate),
            ("referral_rate", b.referral_rate),
        ]);
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SpecError::Probability(name, p));
            }
        }
        if self.rings > 0 && u64::from(self.rings) * u64::from(r.min) > self.users {
            return Err(SpecError::Infeasible {
                ring_users: u64::from(self.rings) * u64::from(r.min),
                users: self.users,
            });
        }
        for (name, v) in [
            ("span_days", u64::from(self.span_days)),
            ("referral_pool", u64::from(b.referral_pool)),
            ("user_agent_pool", u64::from(b.user_agent_pool)),
            ("geo_cells", u64::from(b.geo_cells)),
            ("family_max", u64::from(b.family_max.saturating_sub(1))),
        ] {
            if v == 0 {
                return Err(SpecError::NonPositive(name));
            }
        }
        if self.ring_gap_minutes <= 0.0 {
            return Err(SpecError::NonPositive("ring_gap_minutes"));
        }
        Ok(())
    }
}
