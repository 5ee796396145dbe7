use ringwatch_core::attribute::UserId;
use ringwatch_core::detector::{ClusterId, ClusterScore};
use serde::{Deserialize, Serialize};

use crate::config::Thresholds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Realtime,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    AutoBlock,
    QueuedManual,
    NoAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub auto_block: f64,
    pub manual_floor: f64,
    pub batch_auto_block: bool,
}

impl From<&Thresholds> for Policy {
    fn from(t: &Thresholds) -> Self {
        Policy {
            auto_block: t.auto_block,
            manual_floor: t.manual_floor,
            batch_auto_block: t.batch_auto_block,
        }
    }
}

impl Default for Policy {
    fn default() -> Self {
        Policy::from(&Thresholds::default())
    }
}

impl Policy {
    pub fn decide(&self, score: f64, flow: Flow) -> Action {
        let auto_allowed = flow == Flow::Realtime || self.batch_auto_block;
        if auto_allowed && score > self.auto_block {
            Action::AutoBlock
        } else if score >= self.manual_floor {
            Action::QueuedManual
        } else {
            Action::NoAction
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub action_id: u64,
    pub cluster: ClusterId,
    pub action: Action,
    pub score: f64,
    pub breakdown: ClusterScore,
    pub members: u64,
    pub decided_at: i64,
    pub flow: Flow,
    /// Registration that caused the decision; `None` for batch highlights.
    pub trigger: Option<UserId>,
    /// The cluster's previously active action, if any.
    pub supersedes: Option<u64>,
    pub model_id: Option<String>,
}
