//! Cluster-level detection quality against planted rings.

use std::collections::{BTreeMap, BTreeSet};

use ringwatch_core::attribute::UserId;
use ringwatch_core::detector::ClusterId;
use ringwatch_service::policy::{Action, ActionRecord};
use serde::Serialize;
use thiserror::Error;

use crate::truth::{pairs, GroundTruth};

pub const DEFAULT_PURITY: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("user {0} is assigned but not in the ground truth")]
    UnknownUser(UserId),
    #[error("action {action} names cluster {cluster}, which has no assigned member")]
    UnknownCluster { action: u64, cluster: ClusterId },
    #[error("{missing} ground-truth users have no assignment")]
    Unassigned { missing: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowQuality {
    pub highlighted: usize,
    pub true_positive: usize,
    /// Absent when the flow highlighted nothing.
    pub precision: Option<f64>,
    pub rings_found: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PairwiseQuality {
    pub predicted_pairs: u64,
    pub true_pairs: u64,
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub rings: usize,
    pub purity: f64,
    pub automated: FlowQuality,
    pub manual: FlowQuality,
    pub combined: FlowQuality,
    pub pairwise: PairwiseQuality,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flow {
    Auto,
    Manual,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores the final clusters that any action touched.
///
/// Each action is resolved to the final cluster now holding the action's
/// cluster id. A final cluster counts as automated if any auto-block reached
/// it and as manual otherwise. It is a true positive when at least `purity`
/// of its members belong to one ring, and that ring is then found.
pub fn evaluate(
    assignments: &[(UserId, ClusterId)],
    actions: &[ActionRecord],
    truth: &GroundTruth,
    purity: f64,
) -> Result<Evaluation, EvalError> {
    let mut final_of: BTreeMap<UserId, ClusterId> = BTreeMap::new();
    let mut members: BTreeMap<ClusterId, Vec<UserId>> = BTreeMap::new();
    for &(u, c) in assignments {
        if !truth.contains(u) {
            return Err(EvalError::UnknownUser(u));
        }
        final_of.insert(u, c);
        members.entry(c).or_default().push(u);
    }
    if final_of.len() != truth.len() {
        return Err(EvalError::Unassigned {
            missing: truth.len() - final_of.len(),
        });
    }

    let mut flows: BTreeMap<ClusterId, Flow> = BTreeMap::new();
    for a in actions {
        let flow = match a.action {
            Action::AutoBlock => Flow::Auto,
            Action::QueuedManual => Flow::Manual,
            Action::NoAction => continue,
        };
        let Some(&c) = final_of.get(&a.cluster.0) else {
            return Err(EvalError::UnknownCluster {
                action: a.action_id,
                cluster: a.cluster,
            });
        };
        let slot = flows.entry(c).or_insert(flow);
        if flow == Flow::Auto {
            *slot = Flow::Auto;
        }
    }

    let ring_count = truth.ring_members().len();
    let mut auto = (0, 0, BTreeSet::new());
    let mut manual = (0, 0, BTreeSet::new());
    let mut predicted_pairs = 0u64;
    let mut true_pairs = 0u64;
    for (c, flow) in &flows {
        let m = &members[c];
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for &u in m {
            if let Some(r) = truth.ring_of(u) {
                *counts.entry(r).or_default() += 1;
            }
        }
        predicted_pairs += pairs(m.len() as u64);
        true_pairs += counts.values().map(|&n| pairs(n)).sum::<u64>();
        let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
        let tally = match flow {
            Flow::Auto => &mut auto,
            Flow::Manual => &mut manual,
        };
        tally.0 += 1;
        if let Some((&ring, &n)) = top {
            if n as f64 >= purity * m.len() as f64 {
                tally.1 += 1;
                tally.2.insert(ring);
            }
        }
    }

    let quality = |(highlighted, tp, found): &(usize, usize, BTreeSet<u32>)| FlowQuality {
        highlighted: *highlighted,
        true_positive: *tp,
        precision: ratio(*tp, *highlighted),
        rings_found: found.len(),
        recall: ratio(found.len(), ring_count).unwrap_or(0.0),
    };
    let combined_found: BTreeSet<u32> = auto.2.union(&manual.2).copied().collect();
    let combined = (auto.0 + manual.0, auto.1 + manual.1, combined_found);
    let total_true = truth.mi_pair_count();
    Ok(Evaluation {
        rings: ring_count,
        purity,
        automated: quality(&auto),
        manual: quality(&manual),
        combined: quality(&combined),
        pairwise: PairwiseQuality {
            predicted_pairs,
            true_pairs,
            precision: (predicted_pairs > 0).then(|| true_pairs as f64 / predicted_pairs as f64),
            recall: if total_true > 0 {
                true_pairs as f64 / total_true as f64
            } else {
                0.0
            },
        },
    })
}
