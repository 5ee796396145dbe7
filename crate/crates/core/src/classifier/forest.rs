//! Bagged CART trees with Gini splits and per-node feature subsampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `floor(sqrt(q))`, at least 1.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 50,
            max_depth: 8,
            min_samples_split: 2,
            max_features: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn features_per_split(&self, q: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (q as f64).sqrt().floor() as usize)
            .clamp(1, q.max(1))
    }
}

const LEAF: i32 = -1;

/// One tree as parallel node arrays. Leaves have `feature == -1` and carry a
/// 0/1 vote; internal nodes send `x[feature] < threshold` left.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub vote: Vec<u8>,
}

impl DecisionTree {
    pub fn vote(&self, x: &[f64]) -> u8 {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f == LEAF {
                return self.vote[node];
            }
            node = if x[f as usize] < self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    fn push(&mut self) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.vote.push(0);
        self.feature.len() - 1
    }
}

pub(crate) struct TrainedForest {
    pub trees: Vec<DecisionTree>,
    pub oob_accuracy: Option<f64>,
}

pub(crate) fn fit(x: &[Vec<f64>], y: &[u8], params: &ForestParams) -> TrainedForest {
    let n = x.len();
    let q = x.first().map_or(0, Vec::len);
    let mtry = params.features_per_split(q);
    let fitted: Vec<(DecisionTree, Vec<bool>)> = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut in_bag = vec![false; n];
            let sample: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let tree = grow(x, y, sample, q, mtry, params, &mut rng);
            (tree, in_bag)
        })
        .collect();

    let mut correct = 0usize;
    let mut counted = 0usize;
    for i in 0..n {
        let (mut pos, mut total) = (0usize, 0usize);
        for (tree, in_bag) in &fitted {
            if !in_bag[i] {
                pos += tree.vote(&x[i]) as usize;
                total += 1;
            }
        }
        if total > 0 {
            counted += 1;
            let predicted = u8::from(pos * 2 > total);
            correct += usize::from(predicted == y[i]);
        }
    }
    TrainedForest {
        trees: fitted.into_iter().map(|(t, _)| t).collect(),
        oob_accuracy: (counted > 0).then(|| correct as f64 / counted as f64),
    }
}

struct Pending {
    node: usize,
    depth: usize,
    rows: Vec<usize>,
}

fn grow(
    x: &[Vec<f64>],
    y: &[u8],
    rows: Vec<usize>,
    q: usize,
    mtry: usize,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> DecisionTree {
    let mut tree = DecisionTree::default();
    let root = tree.push();
    let mut stack = vec![Pending { node: root, depth: 0, rows }];
    let mut order: Vec<usize> = (0..q).collect();
    let mut column: Vec<(f64, u8)> = Vec::new();

    while let Some(Pending { node, depth, rows }) = stack.pop() {
        let pos = rows.iter().filter(|&&r| y[r] == 1).count();
        let total = rows.len();
        tree.vote[node] = u8::from(pos * 2 > total);
        if depth >= params.max_depth || pos == 0 || pos == total || total < params.min_samples_split {
            continue;
        }

        // Visit features in random order until `mtry` non-constant ones were scored.
        order.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut informative = 0;
        for &f in &order {
            if informative >= mtry {
                break;
            }
            column.clear();
            column.extend(rows.iter().map(|&r| (x[r][f], y[r])));
            column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if column[0].0 == column[total - 1].0 {
                continue;
            }
            informative += 1;
            let mut left_pos = 0usize;
            for i in 0..total - 1 {
                left_pos += column[i].1 as usize;
                if column[i].0 == column[i + 1].0 {
                    continue;
                }
                let nl = i + 1;
                let nr = total - nl;
                let impurity = weighted_gini(left_pos, nl) + weighted_gini(pos - left_pos, nr);
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    let lo = column[i].0;
                    let hi = column[i + 1].0;
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some((impurity, f, threshold));
                }
            }
        }
        let parent = weighted_gini(pos, total);
        let Some((impurity, feature, threshold)) = best else {
            continue;
        };
        if impurity >= parent - 1e-12 {
            continue;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| x[r][feature] < threshold);
        let l = tree.push();
        let r = tree.push();
        tree.feature[node] = feature as i32;
        tree.threshold[node] = threshold;
        tree.left[node] = l as u32;
        tree.right[node] = r as u32;
        stack.push(Pending { node: r, depth: depth + 1, rows: right_rows });
        stack.push(Pending { node: l, depth: depth + 1, rows: left_rows });
    }
    tree
}

/// `n * gini` for a node with `pos` positives out of `n`.
fn weighted_gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    n as f64 * 2.0 * p * (1.0 - p)
}
