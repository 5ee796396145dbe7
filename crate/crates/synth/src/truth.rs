use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use ringwatch_core::attribute::UserId;
use thiserror::Error;

/// Which ring, if any, each generated user belongs to. Users are numbered
/// from 1 in registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    rings: Vec<Option<u32>>,
}

#[derive(Debug, Error)]
pub enum TruthError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl GroundTruth {
    pub fn new(rings: Vec<Option<u32>>) -> Self {
        GroundTruth { rings }
    }

    pub fn len(&self) -> usize {
        self.rings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.is_empty()
    }

    pub fn contains(&self, u: UserId) -> bool {
        (u.get() as usize) <= self.rings.len()
    }

    pub fn ring_of(&self, u: UserId) -> Option<u32> {
        self.rings.get(u.get() as usize - 1).copied().flatten()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        (1..=self.rings.len() as u64).map(|i| UserId::new(i).expect("ids start at 1"))
    }

    pub fn ring_members(&self) -> BTreeMap<u32, Vec<UserId>> {
        let mut out: BTreeMap<u32, Vec<UserId>> = BTreeMap::new();
        for u in self.users() {
            if let Some(r) = self.ring_of(u) {
                out.entry(r).or_default().push(u);
            }
        }
        out
    }

    /// Every unordered pair of users in the same ring.
    pub fn mi_pairs(&self) -> Vec<(UserId, UserId)> {
        let mut out = Vec::new();
        for members in self.ring_members().values() {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn mi_pair_count(&self) -> u64 {
        self.ring_members().values().map(|m| pairs(m.len() as u64)).sum()
    }

    pub fn write_tsv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "user_id\tring")?;
        for u in self.users() {
            match self.ring_of(u) {
                Some(r) => writeln!(out, "{u}\t{r}")?,
                None => writeln!(out, "{u}\tbenign")?,
            }
        }
        Ok(())
    }

    pub fn read_tsv(input: impl BufRead) -> Result<Self, TruthError> {
        let mut rings = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let err = |reason: &str| TruthError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (id, ring) = line.split_once('\t').ok_or_else(|| err("expected two columns"))?;
            let id: usize = id.parse().map_err(|_| err("bad user id"))?;
            if id != rings.len() + 1 {
                return Err(err("user ids must be consecutive from 1"));
            }
            rings.push(match ring {
                "benign" => None,
                r => Some(r.parse().map_err(|_| err("bad ring id"))?),
            });
        }
        Ok(GroundTruth { rings })
    }
}

pub(crate) fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}
