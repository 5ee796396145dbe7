//! Write-ahead journal.
//!
//! Registrations go to `events.ndjson`, reviewer decisions and operator
//! triggers to `decisions.ndjson`. Both share one sequence counter so a replay
//! can interleave them exactly as they were applied. Each entry is one line
//! written with a single `write_all`; a line without its newline is a torn
//! append and is cut off on open.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ringwatch_core::attribute::RawRegistrationEvent;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SyncMode;
use crate::review::ReviewDecision;

pub const EVENTS_FILE: &str = "events.ndjson";
pub const DECISIONS_FILE: &str = "decisions.ndjson";
pub const DEAD_LETTER_FILE: &str = "dead_letter.ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlOp {
    Review { decision: ReviewDecision },
    BatchRun { at: i64 },
    Reconcile { at: i64 },
    SampleDay { day: i64 },
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    seq: u64,
    event: RawRegistrationEvent,
}

#[derive(Serialize, Deserialize)]
struct ControlLine {
    seq: u64,
    #[serde(flatten)]
    op: ControlOp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Event(RawRegistrationEvent),
    Control(ControlOp),
}

#[derive(Debug, Default)]
pub struct Recovered {
    /// All entries of both files in sequence order.
    pub entries: Vec<(u64, Entry)>,
    pub torn_bytes: u64,
}

impl Recovered {
    pub fn last_seq(&self) -> u64 {
        self.entries.last().map_or(0, |(s, _)| *s)
    }
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{file}: {source}")]
    Io { file: PathBuf, source: io::Error },
    #[error("{file} line {line}: {reason}")]
    Corrupt { file: PathBuf, line: usize, reason: String },
    #[error("sequence {seq} appears twice")]
    DuplicateSeq { seq: u64 },
}

pub struct Journal {
    dir: PathBuf,
    events: File,
    decisions: File,
    sync: SyncMode,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("dir", &self.dir).field("sync", &self.sync).finish()
    }
}

fn io_err(file: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        file: file.to_path_buf(),
        source,
    }
}

/// Parses complete lines, truncating a torn tail in place.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, u64), JournalError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[offset..offset + end];
        match serde_json::from_slice::<T>(line) {
            Ok(v) => out.push(v),
            Err(e) if offset + end + 1 == bytes.len() => {
                tracing::warn!(file = %path.display(), error = %e, "dropping unparsable final line");
                break;
            }
            Err(e) => {
                return Err(JournalError::Corrupt {
                    file: path.to_path_buf(),
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
        offset += end + 1;
    }
    let torn = (bytes.len() - offset) as u64;
    if torn > 0 {
        tracing::warn!(file = %path.display(), bytes = torn, "truncating torn journal tail");
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(offset as u64).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok((out, torn))
}

impl Journal {
    pub fn open(dir: &Path, sync: SyncMode) -> Result<(Journal, Recovered), JournalError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let ev_path = dir.join(EVENTS_FILE);
        let dec_path = dir.join(DECISIONS_FILE);
        let (events, t1) = read_lines::<EventLine>(&ev_path)?;
        let (controls, t2) = read_lines::<ControlLine>(&dec_path)?;
        let mut entries: Vec<(u64, Entry)> = events
            .into_iter()
            .map(|l| (l.seq, Entry::Event(l.event)))
            .chain(controls.into_iter().map(|l| (l.seq, Entry::Control(l.op))))
            .collect();
        entries.sort_by_key(|(s, _)| *s);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(JournalError::DuplicateSeq { seq: w[0].0 });
        }
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))
        };
        let journal = Journal {
            dir: dir.to_path_buf(),
            events: open(&ev_path)?,
            decisions: open(&dec_path)?,
            sync,
        };
        Ok((
            journal,
            Recovered {
                entries,
                torn_bytes: t1 + t2,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(file: &mut File, path: PathBuf, mut line: Vec<u8>, sync: SyncMode) -> Result<(), JournalError> {
        line.push(b'\n');
        file.write_all(&line).map_err(io_err(&path))?;
        if sync == SyncMode::Always {
            file.sync_data().map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn append_event(&mut self, seq: u64, event: &RawRegistrationEvent) -> Result<(), JournalError> {
        let line = serde_json::to_vec(&EventLine {
            seq,
            event: event.clone(),
        })
        .expect("events serialize");
        Self::append(&mut self.events, self.dir.join(EVENTS_FILE), line, self.sync)
    }

    pub fn append_control(&mut self, seq: u64, op: &ControlOp) -> Result<(), JournalError> {
        let line = serde_json::to_vec(&ControlLine { seq, op: op.clone() }).expect("controls serialize");
        Self::append(&mut self.decisions, self.dir.join(DECISIONS_FILE), line, self.sync)
    }
}

#[derive(Serialize)]
struct DeadLetterLine<'a> {
    reason: &'a str,
    payload: &'a str,
}

/// Poisoned inputs, kept for inspection and never replayed.
#[derive(Debug)]
pub struct DeadLetter {
    path: PathBuf,
}

impl DeadLetter {
    pub fn new(dir: &Path) -> Self {
        DeadLetter {
            path: dir.join(DEAD_LETTER_FILE),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn push(&self, reason: &str, payload: &str) -> io::Result<()> {
        let mut line = serde_json::to_vec(&DeadLetterLine { reason, payload }).expect("serializes");
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(&line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ringwatch_core::attribute::UserId;

    fn ev(id: u64) -> RawRegistrationEvent {
        RawRegistrationEvent {
            user_id: UserId::new(id),
            registered_at: id as i64,
            attributes: Default::default(),
        }
    }

    #[test]
    fn round_trip_interleaves_by_seq() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut j, rec) = Journal::open(dir.path(), SyncMode::OsBuffer).unwrap();
            assert!(rec.entries.is_empty());
            j.append_event(1, &ev(1)).unwrap();
            j.append_control(2, &ControlOp::BatchRun { at: 5 }).unwrap();
            j.append_event(3, &ev(2)).unwrap();
        }
        let (_, rec) = Journal::open(dir.path(), SyncMode::OsBuffer).unwrap();
        let seqs: Vec<u64> = rec.entries.iter().map(|(s, _)| *s).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(rec.entries[1].1, Entry::Control(ControlOp::BatchRun { at: 5 }));
        assert_eq!(rec.last_seq(), 3);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut j, _) = Journal::open(dir.path(), SyncMode::OsBuffer).unwrap();
            j.append_event(1, &ev(1)).unwrap();
            j.append_event(2, &ev(2)).unwrap();
        }
        let path = dir.path().join(EVENTS_FILE);
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        let (mut j, rec) = Journal::open(dir.path(), SyncMode::OsBuffer).unwrap();
        assert_eq!(rec.entries.len(), 1);
        assert!(rec.torn_bytes > 0);
        j.append_event(2, &ev(2)).unwrap();
        drop(j);
        let (_, rec) = Journal::open(dir.path(), SyncMode::OsBuffer).unwrap();
        assert_eq!(rec.entries.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(EVENTS_FILE), "{\"seq\":1,\"event\":{\"user_id\":1,\"registered_at\":0}}\nnot json\n{\"seq\":3,\"event\":{\"user_id\":3,\"registered_at\":0}}\n").unwrap();
        assert!(matches!(
            Journal::open(dir.path(), SyncMode::OsBuffer),
            Err(JournalError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn dead_letters_append() {
        let dir = tempfile::tempdir().unwrap();
        let dl = DeadLetter::new(dir.path());
        dl.push("missing user_id", "{}").unwrap();
        dl.push("bad json", "{").unwrap();
        let text = std::fs::read_to_string(dl.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
