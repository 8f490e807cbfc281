//! Append-only JSONL event log.
//!
//! Line 1 is a header `{"format":"cvr-event-log","schema_version":1}`. Every
//! other line is either an [`Event`] or a snapshot record
//! `{"snapshot":<seq>,"schema_version":1,"state":{...}}` holding the full
//! coordinator state after event `<seq>`. Recovery starts from the last
//! snapshot and applies the events after it.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::coordinator::StateView;
use super::state::CoordinatorState;
use crate::error::{Error, Result};
use crate::event::{Event, EventSink, EVENT_SCHEMA_VERSION};

pub const LOG_FORMAT: &str = "cvr-event-log";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
}

#[derive(Serialize)]
struct SnapshotOut<'a> {
    snapshot: u64,
    schema_version: u32,
    state: &'a StateView<'a>,
}

#[derive(Deserialize)]
struct SnapshotIn {
    snapshot: u64,
    schema_version: u32,
    state: CoordinatorState,
}

const SNAPSHOT_PREFIX: &str = "{\"snapshot\":";

/// Result of reading a log back.
#[derive(Debug, Default)]
pub struct Recovered {
    pub state: CoordinatorState,
    /// Events applied on top of the starting point.
    pub events_applied: u64,
    /// Seq of the snapshot recovery started from, if any.
    pub from_snapshot: Option<u64>,
    /// A partially written final line was dropped.
    pub dropped_tail: bool,
    /// Byte length of the well-formed prefix of the file.
    pub valid_len: u64,
}

fn read_header(line: &str, line_no: usize) -> Result<()> {
    let header: Header = serde_json::from_str(line).map_err(|e| Error::CorruptLog {
        line: line_no,
        after_seq: 0,
        reason: format!("bad header: {e}"),
    })?;
    if header.format != LOG_FORMAT || header.schema_version > EVENT_SCHEMA_VERSION {
        return Err(Error::CorruptLog {
            line: line_no,
            after_seq: 0,
            reason: format!(
                "unsupported log {} v{} (this build reads {LOG_FORMAT} v{EVENT_SCHEMA_VERSION})",
                header.format, header.schema_version
            ),
        });
    }
    Ok(())
}

/// Rebuilds coordinator state from log text.
pub fn replay_str(text: &str) -> Result<Recovered> {
    let mut out = Recovered::default();
    if text.is_empty() {
        return Ok(out);
    }
    // (line text, byte offset just past its newline, newline present)
    let mut lines = Vec::new();
    let mut offset = 0usize;
    for piece in text.split_inclusive('\n') {
        offset += piece.len();
        let complete = piece.ends_with('\n');
        lines.push((piece.trim_end_matches('\n'), offset, complete));
    }
    let last = lines.len() - 1;
    let torn = |i: usize| i == last && !lines[i].2;

    if torn(0) && serde_json::from_str::<Header>(lines[0].0).is_err() {
        out.dropped_tail = true;
        return Ok(out);
    }
    read_header(lines[0].0, 1)?;
    out.valid_len = lines[0].1 as u64;

    let mut start = 1;
    for i in (1..lines.len()).rev() {
        if lines[i].0.starts_with(SNAPSHOT_PREFIX) && !torn(i) {
            let snap: SnapshotIn = serde_json::from_str(lines[i].0).map_err(|e| Error::CorruptLog {
                line: i + 1,
                after_seq: 0,
                reason: format!("bad snapshot: {e}"),
            })?;
            if snap.schema_version > EVENT_SCHEMA_VERSION {
                return Err(Error::CorruptLog {
                    line: i + 1,
                    after_seq: snap.snapshot,
                    reason: format!("snapshot schema v{} is newer than this build", snap.schema_version),
                });
            }
            out.state = snap.state;
            out.state.rebuild_indexes();
            out.from_snapshot = Some(snap.snapshot);
            out.valid_len = lines[i].1 as u64;
            start = i + 1;
            break;
        }
    }

    for (i, &(line, end, _)) in lines.iter().enumerate().skip(start) {
        if line.trim().is_empty() {
            out.valid_len = end as u64;
            continue;
        }
        let after_seq = out.state.last_seq;
        if line.starts_with(SNAPSHOT_PREFIX) {
            if torn(i) {
                out.dropped_tail = true;
                break;
            }
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if torn(i) => {
                tracing::warn!(line = i + 1, "dropping truncated final log line");
                out.dropped_tail = true;
                break;
            }
            Err(e) => {
                return Err(Error::CorruptLog {
                    line: i + 1,
                    after_seq,
                    reason: e.to_string(),
                })
            }
        };
        out.state.apply(&event).map_err(|e| match e {
            Error::NonMonotoneSeq { .. } => e,
            other => Error::CorruptLog {
                line: i + 1,
                after_seq,
                reason: other.to_string(),
            },
        })?;
        out.events_applied += 1;
        out.valid_len = end as u64;
    }
    Ok(out)
}

pub fn replay_file(path: &Path) -> Result<Recovered> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    replay_str(&text)
}

/// File-backed event sink. Each record is written and flushed (and synced
/// when `sync` is on) before `record` returns.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl EventLog {
    /// Opens or creates a log, recovering whatever it already holds. A torn
    /// final line is cut off so new records append cleanly.
    pub fn open(path: &Path, sync: bool) -> Result<(Self, Recovered)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let existing = path.exists() && fs::metadata(path).map_err(|e| Error::io(path, e))?.len() > 0;
        let recovered = if existing { replay_file(path)? } else { Recovered::default() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if existing && recovered.dropped_tail {
            file.set_len(recovered.valid_len).map_err(|e| Error::io(path, e))?;
        }
        let mut log = Self {
            path: path.to_owned(),
            file,
            sync,
        };
        if !existing || recovered.valid_len == 0 {
            let header = Header {
                format: LOG_FORMAT.into(),
                schema_version: EVENT_SCHEMA_VERSION,
            };
            log.write_line(&serde_json::to_string(&header)?)?;
        }
        Ok((log, recovered))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        if self.sync {
            self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

impl EventSink for EventLog {
    fn record(&mut self, event: &Event) -> Result<()> {
        let line = serde_json::to_string(event)?;
        self.write_line(&line)
    }

    fn snapshot(&mut self, state: &StateView<'_>) -> Result<()> {
        let rec = SnapshotOut {
            snapshot: state.last_seq,
            schema_version: EVENT_SCHEMA_VERSION,
            state,
        };
        let line = serde_json::to_string(&rec)?;
        self.write_line(&line)
    }
}

/// Renders events as log text (header included), e.g. for the simulator's
/// output directory.
pub fn render_log(events: &[Event]) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format: LOG_FORMAT.into(),
        schema_version: EVENT_SCHEMA_VERSION,
    })?;
    out.push('\n');
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
