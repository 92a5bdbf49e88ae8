use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{ReplayError, SessionEvent};

/// One JSON Lines file per session under a data directory.
#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(EventStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.path(session_id).is_file()
    }

    pub fn append(&self, session_id: &str, event: &SessionEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_string(event).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(session_id))?;
        file.write_all(line.as_bytes())?;
        file.flush()
    }

    /// Reads a log. Unparseable lines are reported with the seq they should
    /// have carried.
    pub fn read(&self, session_id: &str) -> Result<Vec<SessionEvent>, ReplayError> {
        let file = match File::open(self.path(session_id)) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ReplayError::EmptyLog)
            }
            Err(e) => {
                return Err(ReplayError::Corrupt {
                    seq: 1,
                    reason: e.to_string(),
                })
            }
        };
        let mut events = Vec::new();
        for line in BufReader::new(file).lines() {
            let seq = events.len() as u64 + 1;
            let line = line.map_err(|e| ReplayError::Corrupt {
                seq,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let event: SessionEvent =
                serde_json::from_str(&line).map_err(|e| ReplayError::Corrupt {
                    seq,
                    reason: e.to_string(),
                })?;
            events.push(event);
        }
        if events.is_empty() {
            return Err(ReplayError::EmptyLog);
        }
        Ok(events)
    }

    /// Ids of every session log in the directory, sorted.
    pub fn session_ids(&self) -> std::io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("jsonl"))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
