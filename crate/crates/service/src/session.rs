//! Annotation sessions.
//!
//! A session's schedule is every `(stimulus, group)` pair of its stimuli in
//! schema order, fixed when the session is created. Sessions are appended to
//! their own JSON-Lines file so they outlive a restart; progress is rebuilt
//! from the annotation log.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::journal::AnnotationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub annotator_id: String,
    /// `(stimulus id, group name)` in presentation order.
    pub schedule: Vec<(String, String)>,
    #[serde(skip)]
    pub done: HashSet<(String, String)>,
}

impl Session {
    /// Position of the first pair not yet annotated.
    pub fn next_index(&self) -> Option<usize> {
        self.schedule.iter().position(|p| !self.done.contains(p))
    }

    pub fn n_done(&self) -> usize {
        self.schedule.iter().filter(|p| self.done.contains(*p)).count()
    }

    pub fn record(&mut self, stimulus: &str, group: &str) {
        self.done.insert((stimulus.to_string(), group.to_string()));
    }
}

#[derive(Debug)]
pub struct SessionStore {
    path: PathBuf,
    file: File,
    sessions: BTreeMap<String, Session>,
}

impl SessionStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut sessions = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                // a torn last line belongs to a creation that was never acknowledged
                let Ok(s) = serde_json::from_str::<Session>(&line) else {
                    log::warn!("{}: skipping unreadable session line", path.display());
                    continue;
                };
                sessions.insert(s.session_id.clone(), s);
            }
        }
        let file = OpenOptions::new().append(true).create(true).open(&path)?;
        Ok(Self { path, file, sessions })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn create(&mut self, annotator_id: String, schedule: Vec<(String, String)>) -> Result<&Session> {
        let session_id = uuid::Uuid::new_v4().to_string();
        let s = Session {
            session_id: session_id.clone(),
            annotator_id,
            schedule,
            done: HashSet::new(),
        };
        let mut line = serde_json::to_vec(&s)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(self.sessions.entry(session_id).or_insert(s))
    }

    pub fn get(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| ServiceError::NotFound(format!("session `{id}`")))
    }

    pub fn apply(&mut self, rec: &AnnotationRecord) {
        if let Some(s) = rec.session_id.as_deref().and_then(|id| self.sessions.get_mut(id)) {
            s.record(&rec.annotation.stimulus_id, &rec.annotation.group_id);
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}
