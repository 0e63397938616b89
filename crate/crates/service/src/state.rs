use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use softcbm_core::{ConceptDataset, ConceptModel};

use crate::error::{Result, ServiceError};
use crate::journal::Journal;
use crate::session::SessionStore;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub models_dir: PathBuf,
    pub stimuli_dir: PathBuf,
    pub log_path: PathBuf,
    /// `*` allows any origin.
    pub cors_origin: Option<String>,
}

/// Everything that mutates: the annotation log and the sessions it drives.
/// Appends go through this one lock, so the log has a single writer.
#[derive(Debug)]
pub struct Recorder {
    pub journal: Journal,
    pub sessions: SessionStore,
}

#[derive(Debug)]
struct Inner {
    models: BTreeMap<String, ConceptModel>,
    stimuli: ConceptDataset,
    index: HashMap<String, usize>,
    recorder: Mutex<Recorder>,
}

#[derive(Debug, Clone)]
pub struct AppState(Arc<Inner>);

/// `annotations.jsonl` → `annotations.sessions.jsonl`
pub fn sessions_path(log_path: &Path) -> PathBuf {
    log_path.with_extension("sessions.jsonl")
}

/// Loads every `*.scl` checkpoint (with its sidecar) in `dir`, keyed by file stem.
pub fn load_models(dir: &Path) -> Result<Vec<(String, ConceptModel)>> {
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scl"))
        .collect();
    paths.sort();
    for p in paths {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.push((id, ConceptModel::load(&p)?));
    }
    Ok(out)
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> Result<Self> {
        let (stimuli, _) = ConceptDataset::load(&cfg.stimuli_dir)?;
        let models = load_models(&cfg.models_dir)?;
        Self::from_parts(models, stimuli, &cfg.log_path)
    }

    /// Models whose input shape or concept count disagree with the stimuli are skipped.
    pub fn from_parts(models: Vec<(String, ConceptModel)>, stimuli: ConceptDataset, log_path: &Path) -> Result<Self> {
        let mut kept = BTreeMap::new();
        for (id, m) in models {
            if m.config().input_shape != stimuli.input_shape || m.k() != stimuli.k() {
                log::warn!("model `{id}` does not fit the stimuli; skipped");
                continue;
            }
            kept.insert(id, m);
        }
        let (journal, records) = Journal::open(log_path)?;
        let mut sessions = SessionStore::open(sessions_path(log_path))?;
        for rec in &records {
            sessions.apply(rec);
        }
        log::info!("{} models, {} stimuli, {} logged annotations", kept.len(), stimuli.len(), records.len());
        let index = stimuli.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self(Arc::new(Inner {
            models: kept,
            stimuli,
            index,
            recorder: Mutex::new(Recorder { journal, sessions }),
        })))
    }

    pub fn models(&self) -> &BTreeMap<String, ConceptModel> {
        &self.0.models
    }

    pub fn model(&self, id: &str) -> Result<&ConceptModel> {
        self.0.models.get(id).ok_or_else(|| ServiceError::NotFound(format!("model `{id}`")))
    }

    pub fn stimuli(&self) -> &ConceptDataset {
        &self.0.stimuli
    }

    pub fn stimulus_index(&self, id: &str) -> Option<usize> {
        self.0.index.get(id).copied()
    }

    pub fn recorder(&self) -> MutexGuard<'_, Recorder> {
        // a panic while holding the lock cannot leave a half-written record acknowledged
        self.0.recorder.lock().unwrap_or_else(|e| e.into_inner())
    }
}
