//! On-disk session layout under a data directory:
//!
//! ```text
//! <root>/<session_id>/session.json   metadata and config snapshot
//! <root>/<session_id>/memory.jsonl   memory log
//! <root>/<session_id>/traces.jsonl   one TurnTrace per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Engine, EngineConfig, Session, TurnError, TurnTrace};
use crate::memory::{MemoryError, MemoryStream};

const META_FILE: &str = "session.json";
const MEMORY_FILE: &str = "memory.jsonl";
const TRACE_FILE: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {0} already exists")]
    AlreadyExists(String),
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("session {id}: {message}")]
    Corrupt { id: String, message: String },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Turn(#[from] TurnError),
    #[error("session store I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub config: EngineConfig,
    pub backend: String,
    pub embedder: String,
    pub embedding_dim: usize,
    pub prompt_pack: String,
}

pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.root.join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id)
            .map(|d| d.join(META_FILE).is_file())
            .unwrap_or(false)
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_session_id(&name) && entry.path().join(META_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Create a new session directory and a session bound to it.
    pub fn create(
        &self,
        id: &str,
        config: EngineConfig,
        engine: &Engine,
    ) -> Result<(SessionMeta, Session), StoreError> {
        let dir = self.dir(id)?;
        if dir.join(META_FILE).exists() {
            return Err(StoreError::AlreadyExists(id.to_string()));
        }
        let mut session = Session::new(id, config, engine)?;
        fs::create_dir_all(&dir)?;
        let meta = SessionMeta {
            session_id: id.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            backend: engine.backend.name().to_string(),
            embedder: engine.embedder.name().to_string(),
            embedding_dim: engine.embedder.dimension(),
            prompt_pack: engine.prompts.id().to_string(),
        };
        session.stream_mut().attach(dir.join(MEMORY_FILE))?;
        fs::write(dir.join(TRACE_FILE), "")?;
        let tmp = dir.join("session.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&meta).map_err(std::io::Error::from)?)?;
        fs::rename(tmp, dir.join(META_FILE))?;
        session.log_traces_to(dir.join(TRACE_FILE));
        Ok((meta, session))
    }

    pub fn load_meta(&self, id: &str) -> Result<SessionMeta, StoreError> {
        let dir = self.dir(id)?;
        let path = dir.join(META_FILE);
        if !path.is_file() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        serde_json::from_slice(&fs::read(path)?).map_err(|e| StoreError::Corrupt {
            id: id.to_string(),
            message: e.to_string(),
        })
    }

    /// Reopen a persisted session; later turns keep writing through.
    pub fn open(&self, id: &str) -> Result<(SessionMeta, Session), StoreError> {
        let meta = self.load_meta(id)?;
        let dir = self.dir(id)?;
        let memory_path = dir.join(MEMORY_FILE);
        let mut stream = MemoryStream::load(&memory_path)?;
        if stream.dimension() != meta.embedding_dim {
            return Err(StoreError::Corrupt {
                id: id.to_string(),
                message: format!(
                    "memory log dimension {} differs from session dimension {}",
                    stream.dimension(),
                    meta.embedding_dim
                ),
            });
        }
        let traces = load_traces(&dir.join(TRACE_FILE), id)?;
        stream.attach(memory_path)?;
        let mut session = Session::restore(
            id,
            meta.config,
            meta.prompt_pack.clone(),
            stream,
            traces,
        );
        session.log_traces_to(dir.join(TRACE_FILE));
        Ok((meta, session))
    }
}

fn load_traces(path: &Path, id: &str) -> Result<Vec<TurnTrace>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut traces = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            log::warn!("session {id}: ignoring unterminated trace line {}", i + 1);
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
            id: id.to_string(),
            message: format!("trace line {}: {e}", i + 1),
        })?);
    }
    Ok(traces)
}
