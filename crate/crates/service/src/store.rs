//! One JSON file per session, replaced atomically on every update.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use morphscope_core::data::{DatasetName, Split};
use morphscope_core::latent::LatentVector;
use morphscope_core::neighborhood::NeighborhoodSpec;
use morphscope_core::workbench::CheckpointRef;

use crate::error::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub dataset_index: usize,
    pub split: Split,
    pub true_label: usize,
    pub predicted_label: usize,
    pub reconstruction_label: usize,
    pub mispredicted: bool,
    pub latent: LatentVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: usize,
    pub timestamp_ms: u64,
    pub poi_index: usize,
    pub spec: NeighborhoodSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset: DatasetName,
    pub vae_checkpoint: CheckpointRef,
    pub classifier_checkpoint: CheckpointRef,
    pub created_ms: u64,
    pub poi: Option<PoiRecord>,
    /// Append-only.
    pub history: Vec<HistoryEntry>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

/// Session ids are generated by us; anything else cannot name a session file.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit() || b == b'-')
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| ServiceError::Startup(format!("creating {}: {e}", dir.display())))?;
        Ok(SessionStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn new_id() -> String {
        uuid::Uuid::new_v4().simple().to_string()
    }

    pub fn load(&self, id: &str) -> Result<Session, ServiceError> {
        let missing = || ServiceError::NotFound(format!("no session {id:?}"));
        if !valid_id(id) {
            return Err(missing());
        }
        let bytes = match std::fs::read(self.path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(missing()),
            Err(e) => return Err(ServiceError::Internal(format!("reading session {id}: {e}"))),
        };
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Internal(format!("session {id} is unreadable: {e}")))
    }

    pub fn save(&self, session: &Session) -> Result<(), ServiceError> {
        let path = self.path(&session.id);
        let tmp = self.dir.join(format!("{}.json.tmp", session.id));
        let bytes = serde_json::to_vec_pretty(session).map_err(|e| ServiceError::Internal(e.to_string()))?;
        std::fs::write(&tmp, bytes)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ServiceError::Internal(format!("writing {}: {e}", path.display())))
    }
}
