//! HTTP service that lets a human annotator act as the labeling oracle.
//!
//! Endpoints:
//!
//! | method | path                        |                                        |
//! |--------|-----------------------------|----------------------------------------|
//! | POST   | `/sessions`                 | create a session from a manifest       |
//! | GET    | `/sessions/{id}/queue?k=N`  | next N pending regions with images     |
//! | POST   | `/sessions/{id}/labels`     | points or a background tag for a region |
//! | POST   | `/sessions/{id}/train`      | start a training cycle (202)           |
//! | GET    | `/sessions/{id}/status`     | cycle, budget, job status              |
//! | GET    | `/sessions/{id}/curve`      | the cost/Dice curve as CSV             |

mod api;
mod images;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

pub use api::router;
pub use session::{JobStatus, LabelEvent, Queue, QueueEntry, SessionCore, SessionError, Snapshot};

/// One session: a writer lock around the mutable core and a published
/// snapshot that readers clone without touching the lock.
pub struct SessionHandle {
    core: Mutex<SessionCore>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl SessionHandle {
    fn new(core: SessionCore) -> Self {
        let snap = Arc::new(core.snapshot());
        Self {
            core: Mutex::new(core),
            snapshot: RwLock::new(snap),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().expect("snapshot lock"))
    }

    /// Run `f` with exclusive access to the core, then publish a new snapshot.
    pub fn write<T>(&self, f: impl FnOnce(&mut SessionCore) -> T) -> T {
        let mut core = self.core.lock().expect("session lock");
        let out = f(&mut core);
        *self.snapshot.write().expect("snapshot lock") = Arc::new(core.snapshot());
        out
    }
}

/// Shared state of the service: the session root and the open sessions.
pub struct AppState {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Open every session found under `data_dir/sessions`.
    pub fn open(data_dir: &Path) -> Result<Arc<Self>, SessionError> {
        let root = data_dir.join("sessions");
        std::fs::create_dir_all(&root).map_err(|e| SessionError::Internal(format!("{}: {e}", root.display())))?;
        let mut sessions = HashMap::new();
        let listing = std::fs::read_dir(&root).map_err(|e| SessionError::Internal(format!("{}: {e}", root.display())))?;
        for entry in listing.flatten() {
            let dir = entry.path();
            if !dir.join("session.json").exists() {
                continue;
            }
            let core = SessionCore::open(&dir)?;
            tracing::info!(session = %core.meta.id, cycle = core.cycle(), "recovered session");
            sessions.insert(core.meta.id.clone(), Arc::new(SessionHandle::new(core)));
        }
        Ok(Arc::new(Self {
            root,
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }

    fn insert(&self, core: SessionCore) -> Arc<SessionHandle> {
        let id = core.meta.id.clone();
        let h = Arc::new(SessionHandle::new(core));
        self.sessions.write().expect("sessions lock").insert(id, Arc::clone(&h));
        h
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(addr: SocketAddr, data_dir: &Path) -> std::io::Result<()> {
    let state = AppState::open(data_dir).map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation service listening");
    axum::serve(listener, router(state)).await
}
