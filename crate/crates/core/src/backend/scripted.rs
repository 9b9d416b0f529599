use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ModelRequest, ModelResponse, RoleTag};

/// One playlist item: a plain completion, a completion with an artificial
/// delay, or an injected failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Delayed { text: String, delay_ms: u64 },
    Fail { error: FailureKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Server,
    Auth,
}

impl From<&str> for ScriptEntry {
    fn from(s: &str) -> Self {
        Self::Text(s.to_string())
    }
}

impl From<String> for ScriptEntry {
    fn from(s: String) -> Self {
        Self::Text(s)
    }
}

/// Replays per-stage playlists in order and records every request it sees.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    playlists: Mutex<HashMap<RoleTag, VecDeque<ScriptEntry>>>,
    captured: Mutex<Vec<ModelRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, E>(playlists: I) -> Self
    where
        I: IntoIterator<Item = (RoleTag, Vec<E>)>,
        E: Into<ScriptEntry>,
    {
        let playlists = playlists
            .into_iter()
            .map(|(role, items)| (role, items.into_iter().map(Into::into).collect()))
            .collect();
        Self {
            playlists: Mutex::new(playlists),
            captured: Mutex::default(),
        }
    }

    /// Parses a `{role_tag: [entry, ...]}` document.
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let parsed: BTreeMap<RoleTag, Vec<ScriptEntry>> =
            serde_json::from_str(text).map_err(|e| BackendError::InvalidConfig(format!("script: {e}")))?;
        Ok(Self::new(parsed))
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidConfig(format!("script {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn push(&self, role: RoleTag, entry: impl Into<ScriptEntry>) {
        self.lock_playlists().entry(role).or_default().push_back(entry.into());
    }

    /// Requests seen so far, in call order (including failed attempts).
    pub fn captured(&self) -> Vec<ModelRequest> {
        self.captured.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn remaining(&self, role: RoleTag) -> usize {
        self.lock_playlists().get(&role).map_or(0, VecDeque::len)
    }

    fn lock_playlists(&self) -> std::sync::MutexGuard<'_, HashMap<RoleTag, VecDeque<ScriptEntry>>> {
        self.playlists.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ModelRequest) -> BoxFuture<'static, Result<ModelResponse, BackendError>> {
        self.captured
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(request.clone());
        let next = self
            .lock_playlists()
            .get_mut(&request.role_tag)
            .and_then(VecDeque::pop_front);
        let role = request.role_tag;
        async move {
            let respond = |text: String, latency_ms| ModelResponse {
                text,
                usage: None,
                latency_ms,
            };
            match next {
                None => Err(BackendError::ScriptExhausted(role.as_str().to_string())),
                Some(ScriptEntry::Text(t)) => Ok(respond(t, 0)),
                Some(ScriptEntry::Delayed { text, delay_ms }) => {
                    tokio::time::sleep(Duration::from_millis(delay_ms)).await;
                    Ok(respond(text, delay_ms))
                }
                Some(ScriptEntry::Fail { error }) => Err(match error {
                    FailureKind::Transport => BackendError::Transport {
                        attempts: 1,
                        message: "injected transport failure".into(),
                    },
                    FailureKind::Server => BackendError::Server {
                        status: 503,
                        message: "injected server failure".into(),
                    },
                    FailureKind::Auth => BackendError::Authentication("injected".into()),
                }),
            }
        }
        .boxed()
    }
}
