//! One sandbox per invocation: created on INVOKE, executed, reaped once the
//! RESULT has been handed to the transport.
//!
//! With a root directory the sandboxes are real directories; without one they
//! are tracked in memory, which is what the discrete-event driver uses.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::TaskId;

pub type InvocationId = (TaskId, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxState {
    Created,
    Executed,
    Reaped,
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    pub invocation: InvocationId,
    pub path: PathBuf,
    pub state: SandboxState,
    files: BTreeMap<String, Vec<u8>>,
}

impl Sandbox {
    /// Names of files present in this sandbox.
    pub fn file_names(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn read(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(|v| v.as_slice())
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox for {0}/{1} already exists")]
    Exists(TaskId, u32),
    #[error("no live sandbox for {0}/{1}")]
    Missing(TaskId, u32),
    #[error("sandbox io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default)]
pub struct SandboxManager {
    root: Option<PathBuf>,
    live: HashMap<InvocationId, Sandbox>,
    reaped: u64,
}

impl SandboxManager {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        SandboxManager {
            root: Some(root.into()),
            ..Self::default()
        }
    }

    fn path_for(&self, (task, attempt): InvocationId) -> PathBuf {
        let leaf = format!("{}-a{}", task, attempt);
        match &self.root {
            Some(r) => r.join(leaf),
            None => PathBuf::from("/sandbox").join(leaf),
        }
    }

    pub fn create(&mut self, id: InvocationId, input: &[u8]) -> Result<PathBuf, SandboxError> {
        if self.live.contains_key(&id) {
            return Err(SandboxError::Exists(id.0, id.1));
        }
        let path = self.path_for(id);
        if self.root.is_some() {
            std::fs::create_dir_all(&path)?;
            std::fs::write(path.join("input.json"), input)?;
        }
        let mut files = BTreeMap::new();
        files.insert("input.json".to_string(), input.to_vec());
        self.live.insert(
            id,
            Sandbox {
                invocation: id,
                path: path.clone(),
                state: SandboxState::Created,
                files,
            },
        );
        Ok(path)
    }

    pub fn mark_executed(&mut self, id: InvocationId, output: &[u8]) -> Result<(), SandboxError> {
        let on_disk = self.root.is_some();
        let sb = self.live.get_mut(&id).ok_or(SandboxError::Missing(id.0, id.1))?;
        if on_disk {
            std::fs::write(sb.path.join("output.json"), output)?;
        }
        sb.files.insert("output.json".to_string(), output.to_vec());
        sb.state = SandboxState::Executed;
        Ok(())
    }

    pub fn reap(&mut self, id: InvocationId) -> Result<(), SandboxError> {
        let sb = self.live.remove(&id).ok_or(SandboxError::Missing(id.0, id.1))?;
        if self.root.is_some() && sb.path.exists() {
            std::fs::remove_dir_all(&sb.path)?;
        }
        self.reaped += 1;
        Ok(())
    }

    pub fn get(&self, id: InvocationId) -> Option<&Sandbox> {
        self.live.get(&id)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn reaped_count(&self) -> u64 {
        self.reaped
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_in_memory() {
        let mut m = SandboxManager::in_memory();
        let id = (TaskId(4), 0);
        m.create(id, b"[1,2]").unwrap();
        assert!(matches!(m.create(id, b"x"), Err(SandboxError::Exists(..))));
        assert_eq!(m.get(id).unwrap().state, SandboxState::Created);
        m.mark_executed(id, b"ok").unwrap();
        assert_eq!(m.get(id).unwrap().state, SandboxState::Executed);
        m.reap(id).unwrap();
        assert!(m.get(id).is_none());
        assert_eq!(m.reaped_count(), 1);
        assert!(matches!(m.reap(id), Err(SandboxError::Missing(..))));
    }

    #[test]
    fn on_disk_sandboxes_are_isolated_and_reaped() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SandboxManager::on_disk(dir.path());
        let a = m.create((TaskId(1), 0), b"alpha").unwrap();
        let b = m.create((TaskId(2), 0), b"beta").unwrap();
        assert_ne!(a, b);
        assert_eq!(std::fs::read(a.join("input.json")).unwrap(), b"alpha");
        assert_eq!(std::fs::read(b.join("input.json")).unwrap(), b"beta");
        m.reap((TaskId(1), 0)).unwrap();
        assert!(!a.exists());
        assert!(b.exists());
    }
}
