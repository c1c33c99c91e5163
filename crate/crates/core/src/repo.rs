//! On-disk repository: a store plus the federation's descriptors and
//! signal state.
//!
//! ```text
//! <root>/store/...              content-addressed store
//! <root>/bubbles/<id>.json      one canonical descriptor per bubble
//! <root>/state.json             clock, id allocator, snapshots, signals
//! <root>/log/stress.log         append-only decision audit
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Federation, FederationState, SnapshotRef};
use crate::error::{Error, Result};
use crate::model::{canonical_json_pretty, BubbleDescriptor, IdAllocator};
use crate::store::{write_atomic, Store};
use crate::stress::StressState;

pub const REPO_ENV: &str = "BUBBLEKIT_REPO";

#[derive(Serialize, Deserialize)]
struct RepoState {
    clock: u64,
    ids: IdAllocator,
    snapshots: Vec<SnapshotRef>,
    stress: StressState,
}

pub struct Repository {
    root: PathBuf,
    fed: Federation,
    logged: usize,
}

impl std::fmt::Debug for Repository {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Repository").field("root", &self.root).finish()
    }
}

fn corrupt(what: &Path, e: impl std::fmt::Display) -> Error {
    Error::Corrupt(format!("{}: {e}", what.display()))
}

impl Repository {
    /// Creates the layout, or opens it when it already exists.
    pub fn init(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if root.join("state.json").exists() {
            return Self::open(root);
        }
        fs::create_dir_all(root.join("bubbles"))?;
        fs::create_dir_all(root.join("log"))?;
        let store = Store::init_dir(root.join("store"))?;
        let repo = Repository {
            root: root.to_path_buf(),
            fed: Federation::new(Arc::new(store), IdAllocator::random()),
            logged: 0,
        };
        repo.write_state()?;
        fs::File::create(root.join("log/stress.log"))?;
        Ok(repo)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let state_path = root.join("state.json");
        if !state_path.exists() {
            return Err(Error::NoRepository(root.display().to_string()));
        }
        let text = fs::read_to_string(&state_path)?;
        let state: RepoState = serde_json::from_str(&text).map_err(|e| corrupt(&state_path, e))?;
        let mut descriptors = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(root.join("bubbles"))?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(fs::DirEntry::file_name);
        for entry in entries {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path)?;
                descriptors.push(BubbleDescriptor::from_canonical_bytes(&bytes).map_err(|e| corrupt(&path, e))?);
            }
        }
        let store = Store::open_dir(root.join("store"))?;
        let logged = state.stress.audit.len();
        let fed = Federation::from_state(
            FederationState {
                clock: state.clock,
                ids: state.ids,
                descriptors,
                snapshots: state.snapshots,
                stress: state.stress,
            },
            Arc::new(store),
        );
        Ok(Repository { root: root.to_path_buf(), fed, logged })
    }

    /// Opens the repository at `path`, or at `$BUBBLEKIT_REPO`, or in the
    /// current directory.
    pub fn locate(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::open(p),
            None => match std::env::var_os(REPO_ENV) {
                Some(p) => Self::open(PathBuf::from(p)),
                None => Self::open(std::env::current_dir()?),
            },
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn federation_mut(&mut self) -> &mut Federation {
        &mut self.fed
    }

    fn write_state(&self) -> Result<()> {
        let state = self.fed.to_state();
        let repo_state =
            RepoState { clock: state.clock, ids: state.ids, snapshots: state.snapshots, stress: state.stress };
        write_atomic(&self.root.join("state.json"), canonical_json_pretty(&repo_state).as_bytes())
    }

    /// Writes changed descriptors and the state, and appends new audit
    /// records to the stress log.
    pub fn save(&mut self) -> Result<()> {
        let dir = self.root.join("bubbles");
        for d in self.fed.descriptors() {
            let path = dir.join(format!("{}.json", d.id));
            let bytes = d.canonical_bytes();
            if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                write_atomic(&path, &bytes)?;
            }
        }
        self.write_state()?;
        let audit = self.fed.audit();
        if audit.len() > self.logged {
            let mut log = fs::OpenOptions::new().create(true).append(true).open(self.root.join("log/stress.log"))?;
            for record in &audit[self.logged..] {
                writeln!(log, "{}", record.line())?;
            }
            log.sync_all()?;
            self.logged = audit.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::{Binding, LogicalPath};
    use crate::stress::Decision;

    #[test]
    fn save_and_reopen_keeps_pending_signals() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Repository::init(dir.path()).unwrap();
        let fed = repo.federation_mut();
        let v1 = fed.store().put_blob(b"one").unwrap();
        let v2 = fed.store().put_blob(b"two").unwrap();
        let p: LogicalPath = "a.txt".parse().unwrap();
        let root = fed.create("root", BTreeMap::from([(p.clone(), v1)])).unwrap();
        let kid = fed.derive(root, "kid").unwrap();
        let leaf = fed.derive(kid, "leaf").unwrap();
        let cs = fed.commit(root, BTreeMap::from([(p, Binding::Bound(v2))])).unwrap();
        fed.resolve_signal(kid, cs.change_signal(), Decision::Accept, "tester").unwrap();
        let before = fed.to_state();
        repo.save().unwrap();

        let reopened = Repository::open(dir.path()).unwrap();
        assert_eq!(reopened.federation().to_state(), before);
        assert_eq!(reopened.federation().descriptor(leaf).unwrap().pending.len(), 1);
        let log = fs::read_to_string(dir.path().join("log/stress.log")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert!(log.contains("accept tester"));
    }

    #[test]
    fn open_without_init_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Repository::open(dir.path()), Err(Error::NoRepository(_))));
    }
}
