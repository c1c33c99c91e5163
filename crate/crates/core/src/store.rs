//! Content-addressed blob store with immutable snapshot records.
//!
//! Blobs are keyed by the SHA-256 of their bytes, so storing the same content
//! twice keeps a single physical copy. A snapshot record maps logical paths to
//! digests; its id is the hash of a canonical text rendering (paths sorted
//! bytewise, one `path TAB digest NEWLINE` line each), which makes ids
//! reproducible.
//!
//! Two backends exist: an in-memory one for simulations and tests, and a
//! directory layout for repositories:
//!
//! ```text
//! store/MANIFEST
//! store/blobs/<first-2-hex>/<remaining-hex>
//! store/snapshots/<snapshot_id>.tsv
//! store/snapshots.log          # taken_at bubble snapshot_id
//! ```
//!
//! Garbage collection is never automatic; callers invoke [`Store::gc`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::model::{BubbleId, LogicalPath};

pub const HASH_ALGORITHM: &str = "sha256";
pub const STORE_FORMAT_VERSION: u32 = 1;

/// A 256-bit content hash, rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl FromStr for Digest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::Corrupt(format!("not a 64-char lowercase hex digest: {s:?}")));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| Error::Corrupt(format!("bad digest {s:?}: {e}")))?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An immutable record of which digest each logical path pointed at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub snapshot_id: Digest,
    pub entries: BTreeMap<LogicalPath, Digest>,
    pub taken_at: u64,
    pub bubble: BubbleId,
}

/// Canonical text of snapshot entries. `BTreeMap<LogicalPath, _>` iterates
/// in bytewise path order.
pub fn canonical_snapshot_text(entries: &BTreeMap<LogicalPath, Digest>) -> String {
    let mut out = String::new();
    for (path, digest) in entries {
        out.push_str(path.as_str());
        out.push('\t');
        out.push_str(&digest.to_hex());
        out.push('\n');
    }
    out
}

fn parse_snapshot_text(text: &str) -> Result<BTreeMap<LogicalPath, Digest>> {
    let mut entries = BTreeMap::new();
    for line in text.lines() {
        let (path, digest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Corrupt(format!("bad snapshot line {line:?}")))?;
        entries.insert(path.parse()?, digest.parse()?);
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GcStats {
    pub blobs_removed: usize,
    pub snapshots_removed: usize,
}

trait Backend: Send + Sync {
    fn put(&mut self, digest: Digest, bytes: &[u8]) -> Result<()>;
    fn get(&self, digest: &Digest) -> Result<Option<Arc<[u8]>>>;
    fn contains(&self, digest: &Digest) -> bool;
    fn remove(&mut self, digest: &Digest) -> Result<()>;
    fn digests(&self) -> Vec<Digest>;

    fn put_snapshot(&mut self, record: &SnapshotRecord) -> Result<()>;
    fn snapshot(&self, id: &Digest) -> Option<SnapshotRecord>;
    fn snapshot_ids(&self) -> Vec<Digest>;
    fn remove_snapshot(&mut self, id: &Digest) -> Result<()>;
}

#[derive(Default)]
struct MemoryBackend {
    blobs: BTreeMap<Digest, Arc<[u8]>>,
    snapshots: BTreeMap<Digest, SnapshotRecord>,
}

impl Backend for MemoryBackend {
    fn put(&mut self, digest: Digest, bytes: &[u8]) -> Result<()> {
        self.blobs.entry(digest).or_insert_with(|| Arc::from(bytes));
        Ok(())
    }

    fn get(&self, digest: &Digest) -> Result<Option<Arc<[u8]>>> {
        Ok(self.blobs.get(digest).cloned())
    }

    fn contains(&self, digest: &Digest) -> bool {
        self.blobs.contains_key(digest)
    }

    fn remove(&mut self, digest: &Digest) -> Result<()> {
        self.blobs.remove(digest);
        Ok(())
    }

    fn digests(&self) -> Vec<Digest> {
        self.blobs.keys().copied().collect()
    }

    fn put_snapshot(&mut self, record: &SnapshotRecord) -> Result<()> {
        self.snapshots.entry(record.snapshot_id).or_insert_with(|| record.clone());
        Ok(())
    }

    fn snapshot(&self, id: &Digest) -> Option<SnapshotRecord> {
        self.snapshots.get(id).cloned()
    }

    fn snapshot_ids(&self) -> Vec<Digest> {
        self.snapshots.keys().copied().collect()
    }

    fn remove_snapshot(&mut self, id: &Digest) -> Result<()> {
        self.snapshots.remove(id);
        Ok(())
    }
}

/// Directory backend. Blob presence and snapshot metadata are indexed in
/// memory at open; blob bytes are read from disk on demand.
struct DiskBackend {
    root: PathBuf,
    present: BTreeSet<Digest>,
    snapshots: BTreeMap<Digest, (u64, BubbleId)>,
}

impl DiskBackend {
    fn blob_path(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join("blobs").join(&hex[..2]).join(&hex[2..])
    }

    fn snapshot_path(&self, id: &Digest) -> PathBuf {
        self.root.join("snapshots").join(format!("{id}.tsv"))
    }

    fn init(root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("blobs"))?;
        fs::create_dir_all(root.join("snapshots"))?;
        let manifest = root.join("MANIFEST");
        if !manifest.exists() {
            write_atomic(
                &manifest,
                format!("format {STORE_FORMAT_VERSION}\nhash {HASH_ALGORITHM}\n").as_bytes(),
            )?;
        }
        Ok(())
    }

    fn open(root: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(root.join("MANIFEST"))?;
        let mut format = None;
        let mut hash = None;
        for line in manifest.lines() {
            match line.split_once(' ') {
                Some(("format", v)) => format = v.trim().parse::<u32>().ok(),
                Some(("hash", v)) => hash = Some(v.trim().to_string()),
                _ => {}
            }
        }
        if format != Some(STORE_FORMAT_VERSION) || hash.as_deref() != Some(HASH_ALGORITHM) {
            return Err(Error::Corrupt(format!("unsupported store manifest {manifest:?}")));
        }

        let mut present = BTreeSet::new();
        for fan in fs::read_dir(root.join("blobs"))? {
            let fan = fan?;
            if !fan.file_type()?.is_dir() {
                continue;
            }
            let prefix = fan.file_name().to_string_lossy().into_owned();
            for entry in fs::read_dir(fan.path())? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                // skip half-written temp files
                if let Ok(d) = format!("{prefix}{name}").parse::<Digest>() {
                    present.insert(d);
                }
            }
        }

        let mut snapshots = BTreeMap::new();
        let log = root.join("snapshots.log");
        if log.exists() {
            for line in fs::read_to_string(&log)?.lines() {
                let mut parts = line.split(' ');
                let (Some(at), Some(bubble), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Corrupt(format!("bad snapshot log line {line:?}")));
                };
                let at = at.parse::<u64>().map_err(|e| Error::Corrupt(e.to_string()))?;
                let id: Digest = id.parse()?;
                if root.join("snapshots").join(format!("{id}.tsv")).exists() {
                    snapshots.entry(id).or_insert((at, bubble.parse()?));
                }
            }
        }
        Ok(DiskBackend { root: root.to_path_buf(), present, snapshots })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths always have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl Backend for DiskBackend {
    fn put(&mut self, digest: Digest, bytes: &[u8]) -> Result<()> {
        if self.present.contains(&digest) {
            return Ok(());
        }
        let path = self.blob_path(&digest);
        fs::create_dir_all(path.parent().expect("fan-out dir"))?;
        write_atomic(&path, bytes)?;
        self.present.insert(digest);
        Ok(())
    }

    fn get(&self, digest: &Digest) -> Result<Option<Arc<[u8]>>> {
        if !self.present.contains(digest) {
            return Ok(None);
        }
        Ok(Some(Arc::from(fs::read(self.blob_path(digest))?)))
    }

    fn contains(&self, digest: &Digest) -> bool {
        self.present.contains(digest)
    }

    fn remove(&mut self, digest: &Digest) -> Result<()> {
        if self.present.remove(digest) {
            fs::remove_file(self.blob_path(digest))?;
        }
        Ok(())
    }

    fn digests(&self) -> Vec<Digest> {
        self.present.iter().copied().collect()
    }

    fn put_snapshot(&mut self, record: &SnapshotRecord) -> Result<()> {
        if self.snapshots.contains_key(&record.snapshot_id) {
            return Ok(());
        }
        let path = self.snapshot_path(&record.snapshot_id);
        write_atomic(&path, canonical_snapshot_text(&record.entries).as_bytes())?;
        let mut log = fs::OpenOptions::new().create(true).append(true).open(self.root.join("snapshots.log"))?;
        writeln!(log, "{} {} {}", record.taken_at, record.bubble, record.snapshot_id)?;
        self.snapshots.insert(record.snapshot_id, (record.taken_at, record.bubble));
        Ok(())
    }

    fn snapshot(&self, id: &Digest) -> Option<SnapshotRecord> {
        let (taken_at, bubble) = *self.snapshots.get(id)?;
        let text = fs::read_to_string(self.snapshot_path(id)).ok()?;
        let entries = parse_snapshot_text(&text).ok()?;
        Some(SnapshotRecord { snapshot_id: *id, entries, taken_at, bubble })
    }

    fn snapshot_ids(&self) -> Vec<Digest> {
        self.snapshots.keys().copied().collect()
    }

    fn remove_snapshot(&mut self, id: &Digest) -> Result<()> {
        if self.snapshots.remove(id).is_some() {
            fs::remove_file(self.snapshot_path(id))?;
        }
        Ok(())
    }
}

/// Thread-safe handle to a blob store. Reads run concurrently; writes are
/// serialized behind the lock.
pub struct Store {
    backend: RwLock<Box<dyn Backend>>,
    root: Option<PathBuf>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("root", &self.root).field("blobs", &self.blob_count()).finish()
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Store { backend: RwLock::new(Box::new(MemoryBackend::default())), root: None }
    }

    /// Creates the directory layout if missing, then opens it.
    pub fn init_dir(root: impl AsRef<Path>) -> Result<Self> {
        DiskBackend::init(root.as_ref())?;
        Self::open_dir(root)
    }

    pub fn open_dir(root: impl AsRef<Path>) -> Result<Self> {
        let backend = DiskBackend::open(root.as_ref())?;
        Ok(Store { backend: RwLock::new(Box::new(backend)), root: Some(root.as_ref().to_path_buf()) })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Box<dyn Backend>> {
        self.backend.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Box<dyn Backend>> {
        self.backend.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<Digest> {
        let digest = Digest::of(bytes);
        self.write().put(digest, bytes)?;
        Ok(digest)
    }

    pub fn get_blob(&self, digest: &Digest) -> Result<Arc<[u8]>> {
        self.read().get(digest)?.ok_or(Error::NotFound(*digest))
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.read().contains(digest)
    }

    pub fn blob_count(&self) -> usize {
        self.read().digests().len()
    }

    pub fn digests(&self) -> Vec<Digest> {
        self.read().digests()
    }

    /// Records an immutable snapshot. Every entry must already be stored.
    /// Identical entry maps yield the same id; the first recording's
    /// metadata is kept.
    pub fn record_snapshot(
        &self,
        bubble: BubbleId,
        entries: BTreeMap<LogicalPath, Digest>,
        taken_at: u64,
    ) -> Result<SnapshotRecord> {
        let mut backend = self.write();
        if let Some((path, digest)) = entries.iter().find(|(_, d)| !backend.contains(d)) {
            return Err(Error::DanglingDigest { path: path.to_string(), digest: *digest });
        }
        let snapshot_id = Digest::of(canonical_snapshot_text(&entries).as_bytes());
        if let Some(existing) = backend.snapshot(&snapshot_id) {
            return Ok(existing);
        }
        let record = SnapshotRecord { snapshot_id, entries, taken_at, bubble };
        backend.put_snapshot(&record)?;
        Ok(record)
    }

    pub fn get_snapshot(&self, id: &Digest) -> Result<SnapshotRecord> {
        self.read().snapshot(id).ok_or(Error::SnapshotNotFound(*id))
    }

    pub fn snapshot_ids(&self) -> Vec<Digest> {
        self.read().snapshot_ids()
    }

    /// Removes every blob not reachable from `live_roots`. A root is either
    /// a snapshot id (its entries stay alive) or a blob digest. Snapshots not
    /// named as roots are dropped as well, so no surviving record can point
    /// at a removed blob.
    pub fn gc(&self, live_roots: &BTreeSet<Digest>) -> Result<GcStats> {
        let mut backend = self.write();
        let mut live: BTreeSet<Digest> = BTreeSet::new();
        let mut stats = GcStats::default();
        for id in backend.snapshot_ids() {
            if live_roots.contains(&id) {
                let record = backend.snapshot(&id).ok_or(Error::SnapshotNotFound(id))?;
                live.extend(record.entries.values().copied());
            } else {
                backend.remove_snapshot(&id)?;
                stats.snapshots_removed += 1;
            }
        }
        live.extend(live_roots.iter().copied());
        for digest in backend.digests() {
            if !live.contains(&digest) {
                backend.remove(&digest)?;
                stats.blobs_removed += 1;
            }
        }
        Ok(stats)
    }
}
