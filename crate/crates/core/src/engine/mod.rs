//! The federation: every bubble descriptor, the store they bind into, and
//! the operations that create and rearrange bubbles.
//!
//! All mutation goes through `&mut Federation`, which makes the federation
//! a single-writer state machine. `resolve` and `examine` take `&self` and
//! can run concurrently on a shared, immutable federation.

mod constraints;
mod examine;
mod export;
mod ops;
pub(crate) mod resolve;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use examine::{AncestryEntry, AncestryReport, EmbedCollision, Relation};
pub use export::{export_dot, export_json, FederationExport, EXPORT_FORMAT};
pub use resolve::{ResolvedElement, View};
pub(crate) use ops::{changed_paths, splice};

use crate::error::{Error, Result};
use crate::model::{BubbleDescriptor, BubbleId, BubbleState, IdAllocator, LogicalPath};
use crate::store::{Digest, Store};
use crate::stress::StressState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotReason {
    Create,
    Freeze,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub bubble: BubbleId,
    pub snapshot: Digest,
    pub reason: SnapshotReason,
    pub at: u64,
}

pub struct Federation {
    pub(crate) descriptors: BTreeMap<BubbleId, BubbleDescriptor>,
    pub(crate) store: Arc<Store>,
    pub(crate) clock: u64,
    pub(crate) ids: IdAllocator,
    pub(crate) reserved_ids: Vec<BubbleId>,
    pub(crate) snapshots: Vec<SnapshotRef>,
    pub(crate) stress: StressState,
}

/// Everything needed to rebuild a federation over an existing store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub clock: u64,
    pub ids: IdAllocator,
    pub descriptors: Vec<BubbleDescriptor>,
    pub snapshots: Vec<SnapshotRef>,
    pub stress: StressState,
}

impl std::fmt::Debug for Federation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Federation")
            .field("bubbles", &self.descriptors.len())
            .field("clock", &self.clock)
            .finish()
    }
}

/// Saved copies of descriptors, restored when an operation fails halfway.
pub(crate) struct Undo(Vec<(BubbleId, Option<BubbleDescriptor>)>);

impl Federation {
    pub fn new(store: Arc<Store>, ids: IdAllocator) -> Self {
        Federation {
            descriptors: BTreeMap::new(),
            store,
            clock: 0,
            ids,
            reserved_ids: Vec::new(),
            snapshots: Vec::new(),
            stress: StressState::default(),
        }
    }

    /// Fresh in-memory federation with a deterministic id sequence.
    pub fn in_memory(label: &str) -> Self {
        Federation::new(Arc::new(Store::in_memory()), IdAllocator::seeded(label))
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn snapshots(&self) -> &[SnapshotRef] {
        &self.snapshots
    }

    pub fn descriptor(&self, id: BubbleId) -> Result<&BubbleDescriptor> {
        self.descriptors.get(&id).ok_or(Error::UnknownBubble(id))
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &BubbleDescriptor> {
        self.descriptors.values()
    }

    pub fn contains(&self, id: BubbleId) -> bool {
        self.descriptors.contains_key(&id)
    }

    /// Live bubbles whose name is exactly `name`.
    pub fn find_by_name(&self, name: &str) -> Vec<BubbleId> {
        self.descriptors.values().filter(|d| d.name == name && d.state.is_live()).map(|d| d.id).collect()
    }

    /// Live bubbles listing `id` as a structural parent, in id order.
    pub fn dependents(&self, id: BubbleId) -> Vec<BubbleId> {
        self.descriptors
            .values()
            .filter(|d| d.state.is_live() && d.structural_parents.contains(&id))
            .map(|d| d.id)
            .collect()
    }

    /// Live bubbles embedding `id`, in id order.
    pub fn embedders(&self, id: BubbleId) -> Vec<BubbleId> {
        self.descriptors
            .values()
            .filter(|d| d.state.is_live() && d.embeds.iter().any(|e| e.guest == id))
            .map(|d| d.id)
            .collect()
    }

    /// Every live bubble structurally downstream of `id` (not including it).
    pub fn downstream(&self, id: BubbleId) -> BTreeSet<BubbleId> {
        let mut children: BTreeMap<BubbleId, Vec<BubbleId>> = BTreeMap::new();
        for d in self.descriptors.values().filter(|d| d.state.is_live()) {
            for p in &d.structural_parents {
                children.entry(*p).or_default().push(d.id);
            }
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(next) = stack.pop() {
            for c in children.get(&next).into_iter().flatten() {
                if out.insert(*c) {
                    stack.push(*c);
                }
            }
        }
        out
    }

    /// Queues an id to be used by the next operation that creates a bubble.
    /// Lets a coordinator hand out the same ids no matter which replica
    /// executes the creation.
    pub fn reserve_id(&mut self, id: BubbleId) {
        self.reserved_ids.push(id);
    }

    pub(crate) fn next_id(&mut self) -> BubbleId {
        if self.reserved_ids.is_empty() {
            loop {
                let id = self.ids.next_id();
                if !self.descriptors.contains_key(&id) {
                    return id;
                }
            }
        }
        self.reserved_ids.remove(0)
    }

    pub(crate) fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub(crate) fn live(&self, id: BubbleId) -> Result<&BubbleDescriptor> {
        let d = self.descriptor(id)?;
        match d.state {
            BubbleState::Destroyed => Err(Error::Destroyed(id)),
            BubbleState::Retracted => Err(Error::NotActive { bubble: id, state: d.state }),
            _ => Ok(d),
        }
    }

    /// Like [`Self::live`] but also rejects frozen bubbles.
    pub(crate) fn active(&self, id: BubbleId) -> Result<&BubbleDescriptor> {
        let d = self.live(id)?;
        if d.state == BubbleState::Frozen {
            return Err(Error::FrozenBubble(id));
        }
        Ok(d)
    }

    /// Mutable access that bumps `seq`.
    pub(crate) fn touch(&mut self, id: BubbleId) -> Result<&mut BubbleDescriptor> {
        let d = self.descriptors.get_mut(&id).ok_or(Error::UnknownBubble(id))?;
        d.seq += 1;
        Ok(d)
    }

    pub(crate) fn save(&self, ids: &[BubbleId]) -> Undo {
        Undo(ids.iter().map(|id| (*id, self.descriptors.get(id).cloned())).collect())
    }

    pub(crate) fn restore(&mut self, undo: Undo) {
        for (id, saved) in undo.0.into_iter().rev() {
            match saved {
                Some(d) => {
                    self.descriptors.insert(id, d);
                }
                None => {
                    self.descriptors.remove(&id);
                }
            }
        }
    }

    /// Runs `f`; on error every descriptor in `ids` is put back as it was.
    pub(crate) fn atomically<R>(&mut self, ids: &[BubbleId], f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let undo = self.save(ids);
        let out = f(self);
        if out.is_err() {
            self.restore(undo);
        }
        out
    }

    pub(crate) fn require_stored<'a>(
        &self,
        digests: impl IntoIterator<Item = (&'a LogicalPath, Digest)>,
    ) -> Result<()> {
        for (path, digest) in digests {
            if !self.store.contains(&digest) {
                return Err(Error::DanglingDigest { path: path.to_string(), digest });
            }
        }
        Ok(())
    }

    pub(crate) fn record_snapshot(&mut self, bubble: BubbleId, reason: SnapshotReason) -> Result<Digest> {
        let entries = self.resolve(bubble)?.into_iter().map(|(p, e)| (p, e.digest)).collect();
        let at = self.clock;
        let record = self.store.record_snapshot(bubble, entries, at)?;
        self.snapshots.push(SnapshotRef { bubble, snapshot: record.snapshot_id, reason, at });
        Ok(record.snapshot_id)
    }

    /// Installs a descriptor received from elsewhere without running any
    /// operation logic. Used for replicas held by governors.
    pub fn install_descriptor(&mut self, descriptor: BubbleDescriptor) {
        self.descriptors.insert(descriptor.id, descriptor);
    }

    /// Digests that must survive garbage collection: every binding, every
    /// recorded snapshot, and every digest named by a retained change set.
    pub fn gc_roots(&self) -> BTreeSet<Digest> {
        let mut roots: BTreeSet<Digest> = self
            .descriptors
            .values()
            .flat_map(|d| d.local_bindings.values().filter_map(|b| b.digest()))
            .collect();
        roots.extend(self.snapshots.iter().map(|s| s.snapshot));
        roots.extend(self.stress.referenced_digests());
        roots
    }

    pub fn gc(&self) -> Result<crate::store::GcStats> {
        self.store.gc(&self.gc_roots())
    }

    pub fn to_state(&self) -> FederationState {
        FederationState {
            clock: self.clock,
            ids: self.ids.clone(),
            descriptors: self.descriptors.values().cloned().collect(),
            snapshots: self.snapshots.clone(),
            stress: self.stress.clone(),
        }
    }

    pub fn from_state(state: FederationState, store: Arc<Store>) -> Self {
        Federation {
            descriptors: state.descriptors.into_iter().map(|d| (d.id, d)).collect(),
            store,
            clock: state.clock,
            ids: state.ids,
            reserved_ids: Vec::new(),
            snapshots: state.snapshots,
            stress: state.stress,
        }
    }

    /// Structural invariants over the whole federation.
    pub fn validate_all(&self) -> Vec<crate::model::ModelViolation> {
        self.descriptors
            .values()
            .flat_map(|d| crate::model::validate(d, &self.descriptors, None))
            .collect()
    }
}
