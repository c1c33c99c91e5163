//! Governors: authorities that each own a set of bubbles.
//!
//! Every governor runs its own [`Federation`] holding its owned bubbles plus
//! replicas of everything else it has heard about, and its own blob store.
//! Governors talk only through envelopes. Every envelope except an `Ack` is
//! retransmitted until acknowledged, and receivers drop repeated message ids,
//! so each message is processed once even when the network duplicates it.
//!
//! Owners publish each new version of their descriptors as `SyncState`. A
//! replica tracks the version history it has seen; a version whose history
//! neither contains nor is contained by the local one is concurrent and is
//! kept in a conflict entry rather than silently overwritten.
//!
//! Edits to a bubble owned elsewhere travel to the owner as a proposal. The
//! owner runs them through the normal commit pipeline, unless the paths
//! changed underneath the proposer, in which case both versions are kept
//! as a conflict for a manual merge.

mod cluster;
mod socket;
mod transport;
mod wire;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

pub use cluster::Cluster;
pub use socket::SocketNode;
pub use transport::{Network, NetworkStats, Partition, TransportContract};
pub use wire::{decode, encode, Envelope, EnvelopeKind, GovernorId};

use crate::engine::Federation;
use crate::error::{Error, Result};
use crate::model::{Binding, BubbleDescriptor, BubbleId, Constraint, LogicalPath, Mount, SignalId};
use crate::store::Digest;
use crate::stress::{ChangeSet, Decision, PropagationOutcome, StressSignal};

pub type CommandId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Create { name: String, bindings: BTreeMap<LogicalPath, Digest> },
    Derive { parent: BubbleId, name: String },
    Clone { source: BubbleId, name: String },
    Embed { host: BubbleId, mount: Mount, guest: BubbleId },
    Commit { bubble: BubbleId, edits: BTreeMap<LogicalPath, Binding> },
    Freeze { bubble: BubbleId },
    Destroy { bubble: BubbleId },
    Insert { upstream: BubbleId, downstream: BubbleId, name: String, bindings: BTreeMap<LogicalPath, Binding> },
    Retract { bubble: BubbleId },
    Dissolve { bubble: BubbleId, source: BubbleId },
    Constrain { bubble: BubbleId, constraint: Constraint },
    SetAttribute { bubble: BubbleId, key: String, value: String },
    Decide { bubble: BubbleId, signal: SignalId, decision: Decision, actor: String },
    /// Edit a bubble owned by another governor.
    Propose { bubble: BubbleId, edits: BTreeMap<LogicalPath, Binding> },
    /// Settle a conflict entry at the owner, keeping the local or the
    /// remote side.
    ResolveConflict { index: usize, take_remote: bool },
    Adopt(Proposal),
}

impl Command {
    /// The existing bubble this command mutates, if any.
    fn target(&self) -> Option<BubbleId> {
        match self {
            Command::Create { .. } | Command::Derive { .. } | Command::Clone { .. } => None,
            Command::Propose { .. } | Command::ResolveConflict { .. } => None,
            Command::Embed { host, .. } => Some(*host),
            Command::Commit { bubble, .. }
            | Command::Freeze { bubble }
            | Command::Destroy { bubble }
            | Command::Retract { bubble }
            | Command::Dissolve { bubble, .. }
            | Command::Constrain { bubble, .. }
            | Command::SetAttribute { bubble, .. }
            | Command::Decide { bubble, .. } => Some(*bubble),
            Command::Insert { downstream, .. } => Some(*downstream),
            Command::Adopt(p) => Some(p.bubble),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandOutput {
    Bubble(BubbleId),
    ChangeSet(ChangeSet),
    Snapshot(Digest),
    Outcome(PropagationOutcome),
    Done,
}

/// An edit sent to an owner, with what the proposer saw at the edited paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub bubble: BubbleId,
    pub proposer: GovernorId,
    pub edits: BTreeMap<LogicalPath, Binding>,
    pub base: BTreeMap<LogicalPath, Option<Binding>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConflictEntry {
    /// Two descriptor versions with diverged histories.
    Descriptor { bubble: BubbleId, local: Box<BubbleDescriptor>, remote: Box<BubbleDescriptor>, from: GovernorId },
    /// A proposal whose paths changed at the owner since the proposer saw
    /// them.
    Proposal { proposal: Proposal, current: BTreeMap<LogicalPath, Option<Binding>> },
}

impl ConflictEntry {
    pub fn bubble(&self) -> BubbleId {
        match self {
            ConflictEntry::Descriptor { bubble, .. } => *bubble,
            ConflictEntry::Proposal { proposal, .. } => proposal.bubble,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncOutcome {
    Unchanged,
    FastForward,
    Stale,
    Concurrent,
}

/// Compares version histories, each ending with its head.
pub fn compare_histories(local: &[Digest], remote: &[Digest]) -> SyncOutcome {
    match (local.last(), remote.last()) {
        (Some(l), Some(r)) if l == r => SyncOutcome::Unchanged,
        (None, _) => SyncOutcome::FastForward,
        (Some(l), Some(r)) => {
            if remote.contains(l) {
                SyncOutcome::FastForward
            } else if local.contains(r) {
                SyncOutcome::Stale
            } else {
                SyncOutcome::Concurrent
            }
        }
        (Some(_), None) => SyncOutcome::Stale,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SyncPayload {
    descriptor: Option<BubbleDescriptor>,
    history: Vec<Digest>,
    owner: GovernorId,
    proposal: Option<Proposal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeliverPayload {
    target: BubbleId,
    signal: StressSignal,
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

pub struct Governor {
    id: GovernorId,
    peers: Vec<GovernorId>,
    fed: Federation,
    owners: BTreeMap<BubbleId, GovernorId>,
    histories: BTreeMap<BubbleId, Vec<Digest>>,
    seen: BTreeSet<String>,
    next_msg: u64,
    unacked: BTreeMap<String, (Envelope, u64)>,
    outbox: Vec<Envelope>,
    commands: VecDeque<(CommandId, Command, Option<BubbleId>)>,
    results: BTreeMap<CommandId, Result<CommandOutput>>,
    wanted: BTreeSet<Digest>,
    conflicts: Vec<ConflictEntry>,
    digest_mismatches: u64,
    retry_interval: u64,
    now: u64,
}

impl std::fmt::Debug for Governor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Governor").field("id", &self.id).field("owned", &self.owned().len()).finish()
    }
}

impl Governor {
    pub fn new(id: GovernorId, peers: Vec<GovernorId>, mut fed: Federation, retry_interval: u64) -> Self {
        fed.set_detached(true);
        Governor {
            id,
            peers,
            fed,
            owners: BTreeMap::new(),
            histories: BTreeMap::new(),
            seen: BTreeSet::new(),
            next_msg: 0,
            unacked: BTreeMap::new(),
            outbox: Vec::new(),
            commands: VecDeque::new(),
            results: BTreeMap::new(),
            wanted: BTreeSet::new(),
            conflicts: Vec::new(),
            digest_mismatches: 0,
            retry_interval: retry_interval.max(1),
            now: 0,
        }
    }

    pub fn id(&self) -> &GovernorId {
        &self.id
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn owner_of(&self, b: BubbleId) -> Option<&GovernorId> {
        self.owners.get(&b)
    }

    pub fn owns(&self, b: BubbleId) -> bool {
        self.owners.get(&b) == Some(&self.id)
    }

    pub fn owned(&self) -> Vec<BubbleId> {
        self.owners.iter().filter(|(_, g)| **g == self.id).map(|(b, _)| *b).collect()
    }

    pub fn conflicts(&self) -> &[ConflictEntry] {
        &self.conflicts
    }

    pub fn digest_mismatches(&self) -> u64 {
        self.digest_mismatches
    }

    pub fn history(&self, b: BubbleId) -> &[Digest] {
        self.histories.get(&b).map(Vec::as_slice).unwrap_or_default()
    }

    /// Round-trips the federation through its serialized state, as a
    /// restart would.
    pub fn reload(&mut self) -> Result<()> {
        let text = serde_json::to_string(&self.fed.to_state()).map_err(|e| Error::Corrupt(e.to_string()))?;
        let state = serde_json::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
        self.fed = Federation::from_state(state, self.fed.store().clone());
        Ok(())
    }

    pub(crate) fn is_idle(&self) -> bool {
        self.unacked.is_empty() && self.commands.is_empty() && self.outbox.is_empty()
    }

    pub(crate) fn take_outbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.outbox)
    }

    pub(crate) fn take_result(&mut self, id: CommandId) -> Option<Result<CommandOutput>> {
        self.results.remove(&id)
    }

    pub(crate) fn submit(&mut self, id: CommandId, command: Command, reserved: Option<BubbleId>) {
        self.commands.push_back((id, command, reserved));
    }

    /// Stores a blob in this governor's store, as a local tool would.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<Digest> {
        self.fed.store().put_blob(bytes)
    }

    /// Reads a blob, asking peers for it when it is not local. Returns
    /// `None` while a fetch is in flight.
    pub fn fetch_blob(&mut self, digest: Digest) -> Option<std::sync::Arc<[u8]>> {
        if let Ok(bytes) = self.fed.store().get_blob(&digest) {
            return Some(bytes);
        }
        self.request_blob(digest);
        None
    }

    fn request_blob(&mut self, digest: Digest) {
        if self.wanted.insert(digest) {
            for peer in self.peers.clone() {
                self.send(peer, EnvelopeKind::BlobRequest, serde_json::json!({ "digest": digest }));
            }
        }
    }

    fn send(&mut self, to: GovernorId, kind: EnvelopeKind, payload: serde_json::Value) {
        self.next_msg += 1;
        let envelope = Envelope {
            msg_id: format!("{}-{}", self.id, self.next_msg),
            from: self.id.clone(),
            to,
            kind,
            payload,
            sent_at: self.now,
        };
        if kind != EnvelopeKind::Ack {
            self.unacked.insert(envelope.msg_id.clone(), (envelope.clone(), self.now + self.retry_interval));
        }
        self.outbox.push(envelope);
    }

    /// Authorization hook for incoming envelopes. Accepts everything.
    fn authorize(&self, _envelope: &Envelope) -> bool {
        true
    }

    /// Declares ownership before any descriptor exists, as configuration
    /// does.
    pub(crate) fn assign(&mut self, b: BubbleId, owner: GovernorId) {
        self.owners.insert(b, owner);
    }

    pub(crate) fn handle(&mut self, envelope: Envelope, now: u64) {
        self.now = now;
        if !self.authorize(&envelope) {
            return;
        }
        if envelope.kind == EnvelopeKind::Ack {
            if let Some(acked) = envelope.payload.get("ack").and_then(|v| v.as_str()) {
                self.unacked.remove(acked);
            }
            return;
        }
        self.send(envelope.from.clone(), EnvelopeKind::Ack, serde_json::json!({ "ack": envelope.msg_id }));
        if !self.seen.insert(envelope.msg_id.clone()) {
            return;
        }
        match envelope.kind {
            EnvelopeKind::SignalDeliver => {
                if let Ok(p) = serde_json::from_value::<DeliverPayload>(envelope.payload) {
                    self.route(p.target, p.signal);
                }
            }
            EnvelopeKind::BlobRequest => {
                let digest = envelope.payload.get("digest").and_then(|d| d.as_str()).and_then(|d| d.parse().ok());
                if let Some(digest) = digest {
                    let bytes = self.fed.store().get_blob(&digest).ok().map(|b| b64().encode(&*b));
                    self.send(envelope.from, EnvelopeKind::BlobReply, serde_json::json!({ "digest": digest, "bytes": bytes }));
                }
            }
            EnvelopeKind::BlobReply => self.on_blob_reply(envelope),
            EnvelopeKind::SyncState => {
                if let Ok(p) = serde_json::from_value::<SyncPayload>(envelope.payload) {
                    self.on_sync(p, envelope.from);
                }
            }
            EnvelopeKind::Ack => unreachable!(),
        }
        self.flush();
    }

    fn on_blob_reply(&mut self, envelope: Envelope) {
        let digest: Option<Digest> = envelope.payload.get("digest").and_then(|d| d.as_str()).and_then(|d| d.parse().ok());
        let bytes = envelope.payload.get("bytes").and_then(|b| b.as_str()).and_then(|b| b64().decode(b).ok());
        let (Some(digest), Some(bytes)) = (digest, bytes) else { return };
        if !self.wanted.contains(&digest) {
            return;
        }
        match verify(digest, &bytes) {
            Ok(()) => {
                if self.fed.store().put_blob(&bytes).is_ok() {
                    self.wanted.remove(&digest);
                }
            }
            Err(_) => {
                self.digest_mismatches += 1;
                self.send(envelope.from, EnvelopeKind::BlobRequest, serde_json::json!({ "digest": digest }));
            }
        }
    }

    fn on_sync(&mut self, payload: SyncPayload, from: GovernorId) {
        if let Some(proposal) = payload.proposal {
            if self.owns(proposal.bubble) {
                self.commands.push_back((0, Command::Adopt(proposal), None));
            }
            return;
        }
        let Some(remote) = payload.descriptor else { return };
        self.owners.insert(remote.id, payload.owner.clone());
        self.sync_descriptor(remote, payload.history, from);
    }

    /// Applies a descriptor version received from `from`.
    pub fn sync_descriptor(&mut self, remote: BubbleDescriptor, history: Vec<Digest>, from: GovernorId) -> SyncOutcome {
        let id = remote.id;
        let outcome = compare_histories(self.history(id), &history);
        match outcome {
            SyncOutcome::FastForward => {
                self.fed.install_descriptor(remote);
                self.histories.insert(id, history);
            }
            SyncOutcome::Concurrent => {
                if let Ok(local) = self.fed.descriptor(id) {
                    self.conflicts.push(ConflictEntry::Descriptor { bubble: id, local: Box::new(local.clone()), remote: Box::new(remote), from });
                }
            }
            SyncOutcome::Unchanged | SyncOutcome::Stale => {}
        }
        outcome
    }

    /// Queues a signal at its target's owner.
    fn route(&mut self, target: BubbleId, signal: StressSignal) {
        match self.owners.get(&target).cloned() {
            Some(owner) if owner == self.id => {
                let _ = self.fed.accept_delivery(target, signal);
            }
            Some(owner) => {
                let payload = serde_json::to_value(DeliverPayload { target, signal }).expect("serializable");
                self.send(owner, EnvelopeKind::SignalDeliver, payload);
            }
            None => {}
        }
    }

    /// Routes queued signals and publishes changed owned descriptors.
    fn flush(&mut self) {
        for (target, signal) in self.fed.take_outbound() {
            self.route(target, signal);
        }
        for b in self.owned() {
            let Ok(d) = self.fed.descriptor(b) else { continue };
            let digest = d.digest();
            let history = self.histories.entry(b).or_default();
            if history.last() == Some(&digest) {
                continue;
            }
            history.push(digest);
            let payload = SyncPayload {
                descriptor: Some(d.clone()),
                history: history.clone(),
                owner: self.id.clone(),
                proposal: None,
            };
            let payload = serde_json::to_value(payload).expect("serializable");
            for peer in self.peers.clone() {
                self.send(peer, EnvelopeKind::SyncState, payload.clone());
            }
        }
    }

    pub(crate) fn on_tick(&mut self, now: u64) {
        self.now = now;
        let due: Vec<String> = self.unacked.iter().filter(|(_, (_, at))| *at <= now).map(|(id, _)| id.clone()).collect();
        for id in due {
            if let Some((envelope, at)) = self.unacked.get_mut(&id) {
                *at = now + self.retry_interval;
                let mut again = envelope.clone();
                again.sent_at = now;
                self.outbox.push(again);
            }
        }
        self.run_commands();
    }

    /// Runs queued commands in order; stops at the first one still waiting
    /// for blobs.
    pub(crate) fn run_commands(&mut self) {
        while let Some((_, command, _)) = self.commands.front() {
            let missing = self.missing_blobs(command);
            if !missing.is_empty() {
                for d in missing {
                    self.request_blob(d);
                }
                break;
            }
            let (id, command, reserved) = self.commands.pop_front().expect("front exists");
            if let Some(r) = reserved {
                self.fed.reserve_id(r);
            }
            let result = self.execute(command);
            if id != 0 {
                self.results.insert(id, result);
            }
            self.flush();
        }
    }

    fn missing_blobs(&self, command: &Command) -> Vec<Digest> {
        let mut needed: BTreeSet<Digest> = BTreeSet::new();
        let resolved = |b: BubbleId| self.fed.resolve_digests(b).map(|v| v.into_values().collect::<Vec<_>>());
        match command {
            Command::Commit { bubble, edits } => {
                needed.extend(resolved(*bubble).unwrap_or_default());
                needed.extend(edits.values().filter_map(Binding::digest));
            }
            Command::Adopt(p) => {
                if self.fed.contains(p.bubble) {
                    needed.extend(resolved(p.bubble).unwrap_or_default());
                }
                needed.extend(p.edits.values().filter_map(Binding::digest));
            }
            Command::Freeze { bubble } => needed.extend(resolved(*bubble).unwrap_or_default()),
            Command::Create { bindings, .. } => needed.extend(bindings.values().copied()),
            Command::Insert { bindings, .. } => needed.extend(bindings.values().filter_map(Binding::digest)),
            Command::Decide { decision: Decision::Merge(map), .. } => needed.extend(map.values().copied()),
            _ => {}
        }
        needed.into_iter().filter(|d| !self.fed.store().contains(d)).collect()
    }

    fn require_owner(&self, b: BubbleId) -> Result<()> {
        if self.owns(b) {
            Ok(())
        } else {
            Err(Error::NotOwner { governor: self.id.to_string(), bubble: b })
        }
    }

    fn adopt_new(&mut self, result: Result<BubbleId>) -> Result<CommandOutput> {
        let id = result?;
        self.owners.insert(id, self.id.clone());
        Ok(CommandOutput::Bubble(id))
    }

    fn execute(&mut self, command: Command) -> Result<CommandOutput> {
        if let Some(target) = command.target() {
            self.require_owner(target)?;
        }
        match command {
            Command::Create { name, bindings } => {
                let r = self.fed.create(&name, bindings);
                self.adopt_new(r)
            }
            Command::Derive { parent, name } => {
                let r = self.fed.derive(parent, &name);
                self.adopt_new(r)
            }
            Command::Clone { source, name } => {
                let r = self.fed.clone_bubble(source, &name);
                self.adopt_new(r)
            }
            Command::Embed { host, mount, guest } => self.fed.embed(host, mount, guest).map(|_| CommandOutput::Done),
            Command::Commit { bubble, edits } => self.fed.commit(bubble, edits).map(CommandOutput::ChangeSet),
            Command::Freeze { bubble } => self.fed.freeze(bubble).map(CommandOutput::Snapshot),
            Command::Destroy { bubble } => self.fed.destroy(bubble).map(|_| CommandOutput::Done),
            Command::Insert { upstream, downstream, name, bindings } => {
                let r = self.fed.insert_between(upstream, downstream, &name, bindings);
                self.adopt_new(r)
            }
            Command::Retract { bubble } => {
                for dep in self.fed.dependents(bubble) {
                    self.require_owner(dep)?;
                }
                self.fed.retract(bubble).map(|_| CommandOutput::Done)
            }
            Command::Dissolve { bubble, source } => self.fed.dissolve(bubble, source).map(|_| CommandOutput::Done),
            Command::Constrain { bubble, constraint } => {
                self.fed.constrain(bubble, constraint).map(|_| CommandOutput::Done)
            }
            Command::SetAttribute { bubble, key, value } => {
                self.fed.set_attribute(bubble, &key, &value).map(|_| CommandOutput::Done)
            }
            Command::Decide { bubble, signal, decision, actor } => {
                let outcome = self.fed.resolve_signal(bubble, signal, decision, &actor)?;
                for pin in &outcome.pins {
                    self.owners.insert(*pin, self.id.clone());
                }
                Ok(CommandOutput::Outcome(outcome))
            }
            Command::Propose { bubble, edits } => {
                if self.owns(bubble) {
                    return self.fed.commit(bubble, edits).map(CommandOutput::ChangeSet);
                }
                let owner = self.owners.get(&bubble).cloned().ok_or(Error::UnknownBubble(bubble))?;
                let local = &self.fed.descriptor(bubble)?.local_bindings;
                let base = edits.keys().map(|p| (p.clone(), local.get(p).copied())).collect();
                let proposal = Proposal { bubble, proposer: self.id.clone(), edits, base };
                let payload =
                    SyncPayload { descriptor: None, history: Vec::new(), owner: owner.clone(), proposal: Some(proposal) };
                self.send(owner, EnvelopeKind::SyncState, serde_json::to_value(payload).expect("serializable"));
                Ok(CommandOutput::Done)
            }
            Command::Adopt(proposal) => {
                let local = &self.fed.descriptor(proposal.bubble)?.local_bindings;
                let current: BTreeMap<_, _> = proposal.base.keys().map(|p| (p.clone(), local.get(p).copied())).collect();
                if current != proposal.base {
                    self.conflicts.push(ConflictEntry::Proposal { proposal, current });
                    return Ok(CommandOutput::Done);
                }
                let bubble = proposal.bubble;
                match self.fed.commit(bubble, proposal.edits.clone()) {
                    Ok(cs) => Ok(CommandOutput::ChangeSet(cs)),
                    Err(e) => {
                        self.conflicts.push(ConflictEntry::Proposal { proposal, current });
                        Err(e)
                    }
                }
            }
            Command::ResolveConflict { index, take_remote } => {
                if index >= self.conflicts.len() {
                    return Err(Error::IllegalDecision(format!("no conflict entry {index}")));
                }
                let entry = self.conflicts.remove(index);
                if !take_remote {
                    return Ok(CommandOutput::Done);
                }
                let (bubble, edits) = match entry {
                    ConflictEntry::Proposal { proposal, .. } => (proposal.bubble, proposal.edits),
                    ConflictEntry::Descriptor { bubble, local, remote, .. } => {
                        let mut edits: BTreeMap<_, _> = remote.local_bindings.clone();
                        for path in local.local_bindings.keys() {
                            edits.entry(path.clone()).or_insert(Binding::Tombstone);
                        }
                        (bubble, edits)
                    }
                };
                self.require_owner(bubble)?;
                self.fed.commit(bubble, edits).map(CommandOutput::ChangeSet)
            }
        }
    }
}

fn verify(expected: Digest, bytes: &[u8]) -> Result<()> {
    let actual = Digest::of(bytes);
    if actual == expected {
        Ok(())
    } else {
        Err(Error::DigestMismatch { expected, actual })
    }
}
