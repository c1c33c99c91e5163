//! Commits and design-stress propagation.
//!
//! A commit diffs the origin's resolution before and after the edit and
//! sends a `Change` signal to every immediate structural dependent. Each
//! receiver decides:
//!
//! * **Accept** forwards the signal to its own dependents. Nothing is
//!   rebound, inheritance already delivers the new digests.
//! * **Merge** binds caller-chosen digests for the paths the receiver
//!   shadows locally, then forwards.
//! * **Decline** inserts a pin bubble between the receiver and each parent
//!   the change arrived through. The pin binds the versions from before the
//!   commit, so the decliner resolves exactly as it did. Its dependents get a
//!   `ForkChoice` naming the nearest bubble on each design line.
//! * **ChooseNew / ChooseOld** answer a fork by re-parenting onto the named
//!   line, then pass the fork on with themselves as that line's nearest
//!   bubble.
//!
//! Every delivery is recorded once per `(bubble, signal)` and queued on the
//! receiver until it is decided. Queues are part of the federation state and
//! survive save and reload.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::{Federation, SnapshotReason};
use crate::error::{Error, Result};
use crate::model::{Binding, BubbleId, BubbleState, LogicalPath, SignalId};
use crate::store::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathChange {
    pub before: Option<Digest>,
    pub after: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub id: SignalId,
    pub origin: BubbleId,
    pub changes: BTreeMap<LogicalPath, PathChange>,
    /// Snapshot of the origin's resolution taken just before the commit.
    pub commit_snapshot: Digest,
    pub at: u64,
    /// Bubbles structurally downstream of the origin when it committed.
    pub audience: BTreeSet<BubbleId>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    pub fn change_signal(&self) -> SignalId {
        SignalId::derive(&[b"change", self.id.as_bytes()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    Change,
    /// `new_line` and `old_line` are the bubbles nearest to the receiver on
    /// the changed and the pinned design line.
    ForkChoice { new_line: BubbleId, old_line: BubbleId },
}

/// One delivery of a signal to a bubble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressSignal {
    pub signal_id: SignalId,
    pub changeset: ChangeSet,
    pub kind: SignalKind,
    pub hops: Vec<BubbleId>,
    pub sender: BubbleId,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "paths", rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Decline,
    Merge(BTreeMap<LogicalPath, Digest>),
    ChooseNew,
    ChooseOld,
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::Decline => "decline",
            Decision::Merge(_) => "merge",
            Decision::ChooseNew => "choose-new",
            Decision::ChooseOld => "choose-old",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub decision: Decision,
    pub decided_by: String,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: u64,
    pub signal: SignalId,
    pub bubble: BubbleId,
    pub decision: String,
    pub actor: String,
}

impl AuditRecord {
    /// `timestamp signal_id bubble decision actor`
    pub fn line(&self) -> String {
        format!("{} {} {} {} {}", self.at, self.signal, self.bubble, self.decision, self.actor.replace(char::is_whitespace, "_"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub bubble: BubbleId,
    pub signal: SignalId,
    pub changeset: SignalId,
    pub kind: SignalKind,
    pub sender: BubbleId,
    pub arrival: u64,
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSignal {
    pub signal: SignalId,
    pub kind: SignalKind,
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub bubble: BubbleId,
    pub delivered: bool,
    pub signals: Vec<TraceSignal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationTrace {
    pub changeset: SignalId,
    pub origin: BubbleId,
    pub entries: Vec<TraceEntry>,
}

impl PropagationTrace {
    pub fn delivered(&self) -> BTreeSet<BubbleId> {
        self.entries.iter().filter(|e| e.delivered).map(|e| e.bubble).collect()
    }
}

/// What deciding a signal did to the graph.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PropagationOutcome {
    pub forwarded_to: Vec<BubbleId>,
    pub pins: Vec<BubbleId>,
    pub reparented: Option<(BubbleId, BubbleId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StressState {
    pub(crate) changesets: BTreeMap<SignalId, ChangeSet>,
    pub(crate) inbox: BTreeMap<BubbleId, Vec<StressSignal>>,
    pub(crate) delivered: BTreeSet<(BubbleId, SignalId)>,
    pub(crate) deliveries: Vec<DeliveryRecord>,
    pub(crate) audit: Vec<AuditRecord>,
    pub(crate) arrivals: u64,
    /// When set, deliveries are queued in `outbound` for a router instead
    /// of landing in the local inbox.
    pub(crate) detached: bool,
    pub(crate) outbound: Vec<(BubbleId, StressSignal)>,
}

impl StressState {
    pub(crate) fn referenced_digests(&self) -> impl Iterator<Item = Digest> + '_ {
        self.changesets.values().flat_map(|c| {
            std::iter::once(c.commit_snapshot)
                .chain(c.changes.values().flat_map(|pc| pc.before.into_iter().chain(pc.after)))
        })
    }
}

fn view_value(slot: Option<&crate::engine::resolve::Slot>) -> Option<Digest> {
    slot.and_then(|s| s.outcome().0)
}

impl Federation {
    /// Applies `edits` to `b`'s local bindings and signals the change.
    pub fn commit(&mut self, b: BubbleId, edits: BTreeMap<LogicalPath, Binding>) -> Result<ChangeSet> {
        self.active(b)?;
        self.require_stored(edits.iter().filter_map(|(p, e)| e.digest().map(|d| (p, d))))?;
        let before = self.resolve_digests(b)?;
        self.tick();
        let commit_snapshot = self.record_snapshot(b, SnapshotReason::Commit)?;
        self.atomically(&[b], |fed| {
            fed.touch(b)?.local_bindings.extend(edits);
            fed.ensure_constraints(&[b])
        })?;
        let after = self.resolve_digests(b)?;
        let changes: BTreeMap<LogicalPath, PathChange> = crate::engine::changed_paths(&before, &after)
            .into_iter()
            .map(|p| {
                let change = PathChange { before: before.get(&p).copied(), after: after.get(&p).copied() };
                (p, change)
            })
            .collect();
        let seq = self.descriptor(b)?.seq;
        let changeset = ChangeSet {
            id: SignalId::derive(&[b"changeset", b.as_bytes(), &seq.to_be_bytes()]),
            origin: b,
            changes,
            commit_snapshot,
            at: self.clock,
            audience: self.downstream(b),
        };
        if changeset.is_empty() {
            return Ok(changeset);
        }
        self.stress.changesets.insert(changeset.id, changeset.clone());
        let signal = StressSignal {
            signal_id: changeset.change_signal(),
            changeset: changeset.clone(),
            kind: SignalKind::Change,
            hops: vec![b],
            sender: b,
            merged: false,
        };
        for dependent in self.dependents(b) {
            self.deliver(dependent, signal.clone())?;
        }
        Ok(changeset)
    }

    /// Routes a signal to `target`: straight into its queue, or onto the
    /// outbound list when a router has detached this federation.
    pub fn deliver(&mut self, target: BubbleId, signal: StressSignal) -> Result<bool> {
        if self.stress.detached {
            self.stress.outbound.push((target, signal));
            return Ok(true);
        }
        self.accept_delivery(target, signal)
    }

    /// Queues `signal` at `target` unless it was delivered there before.
    /// Returns whether the delivery was new.
    pub fn accept_delivery(&mut self, target: BubbleId, signal: StressSignal) -> Result<bool> {
        self.descriptor(target)?;
        if !self.stress.delivered.insert((target, signal.signal_id)) {
            return Ok(false);
        }
        self.stress.changesets.entry(signal.changeset.id).or_insert_with(|| signal.changeset.clone());
        self.stress.arrivals += 1;
        self.stress.deliveries.push(DeliveryRecord {
            bubble: target,
            signal: signal.signal_id,
            changeset: signal.changeset.id,
            kind: signal.kind,
            sender: signal.sender,
            arrival: self.stress.arrivals,
            resolution: None,
        });
        if self.descriptor(target)?.state.is_live() {
            self.touch(target)?.pending.push(signal.signal_id);
            self.stress.inbox.entry(target).or_default().push(signal);
        }
        Ok(true)
    }

    pub fn set_detached(&mut self, detached: bool) {
        self.stress.detached = detached;
    }

    pub fn take_outbound(&mut self) -> Vec<(BubbleId, StressSignal)> {
        std::mem::take(&mut self.stress.outbound)
    }

    /// Pending signals of `b` in arrival order. Reading does not consume.
    pub fn activate(&self, b: BubbleId) -> Result<Vec<StressSignal>> {
        self.live(b)?;
        Ok(self.stress.inbox.get(&b).cloned().unwrap_or_default())
    }

    pub fn changeset(&self, id: SignalId) -> Option<&ChangeSet> {
        self.stress.changesets.get(&id)
    }

    pub fn changesets(&self) -> impl Iterator<Item = &ChangeSet> {
        self.stress.changesets.values()
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.stress.audit
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.stress.deliveries
    }

    /// Number of undecided signals across all live bubbles.
    pub fn pending_count(&self) -> usize {
        self.stress.inbox.values().map(Vec::len).sum()
    }

    /// Changed paths of the signal that `b` shadows with a local binding.
    pub fn conflicts(&self, b: BubbleId, signal: &StressSignal) -> Result<Vec<LogicalPath>> {
        let d = self.descriptor(b)?;
        Ok(signal.changeset.changes.keys().filter(|p| d.local_bindings.contains_key(*p)).cloned().collect())
    }

    pub fn resolve_signal(
        &mut self,
        b: BubbleId,
        signal_id: SignalId,
        decision: Decision,
        actor: &str,
    ) -> Result<PropagationOutcome> {
        let signal = self
            .stress
            .inbox
            .get(&b)
            .and_then(|q| q.iter().find(|s| s.signal_id == signal_id))
            .cloned()
            .ok_or(Error::UnknownSignal { bubble: b, signal: signal_id })?;
        let state = self.live(b)?.state;
        if state == BubbleState::Frozen && decision != Decision::Accept {
            return Err(Error::FrozenBubble(b));
        }
        self.check_decision(b, &signal, &decision)?;

        let saved_descriptors = self.descriptors.clone();
        let saved_stress = self.stress.clone();
        let saved_clock = self.clock;
        self.tick();
        match self.apply_decision(b, &signal, &decision) {
            Ok(outcome) => {
                let at = self.clock;
                let resolution = Resolution { decision: decision.clone(), decided_by: actor.to_string(), at };
                self.finish(b, &signal, resolution);
                Ok(outcome)
            }
            Err(e) => {
                self.descriptors = saved_descriptors;
                self.stress = saved_stress;
                self.clock = saved_clock;
                Err(e)
            }
        }
    }

    fn check_decision(&self, b: BubbleId, signal: &StressSignal, decision: &Decision) -> Result<()> {
        match (&signal.kind, decision) {
            (SignalKind::Change, Decision::Accept) => {
                let conflicts = self.conflicts(b, signal)?;
                if !conflicts.is_empty() {
                    let paths: Vec<String> = conflicts.iter().map(ToString::to_string).collect();
                    return Err(Error::IllegalDecision(format!(
                        "{b} shadows changed paths {}; merge required",
                        paths.join(", ")
                    )));
                }
                Ok(())
            }
            (SignalKind::Change, Decision::Merge(map)) => {
                let conflicts: BTreeSet<LogicalPath> = self.conflicts(b, signal)?.into_iter().collect();
                let given: BTreeSet<LogicalPath> = map.keys().cloned().collect();
                let missing: Vec<_> = conflicts.difference(&given).cloned().collect();
                let unexpected: Vec<_> = given.difference(&conflicts).cloned().collect();
                if !missing.is_empty() || !unexpected.is_empty() {
                    return Err(Error::MergeIncomplete { missing, unexpected });
                }
                self.require_stored(map.iter().map(|(p, d)| (p, *d)))
            }
            (SignalKind::Change, Decision::Decline) => Ok(()),
            (SignalKind::Change, _) => {
                Err(Error::IllegalDecision(format!("{} answers a fork choice, not a change", decision.label())))
            }
            (SignalKind::ForkChoice { .. }, Decision::ChooseNew | Decision::ChooseOld) => Ok(()),
            (SignalKind::ForkChoice { .. }, _) => {
                Err(Error::IllegalDecision(format!("a fork choice cannot be answered with {}", decision.label())))
            }
        }
    }

    fn apply_decision(&mut self, b: BubbleId, signal: &StressSignal, decision: &Decision) -> Result<PropagationOutcome> {
        let mut outcome = PropagationOutcome::default();
        match (signal.kind, decision) {
            (SignalKind::Change, Decision::Accept) => {
                outcome.forwarded_to = self.forward(b, signal, SignalKind::Change, signal.merged)?;
            }
            (SignalKind::Change, Decision::Merge(map)) => {
                self.atomically(&[b], |fed| {
                    let d = fed.touch(b)?;
                    for (path, digest) in map {
                        d.local_bindings.insert(path.clone(), Binding::Bound(*digest));
                    }
                    fed.ensure_constraints(&[b])
                })?;
                outcome.forwarded_to = self.forward(b, signal, SignalKind::Change, true)?;
            }
            (SignalKind::Change, Decision::Decline) => {
                outcome.pins = self.pin(b, signal)?;
                let new_line = match outcome.pins.first() {
                    Some(pin) => self.descriptor(*pin)?.structural_parents[0],
                    None => signal.sender,
                };
                let fork = SignalKind::ForkChoice { new_line, old_line: b };
                let fork_id = SignalId::derive(&[b"fork", signal.signal_id.as_bytes(), b.as_bytes()]);
                let forked = StressSignal { signal_id: fork_id, ..signal.clone() };
                outcome.forwarded_to = self.forward(b, &forked, fork, false)?;
            }
            (SignalKind::ForkChoice { new_line, old_line }, Decision::ChooseNew) => {
                outcome.reparented = self.reparent(b, signal.sender, new_line)?;
                let next = SignalKind::ForkChoice { new_line: b, old_line };
                outcome.forwarded_to = self.forward(b, signal, next, false)?;
            }
            (SignalKind::ForkChoice { new_line, old_line }, Decision::ChooseOld) => {
                outcome.reparented = self.reparent(b, signal.sender, old_line)?;
                let next = SignalKind::ForkChoice { new_line, old_line: b };
                outcome.forwarded_to = self.forward(b, signal, next, false)?;
            }
            _ => unreachable!("decision legality is checked first"),
        }
        Ok(outcome)
    }

    fn forward(&mut self, b: BubbleId, signal: &StressSignal, kind: SignalKind, merged: bool) -> Result<Vec<BubbleId>> {
        let mut hops = signal.hops.clone();
        hops.push(b);
        let next = StressSignal { kind, hops, sender: b, merged, ..signal.clone() };
        let targets = self.dependents(b);
        for t in &targets {
            self.deliver(*t, next.clone())?;
        }
        Ok(targets)
    }

    /// Swaps `from` for `to` in `b`'s parents. No-op when they coincide or
    /// `from` is no longer a parent.
    fn reparent(&mut self, b: BubbleId, from: BubbleId, to: BubbleId) -> Result<Option<(BubbleId, BubbleId)>> {
        if from == to || !self.descriptor(b)?.structural_parents.contains(&from) {
            return Ok(None);
        }
        self.live(to)?;
        if to == b || self.depends_on(to, b) {
            return Err(Error::StructuralCycle(b));
        }
        self.atomically(&[b], |fed| {
            let d = fed.touch(b)?;
            d.structural_parents = crate::engine::splice(&d.structural_parents, from, &[to]);
            fed.ensure_constraints(&[b])
        })?;
        Ok(Some((from, to)))
    }

    /// Inserts one pin per parent of `b` that currently delivers changed
    /// values of `signal`, binding what `b` saw before the commit.
    fn pin(&mut self, b: BubbleId, signal: &StressSignal) -> Result<Vec<BubbleId>> {
        let view = self.full_view(b)?;
        let d = self.descriptor(b)?.clone();
        let mut per_parent: BTreeMap<BubbleId, BTreeMap<LogicalPath, Binding>> = BTreeMap::new();
        for (path, change) in &signal.changeset.changes {
            let Some(slot) = view.get(path) else { continue };
            let via = match slot {
                crate::engine::resolve::Slot::Present(e) => &e.via,
                crate::engine::resolve::Slot::Hidden { via, .. } => via,
            };
            let Some(&parent) = via.get(1) else { continue };
            if !d.structural_parents.contains(&parent) || slot.outcome().0 != change.after {
                continue;
            }
            let binding = match change.before {
                Some(digest) => Binding::Bound(digest),
                None => self.fallback(&d.structural_parents, parent, path)?,
            };
            per_parent.entry(parent).or_default().insert(path.clone(), binding);
        }
        let mut pins = Vec::new();
        for parent in &d.structural_parents {
            let Some(bindings) = per_parent.remove(parent) else { continue };
            let id = BubbleId::derive(&[b"pin", signal.signal_id.as_bytes(), b.as_bytes(), parent.as_bytes()]);
            let name = format!("pin-{}", d.name);
            pins.push(self.insert_unchecked(*parent, b, &name, bindings, Some(id))?);
        }
        Ok(pins)
    }

    /// What `b` would see at `path` if `parent` had no opinion: the first
    /// later parent's value, or a tombstone when none provides it.
    fn fallback(&self, parents: &[BubbleId], parent: BubbleId, path: &LogicalPath) -> Result<Binding> {
        let later = parents.iter().skip_while(|p| **p != parent).skip(1);
        for p in later {
            if let Some(slot) = self.full_view(*p)?.get(path) {
                return Ok(view_value(Some(slot)).map_or(Binding::Tombstone, Binding::Bound));
            }
        }
        Ok(Binding::Tombstone)
    }

    fn finish(&mut self, b: BubbleId, signal: &StressSignal, resolution: Resolution) {
        if let Some(queue) = self.stress.inbox.get_mut(&b) {
            queue.retain(|s| s.signal_id != signal.signal_id);
            if queue.is_empty() {
                self.stress.inbox.remove(&b);
            }
        }
        if let Ok(d) = self.touch(b) {
            d.pending.retain(|s| *s != signal.signal_id);
        }
        self.stress.audit.push(AuditRecord {
            at: resolution.at,
            signal: signal.signal_id,
            bubble: b,
            decision: resolution.decision.label().to_string(),
            actor: resolution.decided_by.clone(),
        });
        if let Some(record) =
            self.stress.deliveries.iter_mut().rev().find(|r| r.bubble == b && r.signal == signal.signal_id)
        {
            record.resolution = Some(resolution);
        }
    }

    /// Drops queued signals of bubbles that left the live graph.
    pub(crate) fn drop_pending(&mut self, b: BubbleId) {
        self.stress.inbox.remove(&b);
        if let Some(d) = self.descriptors.get_mut(&b) {
            if !d.pending.is_empty() {
                d.pending.clear();
                d.seq += 1;
            }
        }
    }

    /// Every bubble that was downstream of the origin at commit time or
    /// received a signal of this change set, with what it received and how
    /// it was decided.
    pub fn propagation_trace(&self, changeset: SignalId) -> Result<PropagationTrace> {
        let cs = self
            .stress
            .changesets
            .get(&changeset)
            .ok_or_else(|| Error::IllegalDecision(format!("unknown change set {changeset}")))?;
        let mut entries: BTreeMap<BubbleId, TraceEntry> = cs
            .audience
            .iter()
            .map(|b| (*b, TraceEntry { bubble: *b, delivered: false, signals: Vec::new() }))
            .collect();
        for r in self.stress.deliveries.iter().filter(|r| r.changeset == changeset) {
            let entry = entries
                .entry(r.bubble)
                .or_insert_with(|| TraceEntry { bubble: r.bubble, delivered: false, signals: Vec::new() });
            entry.delivered = true;
            entry.signals.push(TraceSignal { signal: r.signal, kind: r.kind, resolution: r.resolution.clone() });
        }
        Ok(PropagationTrace { changeset, origin: cs.origin, entries: entries.into_values().collect() })
    }
}
