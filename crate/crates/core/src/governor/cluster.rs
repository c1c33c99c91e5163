use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::transport::{Network, NetworkStats, TransportContract};
use super::wire::GovernorId;
use super::{Command, CommandId, CommandOutput, Governor};
use crate::engine::{Federation, FederationExport};
use crate::error::{Error, Result};
use crate::model::{canonical_json_pretty, BubbleDescriptor, BubbleId, IdAllocator, SignalId};
use crate::store::Store;
use crate::stress::{PropagationTrace, TraceEntry, TraceSignal};

/// Drives a set of governors over a simulated network, one tick at a time.
pub struct Cluster {
    governors: BTreeMap<GovernorId, Governor>,
    network: Network,
    now: u64,
    next_command: CommandId,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster").field("governors", &self.governors.keys().collect::<Vec<_>>()).field("now", &self.now).finish()
    }
}

impl Cluster {
    /// Each governor gets its own in-memory store and federation.
    pub fn new(ids: &[GovernorId], contract: TransportContract, label: &str) -> Self {
        let retry = contract.retry_interval;
        let governors = ids
            .iter()
            .map(|id| {
                let peers = ids.iter().filter(|p| *p != id).cloned().collect();
                let fed = Federation::new(Arc::new(Store::in_memory()), IdAllocator::seeded(&format!("{label}/{id}")));
                (id.clone(), Governor::new(id.clone(), peers, fed, retry))
            })
            .collect();
        Cluster { governors, network: Network::new(contract), now: 0, next_command: 1 }
    }

    pub fn single(label: &str) -> Self {
        Cluster::new(&[GovernorId::new("local")], TransportContract::default(), label)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn governor_ids(&self) -> Vec<GovernorId> {
        self.governors.keys().cloned().collect()
    }

    pub fn governor(&self, id: &GovernorId) -> Result<&Governor> {
        self.governors.get(id).ok_or_else(|| Error::UnknownGovernor(id.to_string()))
    }

    pub fn governor_mut(&mut self, id: &GovernorId) -> Result<&mut Governor> {
        self.governors.get_mut(id).ok_or_else(|| Error::UnknownGovernor(id.to_string()))
    }

    pub fn governors(&self) -> impl Iterator<Item = &Governor> {
        self.governors.values()
    }

    pub fn network_stats(&self) -> NetworkStats {
        self.network.stats()
    }

    /// Queues a command at `governor`. `reserved` fixes the id of a bubble
    /// the command creates.
    pub fn submit(&mut self, governor: &GovernorId, command: Command, reserved: Option<BubbleId>) -> Result<CommandId> {
        let id = self.next_command;
        self.next_command += 1;
        self.governor_mut(governor)?.submit(id, command, reserved);
        Ok(id)
    }

    pub fn take_result(&mut self, governor: &GovernorId, id: CommandId) -> Option<Result<CommandOutput>> {
        self.governors.get_mut(governor)?.take_result(id)
    }

    /// Submits, settles and returns the command's result.
    pub fn execute(
        &mut self,
        governor: &GovernorId,
        command: Command,
        reserved: Option<BubbleId>,
        max_ticks: u64,
    ) -> Result<CommandOutput> {
        let id = self.submit(governor, command, reserved)?;
        self.run_until_quiescent(max_ticks)?;
        self.take_result(governor, id).unwrap_or(Err(Error::TimedOut(max_ticks)))
    }

    pub fn is_quiescent(&self) -> bool {
        self.network.is_idle() && self.governors.values().all(Governor::is_idle)
    }

    fn pump(&mut self) {
        for g in self.governors.values_mut() {
            g.run_commands();
        }
        self.dispatch();
    }

    fn dispatch(&mut self) {
        let now = self.now;
        for g in self.governors.values_mut() {
            for envelope in g.take_outbox() {
                self.network.send(&envelope, now);
            }
        }
    }

    /// Advances one tick: delivers arrivals, retransmits, runs commands.
    pub fn step(&mut self) {
        self.now += 1;
        let now = self.now;
        for envelope in self.network.arrivals(now) {
            if let Some(g) = self.governors.get_mut(&envelope.to) {
                g.handle(envelope, now);
            }
        }
        for g in self.governors.values_mut() {
            g.on_tick(now);
        }
        self.dispatch();
    }

    /// Steps until nothing is in flight, unacknowledged or queued. Returns
    /// the number of ticks taken.
    pub fn run_until_quiescent(&mut self, max_ticks: u64) -> Result<u64> {
        self.pump();
        let mut ticks = 0;
        while !self.is_quiescent() {
            if ticks >= max_ticks {
                return Err(Error::TimedOut(ticks));
            }
            self.step();
            ticks += 1;
        }
        Ok(ticks)
    }

    pub fn owner(&self, b: BubbleId) -> Option<GovernorId> {
        self.governors.values().find(|g| g.owns(b)).map(|g| g.id().clone())
    }

    /// The authoritative descriptor of `b`, taken from its owner.
    pub fn descriptor(&self, b: BubbleId) -> Result<&BubbleDescriptor> {
        let owner = self.owner(b).ok_or(Error::UnknownBubble(b))?;
        self.governors[&owner].federation().descriptor(b)
    }

    /// The owner's federation for `b`, where its resolution is computed.
    pub fn home(&self, b: BubbleId) -> Result<&Federation> {
        let owner = self.owner(b).ok_or(Error::UnknownBubble(b))?;
        Ok(self.governors[&owner].federation())
    }

    /// Owned descriptors of every governor.
    pub fn export(&self) -> FederationExport {
        let mut bubbles: BTreeMap<BubbleId, BubbleDescriptor> = BTreeMap::new();
        for g in self.governors.values() {
            for b in g.owned() {
                if let Ok(d) = g.federation().descriptor(b) {
                    bubbles.insert(b, d.clone());
                }
            }
        }
        FederationExport {
            format: crate::engine::EXPORT_FORMAT.to_string(),
            version: 1,
            bubbles: bubbles.into_values().collect(),
        }
    }

    pub fn export_json(&self) -> String {
        canonical_json_pretty(&self.export())
    }

    /// Declares that `b` will be owned by `owner` on every governor.
    pub fn assign(&mut self, b: BubbleId, owner: &GovernorId) {
        for g in self.governors.values_mut() {
            g.assign(b, owner.clone());
        }
    }

    /// Merges the delivery records of every governor for one change set.
    pub fn propagation_trace(&self, changeset: SignalId) -> Result<PropagationTrace> {
        let cs = self
            .governors
            .values()
            .find_map(|g| g.federation().changeset(changeset))
            .ok_or_else(|| Error::IllegalDecision(format!("unknown change set {changeset}")))?;
        let mut entries: BTreeMap<BubbleId, TraceEntry> = cs
            .audience
            .iter()
            .map(|b| (*b, TraceEntry { bubble: *b, delivered: false, signals: Vec::new() }))
            .collect();
        let mut seen: BTreeSet<(BubbleId, SignalId)> = BTreeSet::new();
        for g in self.governors.values() {
            for r in g.federation().deliveries().iter().filter(|r| r.changeset == changeset) {
                if !seen.insert((r.bubble, r.signal)) {
                    continue;
                }
                let entry = entries
                    .entry(r.bubble)
                    .or_insert_with(|| TraceEntry { bubble: r.bubble, delivered: false, signals: Vec::new() });
                entry.delivered = true;
                entry.signals.push(TraceSignal { signal: r.signal, kind: r.kind, resolution: r.resolution.clone() });
            }
        }
        Ok(PropagationTrace { changeset, origin: cs.origin, entries: entries.into_values().collect() })
    }

    /// Deliveries of the same signal to the same bubble across governors.
    pub fn duplicate_deliveries(&self) -> usize {
        let mut seen = BTreeSet::new();
        self.governors
            .values()
            .flat_map(|g| g.federation().deliveries())
            .filter(|r| !seen.insert((r.bubble, r.signal)))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governor::Partition;
    use crate::model::{Binding, LogicalPath};
    use crate::stress::Decision;

    fn p(s: &str) -> LogicalPath {
        s.parse().unwrap()
    }

    fn three(contract: TransportContract) -> (Cluster, Vec<GovernorId>) {
        let ids: Vec<GovernorId> = ["g1", "g2", "g3"].into_iter().map(GovernorId::new).collect();
        (Cluster::new(&ids, contract, "test"), ids)
    }

    fn bubble(out: Result<CommandOutput>) -> BubbleId {
        match out.unwrap() {
            CommandOutput::Bubble(b) => b,
            other => panic!("expected a bubble, got {other:?}"),
        }
    }

    #[test]
    fn empty_network_is_quiescent_at_once() {
        let (mut c, _) = three(TransportContract::default());
        assert_eq!(c.run_until_quiescent(10).unwrap(), 0);
    }

    #[test]
    fn signal_crosses_governors_and_blob_is_fetched() {
        let contract = TransportContract { seed: 42, latency: (1, 5), ..TransportContract::default() };
        let (mut c, g) = three(contract);
        let old = c.governor(&g[0]).unwrap().put_blob(b"old").unwrap();
        let root = bubble(c.execute(&g[0], Command::Create { name: "root".into(), bindings: [(p("f"), old)].into() }, None, 100));
        let child = bubble(c.execute(&g[1], Command::Derive { parent: root, name: "child".into() }, None, 100));
        let grand = bubble(c.execute(&g[2], Command::Derive { parent: child, name: "grand".into() }, None, 100));
        let new = c.governor(&g[0]).unwrap().put_blob(b"new").unwrap();
        let edits = [(p("f"), Binding::Bound(new))].into();
        let cs = match c.execute(&g[0], Command::Commit { bubble: root, edits }, None, 100).unwrap() {
            CommandOutput::ChangeSet(cs) => cs,
            other => panic!("{other:?}"),
        };
        let pending = c.home(child).unwrap().activate(child).unwrap();
        assert_eq!(pending.len(), 1);
        let decide = Command::Decide { bubble: child, signal: cs.change_signal(), decision: Decision::Accept, actor: "t".into() };
        c.execute(&g[1], decide, None, 100).unwrap();
        assert_eq!(c.home(grand).unwrap().activate(grand).unwrap().len(), 1);
        assert_eq!(c.home(grand).unwrap().resolve_digests(grand).unwrap()[&p("f")], new);

        // freezing needs every resolved blob locally: g3 fetches it
        c.execute(&g[2], Command::Freeze { bubble: grand }, None, 100).unwrap();
        assert!(c.governor(&g[2]).unwrap().federation().store().contains(&new));
        let trace = c.propagation_trace(cs.id).unwrap();
        assert_eq!(trace.delivered(), [child, grand].into());
        assert_eq!(c.duplicate_deliveries(), 0);
    }

    #[test]
    fn permanent_partition_times_out() {
        let contract = TransportContract {
            partitions: vec![Partition { start: 0, end: u64::MAX, between: ("g1".into(), "g2".into()) }],
            ..TransportContract::default()
        };
        let (mut c, g) = three(contract);
        let r = c.execute(&g[0], Command::Create { name: "a".into(), bindings: BTreeMap::new() }, None, 50);
        assert!(matches!(r, Err(Error::TimedOut(50))));
    }

    #[test]
    fn partition_heals_and_fetch_completes() {
        let contract = TransportContract {
            partitions: vec![Partition { start: 0, end: 30, between: ("g1".into(), "g2".into()) }],
            retry_interval: 4,
            ..TransportContract::default()
        };
        let (mut c, g) = three(contract);
        let digest = c.governor(&g[0]).unwrap().put_blob(b"payload").unwrap();
        // only g1 has it; g3 answers "not found"
        assert!(c.governor_mut(&g[1]).unwrap().fetch_blob(digest).is_none());
        let ticks = c.run_until_quiescent(200).unwrap();
        assert!(ticks >= 30);
        assert_eq!(&*c.governor_mut(&g[1]).unwrap().fetch_blob(digest).unwrap(), b"payload");
    }

    #[test]
    fn corrupted_transfer_is_retried() {
        let contract = TransportContract { seed: 5, corrupt_probability: 0.6, ..TransportContract::default() };
        let ids = vec![GovernorId::new("a"), GovernorId::new("b")];
        let mut c = Cluster::new(&ids, contract, "corrupt");
        let mut digests = Vec::new();
        for i in 0..20u8 {
            digests.push(c.governor(&ids[0]).unwrap().put_blob(&[i; 3]).unwrap());
        }
        for d in &digests {
            c.governor_mut(&ids[1]).unwrap().fetch_blob(*d);
        }
        c.run_until_quiescent(1000).unwrap();
        let b = c.governor(&ids[1]).unwrap();
        assert!(b.digest_mismatches() > 0);
        for d in &digests {
            assert_eq!(Digest::of(&b.federation().store().get_blob(d).unwrap()), *d);
        }
    }

    use crate::store::Digest;

    #[test]
    fn concurrent_proposals_conflict_instead_of_vanishing() {
        let contract = TransportContract { seed: 1, latency: (3, 3), ..TransportContract::default() };
        let (mut c, g) = three(contract);
        let base = bubble(c.execute(&g[0], Command::Create { name: "b".into(), bindings: BTreeMap::new() }, None, 100));
        let x = c.governor(&g[1]).unwrap().put_blob(b"x").unwrap();
        let y = c.governor(&g[2]).unwrap().put_blob(b"y").unwrap();
        c.submit(&g[1], Command::Propose { bubble: base, edits: [(p("f"), Binding::Bound(x))].into() }, None).unwrap();
        c.submit(&g[2], Command::Propose { bubble: base, edits: [(p("f"), Binding::Bound(y))].into() }, None).unwrap();
        c.run_until_quiescent(200).unwrap();
        let owner = c.governor(&g[0]).unwrap();
        let bound = owner.federation().descriptor(base).unwrap().local_bindings[&p("f")];
        assert_eq!(owner.conflicts().len(), 1);
        let kept = match &owner.conflicts()[0] {
            super::super::ConflictEntry::Proposal { proposal, .. } => proposal.edits[&p("f")],
            other => panic!("{other:?}"),
        };
        let mut both = [bound, kept];
        both.sort();
        let mut expected = [Binding::Bound(x), Binding::Bound(y)];
        expected.sort();
        assert_eq!(both, expected);
        // replicas converge on the owner's version
        for gov in c.governors() {
            assert_eq!(gov.federation().descriptor(base).unwrap(), owner.federation().descriptor(base).unwrap());
        }
    }

    #[test]
    fn duplicated_messages_are_processed_once() {
        let contract = TransportContract { seed: 9, duplicate_probability: 1.0, latency: (1, 4), ..TransportContract::default() };
        let (mut c, g) = three(contract);
        let root = bubble(c.execute(&g[0], Command::Create { name: "r".into(), bindings: BTreeMap::new() }, None, 100));
        let kid = bubble(c.execute(&g[1], Command::Derive { parent: root, name: "k".into() }, None, 100));
        let v = c.governor(&g[0]).unwrap().put_blob(b"v").unwrap();
        c.execute(&g[0], Command::Commit { bubble: root, edits: [(p("a"), Binding::Bound(v))].into() }, None, 100).unwrap();
        assert_eq!(c.home(kid).unwrap().activate(kid).unwrap().len(), 1);
        assert!(c.network_stats().duplicated > 0);
    }
}
