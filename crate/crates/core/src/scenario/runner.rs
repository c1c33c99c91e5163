use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, IsTerminal, Write};

use serde::{Deserialize, Serialize};

use super::script::{ConstraintSpec, DecisionSpec, Event, Expectation, Governance, Op, Policy, ScenarioScript};
use crate::engine::FederationExport;
use crate::error::{Error, Result};
use crate::governor::{Cluster, Command, CommandOutput, GovernorId, NetworkStats};
use crate::model::{canonical_json_pretty, Binding, BubbleId, Constraint, IdAllocator, LogicalPath, Mount, SignalId};
use crate::store::Digest;
use crate::stress::{AuditRecord, Decision, PropagationTrace, SignalKind, StressSignal};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Replaces the script's governance. Actors are then spread over the
    /// governors round-robin in name order.
    pub governance: Option<Governance>,
    /// Whether `interactive` actors may prompt on the terminal.
    pub interactive: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { governance: None, interactive: std::io::stdin().is_terminal() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub index: usize,
    pub line: usize,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub op: String,
    /// `ok`, or the error code the event failed with as expected.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub governors: Vec<GovernorId>,
    pub names: BTreeMap<String, BubbleId>,
    pub export: FederationExport,
    pub events: Vec<EventOutcome>,
    pub traces: Vec<PropagationTrace>,
    pub audit: Vec<AuditRecord>,
    pub blob_count: usize,
    pub pending: usize,
    pub ticks: u64,
    pub network: NetworkStats,
    pub conflicts: usize,
    pub duplicate_deliveries: usize,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        canonical_json_pretty(self)
    }

    pub fn bubble(&self, name: &str) -> Option<&crate::model::BubbleDescriptor> {
        let id = self.names.get(name)?;
        self.export.bubbles.iter().find(|d| d.id == *id)
    }
}

pub fn run_scenario(text: &str) -> Result<ScenarioReport> {
    run_scenario_with(text, RunOptions::default())
}

pub fn run_scenario_with(text: &str, options: RunOptions) -> Result<ScenarioReport> {
    ScenarioRunner::new(ScenarioScript::parse(text)?, options)?.run()
}

type PolicyDecision = (GovernorId, BubbleId, SignalId, Decision, String);

/// Executes a script event by event against a [`Cluster`].
pub struct ScenarioRunner {
    script: ScenarioScript,
    governance: Governance,
    actor_governors: BTreeMap<String, GovernorId>,
    cluster: Cluster,
    ids: IdAllocator,
    names: BTreeMap<String, BubbleId>,
    handlers: BTreeMap<BubbleId, String>,
    changesets: Vec<SignalId>,
    outcomes: Vec<EventOutcome>,
    blocked: BTreeSet<(BubbleId, SignalId)>,
    interactive: bool,
    next: usize,
}

impl std::fmt::Debug for ScenarioRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioRunner").field("script", &self.script.name).field("next", &self.next).finish()
    }
}

impl ScenarioRunner {
    pub fn new(script: ScenarioScript, options: RunOptions) -> Result<Self> {
        let overridden = options.governance.is_some();
        let governance = match options.governance {
            Some(g) => g,
            None => script.governance()?,
        };
        if governance.governors.is_empty() {
            return Err(Error::Script { line: 1, message: "at least one governor is required".into() });
        }
        let actor_governors = script
            .actors
            .iter()
            .enumerate()
            .filter_map(|(i, (name, spec))| {
                let g = if overridden {
                    Some(governance.governors[i % governance.governors.len()].clone())
                } else {
                    spec.governor.clone()
                };
                g.map(|g| (name.clone(), g))
            })
            .collect();
        let cluster = Cluster::new(&governance.governors, governance.transport.clone(), &script.name);
        Ok(ScenarioRunner {
            ids: IdAllocator::seeded(&format!("scenario/{}", script.name)),
            script,
            governance,
            actor_governors,
            cluster,
            names: BTreeMap::new(),
            handlers: BTreeMap::new(),
            changesets: Vec::new(),
            outcomes: Vec::new(),
            blocked: BTreeSet::new(),
            interactive: options.interactive,
            next: 0,
        })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn bubble(&self, name: &str) -> Option<BubbleId> {
        self.names.get(name).copied()
    }

    pub fn is_finished(&self) -> bool {
        self.next >= self.script.events.len()
    }

    pub fn run(mut self) -> Result<ScenarioReport> {
        while self.step()? {}
        Ok(self.report())
    }

    /// Runs the next event. Returns `false` once every event has run.
    pub fn step(&mut self) -> Result<bool> {
        let index = self.next;
        let Some(event) = self.script.events.get(index).cloned() else {
            return Ok(false);
        };
        self.next += 1;
        let line = self.script.line_of(index);
        while self.cluster.now() < event.tick {
            self.cluster.step();
        }
        let result = self.apply(&event, line);
        let (status, detail) = match (result, &event.expect_error) {
            (Err(e @ Error::Script { .. }), _) => return Err(e),
            (Ok(detail), None) => ("ok".to_string(), detail),
            (Ok(_), Some(code)) => {
                return Err(Error::Script { line, message: format!("{} was expected to fail with {code}", event.op.name()) })
            }
            (Err(e), Some(code)) if e.code() == code => (code.clone(), Some(e.to_string())),
            (Err(e), _) => {
                return Err(Error::Script { line, message: format!("{} failed with {}: {e}", event.op.name(), e.code()) })
            }
        };
        self.outcomes.push(EventOutcome {
            index,
            line,
            tick: self.cluster.now(),
            actor: event.actor.clone(),
            op: event.op.name().to_string(),
            status,
            detail,
        });
        if self.script.settle {
            self.settle()?;
        }
        Ok(true)
    }

    pub fn report(&self) -> ScenarioReport {
        let traces = self.changesets.iter().filter_map(|cs| self.cluster.propagation_trace(*cs).ok()).collect();
        let audit = self.cluster.governors().flat_map(|g| g.federation().audit().iter().cloned()).collect();
        let blobs: BTreeSet<Digest> = self.cluster.governors().flat_map(|g| g.federation().store().digests()).collect();
        let export = self.cluster.export();
        ScenarioReport {
            name: self.script.name.clone(),
            governors: self.cluster.governor_ids(),
            names: self.names.clone(),
            pending: export.bubbles.iter().map(|d| d.pending.len()).sum(),
            export,
            events: self.outcomes.clone(),
            traces,
            audit,
            blob_count: blobs.len(),
            ticks: self.cluster.now(),
            network: self.cluster.network_stats(),
            conflicts: self.cluster.governors().map(|g| g.conflicts().len()).sum(),
            duplicate_deliveries: self.cluster.duplicate_deliveries(),
        }
    }

    fn max_ticks(&self) -> u64 {
        self.governance.max_ticks
    }

    fn lookup(&self, name: &str, line: usize) -> Result<BubbleId> {
        self.names.get(name).copied().ok_or_else(|| Error::Script { line, message: format!("undefined bubble {name}") })
    }

    fn name_of(&self, id: BubbleId) -> String {
        self.names.iter().find(|(_, v)| **v == id).map_or_else(|| id.to_string(), |(k, _)| k.clone())
    }

    fn owner(&self, b: BubbleId) -> Result<GovernorId> {
        self.cluster.owner(b).ok_or(Error::UnknownBubble(b))
    }

    fn actor_governor(&self, actor: Option<&String>) -> GovernorId {
        actor
            .and_then(|a| self.actor_governors.get(a))
            .cloned()
            .unwrap_or_else(|| self.governance.governors[0].clone())
    }

    /// Where a new bubble lives: configured ownership, then the creating
    /// actor's governor.
    fn home_for(&self, name: &str, actor: Option<&String>) -> GovernorId {
        self.governance.ownership.get(name).cloned().unwrap_or_else(|| self.actor_governor(actor))
    }

    fn reserve(&mut self, name: &str, line: usize) -> Result<BubbleId> {
        if self.names.contains_key(name) {
            return Err(Error::Script { line, message: format!("bubble name {name} is already used") });
        }
        Ok(self.ids.next_id())
    }

    fn register(&mut self, name: &str, id: BubbleId, actor: Option<&String>) {
        self.names.insert(name.to_string(), id);
        if let Some(a) = actor {
            self.handlers.insert(id, a.clone());
        }
    }

    fn path(&self, p: &str, line: usize) -> Result<LogicalPath> {
        p.parse().map_err(|e: Error| Error::Script { line, message: e.to_string() })
    }

    fn put(&self, gov: &GovernorId, content: &str) -> Result<Digest> {
        self.cluster.governor(gov)?.put_blob(content.as_bytes())
    }

    fn edits(
        &self,
        gov: &GovernorId,
        edits: &BTreeMap<String, Option<String>>,
        line: usize,
    ) -> Result<BTreeMap<LogicalPath, Binding>> {
        edits
            .iter()
            .map(|(p, c)| {
                let binding = match c {
                    Some(c) => Binding::Bound(self.put(gov, c)?),
                    None => Binding::Tombstone,
                };
                Ok((self.path(p, line)?, binding))
            })
            .collect()
    }

    fn exec(&mut self, gov: &GovernorId, command: Command, reserved: Option<BubbleId>) -> Result<CommandOutput> {
        let max = self.max_ticks();
        self.cluster.execute(gov, command, reserved, max)
    }

    fn create_like(
        &mut self,
        name: &str,
        gov: GovernorId,
        command: Command,
        actor: Option<&String>,
        line: usize,
    ) -> Result<Option<String>> {
        let id = self.reserve(name, line)?;
        self.exec(&gov, command, Some(id))?;
        self.register(name, id, actor);
        Ok(Some(id.to_string()))
    }

    fn apply(&mut self, event: &Event, line: usize) -> Result<Option<String>> {
        let actor = event.actor.as_ref();
        let actor_name = actor.cloned().unwrap_or_else(|| "script".to_string());
        match &event.op {
            Op::Create { name, bindings } => {
                let gov = self.home_for(name, actor);
                let mut b = BTreeMap::new();
                for (p, content) in bindings {
                    b.insert(self.path(p, line)?, self.put(&gov, content)?);
                }
                self.create_like(name, gov, Command::Create { name: name.clone(), bindings: b }, actor, line)
            }
            Op::Derive { parent, name } => {
                let parent = self.lookup(parent, line)?;
                let gov = self.home_for(name, actor);
                self.create_like(name, gov, Command::Derive { parent, name: name.clone() }, actor, line)
            }
            Op::Clone { source, name } => {
                let source = self.lookup(source, line)?;
                let gov = self.home_for(name, actor);
                self.create_like(name, gov, Command::Clone { source, name: name.clone() }, actor, line)
            }
            Op::Insert { upstream, downstream, name, bindings } => {
                let upstream = self.lookup(upstream, line)?;
                let downstream = self.lookup(downstream, line)?;
                let gov = self.home_for(name, actor);
                let bindings = self.edits(&gov, bindings, line)?;
                let command = Command::Insert { upstream, downstream, name: name.clone(), bindings };
                self.create_like(name, gov, command, actor, line)
            }
            Op::Embed { host, mount, guest } => {
                let host = self.lookup(host, line)?;
                let guest = self.lookup(guest, line)?;
                let mount: Mount = mount.parse().map_err(|e: Error| Error::Script { line, message: e.to_string() })?;
                let gov = self.owner(host)?;
                self.exec(&gov, Command::Embed { host, mount, guest }, None)?;
                Ok(None)
            }
            Op::Commit { bubble, edits } => {
                let bubble = self.lookup(bubble, line)?;
                let gov = self.owner(bubble)?;
                let edits = self.edits(&gov, edits, line)?;
                match self.exec(&gov, Command::Commit { bubble, edits }, None)? {
                    CommandOutput::ChangeSet(cs) if !cs.is_empty() => {
                        self.changesets.push(cs.id);
                        Ok(Some(cs.id.to_string()))
                    }
                    _ => Ok(None),
                }
            }
            Op::Propose { bubble, edits } => {
                let bubble = self.lookup(bubble, line)?;
                let gov = self.actor_governor(actor);
                let edits = self.edits(&gov, edits, line)?;
                self.exec(&gov, Command::Propose { bubble, edits }, None)?;
                Ok(None)
            }
            Op::Freeze { bubble } => {
                let bubble = self.lookup(bubble, line)?;
                let gov = self.owner(bubble)?;
                match self.exec(&gov, Command::Freeze { bubble }, None)? {
                    CommandOutput::Snapshot(d) => Ok(Some(d.to_string())),
                    _ => Ok(None),
                }
            }
            Op::Destroy { bubble } => self.simple(bubble, line, |bubble| Command::Destroy { bubble }),
            Op::Retract { bubble } => self.simple(bubble, line, |bubble| Command::Retract { bubble }),
            Op::Dissolve { bubble, source } => {
                let source = self.lookup(source, line)?;
                self.simple(bubble, line, |bubble| Command::Dissolve { bubble, source })
            }
            Op::Constrain { bubble, constraint } => {
                let constraint = match constraint {
                    ConstraintSpec::ForbidProvenance(name) => {
                        Constraint::ForbidProvenance { bubble: self.lookup(name, line)? }
                    }
                    ConstraintSpec::ForbidPath(glob) => Constraint::ForbidPath { glob: glob.clone() },
                    ConstraintSpec::RequireAttribute { key, value } => {
                        Constraint::RequireAttribute { key: key.clone(), value: value.clone() }
                    }
                };
                self.simple(bubble, line, |bubble| Command::Constrain { bubble, constraint })
            }
            Op::SetAttr { bubble, key, value } => self.simple(bubble, line, |bubble| Command::SetAttribute {
                bubble,
                key: key.clone(),
                value: value.clone(),
            }),
            Op::Decide { bubble, decision, index } => {
                let b = self.lookup(bubble, line)?;
                let gov = self.owner(b)?;
                let pending = self.cluster.home(b)?.activate(b)?;
                let signal = pending.get(*index).map(|s| s.signal_id).ok_or_else(|| Error::Script {
                    line,
                    message: format!("{bubble} has {} pending signals, no index {index}", pending.len()),
                })?;
                let decision = match decision {
                    DecisionSpec::Accept => Decision::Accept,
                    DecisionSpec::Decline => Decision::Decline,
                    DecisionSpec::ChooseNew => Decision::ChooseNew,
                    DecisionSpec::ChooseOld => Decision::ChooseOld,
                    DecisionSpec::Merge(paths) => {
                        let mut merged = BTreeMap::new();
                        for (p, c) in paths {
                            merged.insert(self.path(p, line)?, self.put(&gov, c)?);
                        }
                        Decision::Merge(merged)
                    }
                };
                self.decide(&gov, b, signal, decision, &actor_name)?;
                Ok(Some(signal.to_string()))
            }
            Op::Reload => {
                for g in self.cluster.governor_ids() {
                    self.cluster.governor_mut(&g)?.reload()?;
                }
                Ok(None)
            }
            Op::Settle => {
                self.settle()?;
                Ok(None)
            }
            Op::Expect(x) => {
                self.check(x, line)?;
                Ok(None)
            }
        }
    }

    fn simple(&mut self, bubble: &str, line: usize, make: impl FnOnce(BubbleId) -> Command) -> Result<Option<String>> {
        let b = self.lookup(bubble, line)?;
        let gov = self.owner(b)?;
        self.exec(&gov, make(b), None)?;
        Ok(None)
    }

    fn decide(&mut self, gov: &GovernorId, bubble: BubbleId, signal: SignalId, decision: Decision, actor: &str) -> Result<()> {
        let command = Command::Decide { bubble, signal, decision, actor: actor.to_string() };
        if let CommandOutput::Outcome(outcome) = self.exec(gov, command, None)? {
            let handler = self.handlers.get(&bubble).cloned();
            for pin in outcome.pins {
                if let Ok(d) = self.cluster.descriptor(pin) {
                    let name = d.name.clone();
                    self.names.entry(name).or_insert(pin);
                }
                if let Some(h) = &handler {
                    self.handlers.insert(pin, h.clone());
                }
            }
        }
        Ok(())
    }

    /// Lets every actor policy answer pending signals until none of them
    /// decides anything more.
    pub fn settle(&mut self) -> Result<()> {
        loop {
            let max = self.max_ticks();
            self.cluster.run_until_quiescent(max)?;
            let Some((gov, bubble, signal, decision, actor)) = self.next_policy_decision()? else {
                return Ok(());
            };
            if self.decide(&gov, bubble, signal, decision, &actor).is_err() {
                self.blocked.insert((bubble, signal));
            }
        }
    }

    fn next_policy_decision(&mut self) -> Result<Option<PolicyDecision>> {
        for gov in self.cluster.governor_ids() {
            let owned = self.cluster.governor(&gov)?.owned();
            for b in owned {
                let Some(actor) = self.handlers.get(&b).cloned() else { continue };
                let Some(policy) = self.script.actors.get(&actor).map(|a| a.policy) else { continue };
                let fed = self.cluster.governor(&gov)?.federation();
                if fed.descriptor(b).map_or(true, |d| d.pending.is_empty()) {
                    continue;
                }
                let signals = fed.activate(b)?;
                for s in signals {
                    if self.blocked.contains(&(b, s.signal_id)) {
                        continue;
                    }
                    let conflicts = self.cluster.governor(&gov)?.federation().conflicts(b, &s)?;
                    match self.policy_decision(policy, b, &s, conflicts.is_empty()) {
                        Some(decision) => return Ok(Some((gov, b, s.signal_id, decision, actor))),
                        None => {
                            self.blocked.insert((b, s.signal_id));
                        }
                    }
                }
            }
        }
        Ok(None)
    }

    fn policy_decision(&self, policy: Policy, b: BubbleId, s: &StressSignal, clean: bool) -> Option<Decision> {
        let fork = matches!(s.kind, SignalKind::ForkChoice { .. });
        match policy {
            Policy::Accept | Policy::ChooseNew if fork => Some(Decision::ChooseNew),
            Policy::Accept | Policy::ChooseNew => clean.then_some(Decision::Accept),
            Policy::Decline | Policy::ChooseOld if fork => Some(Decision::ChooseOld),
            Policy::Decline | Policy::ChooseOld => Some(Decision::Decline),
            Policy::Pending => None,
            Policy::Interactive if self.interactive => self.prompt(b, s, fork),
            Policy::Interactive => None,
        }
    }

    fn prompt(&self, b: BubbleId, s: &StressSignal, fork: bool) -> Option<Decision> {
        let choices = if fork { "[n]ew line, [o]ld line" } else { "[a]ccept, [d]ecline" };
        let mut err = std::io::stderr();
        let _ = write!(err, "{} at {}: {choices}, [s]kip? ", s.signal_id.short(), self.name_of(b));
        let _ = err.flush();
        let mut answer = String::new();
        std::io::stdin().lock().read_line(&mut answer).ok()?;
        match (answer.trim(), fork) {
            ("a", false) => Some(Decision::Accept),
            ("d", false) => Some(Decision::Decline),
            ("n", true) => Some(Decision::ChooseNew),
            ("o", true) => Some(Decision::ChooseOld),
            _ => None,
        }
    }

    fn check(&self, x: &Expectation, line: usize) -> Result<()> {
        let b = self.lookup(&x.bubble, line)?;
        let fail = |message: String| Error::Script { line, message: format!("expectation on {} failed: {message}", x.bubble) };
        let d = self.cluster.descriptor(b)?;
        if let Some(state) = &x.state {
            if d.state.to_string() != *state {
                return Err(fail(format!("state is {}, expected {state}", d.state)));
            }
        }
        if let Some(pending) = x.pending {
            if d.pending.len() != pending {
                return Err(fail(format!("{} pending signals, expected {pending}", d.pending.len())));
            }
        }
        let names = |ids: &[BubbleId]| ids.iter().map(|i| self.name_of(*i)).collect::<Vec<_>>();
        if let Some(parents) = &x.parents {
            let actual = names(&d.structural_parents);
            if actual != *parents {
                return Err(fail(format!("parents are {actual:?}, expected {parents:?}")));
            }
        }
        if let Some(historical) = &x.historical {
            let actual = names(&d.historical_origins);
            if actual != *historical {
                return Err(fail(format!("historical origins are {actual:?}, expected {historical:?}")));
            }
        }
        if let Some(resolves) = &x.resolves {
            let home = self.cluster.home(b)?;
            let view = home.resolve_digests(b)?;
            for (p, expected) in resolves {
                let path = self.path(p, line)?;
                let actual = view.get(&path).copied();
                if actual != expected.as_ref().map(|c| Digest::of(c.as_bytes())) {
                    let shown = actual.map(|d| match home.store().get_blob(&d) {
                        Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
                        Err(_) => d.to_string(),
                    });
                    return Err(fail(format!("{p} resolves to {shown:?}, expected {expected:?}")));
                }
            }
        }
        Ok(())
    }
}
