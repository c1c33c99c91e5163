//! `bubblectl`: inspect and manipulate a bubble repository, and replay
//! scenario scripts.
//!
//! Exit status is 0 on success, 1 when the library reports a domain error
//! (printed with its stable code) and 2 for usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use bubblekit::engine::{export_dot, export_json, FederationExport, Relation};
use bubblekit::scenario::{compare, RunOptions, ScenarioReport, ScenarioRunner, ScenarioScript};
use bubblekit::stress::SignalKind;
use bubblekit::{
    Binding, BubbleId, BubbleState, Constraint, Decision, Error, Federation, LogicalPath, Mount, Repository, Result,
    StressSignal,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "bubblectl", version, about = "Inspect and manipulate bubbles")]
struct Cli {
    /// Repository root. Defaults to $BUBBLEKIT_REPO, then the current directory.
    #[arg(long, global = true, env = "BUBBLEKIT_REPO")]
    repo: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Name recorded in the decision audit.
    #[arg(long, global = true, env = "BUBBLEKIT_ACTOR", default_value = "cli")]
    actor: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Default)]
struct Content {
    /// Bind PATH to inline text.
    #[arg(long = "text", value_name = "PATH=TEXT", value_parser = key_value)]
    text: Vec<(String, String)>,
    /// Bind PATH to the contents of a local file.
    #[arg(long = "file", value_name = "PATH=FILE", value_parser = key_value)]
    file: Vec<(String, String)>,
    /// Hide PATH.
    #[arg(long = "remove", value_name = "PATH")]
    remove: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Create an empty repository.
    Init,
    /// Create a root bubble.
    Create {
        name: String,
        #[command(flatten)]
        content: Content,
    },
    /// Derive a bubble that inherits from a parent.
    Derive {
        parent: String,
        #[arg(long)]
        name: String,
    },
    /// Clone a bubble, sharing its content until edited.
    Clone {
        source: String,
        #[arg(long)]
        name: String,
    },
    /// Mount a guest bubble's view inside a host.
    Embed {
        host: String,
        guest: String,
        #[arg(long, default_value = "")]
        mount: String,
    },
    /// Record local edits on a bubble.
    Commit {
        bubble: String,
        #[command(flatten)]
        content: Content,
    },
    /// Make a bubble read-only.
    Freeze {
        bubble: String,
    },
    /// Remove a bubble with no dependents.
    Destroy {
        bubble: String,
    },
    /// Insert a bubble between a parent and its dependent.
    Insert {
        upstream: String,
        downstream: String,
        #[arg(long)]
        name: String,
        #[command(flatten)]
        content: Content,
    },
    /// Remove an inserted bubble and reconnect its dependents.
    Retract {
        bubble: String,
    },
    /// Drop a clone's copy of content still provided by its source.
    Dissolve {
        bubble: String,
        source: String,
    },
    /// Resolved view of a bubble.
    Resolve {
        bubble: String,
    },
    /// Print the content a path resolves to.
    Cat {
        bubble: String,
        path: String,
    },
    /// List bubbles.
    List,
    /// Ancestry of a bubble across every relationship.
    Examine {
        bubble: String,
    },
    /// Set an attribute on a bubble.
    SetAttr {
        bubble: String,
        key: String,
        value: String,
    },
    /// Inspect and add constraints.
    #[command(subcommand)]
    Constraints(ConstraintsCmd),
    /// Pending change and fork signals.
    #[command(subcommand)]
    Stress(StressCmd),
    /// Multi-governor runs.
    #[command(subcommand)]
    Gov(GovCmd),
    /// Scripted scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Write the whole graph to stdout.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Remove blobs and snapshots nothing refers to.
    Gc,
    /// Counts of bubbles, blobs and pending signals.
    Stats,
}

#[derive(Subcommand, Debug)]
enum ConstraintsCmd {
    /// Evaluate a bubble's effective constraints.
    Check { bubble: String },
    /// Attach a constraint to a bubble.
    Add {
        bubble: String,
        #[arg(long)]
        forbid_provenance: Option<String>,
        #[arg(long)]
        forbid_path: Option<String>,
        #[arg(long, value_name = "KEY=VALUE", value_parser = key_value)]
        require: Option<(String, String)>,
    },
}

#[derive(Subcommand, Debug)]
enum StressCmd {
    /// Pending signals at a bubble, oldest first.
    List { bubble: String },
    /// Take the upstream change. Defaults to the oldest pending signal.
    Accept { bubble: String, signal: Option<String> },
    /// Keep the current view by pinning the pre-change state.
    Decline { bubble: String, signal: Option<String> },
    /// Resolve a conflicted change with explicit content.
    Merge {
        bubble: String,
        signal: Option<String>,
        #[command(flatten)]
        content: Content,
    },
    /// Answer a fork choice.
    Choose {
        bubble: String,
        line: Line,
        signal: Option<String>,
    },
    /// Delivery status of a change set across its audience.
    Trace { changeset: String },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Line {
    New,
    Old,
}

#[derive(Subcommand, Debug)]
enum GovCmd {
    /// Run a scenario on its governors and report per-governor state.
    Run {
        file: PathBuf,
        /// Override the transport seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum ScenarioCmd {
    /// Run a script and check its expectations.
    Run {
        file: PathBuf,
        /// Also replay the script as full-copy baseline streams.
        #[arg(long)]
        compare_baselines: bool,
        /// Write the final graph as DOT.
        #[arg(long, value_name = "FILE")]
        dot: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum ExportCmd {
    /// Graphviz rendering of every bubble and relationship.
    Dot,
    /// Canonical JSON of every descriptor.
    Json,
}

fn key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

/// Text and JSON renderings of a command's result.
struct Output {
    text: String,
    json: Value,
}

impl Output {
    fn new(text: impl Into<String>, json: Value) -> Self {
        Output { text: text.into(), json }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(&cli) {
        Ok(output) => {
            let _ = if cli.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&output.json).unwrap_or_default())
            } else if output.text.is_empty() {
                Ok(())
            } else if output.text.ends_with('\n') {
                write!(out, "{}", output.text)
            } else {
                writeln!(out, "{}", output.text)
            };
            0
        }
        Err(e) => {
            let _ = if cli.json {
                let body = json!({ "error": { "code": e.code(), "message": e.to_string() } });
                writeln!(out, "{}", serde_json::to_string_pretty(&body).unwrap_or_default())
            } else {
                writeln!(err, "error[{}]: {e}", e.code())
            };
            1
        }
    }
}

fn run(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Cmd::Init => {
            let root = match &cli.repo {
                Some(p) => p.clone(),
                None => std::env::current_dir()?,
            };
            let repo = Repository::init(&root)?;
            let root = repo.root().display().to_string();
            Ok(Output::new(format!("initialized {root}"), json!({ "root": root })))
        }
        Cmd::Scenario(ScenarioCmd::Run { file, compare_baselines, dot }) => scenario_run(file, *compare_baselines, dot.as_deref()),
        Cmd::Gov(GovCmd::Run { file, seed }) => gov_run(file, *seed),
        command => {
            let mut repo = Repository::locate(cli.repo.as_deref())?;
            let output = repo_command(repo.federation_mut(), command, &cli.actor)?;
            repo.save()?;
            Ok(output)
        }
    }
}

fn json_of<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap_or(Value::Null)
}

/// Finds a bubble by exact name or by id prefix.
fn find(fed: &Federation, reference: &str) -> Result<BubbleId> {
    let mut by_name = fed.find_by_name(reference);
    if by_name.len() == 1 {
        return Ok(by_name[0]);
    }
    let by_id: Vec<BubbleId> =
        fed.descriptors().filter(|d| d.id.to_string().starts_with(reference)).map(|d| d.id).collect();
    by_name.extend(by_id);
    by_name.sort();
    by_name.dedup();
    match by_name.as_slice() {
        [] => Err(Error::UnknownRef(reference.to_string())),
        [one] => Ok(*one),
        many => Err(Error::AmbiguousRef(reference.to_string(), many.to_vec())),
    }
}

fn name(fed: &Federation, id: BubbleId) -> String {
    fed.descriptor(id).map_or_else(|_| id.short(), |d| d.name.clone())
}

fn label(fed: &Federation, id: BubbleId) -> String {
    format!("{} ({})", name(fed, id), id.short())
}

fn pending_signal(fed: &Federation, b: BubbleId, reference: Option<&str>) -> Result<StressSignal> {
    let pending = fed.activate(b)?;
    let found: Vec<&StressSignal> = match reference {
        None => pending.iter().take(1).collect(),
        Some(r) => pending.iter().filter(|s| s.signal_id.to_string().starts_with(r)).collect(),
    };
    match found.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::UnknownRef(reference.unwrap_or("pending signal").to_string())),
        many => Err(Error::UnknownRef(format!("{} matches {} signals", reference.unwrap_or(""), many.len()))),
    }
}

fn parse_path(p: &str) -> Result<LogicalPath> {
    p.parse()
}

fn read_content(fed: &Federation, content: &Content) -> Result<BTreeMap<LogicalPath, Binding>> {
    let mut edits = BTreeMap::new();
    for (p, text) in &content.text {
        edits.insert(parse_path(p)?, Binding::Bound(fed.store().put_blob(text.as_bytes())?));
    }
    for (p, file) in &content.file {
        let bytes = std::fs::read(file)?;
        edits.insert(parse_path(p)?, Binding::Bound(fed.store().put_blob(&bytes)?));
    }
    for p in &content.remove {
        edits.insert(parse_path(p)?, Binding::Tombstone);
    }
    Ok(edits)
}

fn created(fed: &Federation, id: BubbleId) -> Output {
    let d = fed.descriptor(id).expect("just created");
    Output::new(format!("{} {}", d.id, d.name), json_of(d))
}

fn repo_command(fed: &mut Federation, command: &Cmd, actor: &str) -> Result<Output> {
    match command {
        Cmd::Init | Cmd::Scenario(_) | Cmd::Gov(_) => unreachable!("handled without a repository"),
        Cmd::Create { name, content } => {
            let mut bindings = BTreeMap::new();
            for (p, b) in read_content(fed, content)? {
                if let Binding::Bound(d) = b {
                    bindings.insert(p, d);
                }
            }
            let id = fed.create(name, bindings)?;
            Ok(created(fed, id))
        }
        Cmd::Derive { parent, name } => {
            let parent = find(fed, parent)?;
            let id = fed.derive(parent, name)?;
            Ok(created(fed, id))
        }
        Cmd::Clone { source, name } => {
            let source = find(fed, source)?;
            let id = fed.clone_bubble(source, name)?;
            Ok(created(fed, id))
        }
        Cmd::Insert { upstream, downstream, name, content } => {
            let upstream = find(fed, upstream)?;
            let downstream = find(fed, downstream)?;
            let bindings = read_content(fed, content)?;
            let id = fed.insert_between(upstream, downstream, name, bindings)?;
            Ok(created(fed, id))
        }
        Cmd::Embed { host, guest, mount } => {
            let host = find(fed, host)?;
            let guest = find(fed, guest)?;
            let mount: Mount = mount.parse()?;
            fed.embed(host, mount.clone(), guest)?;
            Ok(Output::new(
                format!("embedded {} at {mount} in {}", label(fed, guest), label(fed, host)),
                json!({ "host": host, "guest": guest, "mount": mount.to_string() }),
            ))
        }
        Cmd::Commit { bubble, content } => {
            let b = find(fed, bubble)?;
            let edits = read_content(fed, content)?;
            let cs = fed.commit(b, edits)?;
            let text = if cs.is_empty() {
                "nothing changed".to_string()
            } else {
                let mut t = format!("change set {} ({} paths, {} downstream)\n", cs.id, cs.changes.len(), cs.audience.len());
                for p in cs.changes.keys() {
                    t.push_str(&format!("  {p}\n"));
                }
                t
            };
            Ok(Output::new(text, json_of(&cs)))
        }
        Cmd::Freeze { bubble } => {
            let b = find(fed, bubble)?;
            let snapshot = fed.freeze(b)?;
            Ok(Output::new(format!("frozen {}, snapshot {snapshot}", label(fed, b)), json!({ "bubble": b, "snapshot": snapshot })))
        }
        Cmd::Destroy { bubble } => {
            let b = find(fed, bubble)?;
            fed.destroy(b)?;
            Ok(Output::new(format!("destroyed {}", label(fed, b)), json!({ "bubble": b })))
        }
        Cmd::Retract { bubble } => {
            let b = find(fed, bubble)?;
            fed.retract(b)?;
            Ok(Output::new(format!("retracted {}", label(fed, b)), json!({ "bubble": b })))
        }
        Cmd::Dissolve { bubble, source } => {
            let b = find(fed, bubble)?;
            let s = find(fed, source)?;
            fed.dissolve(b, s)?;
            let d = fed.descriptor(b)?;
            Ok(Output::new(format!("dissolved {} from {}", label(fed, b), label(fed, s)), json_of(d)))
        }
        Cmd::Resolve { bubble } => {
            let b = find(fed, bubble)?;
            let view = fed.resolve(b)?;
            let mut text = String::new();
            let mut entries = Vec::new();
            for (p, e) in &view {
                text.push_str(&format!("{p}\t{}\t{}\n", e.digest, name(fed, e.provider)));
                entries.push(json!({ "path": p, "digest": e.digest, "provider": e.provider }));
            }
            Ok(Output::new(text, json!({ "bubble": b, "paths": entries })))
        }
        Cmd::Cat { bubble, path } => {
            let b = find(fed, bubble)?;
            let path = parse_path(path)?;
            let digest = fed
                .resolve_digests(b)?
                .get(&path)
                .copied()
                .ok_or_else(|| Error::UnknownRef(format!("{path} in {}", name(fed, b))))?;
            let bytes = fed.store().get_blob(&digest)?;
            let text = String::from_utf8_lossy(&bytes).into_owned();
            Ok(Output::new(text.clone(), json!({ "path": path, "digest": digest, "content": text })))
        }
        Cmd::List => {
            let mut text = String::new();
            for d in fed.descriptors() {
                text.push_str(&format!("{}\t{}\t{}\t{}\n", d.id.short(), d.name, d.state, d.pending.len()));
            }
            Ok(Output::new(text, json_of(&FederationExport::of(fed))))
        }
        Cmd::Examine { bubble } => {
            let b = find(fed, bubble)?;
            let report = fed.examine(b)?;
            let mut text = format!("{}\n", label(fed, b));
            for e in &report.entries {
                let relation = match e.relation {
                    Relation::Structural => "structural",
                    Relation::Historical => "historical",
                    Relation::Embed => "embed",
                };
                text.push_str(&format!(
                    "  {} -> {} [{relation}] {} paths\n",
                    name(fed, e.from),
                    name(fed, e.to),
                    e.contributed.len()
                ));
            }
            for c in &report.embed_collisions {
                text.push_str(&format!("  collision at {}: {} wins\n", c.path, name(fed, c.winner)));
            }
            Ok(Output::new(text, json_of(&report)))
        }
        Cmd::SetAttr { bubble, key, value } => {
            let b = find(fed, bubble)?;
            fed.set_attribute(b, key, value)?;
            Ok(Output::new(format!("{key}={value} on {}", label(fed, b)), json!({ "bubble": b, "key": key, "value": value })))
        }
        Cmd::Constraints(ConstraintsCmd::Check { bubble }) => {
            let b = find(fed, bubble)?;
            let violations = fed.check_constraints(b)?;
            let text = if violations.is_empty() {
                format!("{}: all constraints hold", label(fed, b))
            } else {
                violations.iter().map(|v| format!("violation: {v}\n")).collect()
            };
            Ok(Output::new(text, json!({ "bubble": b, "violations": violations })))
        }
        Cmd::Constraints(ConstraintsCmd::Add { bubble, forbid_provenance, forbid_path, require }) => {
            let b = find(fed, bubble)?;
            let constraint = match (forbid_provenance, forbid_path, require) {
                (Some(r), None, None) => Constraint::ForbidProvenance { bubble: find(fed, r)? },
                (None, Some(glob), None) => Constraint::ForbidPath { glob: glob.clone() },
                (None, None, Some((key, value))) => Constraint::RequireAttribute { key: key.clone(), value: value.clone() },
                _ => {
                    return Err(Error::IllegalDecision(
                        "give exactly one of --forbid-provenance, --forbid-path, --require".into(),
                    ))
                }
            };
            fed.constrain(b, constraint.clone())?;
            Ok(Output::new(format!("{constraint} on {}", label(fed, b)), json!({ "bubble": b, "constraint": constraint })))
        }
        Cmd::Stress(cmd) => stress(fed, cmd, actor),
        Cmd::Export(ExportCmd::Dot) => {
            let dot = export_dot(fed);
            Ok(Output::new(dot.clone(), Value::String(dot)))
        }
        Cmd::Export(ExportCmd::Json) => {
            let text = export_json(fed);
            Ok(Output::new(text, json_of(&FederationExport::of(fed))))
        }
        Cmd::Gc => {
            let stats = fed.gc()?;
            Ok(Output::new(
                format!("removed {} blobs, {} snapshots", stats.blobs_removed, stats.snapshots_removed),
                json_of(&stats),
            ))
        }
        Cmd::Stats => {
            let mut states: BTreeMap<String, usize> = BTreeMap::new();
            for d in fed.descriptors() {
                *states.entry(d.state.to_string()).or_default() += 1;
            }
            let live = fed.descriptors().filter(|d| d.state != BubbleState::Destroyed).count();
            let stats = json!({
                "bubbles": live,
                "states": states,
                "blobs": fed.store().blob_count(),
                "snapshots": fed.store().snapshot_ids().len(),
                "pending_signals": fed.pending_count(),
                "change_sets": fed.changesets().count(),
                "decisions": fed.audit().len(),
            });
            let text = format!(
                "bubbles {live}\nblobs {}\nsnapshots {}\npending signals {}\nchange sets {}\ndecisions {}",
                stats["blobs"], stats["snapshots"], stats["pending_signals"], stats["change_sets"], stats["decisions"]
            );
            Ok(Output::new(text, stats))
        }
    }
}

fn describe_signal(fed: &Federation, b: BubbleId, s: &StressSignal) -> (String, Value) {
    let conflicts = fed.conflicts(b, s).unwrap_or_default();
    let kind = match s.kind {
        SignalKind::Change => "change".to_string(),
        SignalKind::ForkChoice { new_line, old_line } => {
            format!("fork new={} old={}", name(fed, new_line), name(fed, old_line))
        }
    };
    let paths: Vec<String> = s.changeset.changes.keys().map(ToString::to_string).collect();
    let text = format!(
        "{}\t{kind}\tfrom {}\t{}{}",
        s.signal_id,
        name(fed, s.changeset.origin),
        paths.join(","),
        if conflicts.is_empty() { String::new() } else { format!("\tconflicts {}", conflicts.len()) }
    );
    let value = json!({
        "signal": s.signal_id,
        "kind": s.kind,
        "changeset": s.changeset.id,
        "origin": s.changeset.origin,
        "sender": s.sender,
        "paths": paths,
        "conflicts": conflicts,
    });
    (text, value)
}

fn stress(fed: &mut Federation, cmd: &StressCmd, actor: &str) -> Result<Output> {
    let (bubble, signal, decision) = match cmd {
        StressCmd::List { bubble } => {
            let b = find(fed, bubble)?;
            let mut text = String::new();
            let mut items = Vec::new();
            for s in fed.activate(b)? {
                let (t, v) = describe_signal(fed, b, &s);
                text.push_str(&t);
                text.push('\n');
                items.push(v);
            }
            if items.is_empty() {
                text = format!("no pending signals at {}", label(fed, b));
            }
            return Ok(Output::new(text, json!({ "bubble": b, "pending": items })));
        }
        StressCmd::Trace { changeset } => {
            let id = fed
                .changesets()
                .map(|c| c.id)
                .find(|id| id.to_string().starts_with(changeset.as_str()))
                .ok_or_else(|| Error::UnknownRef(changeset.clone()))?;
            let trace = fed.propagation_trace(id)?;
            let mut text = format!("change set {id} from {}\n", name(fed, trace.origin));
            for e in &trace.entries {
                let status = match e.signals.last().and_then(|s| s.resolution.as_ref()) {
                    Some(r) => r.decision.label().to_string(),
                    None if e.delivered => "pending".to_string(),
                    None => "not delivered".to_string(),
                };
                text.push_str(&format!("  {}\t{status}\n", name(fed, e.bubble)));
            }
            return Ok(Output::new(text, json_of(&trace)));
        }
        StressCmd::Accept { bubble, signal } => (bubble, signal, None),
        StressCmd::Decline { bubble, signal } => (bubble, signal, Some(Decision::Decline)),
        StressCmd::Choose { bubble, line, signal } => (
            bubble,
            signal,
            Some(match line {
                Line::New => Decision::ChooseNew,
                Line::Old => Decision::ChooseOld,
            }),
        ),
        StressCmd::Merge { bubble, signal, content } => {
            let mut merged = BTreeMap::new();
            for (p, b) in read_content(fed, content)? {
                match b {
                    Binding::Bound(d) => merged.insert(p, d),
                    Binding::Tombstone => return Err(Error::IllegalDecision(format!("merge cannot remove {p}"))),
                };
            }
            (bubble, signal, Some(Decision::Merge(merged)))
        }
    };
    let b = find(fed, bubble)?;
    let s = pending_signal(fed, b, signal.as_deref())?;
    let decision = decision.unwrap_or(Decision::Accept);
    let label_text = decision.label();
    let outcome = fed.resolve_signal(b, s.signal_id, decision, actor)?;
    let mut text = format!("{label_text} {} at {}", s.signal_id.short(), label(fed, b));
    for pin in &outcome.pins {
        text.push_str(&format!("\n  pinned old values in {}", label(fed, *pin)));
    }
    if let Some((from, to)) = outcome.reparented {
        text.push_str(&format!("\n  moved from {} to {}", name(fed, from), name(fed, to)));
    }
    if !outcome.forwarded_to.is_empty() {
        let names: Vec<String> = outcome.forwarded_to.iter().map(|f| name(fed, *f)).collect();
        text.push_str(&format!("\n  forwarded to {}", names.join(", ")));
    }
    Ok(Output::new(text, json!({ "bubble": b, "signal": s.signal_id, "decision": label_text, "outcome": outcome })))
}

fn load_script(file: &Path) -> Result<ScenarioScript> {
    let text = std::fs::read_to_string(file)?;
    ScenarioScript::parse(&text)
}

fn scenario_summary(report: &ScenarioReport) -> String {
    let mut text = format!(
        "scenario {}: {} events, {} bubbles, {} blobs, {} pending signals, {} ticks\n",
        report.name,
        report.events.len(),
        report.export.bubbles.len(),
        report.blob_count,
        report.pending,
        report.ticks
    );
    for e in report.events.iter().filter(|e| e.status != "ok") {
        text.push_str(&format!("  line {}: {} -> {}\n", e.line, e.op, e.status));
    }
    for t in &report.traces {
        let delivered = t.entries.iter().filter(|e| e.delivered).count();
        text.push_str(&format!("  change set {}: delivered to {delivered} of {}\n", t.changeset.short(), t.entries.len()));
    }
    text
}

fn scenario_run(file: &Path, compare_baselines: bool, dot: Option<&Path>) -> Result<Output> {
    let script = load_script(file)?;
    let report = ScenarioRunner::new(script.clone(), RunOptions::default())?.run()?;
    if let Some(dot) = dot {
        std::fs::write(dot, report.export.to_dot())?;
    }
    let mut text = scenario_summary(&report);
    let mut value = json_of(&report);
    if compare_baselines {
        let c = compare(&script, RunOptions { governance: None, interactive: false })?;
        text.push_str(&format!(
            "baselines: {} fix applications, {} blobs written ({} duplicated), {} unfixed heads\n",
            c.baseline.applications, c.baseline.blobs_written, c.baseline.duplicated_blobs, c.baseline.unfixed_heads
        ));
        text.push_str(&format!(
            "bubbles: {} commits, {} new blobs, {} heads fixed, {} pending signals\n",
            c.bubble.commits, c.bubble.new_blobs, c.bubble.fixed_heads, c.bubble.pending_signals
        ));
        value = json!({ "report": value, "comparison": c });
    }
    Ok(Output::new(text, value))
}

fn gov_run(file: &Path, seed: Option<u64>) -> Result<Output> {
    let script = load_script(file)?;
    let mut governance = script.governance()?;
    if let Some(seed) = seed {
        governance.transport.seed = seed;
    }
    let mut runner = ScenarioRunner::new(script, RunOptions { governance: Some(governance), interactive: false })?;
    while runner.step()? {}
    let report = runner.report();
    let cluster = runner.cluster();
    let mut text = scenario_summary(&report);
    let n = report.network;
    text.push_str(&format!(
        "network: {} sent, {} delivered, {} dropped, {} duplicated, {} corrupted\n",
        n.sent, n.delivered, n.dropped, n.duplicated, n.corrupted
    ));
    let mut governors = Vec::new();
    for g in cluster.governors() {
        text.push_str(&format!(
            "  {}: owns {}, {} conflicts, {} digest mismatches\n",
            g.id(),
            g.owned().len(),
            g.conflicts().len(),
            g.digest_mismatches()
        ));
        governors.push(json!({
            "id": g.id(),
            "owned": g.owned(),
            "conflicts": g.conflicts(),
            "digest_mismatches": g.digest_mismatches(),
        }));
    }
    Ok(Output::new(text, json!({ "report": json_of(&report), "governors": governors })))
}
