//! Baseline-per-stream emulation of the same scripted history, for
//! comparing the cost of a fix under full-copy baselines with the cost under
//! bubbles.
//!
//! In baseline mode every stream head is an independent full copy. A fix
//! committed upstream has to be re-applied at each head that integrates it,
//! and every re-application writes a complete new baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::runner::{RunOptions, ScenarioRunner};
use super::script::{ActorSpec, Event, Op, Policy, ScenarioScript, SCENARIO_FORMAT, SCENARIO_VERSION};
use crate::error::Result;
use crate::store::Digest;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub fixes: usize,
    pub heads: usize,
    pub applications: usize,
    pub unfixed_heads: usize,
    pub blobs_written: usize,
    /// Blobs in the new baselines whose content did not change.
    pub duplicated_blobs: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleMetrics {
    pub commits: usize,
    pub new_blobs: usize,
    /// Heads whose resolution carries the fix, decided or not.
    pub fixed_heads: usize,
    pub pending_signals: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: BaselineMetrics,
    pub bubble: BubbleMetrics,
}

#[derive(Debug, Clone, Default)]
struct Stream {
    parent: Option<String>,
    files: BTreeMap<String, Option<String>>,
    actor: Option<String>,
}

/// Streams that have no derived streams below them.
fn heads_below(streams: &BTreeMap<String, Stream>, origin: &str) -> Vec<Vec<String>> {
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (name, s) in streams {
        if let Some(p) = &s.parent {
            children.entry(p.as_str()).or_default().push(name.as_str());
        }
    }
    let mut paths = Vec::new();
    let mut stack = vec![vec![origin.to_string()]];
    while let Some(path) = stack.pop() {
        let last = path.last().cloned().unwrap_or_default();
        match children.get(last.as_str()) {
            Some(kids) => {
                for k in kids {
                    let mut next = path.clone();
                    next.push((*k).to_string());
                    stack.push(next);
                }
            }
            None => paths.push(path),
        }
    }
    paths.sort();
    paths
}

fn integrates(script: &ScenarioScript, actor: Option<&String>) -> bool {
    actor
        .and_then(|a| script.actors.get(a))
        .is_some_and(|a| matches!(a.policy, Policy::Accept | Policy::ChooseNew))
}

/// Replays the script's create, derive, clone and commit events as
/// full-copy baselines.
pub fn emulate_baselines(script: &ScenarioScript) -> BaselineMetrics {
    let mut streams: BTreeMap<String, Stream> = BTreeMap::new();
    let mut m = BaselineMetrics::default();
    for event in &script.events {
        match &event.op {
            Op::Create { name, bindings } => {
                let files = bindings.iter().map(|(p, c)| (p.clone(), Some(c.clone()))).collect();
                streams.insert(name.clone(), Stream { parent: None, files, actor: event.actor.clone() });
            }
            Op::Derive { parent, name } | Op::Clone { source: parent, name } => {
                let files = streams.get(parent).map(|s| s.files.clone()).unwrap_or_default();
                let parent = matches!(event.op, Op::Derive { .. }).then(|| parent.clone());
                streams.insert(name.clone(), Stream { parent, files, actor: event.actor.clone() });
            }
            Op::Commit { bubble, edits } => {
                if !streams.contains_key(bubble) {
                    continue;
                }
                m.fixes += 1;
                for path in heads_below(&streams, bubble) {
                    m.heads += 1;
                    let reached = path[1..].iter().all(|s| integrates(script, streams[s].actor.as_ref()));
                    if !reached {
                        m.unfixed_heads += 1;
                        continue;
                    }
                    m.applications += 1;
                    for s in &path {
                        let stream = streams.get_mut(s).expect("stream on path");
                        for (p, c) in edits {
                            stream.files.insert(p.clone(), c.clone());
                        }
                    }
                    let head = &streams[path.last().expect("non-empty path")];
                    let written = head.files.values().filter(|c| c.is_some()).count();
                    m.blobs_written += written;
                    m.duplicated_blobs += written - edits.values().filter(|c| c.is_some()).count().min(written);
                }
            }
            _ => {}
        }
    }
    m
}

/// Runs the script with bubbles and in baseline emulation.
pub fn compare(script: &ScenarioScript, options: RunOptions) -> Result<Comparison> {
    let baseline = emulate_baselines(script);
    let mut runner = ScenarioRunner::new(script.clone(), options)?;
    let mut bubble = BubbleMetrics::default();
    let mut fixes: Vec<(String, BTreeMap<String, Option<String>>)> = Vec::new();
    let blobs = |r: &ScenarioRunner| -> usize {
        r.cluster().governors().flat_map(|g| g.federation().store().digests()).collect::<BTreeSet<_>>().len()
    };
    for event in &script.events {
        let before = blobs(&runner);
        runner.step()?;
        if let Op::Commit { bubble: b, edits } = &event.op {
            bubble.commits += 1;
            bubble.new_blobs += blobs(&runner) - before;
            fixes.push((b.clone(), edits.clone()));
        }
    }
    let report = runner.report();
    bubble.pending_signals = report.pending;
    let mut streams: BTreeMap<String, Stream> = BTreeMap::new();
    for event in &script.events {
        if let Op::Derive { parent, name } = &event.op {
            streams.insert(name.clone(), Stream { parent: Some(parent.clone()), ..Stream::default() });
        } else if let Op::Create { name, .. } | Op::Clone { name, .. } = &event.op {
            streams.insert(name.clone(), Stream::default());
        }
    }
    let mut fixed = BTreeSet::new();
    for (origin, edits) in &fixes {
        for path in heads_below(&streams, origin) {
            let head = path.last().expect("non-empty path");
            let Some(id) = runner.bubble(head) else { continue };
            let Ok(view) = runner.cluster().home(id).and_then(|f| f.resolve_digests(id)) else { continue };
            let applied = edits.iter().all(|(p, c)| {
                let actual = p.parse().ok().and_then(|p| view.get(&p).copied());
                actual == c.as_ref().map(|c| Digest::of(c.as_bytes()))
            });
            if applied {
                fixed.insert(head.clone());
            }
        }
    }
    bubble.fixed_heads = fixed.len();
    Ok(Comparison { baseline, bubble })
}

/// Builds a script for a tree of streams below a common base, followed by
/// one fix committed at the base.
///
/// `parents[i]` is the parent of stream `i + 1`; stream 0 is the base. Each
/// stream has its own actor, which integrates changes unless its index is
/// in `skipped`.
pub fn tree_script(name: &str, parents: &[usize], files: usize, skipped: &BTreeSet<usize>) -> ScenarioScript {
    let stream = |i: usize| if i == 0 { "base".to_string() } else { format!("s{i}") };
    let mut actors = BTreeMap::new();
    let mut events = Vec::new();
    let event = |actor: String, op: Op| Event { tick: 0, actor: Some(actor), op, expect_error: None };
    for i in 0..=parents.len() {
        let policy = if skipped.contains(&i) { Policy::Pending } else { Policy::Accept };
        actors.insert(stream(i), ActorSpec { policy, governor: None });
    }
    let bindings = (0..files).map(|f| (format!("src/file{f}.c"), format!("file {f} original\n"))).collect();
    events.push(event(stream(0), Op::Create { name: stream(0), bindings }));
    for (i, p) in parents.iter().enumerate() {
        let child = i + 1;
        events.push(event(stream(child), Op::Derive { parent: stream(*p), name: stream(child) }));
    }
    let edits = BTreeMap::from([("src/file0.c".to_string(), Some("file 0 fixed\n".to_string()))]);
    events.push(event(stream(0), Op::Commit { bubble: stream(0), edits }));
    ScenarioScript {
        format: SCENARIO_FORMAT.to_string(),
        version: SCENARIO_VERSION,
        name: name.to_string(),
        description: String::new(),
        governance: None,
        actors,
        settle: true,
        events,
        lines: Vec::new(),
    }
}

/// `heads` streams derived directly from the base, the first `skipped` of
/// which never integrate.
pub fn fan_out_script(name: &str, heads: usize, files: usize, skipped: usize) -> ScenarioScript {
    let parents = vec![0; heads];
    tree_script(name, &parents, files, &(1..=skipped).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> RunOptions {
        RunOptions { governance: None, interactive: false }
    }

    #[test]
    fn fan_out_costs() {
        let c = compare(&fan_out_script("fan", 8, 4, 0), quiet()).unwrap();
        assert_eq!(c.baseline.applications, 8);
        assert_eq!(c.baseline.blobs_written, 32);
        assert_eq!(c.baseline.duplicated_blobs, 24);
        assert_eq!(c.bubble, BubbleMetrics { commits: 1, new_blobs: 1, fixed_heads: 8, pending_signals: 0 });
    }

    #[test]
    fn skipped_head_stays_pending() {
        let c = compare(&fan_out_script("skip", 3, 2, 1), quiet()).unwrap();
        assert_eq!(c.baseline.unfixed_heads, 1);
        assert_eq!(c.baseline.applications, 2);
        assert_eq!(c.bubble.pending_signals, 1);
        // Inheritance is live: the undecided head already sees the fix.
        assert_eq!(c.bubble.fixed_heads, 3);
    }

    #[test]
    fn single_stream_is_one_application() {
        let c = compare(&fan_out_script("one", 1, 1, 0), quiet()).unwrap();
        assert_eq!(c.baseline.applications, 1);
        assert_eq!(c.bubble.commits, 1);
    }
}
