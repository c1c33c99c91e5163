//! Random engine operation sequences checked against the oracles.

use std::collections::BTreeMap;

use bubblekit::engine::export_json;
use bubblekit::{Binding, BubbleId, Federation, Mount};
use proptest::prelude::*;

use super::{all_views, descriptors, eager_view, has_cycle, path};

pub const PATHS: [&str; 20] = [
    "a", "b", "c", "d", "e", "src/x", "src/y", "src/z", "src/deep/k", "src/deep/l", "doc/r", "doc/s", "m/a", "m/b",
    "m/n/a", "m/n/c", "lib/q", "lib/r", "t/1", "t/2",
];
const MOUNTS: [&str; 4] = ["", "m", "m/n", "lib"];
const MAX_BUBBLES: usize = 12;

#[derive(Debug, Clone)]
pub enum GraphOp {
    Create { bindings: Vec<(u8, u8)> },
    Derive { parent: u8 },
    Clone { source: u8 },
    Commit { bubble: u8, edits: Vec<(u8, Option<u8>)> },
    Embed { host: u8, guest: u8, mount: u8 },
    InsertEmpty { downstream: u8 },
    Retract { bubble: u8 },
    Dissolve { bubble: u8, source: u8 },
    Freeze { bubble: u8 },
}

pub fn graph_op() -> impl Strategy<Value = GraphOp> {
    let binding = (0u8..20, 0u8..6);
    let edit = (0u8..20, proptest::option::weighted(0.8, 0u8..6));
    prop_oneof![
        2 => proptest::collection::vec(binding, 0..6).prop_map(|bindings| GraphOp::Create { bindings }),
        3 => any::<u8>().prop_map(|parent| GraphOp::Derive { parent }),
        1 => any::<u8>().prop_map(|source| GraphOp::Clone { source }),
        3 => (any::<u8>(), proptest::collection::vec(edit, 1..4)).prop_map(|(bubble, edits)| GraphOp::Commit { bubble, edits }),
        2 => (any::<u8>(), any::<u8>(), 0u8..4).prop_map(|(host, guest, mount)| GraphOp::Embed { host, guest, mount }),
        2 => any::<u8>().prop_map(|downstream| GraphOp::InsertEmpty { downstream }),
        1 => any::<u8>().prop_map(|bubble| GraphOp::Retract { bubble }),
        1 => (any::<u8>(), any::<u8>()).prop_map(|(bubble, source)| GraphOp::Dissolve { bubble, source }),
        1 => any::<u8>().prop_map(|bubble| GraphOp::Freeze { bubble }),
    ]
}

pub fn graph_ops(max: usize) -> impl Strategy<Value = Vec<GraphOp>> {
    proptest::collection::vec(graph_op(), 1..max)
}

fn content(fed: &Federation, i: u8) -> bubblekit::Digest {
    fed.store().put_blob(format!("content {i}\n").as_bytes()).unwrap()
}

fn pick(ids: &[BubbleId], i: u8) -> BubbleId {
    ids[i as usize % ids.len()]
}

/// Counters for how often each kind of check actually ran.
#[derive(Debug, Default, Clone, Copy)]
pub struct Coverage {
    pub applied: usize,
    pub rejected: usize,
    pub insert_retract_pairs: usize,
    pub derive_checks: usize,
}

/// Applies `ops` to a fresh federation and checks, after every step:
/// resolution against the eager oracle, acyclicity, atomicity of rejected
/// operations, derive transparency and retract-after-empty-insert identity.
pub fn check_sequence(ops: &[GraphOp]) -> Result<Coverage, String> {
    let mut fed = Federation::in_memory("graph-ops");
    let mut ids: Vec<BubbleId> = Vec::new();
    let mut cov = Coverage::default();
    for (step, op) in ops.iter().enumerate() {
        let before_export = export_json(&fed);
        let before_views = all_views(&fed);
        let op = if ids.is_empty() { GraphOp::Create { bindings: vec![(0, 0)] } } else { op.clone() };
        let result: Result<(), bubblekit::Error> = match &op {
            GraphOp::Create { bindings } if ids.len() < MAX_BUBBLES => {
                let b: BTreeMap<_, _> = bindings.iter().map(|(p, c)| (path(PATHS[*p as usize]), content(&fed, *c))).collect();
                fed.create("c", b).map(|id| ids.push(id))
            }
            GraphOp::Derive { parent } if ids.len() < MAX_BUBBLES => {
                let parent = pick(&ids, *parent);
                fed.derive(parent, "d").map(|id| {
                    ids.push(id);
                    cov.derive_checks += 1;
                })
                .and_then(|_| {
                    let child = *ids.last().unwrap();
                    if fed.resolve_digests(child)? != fed.resolve_digests(parent)? {
                        return Err(bubblekit::Error::Corrupt(format!("step {step}: derive is not transparent")));
                    }
                    Ok(())
                })
            }
            GraphOp::Clone { source } if ids.len() < MAX_BUBBLES => {
                fed.clone_bubble(pick(&ids, *source), "k").map(|id| ids.push(id))
            }
            GraphOp::Commit { bubble, edits } => {
                let edits: BTreeMap<_, _> = edits
                    .iter()
                    .map(|(p, c)| {
                        let binding = match c {
                            Some(c) => Binding::Bound(content(&fed, *c)),
                            None => Binding::Tombstone,
                        };
                        (path(PATHS[*p as usize]), binding)
                    })
                    .collect();
                fed.commit(pick(&ids, *bubble), edits).map(|_| ())
            }
            GraphOp::Embed { host, guest, mount } => {
                let mount: Mount = MOUNTS[*mount as usize].parse().unwrap();
                fed.embed(pick(&ids, *host), mount, pick(&ids, *guest))
            }
            GraphOp::InsertEmpty { downstream } => {
                let down = pick(&ids, *downstream);
                let parents = fed.descriptor(down).unwrap().structural_parents.clone();
                match parents.first() {
                    None => Ok(()),
                    Some(up) => match fed.insert_between(*up, down, "i", BTreeMap::new()) {
                        Err(e) => Err(e),
                        Ok(inserted) => {
                            if all_views(&fed).into_iter().filter(|(b, _)| *b != inserted).collect::<BTreeMap<_, _>>()
                                != before_views
                            {
                                return Err(format!("step {step}: empty insert changed a resolution"));
                            }
                            fed.retract(inserted).map_err(|e| format!("step {step}: retract of empty insert: {e}"))?;
                            let after: BTreeMap<_, _> =
                                all_views(&fed).into_iter().filter(|(b, _)| *b != inserted).collect();
                            if after != before_views {
                                return Err(format!("step {step}: retract after insert is not the identity"));
                            }
                            if fed.descriptor(down).unwrap().structural_parents != parents {
                                return Err(format!("step {step}: parents not restored"));
                            }
                            cov.insert_retract_pairs += 1;
                            Ok(())
                        }
                    },
                }
            }
            GraphOp::Retract { bubble } => fed.retract(pick(&ids, *bubble)),
            GraphOp::Dissolve { bubble, source } => {
                let (b, s) = (pick(&ids, *bubble), pick(&ids, *source));
                let res = fed.dissolve(b, s);
                if res.is_ok() && all_views(&fed) != before_views {
                    return Err(format!("step {step}: dissolve changed a resolution"));
                }
                res
            }
            GraphOp::Freeze { bubble } => fed.freeze(pick(&ids, *bubble)).map(|_| ()),
            _ => Ok(()),
        };
        match result {
            Ok(()) => cov.applied += 1,
            Err(bubblekit::Error::Corrupt(m)) => return Err(m),
            Err(e) => {
                cov.rejected += 1;
                if export_json(&fed) != before_export {
                    return Err(format!("step {step}: rejected {op:?} ({e}) changed state"));
                }
            }
        }
        let descs = descriptors(&fed);
        if has_cycle(&descs) {
            return Err(format!("step {step}: cycle after {op:?}"));
        }
        for (b, view) in all_views(&fed) {
            if view != eager_view(&descs, b) {
                return Err(format!("step {step}: resolution of {b} differs from the oracle after {op:?}"));
            }
        }
    }
    Ok(cov)
}
