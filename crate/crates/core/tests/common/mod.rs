//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bubblekit::{BubbleDescriptor, BubbleId, BubbleState, Digest, Federation, LogicalPath};

pub type Descriptors = BTreeMap<BubbleId, BubbleDescriptor>;

pub fn descriptors(fed: &Federation) -> Descriptors {
    fed.descriptors().map(|d| (d.id, d.clone())).collect()
}

fn materialize_into(
    descs: &Descriptors,
    b: BubbleId,
    memo: &mut BTreeMap<BubbleId, BTreeMap<LogicalPath, Option<Digest>>>,
) -> BTreeMap<LogicalPath, Option<Digest>> {
    if let Some(v) = memo.get(&b) {
        return v.clone();
    }
    let d = &descs[&b];
    let mut view: BTreeMap<LogicalPath, Option<Digest>> =
        d.local_bindings.iter().map(|(p, binding)| (p.clone(), binding.digest())).collect();
    for e in &d.embeds {
        for (p, v) in materialize_into(descs, e.guest, memo) {
            view.entry(e.mount.join(&p)).or_insert(v);
        }
    }
    for parent in &d.structural_parents {
        for (p, v) in materialize_into(descs, *parent, memo) {
            view.entry(p).or_insert(v);
        }
    }
    memo.insert(b, view.clone());
    view
}

/// Full materialization: local bindings, then each embed's whole view under
/// its mount, then each parent's whole view, first writer wins. Tombstones
/// are carried as `None` and dropped at the end.
pub fn eager_view(descs: &Descriptors, b: BubbleId) -> BTreeMap<LogicalPath, Digest> {
    materialize_into(descs, b, &mut BTreeMap::new()).into_iter().filter_map(|(p, v)| Some((p, v?))).collect()
}

/// Bubbles reachable from `origin` by following dependents (reverse
/// structural-parent edges) of live bubbles.
pub fn structural_reach(descs: &Descriptors, origin: BubbleId) -> BTreeSet<BubbleId> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([origin]);
    while let Some(b) = queue.pop_front() {
        for d in descs.values() {
            if d.state.is_live() && d.structural_parents.contains(&b) && seen.insert(d.id) {
                queue.push_back(d.id);
            }
        }
    }
    seen
}

/// True when the structural plus embed graph has a cycle.
pub fn has_cycle(descs: &Descriptors) -> bool {
    fn visit(descs: &Descriptors, b: BubbleId, marks: &mut BTreeMap<BubbleId, u8>) -> bool {
        match marks.get(&b) {
            Some(1) => return true,
            Some(2) => return false,
            _ => {}
        }
        marks.insert(b, 1);
        let Some(d) = descs.get(&b) else {
            marks.insert(b, 2);
            return false;
        };
        let next: Vec<BubbleId> = d.structural_parents.iter().copied().chain(d.embeds.iter().map(|e| e.guest)).collect();
        for n in next {
            if visit(descs, n, marks) {
                return true;
            }
        }
        marks.insert(b, 2);
        false
    }
    let mut marks = BTreeMap::new();
    descs.keys().any(|b| visit(descs, *b, &mut marks))
}

pub fn resolvable(d: &BubbleDescriptor) -> bool {
    d.state != BubbleState::Destroyed
}

/// Resolution of every non-destroyed bubble.
pub fn all_views(fed: &Federation) -> BTreeMap<BubbleId, BTreeMap<LogicalPath, Digest>> {
    fed.descriptors().filter(|d| resolvable(d)).map(|d| (d.id, fed.resolve_digests(d.id).unwrap())).collect()
}

/// Accepts or otherwise answers every pending signal until none are left
/// that `decide` wants to answer.
pub fn drain(fed: &mut Federation, mut decide: impl FnMut(BubbleId, &bubblekit::StressSignal) -> Option<bubblekit::Decision>) {
    loop {
        let mut acted = false;
        let ids: Vec<BubbleId> = fed.descriptors().filter(|d| !d.pending.is_empty()).map(|d| d.id).collect();
        for b in ids {
            let Ok(signals) = fed.activate(b) else { continue };
            for s in signals {
                if let Some(decision) = decide(b, &s) {
                    if fed.resolve_signal(b, s.signal_id, decision, "oracle").is_ok() {
                        acted = true;
                        break;
                    }
                }
            }
        }
        if !acted {
            return;
        }
    }
}

pub fn path(s: &str) -> LogicalPath {
    s.parse().unwrap()
}

pub mod graph;
