//! Namespace overlay resolution.
//!
//! Precedence for a bubble `b`:
//! 1. `b`'s local bindings (a tombstone hides the path),
//! 2. its embeds in list order, each guest resolved and mounted under its
//!    prefix,
//! 3. its structural parents in list order, each resolved recursively.
//!
//! The first level that has an opinion about a path decides it. Hidden
//! paths stay hidden for every lower level, including across parents and
//! mounts. Historical origins are never consulted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::Federation;
use crate::error::{Error, Result};
use crate::model::{Binding, BubbleId, BubbleState, LogicalPath};
use crate::store::Digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedElement {
    pub path: LogicalPath,
    pub digest: Digest,
    /// The bubble whose local binding supplied the digest.
    pub provider: BubbleId,
    /// Bubbles walked from the resolved bubble down to the provider.
    pub via: Vec<BubbleId>,
}

pub type View = BTreeMap<LogicalPath, ResolvedElement>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Slot {
    Present(ResolvedElement),
    Hidden { by: BubbleId, via: Vec<BubbleId> },
}

impl Slot {
    fn prefixed(&self, owner: BubbleId, path: LogicalPath) -> Slot {
        let with = |via: &[BubbleId]| std::iter::once(owner).chain(via.iter().copied()).collect();
        match self {
            Slot::Present(e) => {
                Slot::Present(ResolvedElement { path, digest: e.digest, provider: e.provider, via: with(&e.via) })
            }
            Slot::Hidden { by, via } => Slot::Hidden { by: *by, via: with(via) },
        }
    }

    /// Resolution outcome without the route taken: two slots with equal
    /// keys are indistinguishable to every dependent.
    pub(crate) fn outcome(&self) -> (Option<Digest>, BubbleId) {
        match self {
            Slot::Present(e) => (Some(e.digest), e.provider),
            Slot::Hidden { by, .. } => (None, *by),
        }
    }
}

/// Present and hidden paths of one bubble.
pub(crate) type FullView = BTreeMap<LogicalPath, Slot>;

pub(crate) struct Resolver<'a> {
    fed: &'a Federation,
    memo: HashMap<BubbleId, Rc<FullView>>,
    visiting: HashSet<BubbleId>,
}

impl<'a> Resolver<'a> {
    pub(crate) fn new(fed: &'a Federation) -> Self {
        Resolver { fed, memo: HashMap::new(), visiting: HashSet::new() }
    }

    pub(crate) fn full_view(&mut self, id: BubbleId) -> Result<Rc<FullView>> {
        if let Some(v) = self.memo.get(&id) {
            return Ok(v.clone());
        }
        if !self.visiting.insert(id) {
            return Err(Error::StructuralCycle(id));
        }
        let d = self.fed.descriptor(id)?;
        let mut view = FullView::new();
        for (path, binding) in &d.local_bindings {
            let slot = match binding {
                Binding::Bound(digest) => Slot::Present(ResolvedElement {
                    path: path.clone(),
                    digest: *digest,
                    provider: id,
                    via: vec![id],
                }),
                Binding::Tombstone => Slot::Hidden { by: id, via: vec![id] },
            };
            view.insert(path.clone(), slot);
        }
        for embed in &d.embeds {
            let guest = self.full_view(embed.guest)?;
            for (path, slot) in guest.iter() {
                let mounted = embed.mount.join(path);
                if let std::collections::btree_map::Entry::Vacant(e) = view.entry(mounted.clone()) {
                    e.insert(slot.prefixed(id, mounted));
                }
            }
        }
        for parent in &d.structural_parents {
            let inherited = self.full_view(*parent)?;
            for (path, slot) in inherited.iter() {
                if !view.contains_key(path) {
                    view.insert(path.clone(), slot.prefixed(id, path.clone()));
                }
            }
        }
        self.visiting.remove(&id);
        let view = Rc::new(view);
        self.memo.insert(id, view.clone());
        Ok(view)
    }
}

pub(crate) fn present(view: &FullView) -> View {
    view.iter()
        .filter_map(|(p, s)| match s {
            Slot::Present(e) => Some((p.clone(), e.clone())),
            Slot::Hidden { .. } => None,
        })
        .collect()
}

impl Federation {
    /// The bubble's resolved view: every visible path with the digest it
    /// points at and where that digest came from.
    pub fn resolve(&self, id: BubbleId) -> Result<View> {
        if self.descriptor(id)?.state == BubbleState::Destroyed {
            return Err(Error::Destroyed(id));
        }
        Ok(present(&*Resolver::new(self).full_view(id)?))
    }

    /// Just the path → digest map of [`Self::resolve`].
    pub fn resolve_digests(&self, id: BubbleId) -> Result<BTreeMap<LogicalPath, Digest>> {
        Ok(self.resolve(id)?.into_iter().map(|(p, e)| (p, e.digest)).collect())
    }

    pub(crate) fn full_view(&self, id: BubbleId) -> Result<FullView> {
        Ok(Rc::unwrap_or_clone(Resolver::new(self).full_view(id)?))
    }

    /// Route-free outcome per path, used to compare a bubble's resolution
    /// before and after a graph rewrite.
    pub(crate) fn outcomes(&self, id: BubbleId) -> Result<BTreeMap<LogicalPath, (Option<Digest>, BubbleId)>> {
        Ok(self.full_view(id)?.into_iter().map(|(p, s)| (p, s.outcome())).collect())
    }
}
