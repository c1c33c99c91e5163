use std::collections::{BTreeMap, BTreeSet};

use super::{Federation, SnapshotReason};
use crate::error::{Error, Result};
use crate::model::{Binding, BubbleDescriptor, BubbleId, BubbleState, Constraint, Embed, LogicalPath, Mount};
use crate::store::Digest;

/// Replaces `target` in `list` by `with`, in place, dropping any id that
/// already appears earlier.
pub(crate) fn splice(list: &[BubbleId], target: BubbleId, with: &[BubbleId]) -> Vec<BubbleId> {
    let mut out = Vec::with_capacity(list.len() + with.len());
    for id in list {
        let items: &[BubbleId] = if *id == target { with } else { std::slice::from_ref(id) };
        for item in items {
            if !out.contains(item) {
                out.push(*item);
            }
        }
    }
    out
}

impl Federation {
    /// True when `from` reaches `target` through parents or embeds.
    pub(crate) fn depends_on(&self, from: BubbleId, target: BubbleId) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(next) = stack.pop() {
            if next == target {
                return true;
            }
            if seen.insert(next) {
                if let Some(d) = self.descriptors.get(&next) {
                    stack.extend(d.resolution_inputs());
                }
            }
        }
        false
    }

    pub fn create(&mut self, name: &str, bindings: BTreeMap<LogicalPath, Digest>) -> Result<BubbleId> {
        self.require_stored(bindings.iter().map(|(p, d)| (p, *d)))?;
        self.tick();
        let id = self.next_id();
        let mut d = BubbleDescriptor::new(id, name);
        d.local_bindings = bindings.into_iter().map(|(p, digest)| (p, Binding::Bound(digest))).collect();
        self.descriptors.insert(id, d);
        self.record_snapshot(id, SnapshotReason::Create)?;
        Ok(id)
    }

    /// New bubble inheriting everything from `parent`, with no local content.
    pub fn derive(&mut self, parent: BubbleId, name: &str) -> Result<BubbleId> {
        match self.descriptor(parent)?.state {
            BubbleState::Destroyed => return Err(Error::ParentDestroyed(parent)),
            BubbleState::Retracted => return Err(Error::NotActive { bubble: parent, state: BubbleState::Retracted }),
            _ => {}
        }
        self.tick();
        let id = self.next_id();
        self.atomically(&[id], |fed| {
            let mut d = BubbleDescriptor::new(id, name);
            d.structural_parents.push(parent);
            fed.descriptors.insert(id, d);
            fed.ensure_constraints(&[id])?;
            Ok(id)
        })
    }

    /// Clone: structural and historical link to `source`; the source's own
    /// constraints are cut, deeper ancestors' still apply.
    pub fn clone_bubble(&mut self, source: BubbleId, name: &str) -> Result<BubbleId> {
        match self.descriptor(source)?.state {
            BubbleState::Destroyed => return Err(Error::SourceDestroyed(source)),
            BubbleState::Retracted => return Err(Error::NotActive { bubble: source, state: BubbleState::Retracted }),
            _ => {}
        }
        self.tick();
        let id = self.next_id();
        let mut d = BubbleDescriptor::new(id, name);
        d.structural_parents.push(source);
        d.historical_origins.push(source);
        d.constraint_cut.insert(source);
        self.descriptors.insert(id, d);
        Ok(id)
    }

    /// Drops `source` from `c`'s parents in favour of `source`'s own parents,
    /// provided nothing `c` resolves changes.
    pub fn dissolve(&mut self, c: BubbleId, source: BubbleId) -> Result<()> {
        let d = self.active(c)?;
        if !d.structural_parents.contains(&source) {
            return Err(Error::NotAdjacent { upstream: source, downstream: c });
        }
        let provided: Vec<LogicalPath> =
            self.resolve(c)?.into_values().filter(|e| e.provider == source).map(|e| e.path).collect();
        if !provided.is_empty() {
            return Err(Error::NotDissolvable { bubble: c, source_bubble: source, paths: provided });
        }
        let before = self.outcomes(c)?;
        let replacement = self.descriptor(source)?.structural_parents.clone();
        self.tick();
        self.atomically(&[c], |fed| {
            let d = fed.touch(c)?;
            d.structural_parents = splice(&d.structural_parents, source, &replacement);
            let after = fed.outcomes(c)?;
            let changed = changed_paths(&before, &after);
            if !changed.is_empty() {
                return Err(Error::NotDissolvable { bubble: c, source_bubble: source, paths: changed });
            }
            Ok(())
        })
    }

    pub fn embed(&mut self, host: BubbleId, mount: Mount, guest: BubbleId) -> Result<()> {
        self.active(host)?;
        self.live(guest)?;
        if host == guest || self.depends_on(guest, host) {
            return Err(Error::EmbedCycle { host, guest });
        }
        self.tick();
        self.atomically(&[host], |fed| {
            fed.touch(host)?.embeds.push(Embed { mount, guest });
            fed.ensure_constraints(&[host])
        })
    }

    /// Puts a new bubble carrying `bindings` between `upstream` and its
    /// direct dependent `downstream`.
    pub fn insert_between(
        &mut self,
        upstream: BubbleId,
        downstream: BubbleId,
        name: &str,
        bindings: BTreeMap<LogicalPath, Binding>,
    ) -> Result<BubbleId> {
        self.require_stored(bindings.iter().filter_map(|(p, b)| b.digest().map(|d| (p, d))))?;
        self.insert_unchecked(upstream, downstream, name, bindings, None)
    }

    /// `insert_between` minus the store check: pins bind digests that came
    /// out of an earlier resolution and may live in another governor's store.
    pub(crate) fn insert_unchecked(
        &mut self,
        upstream: BubbleId,
        downstream: BubbleId,
        name: &str,
        bindings: BTreeMap<LogicalPath, Binding>,
        id: Option<BubbleId>,
    ) -> Result<BubbleId> {
        self.active(downstream)?;
        self.live(upstream)?;
        if !self.descriptor(downstream)?.structural_parents.contains(&upstream) {
            return Err(Error::NotAdjacent { upstream, downstream });
        }
        self.tick();
        let id = match id {
            Some(id) => id,
            None => self.next_id(),
        };
        self.atomically(&[id, downstream], |fed| {
            let mut n = BubbleDescriptor::new(id, name);
            n.structural_parents.push(upstream);
            n.local_bindings = bindings;
            fed.descriptors.insert(id, n);
            let d = fed.touch(downstream)?;
            for p in d.structural_parents.iter_mut() {
                if *p == upstream {
                    *p = id;
                }
            }
            fed.ensure_constraints(&[id, downstream])?;
            Ok(id)
        })
    }

    /// Splices `b` out of every dependent's parent list. Refused when any
    /// dependent would resolve differently afterwards.
    pub fn retract(&mut self, b: BubbleId) -> Result<()> {
        let d = self.live(b)?;
        let parents = d.structural_parents.clone();
        let embedders = self.embedders(b);
        if !embedders.is_empty() {
            let names: Vec<String> = embedders.iter().map(ToString::to_string).collect();
            return Err(Error::NotRetractable { bubble: b, reason: format!("embedded by {}", names.join(", ")) });
        }
        let dependents = self.dependents(b);
        for dep in &dependents {
            self.active(*dep)?;
        }
        let mut before = BTreeMap::new();
        for dep in &dependents {
            before.insert(*dep, self.outcomes(*dep)?);
        }
        self.tick();
        let mut touched = dependents.clone();
        touched.push(b);
        self.atomically(&touched, |fed| {
            for dep in &dependents {
                let d = fed.touch(*dep)?;
                d.structural_parents = splice(&d.structural_parents, b, &parents);
            }
            for dep in &dependents {
                let changed = changed_paths(&before[dep], &fed.outcomes(*dep)?);
                if !changed.is_empty() {
                    let paths: Vec<String> = changed.iter().map(ToString::to_string).collect();
                    return Err(Error::NotRetractable {
                        bubble: b,
                        reason: format!("{dep} would change at {}", paths.join(", ")),
                    });
                }
            }
            fed.touch(b)?.state = BubbleState::Retracted;
            Ok(())
        })?;
        self.drop_pending(b);
        Ok(())
    }

    pub fn freeze(&mut self, b: BubbleId) -> Result<Digest> {
        let d = self.live(b)?;
        if d.state != BubbleState::Active {
            return Err(Error::NotActive { bubble: b, state: d.state });
        }
        self.tick();
        self.touch(b)?.state = BubbleState::Frozen;
        self.record_snapshot(b, SnapshotReason::Freeze)
    }

    /// Terminal state. The descriptor stays so provenance keeps resolving.
    pub fn destroy(&mut self, b: BubbleId) -> Result<()> {
        if self.descriptor(b)?.state == BubbleState::Destroyed {
            return Err(Error::Destroyed(b));
        }
        let mut dependents = self.dependents(b);
        dependents.extend(self.embedders(b));
        if !dependents.is_empty() {
            dependents.sort();
            dependents.dedup();
            return Err(Error::HasDependents { bubble: b, dependents });
        }
        self.tick();
        self.touch(b)?.state = BubbleState::Destroyed;
        self.drop_pending(b);
        Ok(())
    }

    pub fn constrain(&mut self, b: BubbleId, constraint: Constraint) -> Result<()> {
        self.active(b)?;
        if let Constraint::ForbidPath { glob } = &constraint {
            super::constraints::compile_glob(glob)?;
        }
        self.tick();
        self.atomically(&[b], |fed| {
            let d = fed.touch(b)?;
            if !d.constraints.contains(&constraint) {
                d.constraints.push(constraint);
            }
            fed.ensure_constraints(&[b])
        })
    }

    pub fn set_attribute(&mut self, b: BubbleId, key: &str, value: &str) -> Result<()> {
        self.active(b)?;
        self.tick();
        self.atomically(&[b], |fed| {
            fed.touch(b)?.attributes.insert(key.to_string(), value.to_string());
            fed.ensure_constraints(&[b])
        })
    }
}

pub(crate) fn changed_paths<V: PartialEq>(
    before: &BTreeMap<LogicalPath, V>,
    after: &BTreeMap<LogicalPath, V>,
) -> Vec<LogicalPath> {
    let keys: BTreeSet<&LogicalPath> = before.keys().chain(after.keys()).collect();
    keys.into_iter().filter(|k| before.get(*k) != after.get(*k)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BubbleState;

    fn p(s: &str) -> LogicalPath {
        s.parse().unwrap()
    }

    fn id(n: u8) -> BubbleId {
        BubbleId::from_bytes([n; 16])
    }

    #[test]
    fn splice_keeps_position_and_dedups() {
        assert_eq!(splice(&[id(1), id(2), id(3)], id(2), &[id(4), id(5)]), vec![id(1), id(4), id(5), id(3)]);
        assert_eq!(splice(&[id(1), id(2)], id(2), &[id(1)]), vec![id(1)]);
        assert_eq!(splice(&[id(2), id(1)], id(2), &[id(1), id(3)]), vec![id(1), id(3)]);
    }

    #[test]
    fn create_and_empty() {
        let mut fed = Federation::in_memory("t");
        let d1 = fed.store().put_blob(b"requirement 1").unwrap();
        let b1 = fed.create("collection#1", [(p("req/1"), d1)].into()).unwrap();
        assert_eq!(fed.resolve_digests(b1).unwrap(), [(p("req/1"), d1)].into());
        let empty = fed.create("empty", BTreeMap::new()).unwrap();
        assert!(fed.resolve(empty).unwrap().is_empty());
        let ghost = Digest::of(b"ghost");
        assert!(matches!(fed.create("x", [(p("a"), ghost)].into()), Err(Error::DanglingDigest { .. })));
    }

    #[test]
    fn derive_is_transparent_and_live() {
        let mut fed = Federation::in_memory("t");
        let d1 = fed.store().put_blob(b"v1").unwrap();
        let fix = fed.store().put_blob(b"v1 fixed").unwrap();
        let b1 = fed.create("b1", [(p("req/1"), d1)].into()).unwrap();
        let b2 = fed.derive(b1, "b2").unwrap();
        let b3 = fed.derive(b2, "b3").unwrap();
        assert_eq!(fed.resolve_digests(b3).unwrap(), fed.resolve_digests(b1).unwrap());
        fed.commit(b1, [(p("req/1"), Binding::Bound(fix))].into()).unwrap();
        assert_eq!(fed.resolve_digests(b3).unwrap()[&p("req/1")], fix);
    }

    #[test]
    fn derive_from_destroyed_fails() {
        let mut fed = Federation::in_memory("t");
        let b = fed.create("b", BTreeMap::new()).unwrap();
        fed.destroy(b).unwrap();
        assert!(matches!(fed.derive(b, "x"), Err(Error::ParentDestroyed(x)) if x == b));
        assert!(matches!(fed.clone_bubble(b, "x"), Err(Error::SourceDestroyed(x)) if x == b));
        assert!(matches!(fed.resolve(b), Err(Error::Destroyed(_))));
    }

    #[test]
    fn clone_copies_nothing_and_ignores_source_constraints() {
        let mut fed = Federation::in_memory("t");
        let d = fed.store().put_blob(b"content").unwrap();
        let t = fed.store().put_blob(b"test").unwrap();
        let src = fed.create("src", [(p("a"), d)].into()).unwrap();
        fed.constrain(src, Constraint::ForbidPath { glob: "test/**".into() }).unwrap();
        let blobs = fed.store().blob_count();
        let c = fed.clone_bubble(src, "clone").unwrap();
        assert_eq!(fed.store().blob_count(), blobs);
        assert_eq!(fed.resolve_digests(c).unwrap(), fed.resolve_digests(src).unwrap());
        fed.commit(c, [(p("test/x"), Binding::Bound(t))].into()).unwrap();
        assert!(fed.check_constraints(c).unwrap().is_empty());

        // a derived bubble does inherit it
        let derived = fed.derive(src, "derived").unwrap();
        assert!(matches!(
            fed.commit(derived, [(p("test/x"), Binding::Bound(t))].into()),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn clone_cut_keeps_deeper_ancestor_constraints() {
        let mut fed = Federation::in_memory("t");
        let t = fed.store().put_blob(b"t").unwrap();
        let root = fed.create("root", BTreeMap::new()).unwrap();
        fed.constrain(root, Constraint::ForbidPath { glob: "secret/*".into() }).unwrap();
        let mid = fed.derive(root, "mid").unwrap();
        fed.constrain(mid, Constraint::ForbidPath { glob: "test/*".into() }).unwrap();
        let c = fed.clone_bubble(mid, "c").unwrap();
        fed.commit(c, [(p("test/x"), Binding::Bound(t))].into()).unwrap();
        assert!(matches!(
            fed.commit(c, [(p("secret/x"), Binding::Bound(t))].into()),
            Err(Error::ConstraintViolation(v)) if v[0].declared_by == root
        ));
    }

    #[test]
    fn dissolve_rules() {
        let mut fed = Federation::in_memory("t");
        let d1 = fed.store().put_blob(b"1").unwrap();
        let da = fed.store().put_blob(b"1a").unwrap();
        let db = fed.store().put_blob(b"1b").unwrap();
        let b1 = fed.create("b1", [(p("req/1"), d1)].into()).unwrap();
        let b2 = fed.derive(b1, "b2").unwrap();
        fed.commit(b2, [(p("req/1a"), Binding::Bound(da))].into()).unwrap();
        let b3 = fed.clone_bubble(b2, "b3").unwrap();
        assert!(matches!(fed.dissolve(b3, b2), Err(Error::NotDissolvable { paths, .. }) if paths == vec![p("req/1a")]));
        fed.commit(b3, [(p("req/1a"), Binding::Bound(db))].into()).unwrap();
        let before = fed.resolve_digests(b3).unwrap();
        fed.dissolve(b3, b2).unwrap();
        let d = fed.descriptor(b3).unwrap();
        assert_eq!(d.structural_parents, vec![b1]);
        assert_eq!(d.historical_origins, vec![b2]);
        assert_eq!(fed.resolve_digests(b3).unwrap(), before);
        assert!(matches!(fed.dissolve(b3, b2), Err(Error::NotAdjacent { .. })));
    }

    #[test]
    fn dissolve_refuses_when_source_hides_a_path() {
        let mut fed = Federation::in_memory("t");
        let d1 = fed.store().put_blob(b"1").unwrap();
        let b1 = fed.create("b1", [(p("a"), d1)].into()).unwrap();
        let b2 = fed.derive(b1, "b2").unwrap();
        fed.commit(b2, [(p("a"), Binding::Tombstone)].into()).unwrap();
        let b3 = fed.derive(b2, "b3").unwrap();
        assert!(matches!(fed.dissolve(b3, b2), Err(Error::NotDissolvable { .. })));
        assert_eq!(fed.descriptor(b3).unwrap().structural_parents, vec![b2]);
    }

    #[test]
    fn embed_mounts_and_rejects_cycles() {
        let mut fed = Federation::in_memory("t");
        let da = fed.store().put_blob(b"a").unwrap();
        let g = fed.create("guest", [(p("a"), da)].into()).unwrap();
        let h = fed.create("host", BTreeMap::new()).unwrap();
        fed.embed(h, "lib/".parse().unwrap(), g).unwrap();
        assert_eq!(fed.resolve_digests(h).unwrap()[&p("lib/a")], da);
        assert!(matches!(fed.embed(h, Mount::root(), h), Err(Error::EmbedCycle { .. })));
        assert!(matches!(fed.embed(g, Mount::root(), h), Err(Error::EmbedCycle { .. })));
        let child = fed.derive(h, "child").unwrap();
        assert!(matches!(fed.embed(g, Mount::root(), child), Err(Error::EmbedCycle { .. })));
    }

    #[test]
    fn embed_violating_provenance_is_atomic() {
        let mut fed = Federation::in_memory("t");
        let dx = fed.store().put_blob(b"private").unwrap();
        let private = fed.create("private", [(p("x"), dx)].into()).unwrap();
        let g = fed.derive(private, "guest").unwrap();
        let h = fed.create("host", BTreeMap::new()).unwrap();
        fed.constrain(h, Constraint::ForbidProvenance { bubble: private }).unwrap();
        let before = fed.descriptor(h).unwrap().canonical_bytes();
        assert!(matches!(fed.embed(h, "lib".parse().unwrap(), g), Err(Error::ConstraintViolation(_))));
        assert_eq!(fed.descriptor(h).unwrap().canonical_bytes(), before);
    }

    #[test]
    fn insert_and_retract() {
        let mut fed = Federation::in_memory("t");
        let old = fed.store().put_blob(b"old").unwrap();
        let new = fed.store().put_blob(b"new").unwrap();
        let a = fed.create("a", [(p("f"), old)].into()).unwrap();
        let c = fed.derive(a, "c").unwrap();
        let view = fed.resolve_digests(c).unwrap();
        let n = fed.insert_between(a, c, "n", BTreeMap::new()).unwrap();
        assert_eq!(fed.descriptor(c).unwrap().structural_parents, vec![n]);
        assert_eq!(fed.resolve_digests(c).unwrap(), view);
        fed.retract(n).unwrap();
        assert_eq!(fed.descriptor(c).unwrap().structural_parents, vec![a]);
        assert_eq!(fed.descriptor(n).unwrap().state, BubbleState::Retracted);

        fed.commit(a, [(p("f"), Binding::Bound(new))].into()).unwrap();
        let pin = fed.insert_between(a, c, "pin", [(p("f"), Binding::Bound(old))].into()).unwrap();
        assert_eq!(fed.resolve_digests(c).unwrap()[&p("f")], old);
        assert!(matches!(fed.retract(pin), Err(Error::NotRetractable { .. })));
        assert!(matches!(fed.insert_between(c, a, "x", BTreeMap::new()), Err(Error::NotAdjacent { .. })));
    }

    #[test]
    fn freeze_and_destroy() {
        let mut fed = Federation::in_memory("t");
        let d = fed.store().put_blob(b"d").unwrap();
        let b = fed.create("b", [(p("a"), d)].into()).unwrap();
        let child = fed.derive(b, "child").unwrap();
        let snap = fed.freeze(b).unwrap();
        assert_eq!(fed.store().get_snapshot(&snap).unwrap().entries, fed.resolve_digests(b).unwrap());
        let before = fed.descriptor(b).unwrap().canonical_bytes();
        assert!(matches!(fed.commit(b, [(p("a"), Binding::Tombstone)].into()), Err(Error::FrozenBubble(_))));
        assert!(matches!(fed.set_attribute(b, "k", "v"), Err(Error::FrozenBubble(_))));
        assert_eq!(fed.descriptor(b).unwrap().canonical_bytes(), before);

        assert!(matches!(fed.destroy(b), Err(Error::HasDependents { dependents, .. }) if dependents == vec![child]));
        fed.destroy(child).unwrap();
        fed.destroy(b).unwrap();
        assert_eq!(fed.descriptor(b).unwrap().state, BubbleState::Destroyed);
    }

    #[test]
    fn require_attribute_violation_names_declarer() {
        let mut fed = Federation::in_memory("t");
        let root = fed.create("root", BTreeMap::new()).unwrap();
        fed.set_attribute(root, "quality", "high").unwrap();
        fed.constrain(root, Constraint::RequireAttribute { key: "quality".into(), value: "high".into() }).unwrap();
        // derive is checked against inherited constraints
        assert!(matches!(fed.derive(root, "child"), Err(Error::ConstraintViolation(_))));
        let c = fed.clone_bubble(root, "c").unwrap();
        fed.descriptors.get_mut(&c).unwrap().constraint_cut.clear();
        let v = fed.check_constraints(c).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].declared_by, root);
        assert!(matches!(v[0].constraint, Constraint::RequireAttribute { .. }));
    }
}
