//! Bubble descriptors and the value types they are built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::store::Digest;

macro_rules! hex_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name([u8; 16]);

        impl $name {
            pub const fn from_bytes(bytes: [u8; 16]) -> Self {
                $name(bytes)
            }

            /// First 128 bits of SHA-256 over the given parts.
            pub fn derive(parts: &[&[u8]]) -> Self {
                let mut hasher = Sha256::new();
                for part in parts {
                    hasher.update((part.len() as u64).to_be_bytes());
                    hasher.update(part);
                }
                let full: [u8; 32] = hasher.finalize().into();
                let mut out = [0u8; 16];
                out.copy_from_slice(&full[..16]);
                $name(out)
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                &self.0
            }

            pub fn short(&self) -> String {
                hex::encode(&self.0[..4])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.short())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let mut out = [0u8; 16];
                if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(Error::Corrupt(format!("not a 32-char lowercase hex id: {s:?}")));
                }
                hex::decode_to_slice(s, &mut out).map_err(|e| Error::Corrupt(format!("{s:?}: {e}")))?;
                Ok($name(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(
    /// 128-bit bubble identifier, hex encoded. Never reused.
    BubbleId
);
hex_id!(
    /// Identifier of a stress signal. A change signal shares its id with
    /// the change set it carries.
    SignalId
);

/// A `/`-separated path of non-empty UTF-8 segments, none of them `.` or `..`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct LogicalPath(String);

impl LogicalPath {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn starts_with(&self, prefix: &Mount) -> bool {
        match prefix.as_path() {
            None => true,
            Some(p) => self.0 == p.0 || (self.0.starts_with(&p.0) && self.0.as_bytes()[p.0.len()] == b'/'),
        }
    }
}

impl FromStr for LogicalPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() || s.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
            return Err(Error::InvalidPath(s.to_string()));
        }
        Ok(LogicalPath(s.to_string()))
    }
}

impl<'de> Deserialize<'de> for LogicalPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for LogicalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for LogicalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Mount prefix for an embed. The empty mount is the namespace root; a
/// trailing `/` is accepted and dropped.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct Mount(String);

impl Mount {
    pub fn root() -> Self {
        Mount(String::new())
    }

    pub fn as_path(&self) -> Option<LogicalPath> {
        (!self.0.is_empty()).then(|| LogicalPath(self.0.clone()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn join(&self, path: &LogicalPath) -> LogicalPath {
        if self.0.is_empty() {
            path.clone()
        } else {
            LogicalPath(format!("{}/{}", self.0, path.0))
        }
    }
}

impl FromStr for Mount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.strip_suffix('/').unwrap_or(s);
        if trimmed.is_empty() {
            return Ok(Mount::root());
        }
        let path: LogicalPath = trimmed.parse()?;
        Ok(Mount(path.0))
    }
}

impl<'de> Deserialize<'de> for Mount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Mount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("/")
        } else {
            write!(f, "{}/", self.0)
        }
    }
}

impl fmt::Debug for Mount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mount({:?})", self.0)
    }
}

/// A local binding. `Bound` overrides anything inherited at the path;
/// `Tombstone` hides it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Bound(Digest),
    Tombstone,
}

impl Binding {
    pub fn digest(&self) -> Option<Digest> {
        match self {
            Binding::Bound(d) => Some(*d),
            Binding::Tombstone => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BubbleState {
    Active,
    Frozen,
    Retracted,
    Destroyed,
}

impl BubbleState {
    /// Frozen and active bubbles take part in the live graph; retracted and
    /// destroyed ones are kept only for provenance.
    pub fn is_live(self) -> bool {
        matches!(self, BubbleState::Active | BubbleState::Frozen)
    }
}

impl fmt::Display for BubbleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BubbleState::Active => "active",
            BubbleState::Frozen => "frozen",
            BubbleState::Retracted => "retracted",
            BubbleState::Destroyed => "destroyed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// No resolved element may be provided by this bubble.
    ForbidProvenance { bubble: BubbleId },
    /// No resolved path may match this glob (`*` within a segment, `**`
    /// across segments).
    ForbidPath { glob: String },
    /// The checked bubble must carry this attribute value.
    RequireAttribute { key: String, value: String },
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::ForbidProvenance { bubble } => write!(f, "forbid-provenance({bubble})"),
            Constraint::ForbidPath { glob } => write!(f, "forbid-path({glob})"),
            Constraint::RequireAttribute { key, value } => write!(f, "require-attribute({key}={value})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embed {
    pub mount: Mount,
    pub guest: BubbleId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleDescriptor {
    pub id: BubbleId,
    pub name: String,
    pub local_bindings: BTreeMap<LogicalPath, Binding>,
    /// Resolution precedence after local bindings and embeds: first wins.
    pub structural_parents: Vec<BubbleId>,
    /// Clone lineage. Never consulted by resolution.
    pub historical_origins: Vec<BubbleId>,
    pub embeds: Vec<Embed>,
    pub constraints: Vec<Constraint>,
    /// Bubbles whose own constraints are not inherited.
    pub constraint_cut: BTreeSet<BubbleId>,
    pub attributes: BTreeMap<String, String>,
    pub state: BubbleState,
    pub seq: u64,
    pub pending: Vec<SignalId>,
}

impl BubbleDescriptor {
    pub fn new(id: BubbleId, name: impl Into<String>) -> Self {
        BubbleDescriptor {
            id,
            name: name.into(),
            local_bindings: BTreeMap::new(),
            structural_parents: Vec::new(),
            historical_origins: Vec::new(),
            embeds: Vec::new(),
            constraints: Vec::new(),
            constraint_cut: BTreeSet::new(),
            attributes: BTreeMap::new(),
            state: BubbleState::Active,
            seq: 1,
            pending: Vec::new(),
        }
    }

    /// Deterministic serialization: JSON with object keys sorted, arrays in
    /// their significant order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self).into_bytes()
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("bubble descriptor: {e}")))
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    /// Every bubble this descriptor depends on for resolution.
    pub fn resolution_inputs(&self) -> impl Iterator<Item = BubbleId> + '_ {
        self.structural_parents.iter().copied().chain(self.embeds.iter().map(|e| e.guest))
    }
}

/// Compact JSON with object keys sorted. Going through `serde_json::Value`
/// sorts keys because its map is ordered.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("model types always serialize");
    serde_json::to_string(&value).expect("values always serialize")
}

/// Pretty-printed variant of [`canonical_json`], used for exports.
pub fn canonical_json_pretty<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("model types always serialize");
    serde_json::to_string_pretty(&value).expect("values always serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelViolation {
    DanglingParent { bubble: BubbleId, parent: BubbleId },
    DanglingEmbed { bubble: BubbleId, guest: BubbleId },
    DeadReference { bubble: BubbleId, target: BubbleId, state: BubbleState },
    StructuralCycle { bubble: BubbleId },
    EmbedCycle { bubble: BubbleId },
    MixedCycle { bubble: BubbleId },
    DuplicateParent { bubble: BubbleId, parent: BubbleId },
    FrozenMutation { bubble: BubbleId },
}

/// Checks `b` against the rest of the federation. `previous`, when given,
/// is the last published version of the same bubble; a frozen bubble whose
/// structure differs from it is reported as mutated.
pub fn validate(
    b: &BubbleDescriptor,
    universe: &BTreeMap<BubbleId, BubbleDescriptor>,
    previous: Option<&BubbleDescriptor>,
) -> Vec<ModelViolation> {
    let mut out = Vec::new();
    let lookup = |id: &BubbleId| if *id == b.id { Some(b) } else { universe.get(id) };

    if b.state.is_live() {
        let mut seen = BTreeSet::new();
        for p in &b.structural_parents {
            if !seen.insert(*p) {
                out.push(ModelViolation::DuplicateParent { bubble: b.id, parent: *p });
            }
            match lookup(p) {
                None => out.push(ModelViolation::DanglingParent { bubble: b.id, parent: *p }),
                Some(d) if !d.state.is_live() => {
                    out.push(ModelViolation::DeadReference { bubble: b.id, target: *p, state: d.state })
                }
                _ => {}
            }
        }
        for e in &b.embeds {
            match lookup(&e.guest) {
                None => out.push(ModelViolation::DanglingEmbed { bubble: b.id, guest: e.guest }),
                Some(d) if !d.state.is_live() => {
                    out.push(ModelViolation::DeadReference { bubble: b.id, target: e.guest, state: d.state })
                }
                _ => {}
            }
        }
    }

    let structural = |d: &BubbleDescriptor| d.structural_parents.clone();
    let embeds = |d: &BubbleDescriptor| d.embeds.iter().map(|e| e.guest).collect::<Vec<_>>();
    let both = |d: &BubbleDescriptor| d.resolution_inputs().collect::<Vec<_>>();
    if on_cycle(b, &lookup, &structural) {
        out.push(ModelViolation::StructuralCycle { bubble: b.id });
    } else if on_cycle(b, &lookup, &embeds) {
        out.push(ModelViolation::EmbedCycle { bubble: b.id });
    } else if on_cycle(b, &lookup, &both) {
        out.push(ModelViolation::MixedCycle { bubble: b.id });
    }

    if let Some(prev) = previous {
        if prev.state == BubbleState::Frozen
            && (prev.local_bindings != b.local_bindings
                || prev.structural_parents != b.structural_parents
                || prev.embeds != b.embeds
                || prev.constraints != b.constraints)
        {
            out.push(ModelViolation::FrozenMutation { bubble: b.id });
        }
    }
    out
}

fn on_cycle<'a>(
    start: &'a BubbleDescriptor,
    lookup: &impl Fn(&BubbleId) -> Option<&'a BubbleDescriptor>,
    edges: &impl Fn(&BubbleDescriptor) -> Vec<BubbleId>,
) -> bool {
    let mut stack = edges(start);
    let mut seen = BTreeSet::new();
    while let Some(next) = stack.pop() {
        if next == start.id {
            return true;
        }
        if !seen.insert(next) {
            continue;
        }
        if let Some(d) = lookup(&next) {
            stack.extend(edges(d));
        }
    }
    false
}

/// Deterministic source of fresh bubble ids: SHA-256 over a per-federation
/// nonce and a counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    nonce: String,
    next: u64,
}

impl IdAllocator {
    pub fn new(nonce: [u8; 16]) -> Self {
        IdAllocator { nonce: hex::encode(nonce), next: 0 }
    }

    pub fn seeded(label: &str) -> Self {
        IdAllocator::new(*BubbleId::derive(&[b"nonce", label.as_bytes()]).as_bytes())
    }

    pub fn random() -> Self {
        IdAllocator::new(rand::random())
    }

    pub fn next_id(&mut self) -> BubbleId {
        let id = BubbleId::derive(&[b"bubble", self.nonce.as_bytes(), &self.next.to_be_bytes()]);
        self.next += 1;
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u8) -> BubbleId {
        BubbleId::from_bytes([n; 16])
    }

    #[test]
    fn path_rules() {
        for ok in ["a", "req/1", "src/lib/x.rs", "ümlaut/ß"] {
            assert!(ok.parse::<LogicalPath>().is_ok(), "{ok}");
        }
        for bad in ["", "/a", "a/", "a//b", "./a", "a/../b", ".."] {
            assert!(matches!(bad.parse::<LogicalPath>(), Err(Error::InvalidPath(_))), "{bad}");
        }
        let m: Mount = "lib/".parse().unwrap();
        assert_eq!(m.join(&"a".parse().unwrap()).as_str(), "lib/a");
        assert_eq!("".parse::<Mount>().unwrap(), Mount::root());
        let p: LogicalPath = "lib/a".parse().unwrap();
        assert!(p.starts_with(&m));
        assert!(!"libx/a".parse::<LogicalPath>().unwrap().starts_with(&m));
    }

    #[test]
    fn fresh_bubble_is_valid() {
        let b = BubbleDescriptor::new(id(1), "fresh");
        assert!(validate(&b, &BTreeMap::new(), None).is_empty());
    }

    #[test]
    fn structural_cycle_and_dangling_parent() {
        let mut a = BubbleDescriptor::new(id(1), "a");
        let mut b = BubbleDescriptor::new(id(2), "b");
        a.structural_parents.push(b.id);
        b.structural_parents.push(a.id);
        let universe: BTreeMap<_, _> = [(a.id, a.clone()), (b.id, b.clone())].into();
        assert!(validate(&a, &universe, None).contains(&ModelViolation::StructuralCycle { bubble: a.id }));

        let mut c = BubbleDescriptor::new(id(3), "c");
        c.structural_parents.push(id(9));
        assert_eq!(
            validate(&c, &BTreeMap::new(), None),
            vec![ModelViolation::DanglingParent { bubble: c.id, parent: id(9) }]
        );
    }

    #[test]
    fn mixed_cycle_detected() {
        let mut a = BubbleDescriptor::new(id(1), "a");
        let mut b = BubbleDescriptor::new(id(2), "b");
        a.structural_parents.push(b.id);
        b.embeds.push(Embed { mount: Mount::root(), guest: a.id });
        let universe: BTreeMap<_, _> = [(a.id, a.clone()), (b.id, b.clone())].into();
        assert_eq!(validate(&a, &universe, None), vec![ModelViolation::MixedCycle { bubble: a.id }]);
    }

    #[test]
    fn frozen_mutation_reported() {
        let mut prev = BubbleDescriptor::new(id(1), "f");
        prev.state = BubbleState::Frozen;
        let mut next = prev.clone();
        next.local_bindings.insert("x".parse().unwrap(), Binding::Tombstone);
        next.seq += 1;
        assert_eq!(
            validate(&next, &BTreeMap::new(), Some(&prev)),
            vec![ModelViolation::FrozenMutation { bubble: prev.id }]
        );
    }

    #[test]
    fn canonical_bytes_are_deterministic_and_sorted() {
        let mut a = BubbleDescriptor::new(id(1), "a");
        a.attributes.insert("team".into(), "t1".into());
        a.attributes.insert("quality".into(), "asil-b".into());
        let mut b = BubbleDescriptor::new(id(1), "a");
        b.attributes.insert("quality".into(), "asil-b".into());
        b.attributes.insert("team".into(), "t1".into());
        assert_eq!(a.canonical_bytes(), a.canonical_bytes());
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());

        let text = String::from_utf8(a.canonical_bytes()).unwrap();
        let keys = ["\"attributes\"", "\"constraint_cut\"", "\"embeds\"", "\"id\"", "\"seq\"", "\"state\""];
        let positions: Vec<_> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");

        b.seq += 1;
        assert_ne!(a.canonical_bytes(), b.canonical_bytes());
        assert_eq!(BubbleDescriptor::from_canonical_bytes(&b.canonical_bytes()).unwrap(), b);
    }

    #[test]
    fn id_allocator_is_deterministic() {
        let mut x = IdAllocator::seeded("clone_dissolve");
        let mut y = IdAllocator::seeded("clone_dissolve");
        let a: Vec<_> = (0..5).map(|_| x.next_id()).collect();
        let b: Vec<_> = (0..5).map(|_| y.next_id()).collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 5);
        assert_eq!(a[0].to_string().len(), 32);
    }
}
