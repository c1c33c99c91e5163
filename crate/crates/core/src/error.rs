use std::fmt;

use crate::model::{BubbleId, BubbleState, LogicalPath, SignalId};
use crate::store::Digest;

/// A constraint that failed to hold over a bubble's resolved view.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    /// The bubble whose view was checked.
    pub bubble: BubbleId,
    /// The bubble that declared the constraint.
    pub declared_by: BubbleId,
    pub constraint: crate::model::Constraint,
    pub path: Option<LogicalPath>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{} (declared by {}) at {}: {}", self.constraint, self.declared_by, p, self.message),
            None => write!(f, "{} (declared by {}): {}", self.constraint, self.declared_by, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("storage I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("blob {0} not found")]
    NotFound(Digest),
    #[error("snapshot {0} not found")]
    SnapshotNotFound(Digest),
    #[error("digest {digest} bound at {path} is not stored")]
    DanglingDigest { path: String, digest: Digest },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("invalid logical path {0:?}")]
    InvalidPath(String),
    #[error("unknown bubble {0}")]
    UnknownBubble(BubbleId),
    #[error("bubble {0} is destroyed")]
    Destroyed(BubbleId),
    #[error("parent {0} is destroyed")]
    ParentDestroyed(BubbleId),
    #[error("clone source {0} is destroyed")]
    SourceDestroyed(BubbleId),
    #[error("bubble {bubble} is {state}, operation needs an active bubble")]
    NotActive { bubble: BubbleId, state: BubbleState },
    #[error("bubble {0} is frozen")]
    FrozenBubble(BubbleId),
    #[error("operation on {0} would create a structural cycle")]
    StructuralCycle(BubbleId),
    #[error("embedding {guest} into {host} would create a cycle")]
    EmbedCycle { host: BubbleId, guest: BubbleId },
    #[error("constraint violation: {}", join(.0))]
    ConstraintViolation(Vec<Violation>),
    #[error("{source_bubble} still provides elements of {bubble}: {}", join(.paths))]
    NotDissolvable { bubble: BubbleId, source_bubble: BubbleId, paths: Vec<LogicalPath> },
    #[error("{upstream} is not a structural parent of {downstream}")]
    NotAdjacent { upstream: BubbleId, downstream: BubbleId },
    #[error("{bubble} cannot be retracted: {reason}")]
    NotRetractable { bubble: BubbleId, reason: String },
    #[error("{bubble} has live dependents: {}", join(.dependents))]
    HasDependents { bubble: BubbleId, dependents: Vec<BubbleId> },
    #[error("no pending signal {signal} at {bubble}")]
    UnknownSignal { bubble: BubbleId, signal: SignalId },
    #[error("illegal decision: {0}")]
    IllegalDecision(String),
    #[error("merge must cover exactly the conflicted paths (missing: [{}], unexpected: [{}])", join(.missing), join(.unexpected))]
    MergeIncomplete { missing: Vec<LogicalPath>, unexpected: Vec<LogicalPath> },
    #[error("unknown governor {0:?}")]
    UnknownGovernor(String),
    #[error("governor {governor} does not own {bubble}")]
    NotOwner { governor: String, bubble: BubbleId },
    #[error("blob transfer corrupted: expected {expected}, got {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("network not quiescent after {0} ticks")]
    TimedOut(u64),
    #[error("line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("no bubble matches {0:?}")]
    UnknownRef(String),
    #[error("{:?} matches several bubbles: {}", .0, join(.1))]
    AmbiguousRef(String, Vec<BubbleId>),
    #[error("repository not initialized at {0}")]
    NoRepository(String),
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl Error {
    /// Stable machine-readable code, used by the CLI and in audit output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "IO",
            Error::NotFound(_) => "NOT_FOUND",
            Error::SnapshotNotFound(_) => "SNAPSHOT_NOT_FOUND",
            Error::DanglingDigest { .. } => "DANGLING_DIGEST",
            Error::Corrupt(_) => "CORRUPT",
            Error::InvalidPath(_) => "INVALID_PATH",
            Error::UnknownBubble(_) => "UNKNOWN_BUBBLE",
            Error::Destroyed(_) => "DESTROYED",
            Error::ParentDestroyed(_) => "PARENT_DESTROYED",
            Error::SourceDestroyed(_) => "SOURCE_DESTROYED",
            Error::NotActive { .. } => "NOT_ACTIVE",
            Error::FrozenBubble(_) => "FROZEN_BUBBLE",
            Error::StructuralCycle(_) => "STRUCTURAL_CYCLE",
            Error::EmbedCycle { .. } => "EMBED_CYCLE",
            Error::ConstraintViolation(_) => "CONSTRAINT_VIOLATION",
            Error::NotDissolvable { .. } => "NOT_DISSOLVABLE",
            Error::NotAdjacent { .. } => "NOT_ADJACENT",
            Error::NotRetractable { .. } => "NOT_RETRACTABLE",
            Error::HasDependents { .. } => "HAS_DEPENDENTS",
            Error::UnknownSignal { .. } => "UNKNOWN_SIGNAL",
            Error::IllegalDecision(_) => "ILLEGAL_DECISION",
            Error::MergeIncomplete { .. } => "MERGE_INCOMPLETE",
            Error::UnknownGovernor(_) => "UNKNOWN_GOVERNOR",
            Error::NotOwner { .. } => "NOT_OWNER",
            Error::DigestMismatch { .. } => "DIGEST_MISMATCH",
            Error::TimedOut(_) => "TIMED_OUT",
            Error::Script { .. } => "SCRIPT_ERROR",
            Error::UnknownRef(_) => "UNKNOWN_REF",
            Error::AmbiguousRef(..) => "AMBIGUOUS_REF",
            Error::NoRepository(_) => "NO_REPOSITORY",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
