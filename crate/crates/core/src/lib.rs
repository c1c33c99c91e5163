//! Live design containers ("bubbles") over a content-addressed store.
//!
//! A bubble binds logical paths to blob digests and inherits everything it
//! does not bind from its structural parents and embedded bubbles. Commits
//! send change signals down the derivation graph, where each receiver
//! accepts, merges or declines them.

pub mod engine;
pub mod error;
pub mod governor;
pub mod model;
pub mod repo;
pub mod scenario;
pub mod store;
pub mod stress;

pub use engine::{Federation, FederationState};
pub use error::{Error, Result, Violation};
pub use model::{Binding, BubbleDescriptor, BubbleId, BubbleState, Constraint, LogicalPath, Mount, SignalId};
pub use repo::Repository;
pub use store::{Digest, Store};
pub use stress::{ChangeSet, Decision, SignalKind, StressSignal};
