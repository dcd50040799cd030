//! A delta-state CRDT for arbitrary JSON documents with support for
//! moving objects anywhere in the hierarchy.
//!
//! Documents are decomposed into a grow-only collection of immutable
//! object versions addressed by content digest, with per-object revision
//! trees tracking history across replicas. Replicas exchange idempotent
//! delta blocks and converge regardless of delivery order. Reads
//! reconstruct the document by resolving references consume-once, so an
//! object relocated by concurrent edits materializes exactly once and no
//! reference cycle can form.
//!
//! The [`harness`] module drives multi-replica simulations that verify
//! the no-duplication, no-loss, and no-cycle guarantees under randomized
//! concurrent moves.

pub mod array_merge;
pub mod error;
pub mod flatten;
pub mod harness;
pub mod materialize;
pub mod pack;
pub mod revision;
pub mod state;
pub mod value;

pub use array_merge::{diff_array, merge_arrays, merged_view, patch_array, EditOp, EditScript};
pub use error::{Error, Result};
pub use flatten::{escape, flatten, is_flat_key, unescape, FlatCollection, FLAT_MARK};
pub use materialize::{resolve_value, unflatten, MaterializeMode, Resolved};
pub use pack::{load_pack, save_pack};
pub use revision::{merge_trees, tombstone_digest, tombstone_value, RevisionId, RevisionTree};
pub use state::{BlockId, Change, DeltaBlock, ReplicaState};
pub use value::{canonical_json, digest_of, parse_json, pretty_json, Digest, ObjectId, Record, Value};
