//! Reconstruction of a document from replica state.
//!
//! The default mode consumes each object on first use: resolving a
//! reference removes the target from the working collection, so an
//! object moved to several places by concurrent edits appears exactly
//! once, and the strictly shrinking collection rules out cycles. The
//! legacy mode resolves references without consuming and is kept as a
//! regression witness: on states merged from concurrent reparenting it
//! reproduces the duplicated objects the updated mode exists to prevent.
//!
//! References to consumed, unknown, or tombstoned objects are dropped:
//! the element is omitted from arrays, the field from records. Fields
//! resolve in canonical key order and array elements left to right, so
//! reconstruction deterministically favors containers reached first.

use std::collections::{BTreeMap, BTreeSet};

use crate::array_merge::merged_view;
use crate::error::{Error, Result};
use crate::flatten::{anonymous_root_id, escape, ref_target, unescape};
use crate::revision::RevisionId;
use crate::state::ReplicaState;
use crate::value::{Digest, ObjectId, Record, Value, ID_FIELD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaterializeMode {
    #[default]
    Updated,
    Legacy,
}

/// Current state of one object.
#[derive(Clone, Debug, PartialEq)]
pub enum Resolved {
    /// The merged view over the object's live leaf revisions.
    Value(Value),
    /// The winning revision is a tombstone.
    Deleted,
}

/// Resolves one object: the winner's expanded value, with flat-marked
/// array fields merged across all live leaves.
pub fn resolve_value(state: &ReplicaState, id: &ObjectId) -> Result<Resolved> {
    Materializer::new(state, MaterializeMode::Updated).resolve(id)
}

/// Reconstructs the document rooted at the replica's root object.
pub fn unflatten(state: &ReplicaState, mode: MaterializeMode) -> Result<Value> {
    unflatten_with_reachable(state, mode).map(|(doc, _)| doc)
}

/// As [`unflatten`], also reporting which objects materialized into the
/// output. Commit uses the reachable set to detect deletions.
pub(crate) fn unflatten_with_reachable(
    state: &ReplicaState,
    mode: MaterializeMode,
) -> Result<(Value, BTreeSet<ObjectId>)> {
    let root = state.root_id().ok_or(Error::EmptyReplica)?;
    let mut m = Materializer::new(state, mode);
    let doc = m.materialize_root(&root)?;
    Ok((doc, m.reachable))
}

struct Materializer<'a> {
    state: &'a ReplicaState,
    mode: MaterializeMode,
    consumed: BTreeSet<ObjectId>,
    stack: Vec<ObjectId>,
    reachable: BTreeSet<ObjectId>,
    resolve_memo: BTreeMap<ObjectId, Resolved>,
    expand_memo: BTreeMap<Digest, Value>,
}

impl<'a> Materializer<'a> {
    fn new(state: &'a ReplicaState, mode: MaterializeMode) -> Self {
        Materializer {
            state,
            mode,
            consumed: BTreeSet::new(),
            stack: Vec::new(),
            reachable: BTreeSet::new(),
            resolve_memo: BTreeMap::new(),
            expand_memo: BTreeMap::new(),
        }
    }

    fn materialize_root(&mut self, root: &ObjectId) -> Result<Value> {
        if self.state.tree(root).is_none() {
            return Err(Error::UnknownObject(root.clone()));
        }
        self.consumed.insert(root.clone());
        match self.resolve(root)? {
            Resolved::Deleted => Err(Error::EmptyReplica),
            Resolved::Value(value) => {
                self.reachable.insert(root.clone());
                // an anonymous root gets the one identifier the path
                // derivation can produce for it; everything else had an
                // explicit `_id` to restore
                let identified = *root != anonymous_root_id();
                let value = with_identity(value, root, identified);
                Ok(self
                    .walk(&value)?
                    .expect("records always materialize to a value"))
            }
        }
    }

    fn resolve(&mut self, id: &ObjectId) -> Result<Resolved> {
        if let Some(hit) = self.resolve_memo.get(id) {
            return Ok(hit.clone());
        }
        let state = self.state;
        let tree = state
            .tree(id)
            .ok_or_else(|| Error::UnknownObject(id.clone()))?;
        let resolved = if tree.is_deleted()? {
            Resolved::Deleted
        } else {
            let winner = tree.winner()?;
            let winner_value = self.expand_record(winner.digest())?;
            let mut losers: Vec<&RevisionId> = tree
                .leaves()
                .into_iter()
                .filter(|leaf| *leaf != winner && !tree.is_tombstone(leaf))
                .collect();
            losers.sort_by(|a, b| b.cmp(a));
            let mut loser_values: Vec<Record> = Vec::with_capacity(losers.len());
            for leaf in &losers {
                loser_values.push(self.expand_record(leaf.digest())?);
            }
            let loser_refs: Vec<&Record> = loser_values.iter().collect();
            Resolved::Value(Value::Object(merged_view(&winner_value, &loser_refs)))
        };
        self.resolve_memo.insert(id.clone(), resolved.clone());
        Ok(resolved)
    }

    fn expand_record(&mut self, digest: &Digest) -> Result<Record> {
        let value = self.state.expand_with(digest, &mut self.expand_memo)?;
        match value {
            Value::Object(fields) => Ok(fields),
            _ => Err(Error::CorruptContent {
                digest: *digest,
                reason: "flattened object content must be a record".to_string(),
            }),
        }
    }

    fn walk(&mut self, value: &Value) -> Result<Option<Value>> {
        match value {
            Value::String(s) => match ref_target(s) {
                Some((target, identified)) if !target.is_empty() => {
                    self.resolve_reference(&ObjectId::new(target), identified)
                }
                Some(_) => Ok(None),
                None => Ok(Some(Value::String(unescape(s)?))),
            },
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    if let Some(v) = self.walk(item)? {
                        out.push(v);
                    }
                }
                Ok(Some(Value::Array(out)))
            }
            Value::Object(fields) => {
                let mut out = Record::new();
                for (key, v) in fields {
                    if let Some(w) = self.walk(v)? {
                        out.insert(key.clone(), w);
                    }
                }
                Ok(Some(Value::Object(out)))
            }
            other => Ok(Some(other.clone())),
        }
    }

    fn resolve_reference(&mut self, id: &ObjectId, identified: bool) -> Result<Option<Value>> {
        if self.state.tree(id).is_none() {
            return Ok(None);
        }
        match self.mode {
            MaterializeMode::Updated => {
                if !self.consumed.insert(id.clone()) {
                    return Ok(None);
                }
                match self.resolve(id)? {
                    Resolved::Deleted => Ok(None),
                    Resolved::Value(value) => {
                        self.reachable.insert(id.clone());
                        self.walk(&with_identity(value, id, identified))
                    }
                }
            }
            MaterializeMode::Legacy => {
                // the original procedure recurses without consuming and
                // does not terminate on cyclic merged states; dropping
                // in-progress references bounds it without affecting the
                // acyclic states the mode exists to demonstrate
                if self.stack.contains(id) {
                    return Ok(None);
                }
                match self.resolve(id)? {
                    Resolved::Deleted => Ok(None),
                    Resolved::Value(value) => {
                        self.stack.push(id.clone());
                        let walked = self.walk(&with_identity(value, id, identified));
                        self.stack.pop();
                        walked
                    }
                }
            }
        }
    }
}

/// Stored content carries no `_id`; put the object's identity back for
/// objects that had one. The escaped form unescapes during the walk.
fn with_identity(value: Value, id: &ObjectId, identified: bool) -> Value {
    if !identified {
        return value;
    }
    match value {
        Value::Object(mut fields) => {
            fields.insert(ID_FIELD.to_string(), Value::String(escape(id.as_str())));
            Value::Object(fields)
        }
        other => other,
    }
}
