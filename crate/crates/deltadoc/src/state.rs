//! Replica state and its lifecycle: committing documents as delta
//! blocks, applying blocks from other replicas, and melding.
//!
//! A block is the idempotent unit of replication. It carries the content
//! of every revision it creates, so a replica holding a block and its
//! ancestry can always materialize; blocks applied out of order leave
//! forward tree edges and missing patch bases that only surface as
//! errors if still unresolved at read time. State only grows: contents,
//! trees, and the applied-block set are never shrunk by any operation.

use std::collections::{BTreeMap, BTreeSet};

use crate::array_merge::{diff_array, patch_array, EditScript};
use crate::error::{Error, Result};
use crate::flatten::{flatten, ref_target};
use crate::materialize::{self, MaterializeMode};
use crate::revision::{tombstone_digest, RevisionId, RevisionTree};
use crate::value::{canonical_json, digest_of, Digest, ObjectId, Record, Value, ID_FIELD};

pub type BlockId = Digest;

/// One revision created by a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Change {
    pub object: ObjectId,
    pub parent: Option<RevisionId>,
    pub revision: RevisionId,
    pub deleted: bool,
}

/// An idempotent delta: new object contents keyed by digest plus the new
/// revision-tree edges. Identified by the digest of its canonical
/// serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaBlock {
    id: BlockId,
    objects: BTreeMap<Digest, Value>,
    changes: Vec<Change>,
    parents: BTreeSet<BlockId>,
}

impl DeltaBlock {
    fn assemble(
        objects: BTreeMap<Digest, Value>,
        mut changes: Vec<Change>,
        parents: BTreeSet<BlockId>,
    ) -> DeltaBlock {
        changes.sort_by(|a, b| (&a.object, &a.revision).cmp(&(&b.object, &b.revision)));
        let mut block = DeltaBlock {
            id: Digest::of_bytes(b""),
            objects,
            changes,
            parents,
        };
        block.id = Digest::of_bytes(&block.canonical_bytes());
        block
    }

    pub fn id(&self) -> &BlockId {
        &self.id
    }

    pub fn objects(&self) -> &BTreeMap<Digest, Value> {
        &self.objects
    }

    pub fn changes(&self) -> &[Change] {
        &self.changes
    }

    pub fn parents(&self) -> &BTreeSet<BlockId> {
        &self.parents
    }

    /// The pack-file payload. Keys: "changes", "objects", "parents".
    pub fn to_payload(&self) -> Value {
        let changes: Vec<Value> = self
            .changes
            .iter()
            .map(|c| {
                Value::Array(vec![
                    Value::String(c.object.as_str().to_string()),
                    c.parent
                        .as_ref()
                        .map(|p| Value::String(p.to_string()))
                        .unwrap_or(Value::Null),
                    Value::String(c.revision.to_string()),
                    Value::Bool(c.deleted),
                ])
            })
            .collect();
        let mut objects = Record::new();
        for (digest, stored) in &self.objects {
            objects.insert(digest.to_hex(), stored.clone());
        }
        let parents: Vec<Value> = self
            .parents
            .iter()
            .map(|p| Value::String(p.to_hex()))
            .collect();
        let mut payload = Record::new();
        payload.insert("changes".to_string(), Value::Array(changes));
        payload.insert("objects".to_string(), Value::Object(objects));
        payload.insert("parents".to_string(), Value::Array(parents));
        Value::Object(payload)
    }

    /// Exact file bytes; the block id is the SHA-256 of these.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&self.to_payload())
    }

    pub fn from_payload(payload: &Value) -> Result<DeltaBlock> {
        let bad = |reason: &str| Error::MalformedBlock(reason.to_string());
        let fields = payload.as_object().ok_or_else(|| bad("payload is not an object"))?;
        if fields.len() != 3 {
            return Err(bad("payload must have exactly changes, objects, parents"));
        }

        let mut objects = BTreeMap::new();
        for (hex, stored) in fields
            .get("objects")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("missing objects map"))?
        {
            objects.insert(hex.parse::<Digest>()?, stored.clone());
        }

        let mut changes = Vec::new();
        for entry in fields
            .get("changes")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing changes list"))?
        {
            let parts = entry
                .as_array()
                .filter(|p| p.len() == 4)
                .ok_or_else(|| bad("change is not a quadruple"))?;
            let object = parts[0]
                .as_str()
                .filter(|s| !s.is_empty())
                .map(ObjectId::new)
                .ok_or_else(|| bad("change object id"))?;
            let parent = match &parts[1] {
                Value::Null => None,
                Value::String(s) => Some(s.parse::<RevisionId>()?),
                _ => return Err(bad("change parent")),
            };
            let revision = parts[2]
                .as_str()
                .ok_or_else(|| bad("change revision"))?
                .parse::<RevisionId>()?;
            let deleted = parts[3].as_bool().ok_or_else(|| bad("change deleted flag"))?;
            changes.push(Change {
                object,
                parent,
                revision,
                deleted,
            });
        }

        let mut parents = BTreeSet::new();
        for entry in fields
            .get("parents")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing parents list"))?
        {
            parents.insert(
                entry
                    .as_str()
                    .ok_or_else(|| bad("parent block id"))?
                    .parse::<Digest>()?,
            );
        }

        Ok(DeltaBlock::assemble(objects, changes, parents))
    }
}

/// Full CRDT state of one replica.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplicaState {
    trees: BTreeMap<ObjectId, RevisionTree>,
    contents: BTreeMap<Digest, Value>,
    blocks: BTreeMap<BlockId, DeltaBlock>,
    root: Option<ObjectId>,
}

impl ReplicaState {
    pub fn new() -> Self {
        ReplicaState::default()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tree(&self, id: &ObjectId) -> Option<&RevisionTree> {
        self.trees.get(id)
    }

    pub fn trees(&self) -> impl Iterator<Item = &RevisionTree> {
        self.trees.values()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DeltaBlock> {
        self.blocks.values()
    }

    pub fn has_block(&self, id: &BlockId) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Applied blocks that no applied block names as a parent.
    pub fn heads(&self) -> BTreeSet<BlockId> {
        let mut heads: BTreeSet<BlockId> = self.blocks.keys().copied().collect();
        for block in self.blocks.values() {
            for parent in &block.parents {
                heads.remove(parent);
            }
        }
        heads
    }

    /// The root object. Usually remembered from commits or a previous
    /// discovery; otherwise derived as the unique object that no stored
    /// content references.
    pub fn root_id(&self) -> Option<ObjectId> {
        self.root.clone().or_else(|| self.discover_root())
    }

    fn discover_root(&self) -> Option<ObjectId> {
        let mut referenced: BTreeSet<&str> = BTreeSet::new();
        for stored in self.contents.values() {
            collect_refs(stored, &mut referenced);
        }
        self.trees
            .keys()
            .find(|id| !referenced.contains(id.as_str()))
            .cloned()
    }

    pub(crate) fn refresh_root(&mut self) {
        if self.root.is_none() {
            self.root = self.discover_root();
        }
    }

    /// Content of one version, with any embedded edit scripts expanded
    /// through their base chain.
    pub fn expand(&self, digest: &Digest) -> Result<Value> {
        let mut memo = BTreeMap::new();
        self.expand_with(digest, &mut memo)
    }

    pub(crate) fn expand_with(
        &self,
        digest: &Digest,
        memo: &mut BTreeMap<Digest, Value>,
    ) -> Result<Value> {
        let mut in_progress = BTreeSet::new();
        self.expand_inner(digest, memo, &mut in_progress)
    }

    fn expand_inner(
        &self,
        digest: &Digest,
        memo: &mut BTreeMap<Digest, Value>,
        in_progress: &mut BTreeSet<Digest>,
    ) -> Result<Value> {
        if let Some(v) = memo.get(digest) {
            return Ok(v.clone());
        }
        if !in_progress.insert(*digest) {
            return Err(Error::CorruptContent {
                digest: *digest,
                reason: "patch base chain forms a cycle".to_string(),
            });
        }
        let stored = self
            .contents
            .get(digest)
            .ok_or(Error::MissingContent(*digest))?;
        let value = match stored.as_object() {
            Some(fields) => {
                let mut out = Record::new();
                for (key, v) in fields {
                    if EditScript::is_script_value(v) {
                        let script = EditScript::from_value(v)?;
                        let base = self.expand_inner(&script.base, memo, in_progress)?;
                        let base_array = base
                            .as_object()
                            .and_then(|f| f.get(key))
                            .and_then(Value::as_array)
                            .ok_or_else(|| Error::CorruptContent {
                                digest: *digest,
                                reason: format!("patch base has no array at key {key:?}"),
                            })?;
                        out.insert(key.clone(), Value::Array(patch_array(base_array, &script)?));
                    } else {
                        out.insert(key.clone(), v.clone());
                    }
                }
                Value::Object(out)
            }
            None => stored.clone(),
        };
        in_progress.remove(digest);
        memo.insert(*digest, value.clone());
        Ok(value)
    }

    /// Commits a document: flattens it, compares every flattened object
    /// against the current winner, and turns the differences into a new
    /// block which is applied to this state before being returned.
    ///
    /// Objects that the previous materialization reached but that are
    /// absent from the new flattening get tombstone revisions. Array
    /// fields are stored as edit scripts against the parent version
    /// whenever that is smaller than the full array. Returns `None` when
    /// nothing changed.
    pub fn commit(&mut self, doc: &Value) -> Result<Option<DeltaBlock>> {
        let (new_root, flat) = flatten(doc)?;
        if let Some(existing) = self.root_id() {
            if existing != new_root {
                return Err(Error::RootMismatch(existing, new_root));
            }
        }

        let previously_reachable: BTreeSet<ObjectId> = if self.trees.is_empty() {
            BTreeSet::new()
        } else {
            materialize::unflatten_with_reachable(self, MaterializeMode::Updated)?.1
        };

        let mut objects: BTreeMap<Digest, Value> = BTreeMap::new();
        let mut changes: Vec<Change> = Vec::new();
        let mut expand_memo: BTreeMap<Digest, Value> = BTreeMap::new();

        for (id, value) in &flat {
            let digest = digest_of(value);
            // stored content excludes `_id`, so the digest is a function
            // of the stored bytes and objects differing only in identity
            // share one entry; the materializer restores identities
            let content = strip_id(value);
            match self.trees.get(id) {
                None => {
                    changes.push(Change {
                        object: id.clone(),
                        parent: None,
                        revision: RevisionId::root(digest),
                        deleted: false,
                    });
                    objects.entry(digest).or_insert(content);
                }
                Some(tree) => {
                    let winner = tree.winner()?.clone();
                    if winner.digest() == &digest {
                        continue;
                    }
                    objects.entry(digest).or_insert_with(|| {
                        self.stored_form(&winner, &content, &mut expand_memo)
                    });
                    changes.push(Change {
                        object: id.clone(),
                        parent: Some(winner.clone()),
                        revision: winner.child(digest),
                        deleted: false,
                    });
                }
            }
        }

        for id in previously_reachable {
            if flat.contains_key(&id) {
                continue;
            }
            let Some(tree) = self.trees.get(&id) else {
                continue;
            };
            if tree.is_deleted()? {
                continue;
            }
            let winner = tree.winner()?.clone();
            changes.push(Change {
                object: id,
                parent: Some(winner.clone()),
                revision: winner.child(tombstone_digest()),
                deleted: true,
            });
        }

        if changes.is_empty() {
            return Ok(None);
        }
        let block = DeltaBlock::assemble(objects, changes, self.heads());
        self.apply_block(&block)?;
        if self.root.is_none() {
            self.root = Some(new_root);
        }
        Ok(Some(block))
    }

    /// Picks the storage form for a changed object: the full record, or
    /// the record with array fields replaced by edit scripts against the
    /// parent version when the script serializes smaller.
    fn stored_form(
        &self,
        parent: &RevisionId,
        value: &Value,
        memo: &mut BTreeMap<Digest, Value>,
    ) -> Value {
        let Some(fields) = value.as_object() else {
            return value.clone();
        };
        let Ok(parent_value) = self.expand_with(parent.digest(), memo) else {
            // parent content unresolved on this replica; store in full
            return value.clone();
        };
        let Some(parent_fields) = parent_value.as_object() else {
            return value.clone();
        };
        let mut stored = fields.clone();
        for (key, v) in fields {
            let (Some(new_array), Some(base_array)) = (
                v.as_array(),
                parent_fields.get(key).and_then(Value::as_array),
            ) else {
                continue;
            };
            let script = diff_array(*parent.digest(), base_array, new_array);
            if script.serialized_len() < canonical_json(v).len() {
                stored.insert(key.clone(), script.to_value());
            }
        }
        Value::Object(stored)
    }

    /// Applies a block. Idempotent: re-applying a known block is a
    /// no-op. Blocks may arrive in any order; the result is independent
    /// of it.
    pub fn apply_block(&mut self, block: &DeltaBlock) -> Result<()> {
        let recomputed = Digest::of_bytes(&block.canonical_bytes());
        if recomputed != block.id {
            return Err(Error::MalformedBlock(format!(
                "block id {} does not match its content digest {recomputed}",
                block.id
            )));
        }
        if self.blocks.contains_key(&block.id) {
            return Ok(());
        }
        for (digest, stored) in &block.objects {
            let fields = stored.as_object().ok_or_else(|| {
                Error::MalformedBlock(format!("content for {digest} is not an object"))
            })?;
            if fields.contains_key(ID_FIELD) {
                return Err(Error::MalformedBlock(format!(
                    "content for {digest} must not carry an `_id` field"
                )));
            }
            if fields.values().any(EditScript::is_script_value) {
                for v in fields.values().filter(|v| EditScript::is_script_value(v)) {
                    EditScript::from_value(v)?;
                }
            } else if digest_of(stored) != *digest {
                return Err(Error::MalformedBlock(format!(
                    "content digest mismatch for {digest}"
                )));
            }
        }

        for (digest, stored) in &block.objects {
            self.insert_content(*digest, stored);
        }
        for change in &block.changes {
            let tree = self
                .trees
                .entry(change.object.clone())
                .or_insert_with(|| RevisionTree::new(change.object.clone()));
            tree.record(change.parent.clone(), change.revision.clone(), change.deleted);
        }
        self.blocks.insert(block.id, block.clone());
        Ok(())
    }

    // Content union with a deterministic join for the rare case where
    // two blocks carry the same digest in different storage forms (one
    // full, one as a patch): prefer the full form, then the smaller
    // canonical serialization. This keeps states equal under any block
    // application order.
    fn insert_content(&mut self, digest: Digest, stored: &Value) {
        use std::collections::btree_map::Entry;
        match self.contents.entry(digest) {
            Entry::Vacant(entry) => {
                entry.insert(stored.clone());
            }
            Entry::Occupied(mut entry) => {
                let existing = entry.get();
                if existing == stored {
                    return;
                }
                let keep_new = match (is_delta_form(existing), is_delta_form(stored)) {
                    (false, _) => false,
                    (true, false) => true,
                    (true, true) => {
                        let old = canonical_json(existing);
                        let new = canonical_json(stored);
                        (new.len(), new) < (old.len(), old)
                    }
                };
                if keep_new {
                    entry.insert(stored.clone());
                }
            }
        }
    }

    /// Pulls every block of `other` that this replica does not know yet.
    /// Returns the number of newly applied blocks. Melding in either
    /// direction converges both replicas to equal states.
    pub fn meld(&mut self, other: &ReplicaState) -> Result<usize> {
        if let (Some(a), Some(b)) = (self.root_id(), other.root_id()) {
            if a != b {
                return Err(Error::RootMismatch(a, b));
            }
        }
        let mut added = 0;
        for (id, block) in &other.blocks {
            if !self.blocks.contains_key(id) {
                self.apply_block(block)?;
                added += 1;
            }
        }
        self.refresh_root();
        Ok(added)
    }
}

fn is_delta_form(value: &Value) -> bool {
    value
        .as_object()
        .map(|fields| fields.values().any(EditScript::is_script_value))
        .unwrap_or(false)
}

fn strip_id(value: &Value) -> Value {
    match value.as_object() {
        Some(fields) if fields.contains_key(ID_FIELD) => {
            let mut stripped = fields.clone();
            stripped.remove(ID_FIELD);
            Value::Object(stripped)
        }
        _ => value.clone(),
    }
}

fn collect_refs<'a>(value: &'a Value, out: &mut BTreeSet<&'a str>) {
    match value {
        Value::String(s) => {
            if let Some((target, _)) = ref_target(s) {
                out.insert(target);
            }
        }
        Value::Array(items) => {
            for item in items {
                collect_refs(item, out);
            }
        }
        Value::Object(fields) => {
            for v in fields.values() {
                collect_refs(v, out);
            }
        }
        _ => {}
    }
}
