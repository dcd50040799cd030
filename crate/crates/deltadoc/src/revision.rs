//! Revision identifiers, per-object revision trees, tombstones, and
//! deterministic winner selection.
//!
//! Every version of an object gets a revision id `seq-digest`, a child
//! carrying `seq + 1` of its parent. Concurrent edits fork the tree; the
//! winner is the maximum leaf under the total order (seq, then digest),
//! with tombstones competing like any other leaf. Trees merge by edge-set
//! union, which is idempotent, commutative, and associative.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde_json::json;

use crate::error::{Error, Result};
use crate::value::{digest_of, Digest, ObjectId, Value};

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RevisionId {
    seq: u64,
    digest: Digest,
}

impl RevisionId {
    /// First revision of an object.
    pub fn root(digest: Digest) -> Self {
        RevisionId { seq: 1, digest }
    }

    /// Successor of this revision with the given content digest.
    pub fn child(&self, digest: Digest) -> Self {
        RevisionId {
            seq: self.seq + 1,
            digest,
        }
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }
}

impl fmt::Display for RevisionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.seq, self.digest)
    }
}

impl fmt::Debug for RevisionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RevisionId({self})")
    }
}

impl FromStr for RevisionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (seq, digest) = s
            .split_once('-')
            .ok_or_else(|| Error::MalformedBlock(format!("invalid revision {s:?}")))?;
        let seq: u64 = seq
            .parse()
            .map_err(|_| Error::MalformedBlock(format!("invalid revision {s:?}")))?;
        if seq == 0 {
            return Err(Error::MalformedBlock(format!("invalid revision {s:?}")));
        }
        Ok(RevisionId {
            seq,
            digest: digest.parse()?,
        })
    }
}

/// The distinguished content marking an object's final version.
pub fn tombstone_value() -> Value {
    json!({ "_deleted": true })
}

/// Digest of the tombstone content; a fixed constant of the format.
pub fn tombstone_digest() -> Digest {
    static DIGEST: LazyLock<Digest> = LazyLock::new(|| digest_of(&tombstone_value()));
    *DIGEST
}

/// Version history of one object across all replicas: a forest of
/// parent/child edges plus the set of revisions that are tombstones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevisionTree {
    object: ObjectId,
    edges: BTreeSet<(Option<RevisionId>, RevisionId)>,
    tombstones: BTreeSet<RevisionId>,
}

impl RevisionTree {
    pub fn new(object: ObjectId) -> Self {
        RevisionTree {
            object,
            edges: BTreeSet::new(),
            tombstones: BTreeSet::new(),
        }
    }

    pub fn object(&self) -> &ObjectId {
        &self.object
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Records one edge. Re-recording an existing edge is a no-op, so
    /// application is idempotent. A parent that is not (yet) known as a
    /// child of anything is kept as a forward edge.
    pub fn record(&mut self, parent: Option<RevisionId>, child: RevisionId, tombstone: bool) {
        if tombstone {
            self.tombstones.insert(child.clone());
        }
        self.edges.insert((parent, child));
    }

    /// Edge-set and tombstone-set union with another tree for the same
    /// object.
    pub fn merge_from(&mut self, other: &RevisionTree) -> Result<()> {
        if self.object != other.object {
            return Err(Error::TreeObjectMismatch(
                self.object.clone(),
                other.object.clone(),
            ));
        }
        self.edges.extend(other.edges.iter().cloned());
        self.tombstones.extend(other.tombstones.iter().cloned());
        Ok(())
    }

    pub fn edges(&self) -> impl Iterator<Item = (Option<&RevisionId>, &RevisionId)> {
        self.edges.iter().map(|(p, c)| (p.as_ref(), c))
    }

    pub fn is_tombstone(&self, revision: &RevisionId) -> bool {
        self.tombstones.contains(revision)
    }

    /// Revisions with no outgoing edge, in ascending order.
    pub fn leaves(&self) -> Vec<&RevisionId> {
        let parents: BTreeSet<&RevisionId> =
            self.edges.iter().filter_map(|(p, _)| p.as_ref()).collect();
        let mut leaves: BTreeSet<&RevisionId> = BTreeSet::new();
        for (_, child) in &self.edges {
            if !parents.contains(child) {
                leaves.insert(child);
            }
        }
        leaves.into_iter().collect()
    }

    /// The winning revision: the maximum leaf under (seq, digest). A pure
    /// function of the leaf set, so it is independent of insertion and
    /// merge order.
    pub fn winner(&self) -> Result<&RevisionId> {
        self.leaves()
            .into_iter()
            .max()
            .ok_or_else(|| Error::EmptyTree(self.object.clone()))
    }

    /// True iff the winning revision is a tombstone.
    pub fn is_deleted(&self) -> Result<bool> {
        Ok(self.tombstones.contains(self.winner()?))
    }
}

/// Union of two trees as a new value.
pub fn merge_trees(a: &RevisionTree, b: &RevisionTree) -> Result<RevisionTree> {
    let mut merged = a.clone();
    merged.merge_from(b)?;
    Ok(merged)
}
