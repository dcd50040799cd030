use std::path::PathBuf;

use crate::value::{Digest, ObjectId};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("document root must be a JSON object")]
    RootNotRecord,

    #[error("`_id` field must be a non-empty string")]
    InvalidIdField,

    #[error("string is not an escaped literal: {0:?}")]
    NotEscaped(String),

    #[error("revision trees belong to different objects: {0:?} vs {1:?}")]
    TreeObjectMismatch(ObjectId, ObjectId),

    #[error("revision tree for {0:?} is empty")]
    EmptyTree(ObjectId),

    #[error("replica has no root object")]
    EmptyReplica,

    #[error("unknown object: {0:?}")]
    UnknownObject(ObjectId),

    #[error("missing content for digest {0}")]
    MissingContent(Digest),

    #[error("edit script does not consume the base array exactly")]
    PatchLengthMismatch,

    #[error("corrupt content for digest {digest}: {reason}")]
    CorruptContent { digest: Digest, reason: String },

    #[error("malformed delta block: {0}")]
    MalformedBlock(String),

    #[error("replica roots differ: {0:?} vs {1:?}")]
    RootMismatch(ObjectId, ObjectId),

    #[error("pack file {path}: {reason}")]
    PackFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
