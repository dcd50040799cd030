//! JSON values, object identifiers, content digests, and the canonical
//! byte encoding shared by every other module.

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use serde::Serialize as _;
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

pub use serde_json::Value;

/// A JSON object, i.e. the `Record` variant of [`Value`]. Keys are unique
/// and iterate in code-point order.
pub type Record = serde_json::Map<String, Value>;

/// Reserved field carrying an object's identity. Excluded from digests.
pub const ID_FIELD: &str = "_id";

pub fn parse_json(bytes: &[u8]) -> Result<Value> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Canonical encoding of a value: object keys sorted by code point, no
/// insignificant whitespace, numbers in shortest round-trip form, strings
/// minimally escaped, non-ASCII passed through as UTF-8.
///
/// This is the wire and content-addressing format, so it must be
/// byte-identical across replicas and runs. Non-finite numbers cannot be
/// constructed as a [`Value`] in the first place, so encoding is total.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    write_value(value, &mut out);
    out
}

/// Pretty encoding with four-space indentation and canonical key order.
pub fn pretty_json(value: &Value) -> String {
    let mut out = Vec::with_capacity(128);
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(out).expect("serializer emits UTF-8")
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            // integer variants print plainly; floats use the shortest
            // round-trip form (non-finite floats are unrepresentable)
            if let Some(u) = n.as_u64() {
                write!(out, "{u}").expect("write to Vec");
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("write to Vec");
            } else {
                let f = n.as_f64().expect("number is u64, i64, or finite f64");
                let mut buf = ryu::Buffer::new();
                out.extend_from_slice(buf.format_finite(f).as_bytes());
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(fields) => {
            // the map is backed by a sorted container, so iteration order
            // is already canonical (verified by unit test)
            out.push(b'{');
            for (i, (key, val)) in fields.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_value(val, out);
            }
            out.push(b'}');
        }
    }
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for c in s.chars() {
        match c {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\u{8}' => out.extend_from_slice(b"\\b"),
            '\t' => out.extend_from_slice(b"\\t"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\u{c}' => out.extend_from_slice(b"\\f"),
            '\r' => out.extend_from_slice(b"\\r"),
            c if (c as u32) < 0x20 => {
                write!(out, "\\u{:04x}", c as u32).expect("write to Vec");
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}

/// SHA-256 digest, rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        Digest(hasher.finalize().into())
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(Error::MalformedBlock(format!("invalid digest {s:?}")));
        }
        let bytes = hex::decode(s).expect("validated hex");
        Ok(Digest(bytes.try_into().expect("validated length")))
    }
}

/// Content digest of a value. For a record, the top-level `_id` field is
/// excluded, so versions of an object that differ only in identity hash
/// identically. The exclusion is not recursive.
pub fn digest_of(value: &Value) -> Digest {
    let mut out = Vec::with_capacity(64);
    match value {
        Value::Object(fields) => {
            out.push(b'{');
            let mut first = true;
            for (key, val) in fields {
                if key == ID_FIELD {
                    continue;
                }
                if !first {
                    out.push(b',');
                }
                first = false;
                write_string(key, &mut out);
                out.push(b':');
                write_value(val, &mut out);
            }
            out.push(b'}');
        }
        other => write_value(other, &mut out),
    }
    Digest::of_bytes(&out)
}

/// Identity of an object in the flat collection. Stable across versions
/// of the same object; always a non-empty string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        assert!(!id.is_empty(), "object ids must be non-empty");
        ObjectId(id)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({:?})", self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> Self {
        ObjectId::new(s)
    }
}

impl AsRef<str> for ObjectId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}
