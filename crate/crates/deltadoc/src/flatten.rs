//! Recursive decomposition of a document into a flat collection of
//! objects keyed by identity, with nested objects replaced by string
//! references.
//!
//! Extraction is opt-in per key: an object value is moved into the
//! collection only when the nearest enclosing record key ends with the
//! flat mark. Objects inside arrays inherit the marking of the array's
//! key. Objects under unmarked keys stay inline, but flat-marked keys
//! inside them are still processed.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::value::{ObjectId, Record, Value, ID_FIELD};

/// Key suffix that enables extraction of object values (U+266D).
pub const FLAT_MARK: char = '\u{266d}';

/// Prefix marking an escaped literal string inside flattened content.
const ESCAPE_PREFIX: char = '\u{1}';
/// Prefix marking an object reference inside flattened content.
const REF_PREFIX: char = '\u{2}';
/// Follows the reference prefix when the referenced object had no `_id`
/// field of its own; such objects materialize without one.
const ANONYMOUS_MARK: char = '\u{3}';

/// Separators used when deriving identifiers from document paths.
const PATH_PAIR_SEP: char = '\u{1f}';
const PATH_SEG_SEP: char = '\u{1e}';

/// The flat collection: object identity to flattened record.
pub type FlatCollection = BTreeMap<ObjectId, Value>;

/// True iff the key's final scalar is the flat mark.
pub fn is_flat_key(key: &str) -> bool {
    key.ends_with(FLAT_MARK)
}

/// Escapes a literal string so it can never be mistaken for an object
/// reference. Injective: distinct inputs stay distinct.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 1);
    out.push(ESCAPE_PREFIX);
    out.push_str(s);
    out
}

/// Inverse of [`escape`]. A reference-prefixed or bare string here means
/// the collection was corrupted.
pub fn unescape(s: &str) -> Result<String> {
    match s.strip_prefix(ESCAPE_PREFIX) {
        Some(rest) => Ok(rest.to_string()),
        None => Err(Error::NotEscaped(s.to_string())),
    }
}

/// Renders an object reference for storage inside flattened content.
/// `identified` records whether the object carried an explicit `_id`,
/// which the materializer restores on reconstruction.
pub fn object_ref(id: &ObjectId, identified: bool) -> String {
    let mut out = String::with_capacity(id.as_str().len() + 2);
    out.push(REF_PREFIX);
    if !identified {
        out.push(ANONYMOUS_MARK);
    }
    out.push_str(id.as_str());
    out
}

/// The referenced object id and whether it was identified, if the string
/// is a reference.
pub fn ref_target(s: &str) -> Option<(&str, bool)> {
    let rest = s.strip_prefix(REF_PREFIX)?;
    match rest.strip_prefix(ANONYMOUS_MARK) {
        Some(id) => Some((id, false)),
        None => Some((rest, true)),
    }
}

/// Identifier for one flattened object: the string value of its `_id`
/// field when present, otherwise derived from the document path plus the
/// ordinal among anonymous siblings at that path.
pub fn make_identifier(fields: &Record, path: &[String], sibling_ordinal: usize) -> Result<ObjectId> {
    if let Some(id_value) = fields.get(ID_FIELD) {
        return match id_value.as_str() {
            Some(s) if !s.is_empty() => Ok(ObjectId::new(s)),
            _ => Err(Error::InvalidIdField),
        };
    }
    let mut rendered = String::new();
    for (i, segment) in path.iter().enumerate() {
        if i > 0 {
            rendered.push(PATH_SEG_SEP);
        }
        rendered.push_str(segment);
    }
    rendered.push(PATH_SEG_SEP);
    rendered.push_str(&sibling_ordinal.to_string());
    Ok(ObjectId::new(rendered))
}

/// Flattens a document. The top-level record is always extracted and its
/// identifier returned as the root.
pub fn flatten(doc: &Value) -> Result<(ObjectId, FlatCollection)> {
    let fields = doc.as_object().ok_or(Error::RootNotRecord)?;
    let mut flattener = Flattener::default();
    let root = flattener.extract(fields, &[])?;
    Ok((root, flattener.collection))
}

/// Identifier a root record without an `_id` field always receives; the
/// root's identified-ness is recovered by comparing against this.
pub(crate) fn anonymous_root_id() -> ObjectId {
    make_identifier(&Record::new(), &[], 0).expect("empty record has a path identifier")
}

#[derive(Default)]
struct Flattener {
    collection: FlatCollection,
    // ordinal of the next anonymous object per rendered path; arrays do
    // not extend the path, so the counter disambiguates siblings
    anonymous: HashMap<Vec<String>, usize>,
}

impl Flattener {
    fn extract(&mut self, fields: &Record, path: &[String]) -> Result<ObjectId> {
        let id = self.identify(fields, path)?;
        let mut flat = Record::new();
        for (key, value) in fields {
            let mut child_path = path.to_vec();
            child_path.push(format!("{id}{PATH_PAIR_SEP}{key}"));
            flat.insert(
                key.clone(),
                self.flatten_value(value, &child_path, is_flat_key(key))?,
            );
        }
        self.collection.insert(id.clone(), Value::Object(flat));
        Ok(id)
    }

    fn flatten_value(&mut self, value: &Value, path: &[String], marked: bool) -> Result<Value> {
        match value {
            Value::String(s) => Ok(Value::String(escape(s))),
            Value::Array(items) => {
                let flat: Result<Vec<Value>> = items
                    .iter()
                    .map(|item| self.flatten_value(item, path, marked))
                    .collect();
                Ok(Value::Array(flat?))
            }
            Value::Object(fields) => {
                if marked {
                    let identified = fields.contains_key(ID_FIELD);
                    let id = self.extract(fields, path)?;
                    Ok(Value::String(object_ref(&id, identified)))
                } else {
                    let mut inline = Record::new();
                    for (key, v) in fields {
                        let mut child_path = path.to_vec();
                        child_path.push(key.clone());
                        inline.insert(
                            key.clone(),
                            self.flatten_value(v, &child_path, is_flat_key(key))?,
                        );
                    }
                    Ok(Value::Object(inline))
                }
            }
            other => Ok(other.clone()),
        }
    }

    fn identify(&mut self, fields: &Record, path: &[String]) -> Result<ObjectId> {
        let ordinal = if fields.contains_key(ID_FIELD) {
            0
        } else {
            let counter = self.anonymous.entry(path.to_vec()).or_insert(0);
            let current = *counter;
            *counter += 1;
            current
        };
        make_identifier(fields, path, ordinal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn flat_key_detection() {
        assert!(is_flat_key("children\u{266d}"));
        assert!(!is_flat_key("children"));
        assert!(is_flat_key("\u{266d}"));
        assert!(!is_flat_key(""));
        assert!(!is_flat_key("\u{266d}x"));
    }

    #[test]
    fn escape_round_trips() {
        assert_eq!(escape("hello"), "\u{1}hello");
        assert_eq!(unescape("\u{1}hello").unwrap(), "hello");
        assert_eq!(unescape(&escape("")).unwrap(), "");
        let doubled = escape("\u{1}x");
        assert_eq!(doubled, "\u{1}\u{1}x");
        assert_eq!(unescape(&doubled).unwrap(), "\u{1}x");
    }

    #[test]
    fn unescape_rejects_references_and_bare_strings() {
        assert!(unescape("\u{2}A").is_err());
        assert!(unescape("plain").is_err());
    }

    #[test]
    fn reference_encoding() {
        let id = ObjectId::new("A");
        assert_eq!(object_ref(&id, true), "\u{2}A");
        assert_eq!(object_ref(&id, false), "\u{2}\u{3}A");
        assert_eq!(ref_target("\u{2}A"), Some(("A", true)));
        assert_eq!(ref_target("\u{2}\u{3}A"), Some(("A", false)));
        assert_eq!(ref_target("\u{1}A"), None);
    }

    #[test]
    fn identifier_prefers_id_field() {
        let fields = json!({"_id": "A", "k": 1});
        let id = make_identifier(fields.as_object().unwrap(), &["whatever".into()], 3).unwrap();
        assert_eq!(id.as_str(), "A");
    }

    #[test]
    fn identifier_rejects_bad_id_fields() {
        let not_string = json!({"_id": 7});
        assert!(matches!(
            make_identifier(not_string.as_object().unwrap(), &[], 0),
            Err(Error::InvalidIdField)
        ));
        let empty = json!({"_id": ""});
        assert!(matches!(
            make_identifier(empty.as_object().unwrap(), &[], 0),
            Err(Error::InvalidIdField)
        ));
    }

    #[test]
    fn flatten_unordered_children() {
        // three objects referenced as fields from the root
        let doc = json!({
            "A\u{266d}": {"_id": "A"},
            "B\u{266d}": {"_id": "B"},
            "C\u{266d}": {"_id": "C"},
        });
        let (root, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 4);
        let root_value = collection[&root].as_object().unwrap();
        assert_eq!(root_value["A\u{266d}"], json!("\u{2}A"));
        assert_eq!(root_value["B\u{266d}"], json!("\u{2}B"));
        assert_eq!(root_value["C\u{266d}"], json!("\u{2}C"));
        let a = collection[&ObjectId::new("A")].as_object().unwrap();
        assert_eq!(a["_id"], json!("\u{1}A"));
    }

    #[test]
    fn flatten_ordered_children() {
        let doc = json!({
            "children\u{266d}": [{"_id": "A"}, {"_id": "B"}, {"_id": "C"}],
        });
        let (root, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 4);
        let root_value = collection[&root].as_object().unwrap();
        assert_eq!(
            root_value["children\u{266d}"],
            json!(["\u{2}A", "\u{2}B", "\u{2}C"])
        );
    }

    #[test]
    fn flatten_empty_record() {
        let (root, collection) = flatten(&json!({})).unwrap();
        assert_eq!(collection.len(), 1);
        assert_eq!(collection[&root], json!({}));
    }

    #[test]
    fn flatten_rejects_non_record_roots() {
        assert!(matches!(flatten(&json!([1, 2])), Err(Error::RootNotRecord)));
        assert!(matches!(flatten(&json!("x")), Err(Error::RootNotRecord)));
    }

    #[test]
    fn flatten_is_deterministic() {
        let doc = json!({
            "children\u{266d}": [{}, {"x": 1}],
            "plain": {"nested\u{266d}": {}},
        });
        let (root_a, c_a) = flatten(&doc).unwrap();
        let (root_b, c_b) = flatten(&doc).unwrap();
        assert_eq!(root_a, root_b);
        assert_eq!(c_a, c_b);
    }

    #[test]
    fn anonymous_siblings_get_distinct_ids() {
        let doc = json!({"items\u{266d}": [{}, {}]});
        let (root, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 3);
        let refs = collection[&root].as_object().unwrap()["items\u{266d}"]
            .as_array()
            .unwrap()
            .clone();
        assert_ne!(refs[0], refs[1]);
    }

    #[test]
    fn nested_arrays_inherit_the_marking() {
        let doc = json!({"k\u{266d}": [[{"_id": "P"}]]});
        let (root, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 2);
        let root_value = collection[&root].as_object().unwrap();
        assert_eq!(root_value["k\u{266d}"], json!([["\u{2}P"]]));
    }

    #[test]
    fn inline_records_are_kept_but_their_marked_keys_extract() {
        let doc = json!({
            "meta": {"title": "x", "owner\u{266d}": {"_id": "O"}},
        });
        let (root, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 2);
        let root_value = collection[&root].as_object().unwrap();
        let meta = root_value["meta"].as_object().unwrap();
        assert_eq!(meta["title"], json!("\u{1}x"));
        assert_eq!(meta["owner\u{266d}"], json!("\u{2}O"));
        assert!(collection.contains_key(&ObjectId::new("O")));
    }

    #[test]
    fn extraction_count_matches_reachable_marked_records() {
        let doc = json!({
            "a\u{266d}": {"_id": "X", "inner\u{266d}": [{"_id": "Y"}]},
            "b": {"_id": "ignored-inline"},
            "c\u{266d}": "strings are not extracted",
        });
        let (_, collection) = flatten(&doc).unwrap();
        // root + X + Y; the inline record and the string stay in place
        assert_eq!(collection.len(), 3);
    }

    proptest! {
        #[test]
        fn escape_round_trip_property(s in "\\PC*") {
            prop_assert_eq!(unescape(&escape(&s)).unwrap(), s);
        }

        #[test]
        fn escaped_strings_are_never_references(s in ".*") {
            prop_assert!(ref_target(&escape(&s)).is_none());
        }

        #[test]
        fn escape_is_injective(a in ".*", b in ".*") {
            if a != b {
                prop_assert_ne!(escape(&a), escape(&b));
            }
        }
    }
}
