//! Non-destructive array merging across conflicting versions, and
//! diff/patch scripts for storing large arrays compactly.

use serde_json::json;

use crate::error::{Error, Result};
use crate::flatten::is_flat_key;
use crate::value::{canonical_json, Digest, Record, Value};

/// Merges a losing version `source` into the winning version `target`:
/// every element of `source` absent from `target` is inserted near its
/// neighbours, the relative order of `target` is preserved, and nothing
/// held once by each side is duplicated. Elements compare by value;
/// reference strings therefore compare by the object they name.
pub fn merge_arrays(source: &[Value], target: &[Value]) -> Vec<Value> {
    let mut target: Vec<Value> = target.to_vec();
    let index_of = |target: &[Value], e: &Value| target.iter().position(|x| x == e);

    // position of the first shared element, and how many source elements
    // precede it without appearing in target
    let mut insert_at = 0usize;
    let mut missing_prefix = 0usize;
    for e in source {
        if let Some(idx) = index_of(&target, e) {
            insert_at = idx;
            break;
        }
        missing_prefix += 1;
    }

    let mut seen = 0usize;
    for e in source {
        if let Some(idx) = index_of(&target, e) {
            insert_at = idx;
        } else if seen < missing_prefix {
            target.insert(insert_at, e.clone());
            missing_prefix = seen;
        } else {
            insert_at += 1;
            target.insert(insert_at, e.clone());
        }
        seen += 1;
    }
    target
}

/// Combines the values of all live leaf revisions of one object into a
/// single view. The winner's record is authoritative: only flat-marked
/// array fields present in it are merged, folding in the same key's
/// array from every losing leaf. `losers` must already be ordered by
/// descending revision id.
pub fn merged_view(winner: &Record, losers: &[&Record]) -> Record {
    let mut out = winner.clone();
    for (key, value) in winner {
        if !is_flat_key(key) {
            continue;
        }
        let Some(base) = value.as_array() else {
            continue;
        };
        let mut acc = base.clone();
        for loser in losers {
            if let Some(Value::Array(source)) = loser.get(key) {
                acc = merge_arrays(source, &acc);
            }
        }
        out.insert(key.clone(), Value::Array(acc));
    }
    out
}

/// One step of an [`EditScript`].
#[derive(Clone, Debug, PartialEq)]
pub enum EditOp {
    Retain(usize),
    Delete(usize),
    Insert(Vec<Value>),
}

/// A patch describing one array as edits against the array stored at the
/// same key inside the base version identified by `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditScript {
    pub base: Digest,
    pub ops: Vec<EditOp>,
}

/// Computes an LCS-based script such that
/// `patch_array(base, script) == new`.
pub fn diff_array(base_digest: Digest, base: &[Value], new: &[Value]) -> EditScript {
    let n = base.len();
    let m = new.len();
    let mut lengths = vec![vec![0u32; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            lengths[i + 1][j + 1] = if base[i] == new[j] {
                lengths[i][j] + 1
            } else {
                lengths[i + 1][j].max(lengths[i][j + 1])
            };
        }
    }

    // walk back from the full table, then reverse into forward order
    enum Step {
        Keep,
        Del,
        Ins,
    }
    let mut steps = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let step = if i == 0 {
            Step::Ins
        } else if j == 0 {
            Step::Del
        } else if base[i - 1] == new[j - 1] {
            Step::Keep
        } else if lengths[i][j - 1] >= lengths[i - 1][j] {
            Step::Ins
        } else {
            Step::Del
        };
        match step {
            Step::Keep => {
                i -= 1;
                j -= 1;
            }
            Step::Ins => j -= 1,
            Step::Del => i -= 1,
        }
        steps.push(step);
    }

    let mut ops: Vec<EditOp> = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    for step in steps.into_iter().rev() {
        match step {
            Step::Keep => {
                if let Some(EditOp::Retain(count)) = ops.last_mut() {
                    *count += 1;
                } else {
                    ops.push(EditOp::Retain(1));
                }
                i += 1;
                j += 1;
            }
            Step::Del => {
                if let Some(EditOp::Delete(count)) = ops.last_mut() {
                    *count += 1;
                } else {
                    ops.push(EditOp::Delete(1));
                }
                i += 1;
            }
            Step::Ins => {
                if let Some(EditOp::Insert(values)) = ops.last_mut() {
                    values.push(new[j].clone());
                } else {
                    ops.push(EditOp::Insert(vec![new[j].clone()]));
                }
                j += 1;
            }
        }
    }
    debug_assert_eq!((i, j), (base.len(), new.len()));
    EditScript {
        base: base_digest,
        ops,
    }
}

/// Applies a script to its base array. Retain/Delete must consume the
/// base exactly; anything else signals a corrupted block.
pub fn patch_array(base: &[Value], script: &EditScript) -> Result<Vec<Value>> {
    let mut out = Vec::with_capacity(base.len());
    let mut pos = 0usize;
    for op in &script.ops {
        match op {
            EditOp::Retain(n) => {
                if pos + n > base.len() {
                    return Err(Error::PatchLengthMismatch);
                }
                out.extend_from_slice(&base[pos..pos + n]);
                pos += n;
            }
            EditOp::Delete(n) => {
                if pos + n > base.len() {
                    return Err(Error::PatchLengthMismatch);
                }
                pos += n;
            }
            EditOp::Insert(values) => out.extend(values.iter().cloned()),
        }
    }
    if pos != base.len() {
        return Err(Error::PatchLengthMismatch);
    }
    Ok(out)
}

impl EditScript {
    /// Storage form: `{"base": <digest>, "patch": [["r",n]|["d",n]|["i",[..]], ..]}`.
    pub fn to_value(&self) -> Value {
        let ops: Vec<Value> = self
            .ops
            .iter()
            .map(|op| match op {
                EditOp::Retain(n) => json!(["r", n]),
                EditOp::Delete(n) => json!(["d", n]),
                EditOp::Insert(values) => json!(["i", values]),
            })
            .collect();
        json!({ "base": self.base.to_hex(), "patch": ops })
    }

    /// Cheap shape test used to tell scripts apart from literal content.
    /// Flattened records cannot collide with this shape because all their
    /// strings carry an escape or reference prefix, while `base` here is
    /// a bare hex string.
    pub fn is_script_value(value: &Value) -> bool {
        let Some(fields) = value.as_object() else {
            return false;
        };
        if fields.len() != 2 {
            return false;
        }
        let (Some(base), Some(patch)) = (fields.get("base"), fields.get("patch")) else {
            return false;
        };
        matches!(base.as_str(), Some(s) if s.len() == 64
            && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
            && patch.is_array()
    }

    /// Strict parse of the storage form. Call only after
    /// [`EditScript::is_script_value`]; malformed interiors are errors,
    /// not literals.
    pub fn from_value(value: &Value) -> Result<EditScript> {
        let bad = |reason: &str| Error::MalformedBlock(format!("edit script: {reason}"));
        let fields = value.as_object().ok_or_else(|| bad("not an object"))?;
        let base: Digest = fields
            .get("base")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing base"))?
            .parse()?;
        let patch = fields
            .get("patch")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing patch"))?;
        let mut ops = Vec::with_capacity(patch.len());
        for entry in patch {
            let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| bad("op is not a pair"))?;
            let tag = pair[0].as_str().ok_or_else(|| bad("op tag is not a string"))?;
            match tag {
                "r" | "d" => {
                    let n = pair[1]
                        .as_u64()
                        .ok_or_else(|| bad("op count is not an unsigned integer"))?;
                    let n = usize::try_from(n).map_err(|_| bad("op count overflows"))?;
                    ops.push(if tag == "r" {
                        EditOp::Retain(n)
                    } else {
                        EditOp::Delete(n)
                    });
                }
                "i" => {
                    let values = pair[1]
                        .as_array()
                        .ok_or_else(|| bad("insert payload is not an array"))?;
                    ops.push(EditOp::Insert(values.clone()));
                }
                other => return Err(bad(&format!("unknown op tag {other:?}"))),
            }
        }
        Ok(EditScript { base, ops })
    }

    pub fn serialized_len(&self) -> usize {
        canonical_json(&self.to_value()).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatten::object_ref;
    use crate::value::ObjectId;
    use proptest::prelude::*;

    fn refs(ids: &[&str]) -> Vec<Value> {
        ids.iter()
            .map(|id| Value::String(object_ref(&ObjectId::new(*id))))
            .collect()
    }

    #[test]
    fn merge_retains_both_concurrent_insertions() {
        // one side appended D, the other inserted E after A
        let merged = merge_arrays(&refs(&["A", "B", "C", "D"]), &refs(&["A", "E", "B", "C"]));
        assert_eq!(merged, refs(&["A", "E", "B", "C", "D"]));
    }

    #[test]
    fn merge_of_equal_arrays_is_identity() {
        let t = refs(&["A", "B"]);
        assert_eq!(merge_arrays(&t, &t), t);
    }

    #[test]
    fn merge_with_everything_already_present() {
        let merged = merge_arrays(&refs(&["B", "C"]), &refs(&["D", "C", "B", "A"]));
        assert_eq!(merged, refs(&["D", "C", "B", "A"]));
    }

    #[test]
    fn merge_into_empty_target() {
        let merged = merge_arrays(&refs(&["A", "B", "C"]), &[]);
        assert_eq!(merged, refs(&["A", "B", "C"]));
    }

    #[test]
    fn merge_prefix_insertion() {
        // source moved C before B and prepended D
        let merged = merge_arrays(&refs(&["D", "C", "B", "A"]), &refs(&["B", "C"]));
        assert_eq!(merged, refs(&["B", "A", "D", "C"]));
    }

    #[test]
    fn merged_view_single_leaf_is_unchanged() {
        let winner = serde_json::json!({
            "children\u{266d}": refs(&["A", "B"]),
            "title": "\u{1}t",
        });
        let view = merged_view(winner.as_object().unwrap(), &[]);
        assert_eq!(Value::Object(view), winner);
    }

    #[test]
    fn merged_view_combines_sibling_arrays() {
        // deletion on one side, reordering plus insertion on the other
        let winner = serde_json::json!({ "children\u{266d}": refs(&["D", "C", "B", "A"]) });
        let loser = serde_json::json!({ "children\u{266d}": refs(&["B", "C"]) });
        let view = merged_view(
            winner.as_object().unwrap(),
            &[loser.as_object().unwrap()],
        );
        assert_eq!(view["children\u{266d}"], Value::Array(refs(&["D", "C", "B", "A"])));
    }

    #[test]
    fn merged_view_reparenting_converges_for_either_winner() {
        let a = serde_json::json!({ "children\u{266d}": refs(&["B", "C"]) });
        let b = serde_json::json!({ "children\u{266d}": refs(&["A", "B"]) });
        for (winner, loser) in [(&a, &b), (&b, &a)] {
            let view = merged_view(
                winner.as_object().unwrap(),
                &[loser.as_object().unwrap()],
            );
            assert_eq!(
                view["children\u{266d}"],
                Value::Array(refs(&["A", "B", "C"])),
            );
        }
    }

    #[test]
    fn merged_view_takes_non_array_fields_from_winner_only() {
        let winner = serde_json::json!({ "title": "\u{1}winner" });
        let loser = serde_json::json!({ "title": "\u{1}loser", "extra\u{266d}": refs(&["X"]) });
        let view = merged_view(winner.as_object().unwrap(), &[loser.as_object().unwrap()]);
        assert_eq!(Value::Object(view), winner);
    }

    fn d(label: &str) -> Digest {
        Digest::of_bytes(label.as_bytes())
    }

    #[test]
    fn diff_equal_arrays_is_one_retain() {
        let base = refs(&["A", "B"]);
        let script = diff_array(d("base"), &base, &base);
        assert_eq!(script.ops, vec![EditOp::Retain(2)]);
    }

    #[test]
    fn diff_insert_into_empty() {
        let script = diff_array(d("base"), &[], &refs(&["X"]));
        assert_eq!(script.ops, vec![EditOp::Insert(refs(&["X"]))]);
    }

    #[test]
    fn patch_examples() {
        let base = refs(&["A", "B"]);
        let retain = EditScript { base: d("b"), ops: vec![EditOp::Retain(2)] };
        assert_eq!(patch_array(&base, &retain).unwrap(), base);
        let drop_first = EditScript {
            base: d("b"),
            ops: vec![EditOp::Delete(1), EditOp::Retain(1)],
        };
        assert_eq!(patch_array(&base, &drop_first).unwrap(), refs(&["B"]));
    }

    #[test]
    fn patch_rejects_length_mismatch() {
        let base = refs(&["A", "B"]);
        let short = EditScript { base: d("b"), ops: vec![EditOp::Retain(1)] };
        assert!(matches!(
            patch_array(&base, &short),
            Err(Error::PatchLengthMismatch)
        ));
        let long = EditScript { base: d("b"), ops: vec![EditOp::Retain(3)] };
        assert!(matches!(
            patch_array(&base, &long),
            Err(Error::PatchLengthMismatch)
        ));
    }

    #[test]
    fn script_value_round_trips() {
        let script = EditScript {
            base: d("base"),
            ops: vec![
                EditOp::Retain(2),
                EditOp::Delete(1),
                EditOp::Insert(refs(&["X", "Y"])),
            ],
        };
        let value = script.to_value();
        assert!(EditScript::is_script_value(&value));
        assert_eq!(EditScript::from_value(&value).unwrap(), script);
    }

    #[test]
    fn flattened_records_are_not_script_shaped() {
        // a user record with these key names has its strings escaped, so
        // the base value can never be a bare hex digest
        let user = serde_json::json!({
            "base": format!("\u{1}{}", d("x").to_hex()),
            "patch": [1, 2],
        });
        assert!(!EditScript::is_script_value(&user));
    }

    #[test]
    fn malformed_script_interiors_are_errors() {
        let bad = serde_json::json!({
            "base": d("x").to_hex(),
            "patch": [["q", 1]],
        });
        assert!(EditScript::is_script_value(&bad));
        assert!(EditScript::from_value(&bad).is_err());
    }

    fn small_arrays() -> impl Strategy<Value = Vec<Value>> {
        proptest::collection::vec(
            prop_oneof![
                (0u8..6).prop_map(|n| Value::String(object_ref(&ObjectId::new(format!("O{n}"))))),
                (0i64..4).prop_map(|n| serde_json::json!(n)),
            ],
            0..12,
        )
    }

    fn distinct_ref_arrays() -> impl Strategy<Value = (Vec<Value>, Vec<Value>)> {
        // duplicate-free subsets of a shared alphabet, independently
        // shuffled, as produced by concurrent reorderings
        (
            proptest::sample::subsequence((0u8..10).collect::<Vec<_>>(), 0..10),
            proptest::sample::subsequence((0u8..10).collect::<Vec<_>>(), 0..10),
            any::<u64>(),
        )
            .prop_map(|(a, b, seed)| {
                let make = |ids: Vec<u8>, salt: u64| {
                    let mut ids = ids;
                    // cheap deterministic shuffle
                    let len = ids.len();
                    if len > 1 {
                        for i in 0..len {
                            let j = ((salt >> (i % 8)) as usize + i) % len;
                            ids.swap(i, j);
                        }
                    }
                    ids.into_iter()
                        .map(|n| Value::String(object_ref(&ObjectId::new(format!("O{n}")))))
                        .collect::<Vec<_>>()
                };
                (make(a, seed), make(b, seed.rotate_left(17)))
            })
    }

    proptest! {
        #[test]
        fn merge_keeps_every_distinct_element_once((s, t) in distinct_ref_arrays()) {
            let merged = merge_arrays(&s, &t);
            let mut expected: Vec<&Value> = t.iter().chain(s.iter()).collect();
            expected.sort_by_key(|v| v.as_str().unwrap().to_string());
            expected.dedup();
            let mut got: Vec<&Value> = merged.iter().collect();
            got.sort_by_key(|v| v.as_str().unwrap().to_string());
            // expected is deduplicated, so equality also proves that the
            // merge introduced no duplicates
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn merge_preserves_target_order((s, t) in distinct_ref_arrays()) {
            let merged = merge_arrays(&s, &t);
            let positions: Vec<usize> = t
                .iter()
                .map(|e| merged.iter().position(|x| x == e).unwrap())
                .collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn merge_is_idempotent_on_equal_inputs(t in small_arrays()) {
            prop_assert_eq!(merge_arrays(&t, &t), t);
        }

        #[test]
        fn diff_patch_round_trips(base in small_arrays(), new in small_arrays()) {
            let script = diff_array(d("base"), &base, &new);
            prop_assert_eq!(patch_array(&base, &script).unwrap(), new);
        }
    }
}
