//! Local-filesystem persistence: one canonical-JSON file per delta
//! block, named `<block-id>.delta.json`. The block id must equal the
//! SHA-256 of the file bytes, so packs from several replicas can share a
//! directory and de-duplicate by name.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::state::{BlockId, DeltaBlock, ReplicaState};
use crate::value::Digest;

pub const BLOCK_SUFFIX: &str = ".delta.json";

/// Writes every block of the state into the directory, creating it if
/// needed. Files are content-addressed, so existing ones are left alone.
pub fn save_pack(state: &ReplicaState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for block in state.blocks() {
        let path = dir.join(format!("{}{BLOCK_SUFFIX}", block.id()));
        if path.exists() {
            continue;
        }
        fs::write(&path, block.canonical_bytes()).map_err(|e| Error::PackFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Loads a pack by applying every block file in filename order. An empty
/// directory loads as an empty state; a directory merged from several
/// replicas loads as their meld.
pub fn load_pack(dir: &Path) -> Result<ReplicaState> {
    let mut state = ReplicaState::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(BLOCK_SUFFIX))
        {
            paths.push(path);
        }
    }
    paths.sort();
    for path in paths {
        let block = read_block(&path)?;
        state.apply_block(&block).map_err(|e| Error::PackFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    state.refresh_root();
    Ok(state)
}

fn read_block(path: &Path) -> Result<DeltaBlock> {
    let fail = |reason: String| Error::PackFile {
        path: path.to_path_buf(),
        reason,
    };
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(BLOCK_SUFFIX))
        .ok_or_else(|| fail("not a block file".to_string()))?;
    let expected: BlockId = name
        .parse::<Digest>()
        .map_err(|_| fail(format!("file name {name:?} is not a digest")))?;
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    if Digest::of_bytes(&bytes) != expected {
        return Err(fail("contents do not match the digest in the file name".to_string()));
    }
    let payload = serde_json::from_slice(&bytes).map_err(|e| fail(e.to_string()))?;
    let block = DeltaBlock::from_payload(&payload).map_err(|e| fail(e.to_string()))?;
    if *block.id() != expected {
        // bytes hash to the name but are not the canonical serialization
        return Err(fail("file is not in canonical form".to_string()));
    }
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materialize::{unflatten, MaterializeMode};
    use serde_json::json;

    fn sample_state() -> ReplicaState {
        let mut state = ReplicaState::new();
        state
            .commit(&json!({"items\u{266d}": [{"_id": "A"}, {"_id": "B"}]}))
            .unwrap()
            .unwrap();
        state
            .commit(&json!({"items\u{266d}": [{"_id": "B"}, {"_id": "A"}]}))
            .unwrap()
            .unwrap();
        state
    }

    #[test]
    fn save_and_load_round_trip() {
        let state = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_pack(&state, dir.path()).unwrap();
        let loaded = load_pack(dir.path()).unwrap();
        assert_eq!(loaded.block_count(), state.block_count());
        assert_eq!(
            unflatten(&loaded, MaterializeMode::Updated).unwrap(),
            unflatten(&state, MaterializeMode::Updated).unwrap(),
        );
    }

    #[test]
    fn empty_directory_loads_as_empty_state() {
        let dir = tempfile::tempdir().unwrap();
        let state = load_pack(dir.path()).unwrap();
        assert!(state.is_empty());
        assert_eq!(state.root_id(), None);
    }

    #[test]
    fn shared_directory_loads_as_the_meld() {
        let mut a = ReplicaState::new();
        a.commit(&json!({"items\u{266d}": [{"_id": "A"}]}))
            .unwrap()
            .unwrap();
        let mut b = a.clone();
        a.commit(&json!({"items\u{266d}": [{"_id": "A"}, {"_id": "X"}]}))
            .unwrap()
            .unwrap();
        b.commit(&json!({"items\u{266d}": [{"_id": "Y"}, {"_id": "A"}]}))
            .unwrap()
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_pack(&a, dir.path()).unwrap();
        save_pack(&b, dir.path()).unwrap();
        let loaded = load_pack(dir.path()).unwrap();

        let mut melded = a.clone();
        melded.meld(&b).unwrap();
        assert_eq!(loaded.block_count(), melded.block_count());
        assert_eq!(
            unflatten(&loaded, MaterializeMode::Updated).unwrap(),
            unflatten(&melded, MaterializeMode::Updated).unwrap(),
        );
    }

    #[test]
    fn corrupted_files_are_reported_by_name() {
        let state = sample_state();
        let dir = tempfile::tempdir().unwrap();
        save_pack(&state, dir.path()).unwrap();
        let victim = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::write(&victim, b"{\"changes\":[],\"objects\":{},\"parents\":[]}").unwrap();
        let err = load_pack(dir.path()).unwrap_err();
        match err {
            Error::PackFile { path, .. } => assert_eq!(path, victim),
            other => panic!("expected a pack error, got {other}"),
        }
    }

    #[test]
    fn non_canonical_files_are_rejected() {
        let state = sample_state();
        let block = state.blocks().next().unwrap();
        let mut bytes = block.canonical_bytes();
        bytes.push(b'\n');
        let renamed = Digest::of_bytes(&bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("{renamed}{BLOCK_SUFFIX}"));
        std::fs::write(&path, &bytes).unwrap();
        let err = load_pack(dir.path()).unwrap_err();
        assert!(matches!(err, Error::PackFile { .. }));
    }
}
