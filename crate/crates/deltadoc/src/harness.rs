//! Multi-replica convergence harness: simulated clients concurrently
//! move objects between two arrays, gossip pairwise, and verify after
//! every edit and meld that no object is duplicated, lost, or caught in
//! a cycle.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::Result;
use crate::materialize::{unflatten, MaterializeMode};
use crate::state::ReplicaState;
use crate::value::{canonical_json, Value};

const ALPHA_KEY: &str = "alpha\u{266d}";
const BETA_KEY: &str = "beta\u{266d}";

/// How often replicas gossip while editing: this many random pairs meld
/// (in both directions) after every round of client edits. An all-pairs
/// meld always runs at the end of the scenario.
#[derive(Clone, Copy, Debug)]
pub struct GossipSchedule {
    pub pairs_per_round: usize,
}

impl Default for GossipSchedule {
    fn default() -> Self {
        GossipSchedule { pairs_per_round: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    /// Number of simulated clients; at least 2.
    pub clients: usize,
    pub edits_per_client: usize,
    /// Objects relocated per edit, drawn uniformly.
    pub moves_per_edit: RangeInclusive<usize>,
    /// Fully determines the run.
    pub seed: u64,
    pub gossip: GossipSchedule,
    /// Mode used for the checked reads.
    pub mode: MaterializeMode,
}

impl ScenarioConfig {
    pub fn new(clients: usize, edits_per_client: usize, seed: u64) -> Self {
        ScenarioConfig {
            clients,
            edits_per_client,
            moves_per_edit: 1..=5,
            seed,
            gossip: GossipSchedule::default(),
            mode: MaterializeMode::Updated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepKind {
    Edit { client: usize },
    Meld { from: usize, to: usize, checked: usize },
    Final { client: usize },
}

/// Outcome of one invariant check over a materialized document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub kind: StepKind,
    pub round: usize,
    pub present: Vec<String>,
    pub duplicates: Vec<String>,
    pub missing: Vec<String>,
    pub cycle: bool,
}

impl StepRecord {
    pub fn clean(&self) -> bool {
        self.duplicates.is_empty() && self.missing.is_empty() && !self.cycle
    }

    pub fn to_json(&self) -> Value {
        let (kind, fields) = match &self.kind {
            StepKind::Edit { client } => ("edit", json!({ "client": client })),
            StepKind::Meld { from, to, checked } => (
                "meld",
                json!({ "from": from, "to": to, "checked": checked }),
            ),
            StepKind::Final { client } => ("final", json!({ "client": client })),
        };
        let mut line = json!({
            "kind": kind,
            "round": self.round,
            "present": self.present.len(),
            "duplicates": self.duplicates,
            "missing": self.missing,
            "cycle": self.cycle,
        });
        for (k, v) in fields.as_object().unwrap() {
            line.as_object_mut().unwrap().insert(k.clone(), v.clone());
        }
        line
    }
}

/// Append-only log of every check performed during a run.
#[derive(Clone, Debug, Default)]
pub struct InvariantReport {
    pub steps: Vec<StepRecord>,
    /// Whether all final materializations were byte-identical.
    pub converged: Option<bool>,
}

impl InvariantReport {
    pub fn is_clean(&self) -> bool {
        self.steps.iter().all(StepRecord::clean) && self.converged != Some(false)
    }

    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| !s.clean()).count()
            + usize::from(self.converged == Some(false))
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&step.to_json().to_string());
            out.push('\n');
        }
        if let Some(converged) = self.converged {
            out.push_str(&json!({ "kind": "converged", "ok": converged }).to_string());
            out.push('\n');
        }
        out
    }
}

/// The evaluation document: two arrays of 51 objects each.
pub fn build_seed_document() -> Value {
    let alpha: Vec<Value> = (1..=50)
        .map(|n| json!({ "_id": format!("O{n:03}") }))
        .chain([json!({ "_id": "OZA" })])
        .collect();
    let beta: Vec<Value> = (51..=100)
        .map(|n| json!({ "_id": format!("O{n:03}") }))
        .chain([json!({ "_id": "OZB" })])
        .collect();
    json!({ ALPHA_KEY: alpha, BETA_KEY: beta })
}

/// All object ids the seed document contains.
pub fn seed_document_ids() -> BTreeSet<String> {
    let mut ids: BTreeSet<String> = (1..=100).map(|n| format!("O{n:03}")).collect();
    ids.insert("OZA".to_string());
    ids.insert("OZB".to_string());
    ids
}

/// Produces a new document with `k` objects (drawn from `moves`) taken
/// out of one array and inserted at a random position in the other. The
/// multiset of ids never changes.
pub fn random_move_edit(
    doc: &Value,
    rng: &mut impl Rng,
    moves: &RangeInclusive<usize>,
) -> Value {
    let mut doc = doc.clone();
    let k = rng.gen_range(moves.clone());
    for _ in 0..k {
        let alpha_len = doc[ALPHA_KEY].as_array().map_or(0, Vec::len);
        let beta_len = doc[BETA_KEY].as_array().map_or(0, Vec::len);
        if alpha_len + beta_len == 0 {
            break;
        }
        let pick = rng.gen_range(0..alpha_len + beta_len);
        let (from, to, index) = if pick < alpha_len {
            (ALPHA_KEY, BETA_KEY, pick)
        } else {
            (BETA_KEY, ALPHA_KEY, pick - alpha_len)
        };
        let item = doc[from].as_array_mut().unwrap().remove(index);
        let target = doc[to].as_array_mut().unwrap();
        let position = rng.gen_range(0..=target.len());
        target.insert(position, item);
    }
    doc
}

/// Counts `_id` occurrences in a materialized document and flags
/// duplicates, ids missing from the expected set, and any id nested
/// inside itself.
pub fn check_invariants(doc: &Value, expected: &BTreeSet<String>) -> (Vec<String>, Vec<String>, Vec<String>, bool) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut cycle = false;
    let mut ancestors: Vec<String> = Vec::new();
    count_ids(doc, &mut counts, &mut ancestors, &mut cycle);

    let present: Vec<String> = counts.keys().cloned().collect();
    let duplicates: Vec<String> = counts
        .iter()
        .filter(|(_, n)| **n > 1)
        .map(|(id, _)| id.clone())
        .collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|id| !counts.contains_key(*id))
        .cloned()
        .collect();
    (present, duplicates, missing, cycle)
}

fn count_ids(
    value: &Value,
    counts: &mut BTreeMap<String, usize>,
    ancestors: &mut Vec<String>,
    cycle: &mut bool,
) {
    match value {
        Value::Object(fields) => {
            let own = fields.get("_id").and_then(Value::as_str).map(str::to_string);
            if let Some(id) = &own {
                *counts.entry(id.clone()).or_insert(0) += 1;
                if ancestors.contains(id) {
                    *cycle = true;
                }
                ancestors.push(id.clone());
            }
            for v in fields.values() {
                count_ids(v, counts, ancestors, cycle);
            }
            if own.is_some() {
                ancestors.pop();
            }
        }
        Value::Array(items) => {
            for item in items {
                count_ids(item, counts, ancestors, cycle);
            }
        }
        _ => {}
    }
}

/// Runs the full scenario: every client forks from one initial commit of
/// the seed document, edits and checks `edits_per_client` times, gossips
/// per the schedule with checks after every meld, then melds all pairs
/// and verifies the replicas converged byte-for-byte. Violations are
/// recorded in the report rather than raised.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<InvariantReport> {
    assert!(cfg.clients >= 2, "a scenario needs at least two clients");
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut client_rngs: Vec<ChaCha8Rng> = (0..cfg.clients)
        .map(|_| ChaCha8Rng::seed_from_u64(master.next_u64()))
        .collect();
    let mut gossip_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let expected = seed_document_ids();
    let mut genesis = ReplicaState::new();
    genesis.commit(&build_seed_document())?;
    let mut replicas: Vec<ReplicaState> = (0..cfg.clients).map(|_| genesis.clone()).collect();

    let mut report = InvariantReport::default();
    let check = |report: &mut InvariantReport,
                     kind: StepKind,
                     round: usize,
                     state: &ReplicaState|
     -> Result<()> {
        let doc = unflatten(state, cfg.mode)?;
        let (present, duplicates, missing, cycle) = check_invariants(&doc, &expected);
        report.steps.push(StepRecord {
            kind,
            round,
            present,
            duplicates,
            missing,
            cycle,
        });
        Ok(())
    };

    for round in 0..cfg.edits_per_client {
        for client in 0..cfg.clients {
            let doc = unflatten(&replicas[client], MaterializeMode::Updated)?;
            let edited = random_move_edit(&doc, &mut client_rngs[client], &cfg.moves_per_edit);
            replicas[client].commit(&edited)?;
            check(&mut report, StepKind::Edit { client }, round, &replicas[client])?;
        }
        for _ in 0..cfg.gossip.pairs_per_round {
            let a = gossip_rng.gen_range(0..cfg.clients);
            let mut b = gossip_rng.gen_range(0..cfg.clients - 1);
            if b >= a {
                b += 1;
            }
            let other = replicas[b].clone();
            replicas[a].meld(&other)?;
            let merged = replicas[a].clone();
            replicas[b].meld(&merged)?;
            for checked in 0..cfg.clients {
                check(
                    &mut report,
                    StepKind::Meld { from: a, to: b, checked },
                    round,
                    &replicas[checked],
                )?;
            }
        }
    }

    // final all-pairs meld, then verify byte-identical materializations
    for i in 0..cfg.clients {
        for j in 0..cfg.clients {
            if i != j {
                let other = replicas[j].clone();
                replicas[i].meld(&other)?;
            }
        }
    }
    let mut outputs: Vec<Vec<u8>> = Vec::with_capacity(cfg.clients);
    for client in 0..cfg.clients {
        check(
            &mut report,
            StepKind::Final { client },
            cfg.edits_per_client,
            &replicas[client],
        )?;
        outputs.push(canonical_json(&unflatten(&replicas[client], cfg.mode)?));
    }
    report.converged = Some(outputs.windows(2).all(|w| w[0] == w[1]));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatten::flatten;

    #[test]
    fn seed_document_shape() {
        let doc = build_seed_document();
        assert_eq!(doc[ALPHA_KEY].as_array().unwrap().len(), 51);
        assert_eq!(doc[BETA_KEY].as_array().unwrap().len(), 51);
        assert_eq!(seed_document_ids().len(), 102);
        let (_, collection) = flatten(&doc).unwrap();
        assert_eq!(collection.len(), 103);
    }

    #[test]
    fn seed_document_passes_its_own_check() {
        let (present, duplicates, missing, cycle) =
            check_invariants(&build_seed_document(), &seed_document_ids());
        assert_eq!(present.len(), 102);
        assert!(duplicates.is_empty());
        assert!(missing.is_empty());
        assert!(!cycle);
    }

    #[test]
    fn check_flags_duplicates_and_missing() {
        let doc = json!({
            ALPHA_KEY: [{"_id": "O001"}, {"_id": "O001"}],
            BETA_KEY: [],
        });
        let expected: BTreeSet<String> = ["O001".to_string(), "O002".to_string()].into();
        let (_, duplicates, missing, cycle) = check_invariants(&doc, &expected);
        assert_eq!(duplicates, vec!["O001".to_string()]);
        assert_eq!(missing, vec!["O002".to_string()]);
        assert!(!cycle);
    }

    #[test]
    fn check_flags_cycles() {
        let doc = json!({
            ALPHA_KEY: [{"_id": "X", "inner": {"_id": "X"}}],
        });
        let (_, duplicates, _, cycle) = check_invariants(&doc, &BTreeSet::new());
        assert_eq!(duplicates, vec!["X".to_string()]);
        assert!(cycle);
    }

    #[test]
    fn zero_moves_is_the_identity_edit() {
        let doc = build_seed_document();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(random_move_edit(&doc, &mut rng, &(0..=0)), doc);
    }

    #[test]
    fn moves_preserve_the_id_multiset() {
        let doc = build_seed_document();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut current = doc;
        for _ in 0..20 {
            current = random_move_edit(&current, &mut rng, &(1..=5));
            let (present, duplicates, missing, _) =
                check_invariants(&current, &seed_document_ids());
            assert_eq!(present.len(), 102);
            assert!(duplicates.is_empty() && missing.is_empty());
        }
    }

    #[test]
    fn edits_are_deterministic_under_a_seed() {
        let doc = build_seed_document();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(
                random_move_edit(&doc, &mut a, &(1..=5)),
                random_move_edit(&doc, &mut b, &(1..=5)),
            );
        }
    }

    #[test]
    fn minimal_scenario_converges() {
        let mut cfg = ScenarioConfig::new(2, 1, 99);
        cfg.moves_per_edit = 1..=1;
        let report = run_scenario(&cfg).unwrap();
        assert!(report.is_clean(), "violations: {}", report.to_json_lines());
        assert_eq!(report.converged, Some(true));
    }

    #[test]
    fn scenarios_are_reproducible() {
        let cfg = ScenarioConfig::new(3, 4, 1234);
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.converged, b.converged);
    }
}
