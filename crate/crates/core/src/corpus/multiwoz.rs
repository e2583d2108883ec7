//! MultiWOZ 2.0/2.1 loader.
//!
//! Consumes the raw `data.json` annotation format: a map from dialogue id to
//! `{"goal": ..., "log": [{"text": ..., "metadata": ...}, ...]}` where the
//! log alternates user/system and each system entry's metadata carries the
//! cumulative belief state (`semi` and `book` sections per domain). Turn t is
//! (user log[2t], system log[2t-1] text, state log[2t+1].metadata).
//!
//! Only the five evaluation domains are kept; malformed dialogues are skipped
//! and counted, never fatal.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::codec::{DialogueState, DomainSchema, Schema};
use crate::corpus::{tokenize, Dialogue, Turn};
use crate::error::{CreditError, Result};

pub const EVAL_DOMAINS: [&str; 5] = ["restaurant", "hotel", "attraction", "taxi", "train"];

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
    /// Skip reason → count.
    pub reasons: BTreeMap<String, usize>,
}

impl LoadReport {
    fn skip(&mut self, reason: &str) {
        self.skipped += 1;
        *self.reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

fn norm_value(raw: &str) -> Option<Vec<String>> {
    // Multi-annotated values are pipe-separated in 2.1; take the first.
    let first = raw.split('|').next().unwrap_or("");
    let toks = tokenize(first);
    if toks.is_empty() {
        return None;
    }
    let joined = toks.join(" ");
    if matches!(joined.as_str(), "none" | "not mentioned" | "not given" | "unknown") {
        None
    } else {
        Some(toks)
    }
}

fn state_from_metadata(metadata: &Value) -> std::result::Result<DialogueState, String> {
    let mut state = DialogueState::empty();
    let obj = metadata.as_object().ok_or("metadata is not an object")?;
    for (domain, sections) in obj {
        if !EVAL_DOMAINS.contains(&domain.as_str()) {
            continue;
        }
        let sections = sections.as_object().ok_or("domain entry is not an object")?;
        for (section, prefix) in [("semi", ""), ("book", "book_")] {
            let Some(sec) = sections.get(section) else { continue };
            let sec = sec.as_object().ok_or("section is not an object")?;
            for (slot, value) in sec {
                if slot == "booked" {
                    continue;
                }
                let Some(raw) = value.as_str() else { continue };
                if let Some(toks) = norm_value(raw) {
                    let slot_name = format!("{prefix}{}", slot.to_lowercase().replace(' ', "_"));
                    state.set(domain, &slot_name, toks);
                }
            }
        }
    }
    Ok(state)
}

fn dialogue_from_log(id: &str, log: &[Value]) -> std::result::Result<Dialogue, String> {
    if log.is_empty() || log.len() % 2 != 0 {
        return Err("log must alternate user/system entries".to_string());
    }
    let text_of = |entry: &Value| -> std::result::Result<Vec<String>, String> {
        entry
            .get("text")
            .and_then(|t| t.as_str())
            .map(tokenize)
            .ok_or_else(|| "log entry without text".to_string())
    };
    let mut turns = Vec::with_capacity(log.len() / 2);
    for t in 0..log.len() / 2 {
        let usr = text_of(&log[2 * t])?;
        let sys = if t == 0 { Vec::new() } else { text_of(&log[2 * t - 1])? };
        let metadata =
            log[2 * t + 1].get("metadata").ok_or("system entry without metadata")?;
        let state = state_from_metadata(metadata)?;
        turns.push(Turn { sys, usr, state });
    }
    Ok(Dialogue { id: id.to_string(), turns, unseen: false })
}

/// Load every dialogue from `path` (a `data.json` file or a directory
/// containing one). Returns the dialogues in id order plus a skip report.
pub fn load_multiwoz(path: &Path) -> Result<(Vec<Dialogue>, LoadReport)> {
    let file = if path.is_dir() { path.join("data.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| CreditError::corpus(format!("{}: {e}", file.display())))?;
    let root: Value = serde_json::from_str(&text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| CreditError::corpus("data.json must be an object of dialogues"))?;

    let mut report = LoadReport::default();
    let mut dialogues = Vec::with_capacity(obj.len());
    let mut ids: Vec<&String> = obj.keys().collect();
    ids.sort();
    for id in ids {
        let entry = &obj[id];
        let Some(log) = entry.get("log").and_then(|l| l.as_array()) else {
            report.skip("missing log");
            continue;
        };
        match dialogue_from_log(id, log) {
            Ok(d) => {
                dialogues.push(d);
                report.loaded += 1;
            }
            Err(reason) => report.skip(&reason),
        }
    }
    Ok((dialogues, report))
}

/// Split by the official `valListFile.txt`/`testListFile.txt` id lists.
pub fn split_by_lists(
    dialogues: Vec<Dialogue>,
    val_ids: &[String],
    test_ids: &[String],
) -> (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>) {
    let val: std::collections::BTreeSet<&str> = val_ids.iter().map(|s| s.as_str()).collect();
    let test: std::collections::BTreeSet<&str> = test_ids.iter().map(|s| s.as_str()).collect();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut tst = Vec::new();
    for d in dialogues {
        if test.contains(d.id.as_str()) {
            tst.push(d);
        } else if val.contains(d.id.as_str()) {
            dev.push(d);
        } else {
            train.push(d);
        }
    }
    (train, dev, tst)
}

/// Derive the evaluation schema from observed (domain, slot) pairs: the five
/// evaluation domains in fixed order, slots sorted by name.
pub fn derive_schema(dialogues: &[Dialogue]) -> Result<Schema> {
    let mut slots: BTreeMap<&str, std::collections::BTreeSet<String>> = BTreeMap::new();
    for d in dialogues {
        for t in &d.turns {
            for (dom, slot, value) in t.state.iter() {
                // Drop states whose values collide with marker spellings;
                // they would make the grammar ambiguous.
                if value.iter().all(|v| !v.starts_with('<')) {
                    slots.entry(dom).or_default().insert(slot.to_string());
                }
            }
        }
    }
    let domains: Vec<DomainSchema> = EVAL_DOMAINS
        .iter()
        .filter_map(|d| {
            slots.get(*d).map(|s| DomainSchema {
                domain: d.to_string(),
                slots: s.iter().cloned().collect(),
            })
        })
        .collect();
    if domains.is_empty() {
        return Err(CreditError::schema("no evaluation-domain content found"));
    }
    Schema::new(domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> String {
        serde_json::json!({
            "SNG001.json": {
                "goal": {},
                "log": [
                    {"text": "I need a hotel in the centre.", "metadata": {}},
                    {"text": "Sure, any price range?", "metadata": {
                        "hotel": {"book": {"booked": []}, "semi": {"area": "centre", "pricerange": "not mentioned"}},
                        "police": {"book": {}, "semi": {"name": "parkside station"}}
                    }},
                    {"text": "Cheap please, for 3 people.", "metadata": {}},
                    {"text": "Booked!", "metadata": {
                        "hotel": {"book": {"booked": [], "people": "3"}, "semi": {"area": "centre", "pricerange": "cheap"}}
                    }}
                ]
            },
            "BAD002.json": {
                "goal": {},
                "log": [
                    {"text": "hello", "metadata": {}}
                ]
            }
        })
        .to_string()
    }

    #[test]
    fn loads_turns_and_skips_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, fixture()).unwrap();
        let (ds, report) = load_multiwoz(&path).unwrap();
        assert_eq!(report.loaded, 1);
        assert_eq!(report.skipped, 1);
        assert_eq!(ds.len(), 1);
        let d = &ds[0];
        assert_eq!(d.turns.len(), 2);
        // turn 1: user only, area=centre; "not mentioned" and police dropped
        assert!(d.turns[0].sys.is_empty());
        assert_eq!(d.turns[0].state.get("hotel", "area"), Some(&["centre".to_string()][..]));
        assert_eq!(d.turns[0].state.len(), 1);
        // turn 2 carries the book slot and the sys utterance
        assert_eq!(d.turns[1].sys, tokenize("Sure, any price range?"));
        assert_eq!(d.turns[1].state.get("hotel", "book_people"), Some(&["3".to_string()][..]));
        assert_eq!(d.turns[1].state.get("hotel", "pricerange"), Some(&["cheap".to_string()][..]));
    }

    #[test]
    fn empty_input_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, "{}").unwrap();
        let (ds, report) = load_multiwoz(&path).unwrap();
        assert!(ds.is_empty());
        assert_eq!(report.loaded, 0);
        // A directory without data.json is an error, not a silent empty list.
        assert!(load_multiwoz(dir.path().join("nope").as_path()).is_err());
    }

    #[test]
    fn derives_schema_in_eval_domain_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, fixture()).unwrap();
        let (ds, _) = load_multiwoz(&path).unwrap();
        let schema = derive_schema(&ds).unwrap();
        assert_eq!(schema.domains.len(), 1);
        assert_eq!(schema.domains[0].domain, "hotel");
        assert_eq!(schema.domains[0].slots, vec!["area", "book_people", "pricerange"]);
        let (st, _) = crate::codec::parse_state(
            &crate::codec::serialize_state_canonical(&ds[0].turns[1].state, &schema).unwrap(),
            &schema,
        )
        .unwrap();
        assert_eq!(st, ds[0].turns[1].state);
    }

    #[test]
    fn split_lists_partition_dialogues() {
        let mk = |id: &str| Dialogue {
            id: id.into(),
            turns: vec![Turn { sys: vec![], usr: vec!["hi".into()], state: DialogueState::empty() }],
            unseen: false,
        };
        let all = vec![mk("a"), mk("b"), mk("c")];
        let (train, dev, test) =
            split_by_lists(all, &["b".to_string()], &["c".to_string()]);
        assert_eq!(train.len(), 1);
        assert_eq!(dev.len(), 1);
        assert_eq!(test.len(), 1);
    }
}
