//! Synthetic toy corpus for desk-scale verification.
//!
//! Dialogues are template-generated over a small schema. Closed slots draw
//! from fixed lexicons; open slots (names) are freshly composed multi-token
//! values, so getting them right requires copying from the dialogue. The test
//! split reserves a flagged subset whose open values use a held-out word list
//! that never appears in train — the unseen-value probe.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{DialogueState, DomainSchema, Schema};
use crate::corpus::{tokenize, Dialogue, Turn};
use crate::error::{CreditError, Result};
use crate::par;

/// Value space of one slot.
#[derive(Clone, Debug)]
enum SlotValues {
    Closed(Vec<&'static str>),
    /// Composed from the name-word lexicon (train) or the held-out list.
    Open,
}

fn domain_pool() -> Vec<(&'static str, Vec<(&'static str, SlotValues)>)> {
    let areas = SlotValues::Closed(vec!["centre", "north", "south", "east", "west"]);
    vec![
        (
            "hotel",
            vec![
                ("name", SlotValues::Open),
                ("area", areas.clone()),
                ("price", SlotValues::Closed(vec!["cheap", "moderate", "expensive"])),
            ],
        ),
        (
            "restaurant",
            vec![
                ("name", SlotValues::Open),
                ("food", SlotValues::Closed(vec!["italian", "chinese", "indian", "british", "thai"])),
                ("area", areas.clone()),
            ],
        ),
        (
            "attraction",
            vec![
                ("name", SlotValues::Open),
                ("kind", SlotValues::Closed(vec!["museum", "park", "cinema", "theatre", "gallery"])),
                ("area", areas),
            ],
        ),
        (
            "train",
            vec![
                ("day", SlotValues::Closed(vec!["monday", "tuesday", "wednesday", "thursday", "friday"])),
                ("stop", SlotValues::Closed(vec!["norwich", "ely", "stansted", "peterborough"])),
                ("seats", SlotValues::Closed(vec!["one", "two", "three", "four", "five"])),
            ],
        ),
        (
            "taxi",
            vec![
                ("pickup", SlotValues::Closed(vec!["station", "airport", "museum", "square"])),
                ("dropoff", SlotValues::Closed(vec!["station", "airport", "museum", "square"])),
                ("when", SlotValues::Closed(vec!["noon", "morning", "evening", "midnight"])),
            ],
        ),
    ]
}

const USER_TEMPLATES: [&str; 4] = [
    "i want the {d} {s} to be {v}",
    "the {s} of the {d} should be {v}",
    "please set the {d} {s} to {v}",
    "for the {d} i need the {s} {v}",
];

const UPDATE_TEMPLATES: [&str; 2] = [
    "actually change the {d} {s} to {v}",
    "no make the {d} {s} {v} instead",
];

const ACK_TEMPLATES: [&str; 3] =
    ["ok noted anything else", "sure thing what else", "done do you need more"];

const ECHO_TEMPLATE: &str = "so {v} for the {d} {s} right";

const DEFAULT_NAME_WORDS: [&str; 14] = [
    "alpha", "royal", "grand", "garden", "palace", "river", "sunny", "old", "golden", "city",
    "corner", "blue", "iron", "maple",
];

const DEFAULT_HELDOUT_WORDS: [&str; 8] =
    ["zenith", "quartz", "nimbus", "falcon", "ember", "onyx", "cobalt", "willow"];

/// Generator configuration. Deterministic under `seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGrammarSpec {
    pub n_domains: usize,
    pub n_slots_per_domain: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Fraction of test dialogues whose open values come from the held-out
    /// word list (flagged `unseen`).
    pub unseen_fraction: f64,
    pub turns_min: usize,
    pub turns_max: usize,
    pub facts_per_turn_min: usize,
    pub facts_per_turn_max: usize,
    /// Probability that a fact overwrites an already-set slot.
    pub update_prob: f64,
    /// Probability that a later system turn echoes a previous value.
    pub echo_prob: f64,
    pub name_words: Vec<String>,
    pub heldout_name_words: Vec<String>,
    pub name_len_min: usize,
    pub name_len_max: usize,
    pub seed: u64,
}

impl Default for ToyGrammarSpec {
    fn default() -> Self {
        ToyGrammarSpec {
            n_domains: 3,
            n_slots_per_domain: 3,
            n_train: 2000,
            n_dev: 300,
            n_test: 400,
            unseen_fraction: 0.3,
            turns_min: 1,
            turns_max: 3,
            facts_per_turn_min: 1,
            facts_per_turn_max: 2,
            update_prob: 0.15,
            echo_prob: 0.3,
            name_words: DEFAULT_NAME_WORDS.iter().map(|s| s.to_string()).collect(),
            heldout_name_words: DEFAULT_HELDOUT_WORDS.iter().map(|s| s.to_string()).collect(),
            name_len_min: 2,
            name_len_max: 3,
            seed: 7,
        }
    }
}

impl ToyGrammarSpec {
    /// The schema this spec generates against.
    pub fn schema(&self) -> Result<Schema> {
        self.validate()?;
        let pool = domain_pool();
        let domains = pool[..self.n_domains]
            .iter()
            .map(|(d, slots)| DomainSchema {
                domain: d.to_string(),
                slots: slots[..self.n_slots_per_domain].iter().map(|(s, _)| s.to_string()).collect(),
            })
            .collect();
        Schema::new(domains)
    }

    pub fn validate(&self) -> Result<()> {
        let pool = domain_pool();
        let cfg = |m: String| Err(CreditError::Config(m));
        if self.n_domains == 0 || self.n_domains > pool.len() {
            return cfg(format!("n_domains must be in 1..={}", pool.len()));
        }
        let max_slots = pool[..self.n_domains].iter().map(|(_, s)| s.len()).min().unwrap();
        if self.n_slots_per_domain == 0 || self.n_slots_per_domain > max_slots {
            return cfg(format!("n_slots_per_domain must be in 1..={max_slots}"));
        }
        if self.turns_min == 0 || self.turns_min > self.turns_max {
            return cfg("turns range is empty".into());
        }
        if self.facts_per_turn_min == 0 || self.facts_per_turn_min > self.facts_per_turn_max {
            return cfg("facts range is empty".into());
        }
        if self.name_len_min == 0 || self.name_len_min > self.name_len_max {
            return cfg("name length range is empty".into());
        }
        if self.name_words.len() < self.name_len_max {
            return cfg("name lexicon smaller than the longest name".into());
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return cfg("unseen_fraction must be in [0, 1]".into());
        }
        if self.unseen_fraction > 0.0 {
            if self.heldout_name_words.len() < self.name_len_max {
                return cfg("held-out lexicon smaller than the longest name".into());
            }
            let has_open = pool[..self.n_domains]
                .iter()
                .any(|(_, s)| s[..self.n_slots_per_domain].iter().any(|(_, v)| matches!(v, SlotValues::Open)));
            if !has_open {
                return cfg("unseen subset requires at least one open slot in the schema".into());
            }
        }
        // Held-out words must never occur anywhere in train text.
        let mut train_words: Vec<String> =
            self.name_words.iter().map(|w| w.to_lowercase()).collect();
        for (d, slots) in &pool[..self.n_domains] {
            train_words.push(d.to_string());
            for (s, v) in &slots[..self.n_slots_per_domain] {
                train_words.push(s.to_string());
                if let SlotValues::Closed(vals) = v {
                    train_words.extend(vals.iter().map(|w| w.to_string()));
                }
            }
        }
        for tpl in USER_TEMPLATES.iter().chain(UPDATE_TEMPLATES.iter()).chain(ACK_TEMPLATES.iter())
        {
            train_words.extend(tokenize(tpl));
        }
        for w in &self.heldout_name_words {
            if train_words.contains(&w.to_lowercase()) {
                return cfg(format!("held-out word {w:?} collides with train-visible text"));
            }
        }
        Ok(())
    }
}

struct SlotSpec {
    domain: &'static str,
    slot: &'static str,
    values: SlotValues,
}

fn active_slots(spec: &ToyGrammarSpec) -> Vec<SlotSpec> {
    domain_pool()[..spec.n_domains]
        .iter()
        .flat_map(|(d, slots)| {
            slots[..spec.n_slots_per_domain]
                .iter()
                .map(|(s, v)| SlotSpec { domain: d, slot: s, values: v.clone() })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn render(template: &str, d: &str, s: &str, v: &str) -> Vec<String> {
    tokenize(&template.replace("{d}", d).replace("{s}", s).replace("{v}", v))
}

fn sample_name(words: &[String], len: usize, rng: &mut ChaCha8Rng) -> String {
    let mut pool: Vec<&String> = words.iter().collect();
    pool.shuffle(rng);
    pool[..len].iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}

fn dialogue_rng(seed: u64, split: u64, idx: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ idx.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn sample_value(
    slot: &SlotSpec,
    spec: &ToyGrammarSpec,
    unseen: bool,
    avoid: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> String {
    loop {
        let v = match &slot.values {
            SlotValues::Closed(vals) => vals[rng.gen_range(0..vals.len())].to_string(),
            SlotValues::Open => {
                let words =
                    if unseen { &spec.heldout_name_words } else { &spec.name_words };
                let len = rng.gen_range(spec.name_len_min..=spec.name_len_max);
                sample_name(words, len, rng)
            }
        };
        if avoid != Some(v.as_str()) {
            return v;
        }
    }
}

fn generate_dialogue(spec: &ToyGrammarSpec, split: u64, idx: usize, unseen: bool) -> Dialogue {
    let mut rng = dialogue_rng(spec.seed, split, idx as u64);
    let slots = active_slots(spec);
    let usable: Vec<usize> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| !unseen || matches!(s.values, SlotValues::Open))
        .map(|(i, _)| i)
        .collect();

    let n_turns = rng.gen_range(spec.turns_min..=spec.turns_max);
    let mut state = DialogueState::empty();
    let mut set_slots: Vec<usize> = Vec::new();
    let mut turns = Vec::with_capacity(n_turns);
    let mut last_fact: Option<(usize, String)> = None;

    for t in 0..n_turns {
        let sys = if t == 0 {
            Vec::new()
        } else if let (Some((si, v)), true) =
            (&last_fact, rng.gen_bool(spec.echo_prob) && !unseen)
        {
            let sl = &slots[*si];
            render(ECHO_TEMPLATE, sl.domain, sl.slot, v)
        } else {
            tokenize(ACK_TEMPLATES[rng.gen_range(0..ACK_TEMPLATES.len())])
        };

        let n_facts = rng.gen_range(spec.facts_per_turn_min..=spec.facts_per_turn_max);
        let mut sentences: Vec<Vec<String>> = Vec::new();
        for _ in 0..n_facts {
            let unset: Vec<usize> =
                usable.iter().copied().filter(|i| !set_slots.contains(i)).collect();
            let update = !set_slots.is_empty()
                && (unset.is_empty() || rng.gen_bool(spec.update_prob));
            let (si, tpl) = if update {
                let si = set_slots[rng.gen_range(0..set_slots.len())];
                (si, UPDATE_TEMPLATES[rng.gen_range(0..UPDATE_TEMPLATES.len())])
            } else {
                let si = unset[rng.gen_range(0..unset.len())];
                (si, USER_TEMPLATES[rng.gen_range(0..USER_TEMPLATES.len())])
            };
            let sl = &slots[si];
            let avoid = state.get(sl.domain, sl.slot).map(|v| v.join(" "));
            let v = sample_value(sl, spec, unseen, avoid.as_deref(), &mut rng);
            state.set(sl.domain, sl.slot, tokenize(&v));
            if !set_slots.contains(&si) {
                set_slots.push(si);
            }
            sentences.push(render(tpl, sl.domain, sl.slot, &v));
            last_fact = Some((si, v));
        }
        let mut usr = Vec::new();
        for (k, s) in sentences.into_iter().enumerate() {
            if k > 0 {
                usr.push("and".to_string());
            }
            usr.extend(s);
        }

        // Copyability: every value set this turn appears verbatim in `usr`.
        debug_assert!(state.iter().all(|(_, _, v)| v.iter().all(|tok| {
            turns
                .iter()
                .map(|t: &Turn| &t.usr)
                .chain(std::iter::once(&usr))
                .any(|u| u.contains(tok))
        })));

        turns.push(Turn { sys, usr, state: state.clone() });
    }

    let split_name = ["train", "dev", "test"][split as usize];
    Dialogue { id: format!("{split_name}-{idx:05}"), turns, unseen }
}

/// Generate the (train, dev, test) splits. Deterministic under the seed; the
/// flagged unseen-value dialogues are the leading test entries.
pub fn generate_toy_corpus(
    spec: &ToyGrammarSpec,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>)> {
    spec.validate()?;
    let n_unseen = (spec.unseen_fraction * spec.n_test as f64).ceil() as usize;
    let train = par::ordered_map_range(spec.n_train, |i| generate_dialogue(spec, 0, i, false));
    let dev = par::ordered_map_range(spec.n_dev, |i| generate_dialogue(spec, 1, i, false));
    let test =
        par::ordered_map_range(spec.n_test, |i| generate_dialogue(spec, 2, i, i < n_unseen));
    Ok((train, dev, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec() -> ToyGrammarSpec {
        ToyGrammarSpec {
            n_train: 30,
            n_dev: 10,
            n_test: 10,
            ..ToyGrammarSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = small_spec();
        let a = generate_toy_corpus(&spec).unwrap();
        let b = generate_toy_corpus(&spec).unwrap();
        assert_eq!(
            crate::corpus::dialogues_to_json(&a.0).unwrap(),
            crate::corpus::dialogues_to_json(&b.0).unwrap()
        );
        assert_eq!(
            crate::corpus::dialogues_to_json(&a.2).unwrap(),
            crate::corpus::dialogues_to_json(&b.2).unwrap()
        );
    }

    #[test]
    fn gold_values_occur_in_dialogue_text() {
        let (train, _, test) = generate_toy_corpus(&small_spec()).unwrap();
        for d in train.iter().chain(test.iter()) {
            for (t, turn) in d.turns.iter().enumerate() {
                let text: BTreeSet<&String> =
                    d.turns[..=t].iter().flat_map(|x| x.sys.iter().chain(x.usr.iter())).collect();
                for (_, _, v) in turn.state.iter() {
                    for tok in v {
                        assert!(text.contains(tok), "value token {tok} missing from input");
                    }
                }
            }
        }
    }

    #[test]
    fn unseen_subset_has_zero_value_overlap_with_train() {
        let (train, _, test) = generate_toy_corpus(&small_spec()).unwrap();
        let train_values: BTreeSet<String> = train
            .iter()
            .flat_map(|d| d.turns.last().unwrap().state.iter().map(|(_, _, v)| v.join(" ")))
            .collect();
        let unseen: Vec<&Dialogue> = test.iter().filter(|d| d.unseen).collect();
        assert!(!unseen.is_empty());
        for d in &unseen {
            for (_, _, v) in d.turns.last().unwrap().state.iter() {
                assert!(!train_values.contains(&v.join(" ")));
                // token-level disjointness, not just full-string
                for tok in v {
                    assert!(
                        !train_values.iter().any(|tv| tv.split(' ').any(|t| t == tok)),
                        "held-out token {tok} leaked into train values"
                    );
                }
            }
        }
    }

    #[test]
    fn lexicon_too_small_is_a_config_error() {
        let spec = ToyGrammarSpec {
            name_words: vec!["only".into(), "two".into()],
            name_len_min: 3,
            name_len_max: 3,
            ..small_spec()
        };
        assert!(matches!(generate_toy_corpus(&spec), Err(CreditError::Config(_))));
    }

    #[test]
    fn states_are_valid_and_cumulative() {
        let spec = small_spec();
        let schema = spec.schema().unwrap();
        let (train, _, _) = generate_toy_corpus(&spec).unwrap();
        for d in &train {
            let mut prev = 0;
            for turn in &d.turns {
                turn.state.validate(&schema).unwrap();
                assert!(turn.state.len() >= prev, "cumulative state shrank");
                prev = turn.state.len();
            }
        }
    }
}
