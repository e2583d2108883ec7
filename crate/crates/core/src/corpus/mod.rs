//! Dialogue corpora and vocabularies.
//!
//! Corpus JSON schema, one dialogue per entry:
//! `{"id": ..., "turns": [{"sys": ..., "usr": ..., "state": [[domain, slot, value], ...]}]}`
//! with an optional `"unseen": true` flag on toy test dialogues whose open
//! values come from the held-out lexicon.
//!
//! Vocab file format: one token per line, index = line number, PAD on line 0.

pub mod multiwoz;
pub mod toy;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{DialogueState, Schema, SlotTriple};
use crate::error::{CreditError, Result};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const SOS: &str = "<SOS>";

/// One dialogue turn: system utterance (empty on turn 1), user utterance, and
/// the cumulative gold state after this turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub sys: Vec<String>,
    pub usr: Vec<String>,
    pub state: DialogueState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    /// Toy-corpus flag: values drawn from the held-out lexicon.
    pub unseen: bool,
}

impl Dialogue {
    /// All utterances up to and including turn `t`, in dialogue order
    /// (sys, usr, sys, usr, ...). Empty utterances are kept; the encoder
    /// substitutes PAD.
    pub fn utterances_upto(&self, t: usize) -> Vec<&[String]> {
        let mut out = Vec::with_capacity(2 * (t + 1));
        for turn in &self.turns[..=t] {
            out.push(turn.sys.as_slice());
            out.push(turn.usr.as_slice());
        }
        out
    }
}

/// Lowercase, split on whitespace, and split punctuation off word boundaries.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = String::new();
        for ch in lower.chars() {
            if ch.is_alphanumeric() || ch == '\'' || ch == '_' || ch == '<' || ch == '>' || ch == '/' {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TurnJson {
    sys: String,
    usr: String,
    state: Vec<[String; 3]>,
}

#[derive(Serialize, Deserialize)]
struct DialogueJson {
    id: String,
    turns: Vec<TurnJson>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    unseen: bool,
}

pub fn dialogues_to_json(dialogues: &[Dialogue]) -> Result<String> {
    let wire: Vec<DialogueJson> = dialogues
        .iter()
        .map(|d| DialogueJson {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnJson {
                    sys: t.sys.join(" "),
                    usr: t.usr.join(" "),
                    state: t
                        .state
                        .iter()
                        .map(|(dm, sl, v)| [dm.to_string(), sl.to_string(), v.join(" ")])
                        .collect(),
                })
                .collect(),
            unseen: d.unseen,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&wire)?)
}

pub fn dialogues_from_json(text: &str) -> Result<Vec<Dialogue>> {
    let wire: Vec<DialogueJson> = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(wire.len());
    for d in wire {
        let mut turns = Vec::with_capacity(d.turns.len());
        for t in d.turns {
            let triples = t
                .state
                .iter()
                .map(|[dm, sl, v]| SlotTriple::new(dm, sl, v))
                .collect::<Vec<_>>();
            let state = DialogueState::from_triples(triples).map_err(|e| {
                CreditError::corpus(format!("dialogue {}: {e}", d.id))
            })?;
            turns.push(Turn { sys: tokenize(&t.sys), usr: tokenize(&t.usr), state });
        }
        if turns.is_empty() {
            return Err(CreditError::corpus(format!("dialogue {} has no turns", d.id)));
        }
        out.push(Dialogue { id: d.id, turns, unseen: d.unseen });
    }
    Ok(out)
}

pub fn save_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    std::fs::write(path, dialogues_to_json(dialogues)?)?;
    Ok(())
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CreditError::corpus(format!("{}: {e}", path.display())))?;
    dialogues_from_json(&text)
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub type TokenId = u32;

/// Token ↔ index bijection. Index 0 is PAD; UNK, SOS and every structural
/// marker are always present.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from corpora: specials, then schema markers, then corpus tokens
    /// by descending frequency (ties lexicographic), capped at `max_vocab`
    /// total entries (markers and specials always kept).
    pub fn build(corpora: &[&[Dialogue]], schema: &Schema, max_vocab: usize) -> Self {
        let mut tokens: Vec<String> =
            vec![PAD.to_string(), UNK.to_string(), SOS.to_string()];
        tokens.extend(schema.marker_tokens());

        let mut freq: HashMap<String, u64> = HashMap::new();
        for corpus in corpora {
            for d in *corpus {
                for t in &d.turns {
                    for tok in t.sys.iter().chain(t.usr.iter()) {
                        *freq.entry(tok.clone()).or_insert(0) += 1;
                    }
                    for (_, _, v) in t.state.iter() {
                        for tok in v {
                            *freq.entry(tok.clone()).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
        let mut by_freq: Vec<(String, u64)> =
            freq.into_iter().filter(|(t, _)| !tokens.contains(t)).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in by_freq {
            if tokens.len() >= max_vocab {
                break;
            }
            tokens.push(tok);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        1
    }

    pub fn sos(&self) -> TokenId {
        2
    }

    pub fn eob(&self) -> TokenId {
        self.index[crate::codec::EOB]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, index = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CreditError::corpus(format!("{}: {e}", path.display())))?;
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(|t| t.as_str()) != Some(PAD) {
            return Err(CreditError::corpus("vocab must start with the PAD token"));
        }
        let index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        if index.len() != tokens.len() {
            return Err(CreditError::corpus("vocab contains duplicate tokens"));
        }
        Ok(Vocabulary { tokens, index })
    }
}

/// One training example per turn prefix: every utterance up to turn `t` as
/// input, the serialized cumulative state at `t` as target.
#[derive(Clone, Debug)]
pub struct Example {
    pub dialogue_id: String,
    pub turn_idx: usize,
    /// Encoded utterances; empty utterances already replaced by [PAD].
    pub utterances: Vec<Vec<TokenId>>,
    /// Gold state sequence (token ids), ending in `<EOB>`.
    pub state_ids: Vec<TokenId>,
    /// Gold sketch sequence (token ids), ending in `<EOB>`.
    pub sketch_ids: Vec<TokenId>,
    /// Gold state surface tokens (for BLEU/reward against decoded strings).
    pub state_tokens: Vec<String>,
    pub sketch_tokens: Vec<String>,
    pub gold_state: DialogueState,
    pub unseen: bool,
}

/// Expand dialogues into turn-prefix examples. `flat` concatenates the whole
/// history into a single utterance (the flat-encoder ablation).
pub fn expand_examples(
    dialogues: &[Dialogue],
    schema: &Schema,
    vocab: &Vocabulary,
    flat: bool,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            let mut utts: Vec<Vec<TokenId>> = Vec::new();
            if flat {
                let mut all = Vec::new();
                for u in d.utterances_upto(t) {
                    all.extend(vocab.encode(u));
                }
                if all.is_empty() {
                    all.push(vocab.pad());
                }
                utts.push(all);
            } else {
                for u in d.utterances_upto(t) {
                    let ids = if u.is_empty() { vec![vocab.pad()] } else { vocab.encode(u) };
                    utts.push(ids);
                }
            }
            let state_tokens = crate::codec::serialize_state_canonical(&turn.state, schema)?;
            let sketch_tokens = crate::codec::derive_sketch(&state_tokens, schema)?;
            out.push(Example {
                dialogue_id: d.id.clone(),
                turn_idx: t,
                utterances: utts,
                state_ids: vocab.encode(&state_tokens),
                sketch_ids: vocab.encode(&sketch_tokens),
                state_tokens,
                sketch_tokens,
                gold_state: turn.state.clone(),
                unseen: d.unseen,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DomainSchema;

    fn schema() -> Schema {
        Schema::new(vec![DomainSchema {
            domain: "hotel".into(),
            slots: vec!["name".into(), "area".into()],
        }])
        .unwrap()
    }

    fn sample_dialogue() -> Dialogue {
        let mut st = DialogueState::empty();
        st.set("hotel", "area", vec!["centre".into()]);
        Dialogue {
            id: "d0".into(),
            turns: vec![
                Turn { sys: vec![], usr: tokenize("a hotel in the centre"), state: st.clone() },
                Turn {
                    sys: tokenize("ok noted"),
                    usr: tokenize("thanks !"),
                    state: st,
                },
            ],
            unseen: false,
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World! it's fine."),
            vec!["hello", ",", "world", "!", "it's", "fine", "."]
        );
    }

    #[test]
    fn corpus_json_roundtrip() {
        let ds = vec![sample_dialogue()];
        let json = dialogues_to_json(&ds).unwrap();
        let back = dialogues_from_json(&json).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn vocab_reserves_specials_and_markers() {
        let ds = vec![sample_dialogue()];
        let schema = schema();
        let v = Vocabulary::build(&[&ds], &schema, 1000);
        assert_eq!(v.token(0), PAD);
        assert_eq!(v.token(1), UNK);
        assert_eq!(v.token(2), SOS);
        for m in schema.marker_tokens() {
            assert!(v.id(&m).is_some(), "marker {m} must be in vocab");
        }
        // round trip on in-vocab text
        let ids = v.encode(&tokenize("a hotel in the centre"));
        assert_eq!(v.encode(&v.decode(&ids)), ids);
        // unknown words map to UNK
        assert_eq!(v.id_or_unk("zzzgarbage"), v.unk());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let ds = vec![sample_dialogue()];
        let v = Vocabulary::build(&[&ds], &schema(), 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn turn_prefix_expansion_counts() {
        let ds = vec![sample_dialogue(), sample_dialogue()];
        let schema = schema();
        let v = Vocabulary::build(&[&ds], &schema, 1000);
        let ex = expand_examples(&ds, &schema, &v, false).unwrap();
        assert_eq!(ex.len(), 4); // Σ turn counts
        assert_eq!(ex[0].utterances.len(), 2); // sys + usr per turn
        assert_eq!(ex[1].utterances.len(), 4);
        // empty sys on turn 1 becomes [PAD]
        assert_eq!(ex[0].utterances[0], vec![v.pad()]);
        // flat mode: one concatenated utterance
        let flat = expand_examples(&ds, &schema, &v, true).unwrap();
        assert_eq!(flat[1].utterances.len(), 1);
    }
}
