//! The structured state language.
//!
//! A dialogue state — a set of domain-slot-value triples — is linearized as a
//! marked token sequence: `<hotel> <name> a and b guest house <area> centre
//! </hotel> <EOB>`. The *sketch* is the same sequence with value tokens
//! removed. This module owns the grammar: serialization, parsing, sketch
//! derivation, and the next-token mask automaton that makes masked decoding
//! emit only translatable sequences.
//!
//! Grammar:
//! ```text
//! state        := domain_block* <EOB>
//! domain_block := <d> (slot value_token+)* </d>      (each domain at most once)
//! sketch_block := <d> slot* </d>
//! ```
//! Slot tokens are legal only inside a domain whose schema declares them.
//! The parser is written as a direct recursive descent over the block
//! structure, deliberately independent of the mask automaton, so the two can
//! be checked against each other by exhaustive enumeration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};

pub const EOB: &str = "<EOB>";

/// Spelling of a domain-open marker: `<hotel>`.
pub fn domain_open(name: &str) -> String {
    format!("<{name}>")
}

/// Spelling of a domain-close marker: `</hotel>`.
pub fn domain_close(name: &str) -> String {
    format!("</{name}>")
}

/// Spelling of a slot marker: `<area>`. Shared across domains that declare
/// the same slot name; legality is scoped by the enclosing domain.
pub fn slot_marker(name: &str) -> String {
    format!("<{name}>")
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// One domain and its declared slots, in canonical declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub domain: String,
    pub slots: Vec<String>,
}

/// The schema registry: domains and their allowed slots. Declaration order is
/// the canonical serialization order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: Vec<DomainSchema>,
}

impl Schema {
    pub fn new(domains: Vec<DomainSchema>) -> Result<Self> {
        let schema = Schema { domains };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(CreditError::schema("schema has no domains"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if d.domain == "EOB" || d.domain.is_empty() || d.domain.contains(char::is_whitespace) {
                return Err(CreditError::schema(format!("bad domain name {:?}", d.domain)));
            }
            if !seen.insert(&d.domain) {
                return Err(CreditError::schema(format!("duplicate domain {:?}", d.domain)));
            }
            let mut slot_seen = std::collections::BTreeSet::new();
            for s in &d.slots {
                if s == "EOB" || s.is_empty() || s.contains(char::is_whitespace) {
                    return Err(CreditError::schema(format!("bad slot name {:?}", s)));
                }
                // A slot spelled like a domain marker would make token classes ambiguous.
                if self.domains.iter().any(|dd| dd.domain == *s) {
                    return Err(CreditError::schema(format!(
                        "slot {:?} collides with a domain name",
                        s
                    )));
                }
                if !slot_seen.insert(s) {
                    return Err(CreditError::schema(format!(
                        "duplicate slot {:?} in domain {:?}",
                        s, d.domain
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.domain == name)
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Total slot count across domains (the "M" of ITC probes).
    pub fn n_slots(&self) -> usize {
        self.domains.iter().map(|d| d.slots.len()).sum()
    }

    /// All marker spellings: every domain open/close, every distinct slot
    /// marker, and the end token. Order is deterministic: opens/closes in
    /// declaration order, then slots in first-appearance order, then `<EOB>`.
    pub fn marker_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.domains {
            out.push(domain_open(&d.domain));
            out.push(domain_close(&d.domain));
        }
        for d in &self.domains {
            for s in &d.slots {
                let m = slot_marker(s);
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
        out.push(EOB.to_string());
        out
    }

    /// Classify a surface token against this schema.
    pub fn classify(&self, token: &str) -> TokenClass {
        if token == EOB {
            return TokenClass::End;
        }
        if let Some(inner) = token.strip_prefix("</").and_then(|t| t.strip_suffix('>')) {
            if let Some(d) = self.domain_index(inner) {
                return TokenClass::DomainClose(d);
            }
        } else if let Some(inner) = token.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
            if let Some(d) = self.domain_index(inner) {
                return TokenClass::DomainOpen(d);
            }
            if self.domains.iter().any(|d| d.slots.iter().any(|s| s == inner)) {
                return TokenClass::Slot(inner.to_string());
            }
        }
        TokenClass::Value
    }

    pub fn slot_in_domain(&self, domain_idx: usize, slot: &str) -> bool {
        self.domains[domain_idx].slots.iter().any(|s| s == slot)
    }

    /// Load from the registry file format: a JSON array of
    /// `{"domain": ..., "slots": [...]}` entries in declaration order.
    pub fn from_json(text: &str) -> Result<Self> {
        let domains: Vec<DomainSchema> = serde_json::from_str(text)?;
        Schema::new(domains)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.domains).expect("schema serializes")
    }

    /// Synthetic schema for probes and tests: `dom0..domN` with
    /// `slot0..slotK` each, all slots distinct across domains.
    pub fn synthetic(n_domains: usize, slots_per_domain: usize) -> Schema {
        let domains = (0..n_domains)
            .map(|d| DomainSchema {
                domain: format!("dom{d}"),
                slots: (0..slots_per_domain).map(|s| format!("slot{d}_{s}")).collect(),
            })
            .collect();
        Schema::new(domains).expect("synthetic schema is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenClass {
    DomainOpen(usize),
    DomainClose(usize),
    Slot(String),
    Value,
    End,
}

// ---------------------------------------------------------------------------
// States and sequences
// ---------------------------------------------------------------------------

/// One domain-slot-value triple. Values are non-empty token sequences.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotTriple {
    pub domain: String,
    pub slot: String,
    pub value: Vec<String>,
}

impl SlotTriple {
    pub fn new(domain: &str, slot: &str, value: &str) -> Self {
        SlotTriple {
            domain: domain.to_string(),
            slot: slot.to_string(),
            value: value.split_whitespace().map(|t| t.to_string()).collect(),
        }
    }
}

/// A dialogue state: at most one value per (domain, slot); slots with no
/// confirmed value are simply absent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    triples: BTreeMap<(String, String), Vec<String>>,
}

impl DialogueState {
    pub fn empty() -> Self {
        DialogueState::default()
    }

    /// Build from triples, rejecting duplicates and empty values.
    pub fn from_triples(triples: impl IntoIterator<Item = SlotTriple>) -> Result<Self> {
        let mut st = DialogueState::empty();
        for t in triples {
            if t.value.is_empty() {
                return Err(CreditError::schema(format!(
                    "empty value for ({}, {})",
                    t.domain, t.slot
                )));
            }
            let key = (t.domain, t.slot);
            if st.triples.contains_key(&key) {
                return Err(CreditError::schema(format!(
                    "duplicate triple for ({}, {})",
                    key.0, key.1
                )));
            }
            st.triples.insert(key, t.value);
        }
        Ok(st)
    }

    /// Insert or overwrite (used by parsing, where last occurrence wins, and
    /// by cumulative state updates).
    pub fn set(&mut self, domain: &str, slot: &str, value: Vec<String>) {
        self.triples.insert((domain.to_string(), slot.to_string()), value);
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&[String]> {
        self.triples.get(&(domain.to_string(), slot.to_string())).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[String])> {
        self.triples.iter().map(|((d, s), v)| (d.as_str(), s.as_str(), v.as_slice()))
    }

    /// The (domain, slot) pair multiset — the sketch-level content.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.triples.keys().cloned().collect()
    }

    /// Check every triple against the schema and value tokens against the
    /// marker alphabet.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for (d, s, v) in self.iter() {
            let di = schema
                .domain_index(d)
                .ok_or_else(|| CreditError::schema(format!("unknown domain {d:?}")))?;
            if !schema.slot_in_domain(di, s) {
                return Err(CreditError::schema(format!("slot {s:?} not in domain {d:?}")));
            }
            if v.is_empty() {
                return Err(CreditError::schema(format!("empty value for ({d}, {s})")));
            }
            for tok in v {
                if !matches!(schema.classify(tok), TokenClass::Value) {
                    return Err(CreditError::schema(format!(
                        "value token {tok:?} collides with a structural marker"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for DialogueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> =
            self.iter().map(|(d, s, v)| format!("({d},{s},{})", v.join(" "))).collect();
        write!(f, "{{{}}}", items.join(", "))
    }
}

/// Explicit serialization orders. Domains and slots not listed sort after
/// listed ones, by name.
#[derive(Clone, Debug)]
pub struct SerializeOrder {
    domain_rank: BTreeMap<String, usize>,
    slot_rank: BTreeMap<String, usize>,
}

impl SerializeOrder {
    pub fn new(domains: &[String], slots: &[String]) -> Self {
        SerializeOrder {
            domain_rank: domains.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect(),
            slot_rank: slots.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
        }
    }

    /// Canonical order: schema declaration order for both domains and slots.
    pub fn canonical(schema: &Schema) -> Self {
        let domains: Vec<String> = schema.domains.iter().map(|d| d.domain.clone()).collect();
        let mut slots = Vec::new();
        for d in &schema.domains {
            for s in &d.slots {
                if !slots.contains(s) {
                    slots.push(s.clone());
                }
            }
        }
        SerializeOrder::new(&domains, &slots)
    }

    fn rank<'a>(map: &BTreeMap<String, usize>, key: &'a str) -> (usize, &'a str) {
        (map.get(key).copied().unwrap_or(usize::MAX), key)
    }
}

/// Linearize a state into the marked token sequence, domains and slots in the
/// given canonical orders, terminated by `<EOB>`.
pub fn serialize_state(
    state: &DialogueState,
    schema: &Schema,
    order: &SerializeOrder,
) -> Result<Vec<String>> {
    state.validate(schema)?;
    let mut domains: Vec<&str> = Vec::new();
    for (d, _, _) in state.iter() {
        if !domains.contains(&d) {
            domains.push(d);
        }
    }
    domains.sort_by_key(|d| SerializeOrder::rank(&order.domain_rank, d));

    let mut out = Vec::new();
    for d in domains {
        out.push(domain_open(d));
        let mut slots: Vec<(&str, &[String])> =
            state.iter().filter(|(dd, _, _)| *dd == d).map(|(_, s, v)| (s, v)).collect();
        slots.sort_by_key(|(s, _)| SerializeOrder::rank(&order.slot_rank, s));
        for (s, v) in slots {
            out.push(slot_marker(s));
            out.extend(v.iter().cloned());
        }
        out.push(domain_close(d));
    }
    out.push(EOB.to_string());
    Ok(out)
}

/// Canonical-order convenience wrapper.
pub fn serialize_state_canonical(state: &DialogueState, schema: &Schema) -> Result<Vec<String>> {
    serialize_state(state, schema, &SerializeOrder::canonical(schema))
}

/// Warnings produced by permissive parsing of model output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// (domain, slot) pairs that occurred more than once; last occurrence won.
    pub duplicate_pairs: Vec<(String, String)>,
}

/// Parse a token sequence into a dialogue state.
///
/// Recursive descent over the block grammar; accepts arbitrary token
/// sequences and reports the first offending position on failure. Duplicate
/// (domain, slot) pairs are tolerated (last wins, warned); duplicate domain
/// blocks are not, since domain content must stay contiguous.
pub fn parse_state(tokens: &[String], schema: &Schema) -> Result<(DialogueState, ParseWarnings)> {
    let err = |position: usize, reason: &str| CreditError::Parse {
        position,
        reason: reason.to_string(),
    };
    let mut state = DialogueState::empty();
    let mut warnings = ParseWarnings::default();
    let mut used: Vec<bool> = vec![false; schema.n_domains()];
    let mut i = 0usize;

    loop {
        let Some(tok) = tokens.get(i) else {
            return Err(err(tokens.len(), "expected a domain marker or <EOB>, found end"));
        };
        match schema.classify(tok) {
            TokenClass::End => {
                if i + 1 != tokens.len() {
                    return Err(err(i + 1, "tokens after <EOB>"));
                }
                return Ok((state, warnings));
            }
            TokenClass::DomainOpen(d) => {
                if used[d] {
                    return Err(err(i, "domain block reopened"));
                }
                used[d] = true;
                i += 1;
                // slot groups until the matching close
                loop {
                    let Some(tok) = tokens.get(i) else {
                        return Err(err(tokens.len(), "unclosed domain block"));
                    };
                    match schema.classify(tok) {
                        TokenClass::DomainClose(dc) if dc == d => {
                            i += 1;
                            break;
                        }
                        TokenClass::Slot(s) if schema.slot_in_domain(d, &s) => {
                            i += 1;
                            let start = i;
                            while let Some(t) = tokens.get(i) {
                                if matches!(schema.classify(t), TokenClass::Value) {
                                    i += 1;
                                } else {
                                    break;
                                }
                            }
                            if i == start {
                                return Err(err(i, "slot requires at least one value token"));
                            }
                            let value: Vec<String> = tokens[start..i].to_vec();
                            let domain = schema.domains[d].domain.clone();
                            if state.get(&domain, &s).is_some() {
                                warnings.duplicate_pairs.push((domain.clone(), s.clone()));
                            }
                            state.set(&domain, &s, value);
                        }
                        TokenClass::Slot(_) => {
                            return Err(err(i, "slot not declared for this domain"));
                        }
                        TokenClass::DomainClose(_) => {
                            return Err(err(i, "mismatched domain close"));
                        }
                        TokenClass::DomainOpen(_) => {
                            return Err(err(i, "domain opened inside a domain block"));
                        }
                        TokenClass::Value => {
                            return Err(err(i, "value token outside a slot group"));
                        }
                        TokenClass::End => {
                            return Err(err(i, "<EOB> inside a domain block"));
                        }
                    }
                }
            }
            TokenClass::DomainClose(_) | TokenClass::Slot(_) | TokenClass::Value => {
                return Err(err(i, "the first token of a block must open a domain or be <EOB>"));
            }
        }
    }
}

/// Strip value tokens from a grammatical state sequence, preserving
/// structural tokens in order.
pub fn derive_sketch(tokens: &[String], schema: &Schema) -> Result<Vec<String>> {
    parse_state(tokens, schema)?;
    Ok(tokens
        .iter()
        .filter(|t| !matches!(schema.classify(t), TokenClass::Value))
        .cloned()
        .collect())
}

// ---------------------------------------------------------------------------
// Mask automaton
// ---------------------------------------------------------------------------

/// Whether the automaton constrains full state sequences or sketches
/// (sketches allow a slot marker with no value tokens and no value tokens at
/// all).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GrammarMode {
    State,
    Sketch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Pos {
    /// Before any block or between blocks.
    Top,
    /// Right after `<d>`: expect a slot of `d` or `</d>`.
    Open(usize),
    /// Right after a slot marker of `d` (state mode: a value must follow).
    AfterSlot(usize),
    /// Inside a value token run of `d` (state mode only).
    InValue(usize),
    /// After `<EOB>`; nothing is legal.
    Done,
}

/// Legal-next-token set, as marker spellings plus an "any value token" class
/// (value tokens are an open class — any non-marker vocabulary token).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NextTokens {
    pub markers: Vec<String>,
    pub allows_values: bool,
}

impl NextTokens {
    pub fn is_empty(&self) -> bool {
        self.markers.is_empty() && !self.allows_values
    }

    pub fn contains(&self, token: &str, schema: &Schema) -> bool {
        if self.markers.iter().any(|m| m == token) {
            return true;
        }
        self.allows_values && matches!(schema.classify(token), TokenClass::Value)
    }
}

/// Incremental grammar-mask automaton. For any prefix the set of legal next
/// tokens is a pure function of the prefix; following the mask at every step
/// and stopping at `<EOB>` yields exactly the parser-accepted language.
#[derive(Clone, Debug)]
pub struct MaskAutomaton<'s> {
    schema: &'s Schema,
    mode: GrammarMode,
    pos: Pos,
    used: Vec<bool>,
    steps: usize,
}

impl<'s> MaskAutomaton<'s> {
    pub fn new(schema: &'s Schema, mode: GrammarMode) -> Self {
        MaskAutomaton { schema, mode, pos: Pos::Top, used: vec![false; schema.n_domains()], steps: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == Pos::Done
    }

    /// Legal next tokens for the current prefix. Empty exactly when the
    /// sequence is complete (after `<EOB>`).
    pub fn legal(&self) -> NextTokens {
        let mut next = NextTokens::default();
        match &self.pos {
            Pos::Top => {
                for (d, ds) in self.schema.domains.iter().enumerate() {
                    if !self.used[d] {
                        next.markers.push(domain_open(&ds.domain));
                    }
                }
                next.markers.push(EOB.to_string());
            }
            Pos::Open(d) => {
                for s in &self.schema.domains[*d].slots {
                    next.markers.push(slot_marker(s));
                }
                next.markers.push(domain_close(&self.schema.domains[*d].domain));
            }
            Pos::AfterSlot(d) => match self.mode {
                GrammarMode::State => next.allows_values = true,
                GrammarMode::Sketch => {
                    for s in &self.schema.domains[*d].slots {
                        next.markers.push(slot_marker(s));
                    }
                    next.markers.push(domain_close(&self.schema.domains[*d].domain));
                }
            },
            Pos::InValue(d) => {
                next.allows_values = true;
                for s in &self.schema.domains[*d].slots {
                    next.markers.push(slot_marker(s));
                }
                next.markers.push(domain_close(&self.schema.domains[*d].domain));
            }
            Pos::Done => {}
        }
        next
    }

    /// Fewest tokens needed to reach a complete sequence from here.
    pub fn min_completion(&self) -> usize {
        match &self.pos {
            Pos::Done => 0,
            Pos::Top => 1,                       // <EOB>
            Pos::Open(_) | Pos::InValue(_) => 2, // </d> <EOB>
            Pos::AfterSlot(_) => match self.mode {
                GrammarMode::State => 3, // value </d> <EOB>
                GrammarMode::Sketch => 2,
            },
        }
    }

    /// Legal next tokens that still allow the sequence to finish within
    /// `remaining` tokens (including the candidate itself). Decoders use this
    /// so a length budget can never strand a decode mid-block.
    pub fn legal_within(&self, remaining: usize) -> NextTokens {
        let legal = self.legal();
        let fits = |token: &str| -> bool {
            let mut probe = self.clone();
            probe.advance(token).expect("candidate came from legal()");
            1 + probe.min_completion() <= remaining
        };
        let markers = legal.markers.into_iter().filter(|m| fits(m)).collect();
        let allows_values = legal.allows_values && {
            // any value token behaves the same: InValue needs 2 more
            1 + 2 <= remaining
        };
        NextTokens { markers, allows_values }
    }

    /// Advance by one token. Errors if the token is not legal here — i.e. the
    /// prefix handed to the mask was not itself mask-consistent.
    pub fn advance(&mut self, token: &str) -> Result<()> {
        let legal = self.legal();
        if !legal.contains(token, self.schema) {
            return Err(CreditError::MaskContract {
                position: self.steps,
                reason: format!("token {token:?} not in the legal set"),
            });
        }
        self.pos = match (&self.pos, self.schema.classify(token)) {
            (Pos::Top, TokenClass::End) => Pos::Done,
            (Pos::Top, TokenClass::DomainOpen(d)) => {
                self.used[d] = true;
                Pos::Open(d)
            }
            (Pos::Open(d) | Pos::AfterSlot(d) | Pos::InValue(d), TokenClass::Slot(_)) => {
                Pos::AfterSlot(*d)
            }
            (Pos::Open(_) | Pos::AfterSlot(_) | Pos::InValue(_), TokenClass::DomainClose(_)) => {
                Pos::Top
            }
            (Pos::AfterSlot(d) | Pos::InValue(d), TokenClass::Value) => Pos::InValue(*d),
            (pos, class) => unreachable!("legal() admitted {token:?} ({class:?}) at {pos:?}"),
        };
        self.steps += 1;
        Ok(())
    }
}

/// One-shot legal-next-token query for an explicit prefix.
pub fn next_token_mask(
    schema: &Schema,
    mode: GrammarMode,
    prefix: &[String],
) -> Result<NextTokens> {
    let mut auto = MaskAutomaton::new(schema, mode);
    for tok in prefix {
        auto.advance(tok)?;
    }
    Ok(auto.legal())
}

/// True iff the whole sequence is producible by following the mask and
/// terminating exactly at `<EOB>`.
pub fn mask_accepts(schema: &Schema, mode: GrammarMode, tokens: &[String]) -> bool {
    let mut auto = MaskAutomaton::new(schema, mode);
    for tok in tokens {
        if auto.advance(tok).is_err() {
            return false;
        }
    }
    auto.is_done()
}
