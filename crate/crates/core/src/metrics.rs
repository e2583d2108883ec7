//! Evaluation: joint goal/sketch accuracy, BLEU, the ITC probe, and
//! attention heat-map export.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::codec::{parse_state, DialogueState, Schema, TokenClass};
use crate::corpus::{Example, TokenId};
use crate::error::Result;
use crate::model::{AttentionTrace, CreditModel, DecodeOptions, Prediction};
use crate::par;

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches<T: Eq + Hash + Clone>(cand: &[T], refr: &[T], n: usize) -> (usize, usize) {
    let total = cand.len().saturating_sub(n - 1);
    if total == 0 {
        return (0, 0);
    }
    let rc = ngram_counts(refr, n);
    let cc = ngram_counts(cand, n);
    let matched = cc
        .iter()
        .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Smoothed sentence BLEU-4 on the 0–1 scale: add-one smoothing on every
/// n-gram precision, so identical sequences score exactly 1 and disjoint
/// sequences land on a small positive smoothing floor. Empty candidates
/// score 0.
pub fn sentence_bleu<T: Eq + Hash + Clone>(cand: &[T], refr: &[T]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = clipped_matches(cand, refr, n);
        log_sum += (((m + 1) as f64) / ((t + 1) as f64)).ln();
    }
    brevity_penalty(cand.len(), refr.len()) * (log_sum / 4.0).exp()
}

/// Conventional corpus BLEU-4 (0–1): clipped counts pooled over the corpus,
/// no smoothing; zero if any pooled precision is zero.
pub fn corpus_bleu<T: Eq + Hash + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut match_n = [0usize; 4];
    let mut total_n = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refr) in pairs {
        cand_len += cand.len();
        ref_len += refr.len();
        for n in 1..=4 {
            let (m, t) = clipped_matches(cand, refr, n);
            match_n[n - 1] += m;
            total_n[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if match_n[n] == 0 || total_n[n] == 0 {
            return 0.0;
        }
        log_sum += (match_n[n] as f64 / total_n[n] as f64).ln();
    }
    brevity_penalty(cand_len, ref_len) * (log_sum / 4.0).exp()
}

// ---------------------------------------------------------------------------
// Joint accuracies
// ---------------------------------------------------------------------------

/// Per-turn success iff the predicted triple set equals gold exactly;
/// untranslatable predictions count as failures.
pub fn joint_goal_accuracy(preds: &[Option<DialogueState>], golds: &[DialogueState]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "prediction/gold length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(golds.iter())
        .filter(|(p, g)| p.as_ref() == Some(g))
        .count();
    hits as f64 / preds.len() as f64
}

/// Multiset of (domain, slot) pairs in a sketch sequence, or `None` when the
/// sketch does not parse. Order-insensitive (sorted).
pub fn sketch_pairs(tokens: &[String], schema: &Schema) -> Option<Vec<(String, String)>> {
    if !crate::codec::mask_accepts(schema, crate::codec::GrammarMode::Sketch, &tokens.to_vec()) {
        return None;
    }
    let mut pairs = Vec::new();
    let mut current: Option<String> = None;
    for tok in tokens {
        match schema.classify(tok) {
            TokenClass::DomainOpen(d) => current = Some(schema.domains[d].domain.clone()),
            TokenClass::DomainClose(_) => current = None,
            TokenClass::Slot(s) => {
                pairs.push((current.clone().expect("slot inside a domain"), s));
            }
            _ => {}
        }
    }
    pairs.sort();
    Some(pairs)
}

/// Per-turn success iff predicted and gold (domain, slot) multisets agree.
pub fn joint_sketch_accuracy(
    preds: &[Option<Vec<(String, String)>>],
    golds: &[Vec<(String, String)>],
) -> f64 {
    assert_eq!(preds.len(), golds.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(golds.iter())
        .filter(|(p, g)| {
            let mut g = (*g).clone();
            g.sort();
            p.as_ref() == Some(&g)
        })
        .count();
    hits as f64 / preds.len() as f64
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_turns: usize,
    pub joint_goal_acc: f64,
    /// Absent under the no-coarse ablation (no sketch pass exists).
    pub joint_sketch_acc: Option<f64>,
    pub corpus_bleu: f64,
    pub mean_sentence_bleu: f64,
    /// Joint accuracy per domain, over turns whose gold state mentions it.
    pub per_domain: BTreeMap<String, f64>,
    pub translatability_rate: f64,
    pub decoder_passes_total: usize,
    pub decoded_tokens_total: usize,
    pub truncated_turns: usize,
}

#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn_idx: usize,
    pub state_tokens: Vec<String>,
    pub state: Option<DialogueState>,
    pub unseen: bool,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Decode every example (masked greedy) and score it.
pub fn evaluate(model: &CreditModel, examples: &[Example]) -> EvalOutcome {
    let opts = DecodeOptions::default();
    let preds: Vec<Prediction> =
        par::ordered_map(examples, |ex| model.predict(&ex.utterances, &opts));
    score_predictions(model, examples, preds)
}

fn score_predictions(
    model: &CreditModel,
    examples: &[Example],
    preds: Vec<Prediction>,
) -> EvalOutcome {
    let schema = &model.schema;
    let states: Vec<Option<DialogueState>> = preds.iter().map(|p| p.state.clone()).collect();
    let golds: Vec<DialogueState> = examples.iter().map(|e| e.gold_state.clone()).collect();
    let joint = joint_goal_accuracy(&states, &golds);

    let sketch_acc = if model.meta.no_coarse {
        None
    } else {
        let pred_pairs: Vec<Option<Vec<(String, String)>>> = preds
            .iter()
            .map(|p| p.sketch_tokens.as_ref().and_then(|t| sketch_pairs(t, schema)))
            .collect();
        let gold_pairs: Vec<Vec<(String, String)>> =
            examples.iter().map(|e| e.gold_state.pairs()).collect();
        Some(joint_sketch_accuracy(&pred_pairs, &gold_pairs))
    };

    let bleu_pairs: Vec<(Vec<String>, Vec<String>)> = preds
        .iter()
        .zip(examples.iter())
        .map(|(p, e)| (p.state_tokens.clone(), e.state_tokens.clone()))
        .collect();
    let cbleu = corpus_bleu(&bleu_pairs);
    let mean_bleu = bleu_pairs
        .iter()
        .map(|(c, r)| sentence_bleu(c, r))
        .sum::<f64>()
        / bleu_pairs.len().max(1) as f64;

    let mut per_domain: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, e) in states.iter().zip(examples.iter()) {
        for d in schema.domains.iter().map(|d| d.domain.as_str()) {
            let gold_d: Vec<_> = e.gold_state.iter().filter(|(dd, _, _)| *dd == d).collect();
            if gold_d.is_empty() {
                continue;
            }
            let entry = per_domain.entry(d.to_string()).or_insert((0, 0));
            entry.1 += 1;
            if let Some(ps) = p {
                let pred_d: Vec<_> = ps.iter().filter(|(dd, _, _)| *dd == d).collect();
                if pred_d == gold_d {
                    entry.0 += 1;
                }
            }
        }
    }
    let per_domain =
        per_domain.into_iter().map(|(d, (h, n))| (d, h as f64 / n as f64)).collect();

    let translatable = states.iter().filter(|s| s.is_some()).count();
    let report = EvalReport {
        n_turns: examples.len(),
        joint_goal_acc: joint,
        joint_sketch_acc: sketch_acc,
        corpus_bleu: cbleu,
        mean_sentence_bleu: mean_bleu,
        per_domain,
        translatability_rate: translatable as f64 / examples.len().max(1) as f64,
        decoder_passes_total: preds.iter().map(|p| p.decoder_passes).sum(),
        decoded_tokens_total: preds.iter().map(|p| p.decoded_tokens).sum(),
        truncated_turns: preds.iter().filter(|p| p.truncated).count(),
    };
    let predictions = preds
        .into_iter()
        .zip(examples.iter())
        .map(|(p, e)| PredictionRecord {
            dialogue_id: e.dialogue_id.clone(),
            turn_idx: e.turn_idx,
            state_tokens: p.state_tokens,
            state: p.state,
            unseen: e.unseen,
        })
        .collect();
    EvalOutcome { report, predictions }
}

/// Score an existing prediction file (one serialized state per turn) against
/// gold examples, without running a model.
pub fn evaluate_prediction_lines(
    lines: &[(String, usize, Vec<String>)],
    examples: &[Example],
    schema: &Schema,
) -> Result<EvalReport> {
    let by_key: BTreeMap<(String, usize), &Vec<String>> =
        lines.iter().map(|(id, t, toks)| ((id.clone(), *t), toks)).collect();
    let mut states = Vec::with_capacity(examples.len());
    let mut bleu_pairs = Vec::with_capacity(examples.len());
    for e in examples {
        let toks = by_key
            .get(&(e.dialogue_id.clone(), e.turn_idx))
            .map(|t| (*t).clone())
            .unwrap_or_default();
        states.push(parse_state(&toks, schema).ok().map(|(s, _)| s));
        bleu_pairs.push((toks, e.state_tokens.clone()));
    }
    let golds: Vec<DialogueState> = examples.iter().map(|e| e.gold_state.clone()).collect();
    let mean_bleu = bleu_pairs
        .iter()
        .map(|(c, r)| sentence_bleu(c, r))
        .sum::<f64>()
        / bleu_pairs.len().max(1) as f64;
    Ok(EvalReport {
        n_turns: examples.len(),
        joint_goal_acc: joint_goal_accuracy(&states, &golds),
        joint_sketch_acc: None,
        corpus_bleu: corpus_bleu(&bleu_pairs),
        mean_sentence_bleu: mean_bleu,
        per_domain: BTreeMap::new(),
        translatability_rate: states.iter().filter(|s| s.is_some()).count() as f64
            / examples.len().max(1) as f64,
        decoder_passes_total: 0,
        decoded_tokens_total: 0,
        truncated_turns: 0,
    })
}

// ---------------------------------------------------------------------------
// ITC probe
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub n_slots: usize,
    /// Decoder forward sequences per dialogue for this tracker (sketch pass +
    /// state pass).
    pub credit_passes: usize,
    /// A per-slot reference tracker visits every slot: one decode each.
    pub stub_passes: usize,
    /// Tokens decoded for a fixed gold state, teacher-forced (depends on the
    /// state length only, not the schema size).
    pub decoded_tokens: usize,
}

/// Decoder-call accounting across schema sizes. The dialogue content is fixed
/// (one triple), only the schema's slot count changes.
pub fn itc_probe(slot_counts: &[usize], no_coarse: bool, seed: u64) -> Result<Vec<ProbeRow>> {
    use crate::codec::serialize_state_canonical;
    use crate::corpus::{Dialogue, Turn, Vocabulary};
    use crate::model::{DecodeMode, Dropout, ModelMeta};
    use crate::tape::Tape;

    let mut rows = Vec::new();
    for &m in slot_counts {
        let schema = Schema::synthetic(1, m);
        let mut st = DialogueState::empty();
        st.set("dom0", "slot0_0", vec!["ruby".into()]);
        let dialogue = Dialogue {
            id: "probe".into(),
            turns: vec![Turn {
                sys: vec![],
                usr: ["set", "slot0_0", "to", "ruby", "please"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                state: st.clone(),
            }],
            unseen: false,
        };
        let corpus = vec![dialogue];
        let vocab = Vocabulary::build(&[&corpus], &schema, 4096);
        let meta = ModelMeta {
            d_emb: 8,
            d_h: 4,
            no_coarse,
            max_sketch_len: 2 * m + 8,
            ..ModelMeta::default()
        };
        let model = CreditModel::new(meta, schema.clone(), vocab, seed)?;
        let ex = crate::corpus::expand_examples(&corpus, &schema, &model.vocab, false)?;
        let pred = model.predict(&ex[0].utterances, &DecodeOptions::default());

        // Teacher-forced token count: work scales with the state length.
        let gold = serialize_state_canonical(&st, &schema)?;
        let gold_ids = model.vocab.encode(&gold);
        let sketch = crate::codec::derive_sketch(&gold, &schema)?;
        let sketch_ids = model.vocab.encode(&sketch);
        let mut tape = Tape::new(&model.params);
        let mut drop = Dropout::off();
        let enc = model.encode(&mut tape, &ex[0].utterances, &mut drop);
        let mut decoded = 0usize;
        let g = if no_coarse {
            None
        } else {
            let run = model.decode_sketch(
                &mut tape,
                &enc,
                DecodeMode::Forced(&sketch_ids),
                &DecodeOptions::default(),
                &mut drop,
            );
            decoded += run.run.tokens.len();
            Some(model.encode_sketch(&mut tape, &sketch_ids, &mut drop))
        };
        let out = model.decode_state(
            &mut tape,
            &enc,
            &sketch_ids,
            g.as_deref(),
            DecodeMode::Forced(&gold_ids),
            &DecodeOptions::default(),
            &mut drop,
        );
        decoded += out.run.tokens.len();

        rows.push(ProbeRow {
            n_slots: schema.n_slots(),
            credit_passes: pred.decoder_passes,
            stub_passes: per_slot_stub_passes(&schema),
            decoded_tokens: decoded,
        });
    }
    Ok(rows)
}

/// TRADE-style contrast: a tracker that decodes one value per (domain, slot)
/// pair runs one decoder sequence per slot.
pub fn per_slot_stub_passes(schema: &Schema) -> usize {
    schema.n_slots()
}

// ---------------------------------------------------------------------------
// Heat maps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatRow {
    pub utterance: usize,
    pub position: usize,
    pub token: String,
    pub heat: f64,
}

/// Sum the two-stage token attention over all decode steps: the Fig-3 style
/// per-input-token heat.
pub fn heatmap_from_trace(
    trace: &AttentionTrace,
    token_texts: &[Vec<String>],
) -> Vec<HeatRow> {
    let mut rows: Vec<HeatRow> = token_texts
        .iter()
        .enumerate()
        .flat_map(|(i, toks)| {
            toks.iter().enumerate().map(move |(j, t)| HeatRow {
                utterance: i,
                position: j,
                token: t.clone(),
                heat: 0.0,
            })
        })
        .collect();
    let mut idx: HashMap<(usize, usize), usize> = HashMap::new();
    for (k, r) in rows.iter().enumerate() {
        idx.insert((r.utterance, r.position), k);
    }
    for step in &trace.steps {
        for (i, ws) in step.token_weights.iter().enumerate() {
            for (j, _) in ws.iter().enumerate() {
                if let Some(&k) = idx.get(&(i, j)) {
                    rows[k].heat += step.two_stage(i, j);
                }
            }
        }
    }
    rows
}

/// Heat-map file: TSV rows `(utterance, position, token, heat)` consumable by
/// any plotting tool.
pub fn heatmap_to_tsv(rows: &[HeatRow]) -> String {
    let mut out = String::from("utterance\tposition\ttoken\theat\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{:.10}\n", r.utterance, r.position, r.token, r.heat));
    }
    out
}

/// Token ids → surface strings per utterance (for heat-map labels).
pub fn token_texts(model: &CreditModel, utterances: &[Vec<TokenId>]) -> Vec<Vec<String>> {
    utterances
        .iter()
        .map(|u| {
            if u.is_empty() {
                vec![crate::corpus::PAD.to_string()]
            } else {
                u.iter().map(|&t| model.vocab.token(t).to_string()).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SlotTriple;

    fn s(tokens: &str) -> Vec<String> {
        tokens.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn identical_sequences_score_bleu_one() {
        let a = s("<hotel> <area> centre </hotel> <EOB>");
        assert!((sentence_bleu(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_sequences_score_near_zero() {
        let a = s("a b c d e");
        let b = s("v w x y z");
        let score = sentence_bleu(&a, &b);
        assert!(score > 0.0, "add-one smoothing floor");
        assert!(score < 0.3);
        assert_eq!(sentence_bleu::<String>(&[], &b), 0.0);
    }

    #[test]
    fn repeated_tokens_score_below_near_miss() {
        let truth = s("a and b guest house");
        let degenerate = s("a a a a");
        let near = s("a and b guest");
        assert!(sentence_bleu(&degenerate, &truth) < sentence_bleu(&near, &truth));
    }

    #[test]
    fn joint_accuracy_counts_exact_set_matches() {
        let gold: Vec<DialogueState> = (0..10)
            .map(|i| {
                DialogueState::from_triples(vec![SlotTriple::new(
                    "hotel",
                    "area",
                    if i == 0 { "north" } else { "centre" },
                )])
                .unwrap()
            })
            .collect();
        let mut preds: Vec<Option<DialogueState>> = gold.iter().cloned().map(Some).collect();
        assert_eq!(joint_goal_accuracy(&preds, &gold), 1.0);
        preds[3] =
            Some(DialogueState::from_triples(vec![SlotTriple::new("hotel", "area", "south")]).unwrap());
        assert!((joint_goal_accuracy(&preds, &gold) - 0.9).abs() < 1e-12);
        preds[4] = None; // untranslatable counts as failure
        assert!((joint_goal_accuracy(&preds, &gold) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sketch_accuracy_is_order_insensitive_and_separate_from_values() {
        let schema = crate::codec::Schema::new(vec![
            crate::codec::DomainSchema { domain: "hotel".into(), slots: vec!["area".into()] },
            crate::codec::DomainSchema { domain: "train".into(), slots: vec!["day".into()] },
        ])
        .unwrap();
        let gold = vec![
            vec![("hotel".to_string(), "area".to_string()), ("train".to_string(), "day".to_string())],
            vec![],
        ];
        let pred_a = sketch_pairs(&s("<train> <day> </train> <hotel> <area> </hotel> <EOB>"), &schema);
        let pred_b = sketch_pairs(&s("<EOB>"), &schema);
        assert_eq!(joint_sketch_accuracy(&[pred_a, pred_b], &gold), 1.0);
        // ungrammatical sketch fails
        let bad = sketch_pairs(&s("<area> <EOB>"), &schema);
        assert!(bad.is_none());
    }

    #[test]
    fn itc_passes_stay_constant_while_stub_grows() {
        let rows = itc_probe(&[2, 10], false, 11).unwrap();
        assert_eq!(rows[0].credit_passes, 2);
        assert_eq!(rows[1].credit_passes, 2);
        assert_eq!(rows[0].stub_passes, 2);
        assert_eq!(rows[1].stub_passes, 10);
        assert_eq!(rows[0].decoded_tokens, rows[1].decoded_tokens);
    }

    #[test]
    fn heatmap_accumulates_two_stage_weights() {
        let trace = AttentionTrace {
            steps: vec![crate::model::TraceStep {
                token: "x".into(),
                utt_weights: vec![0.25, 0.75],
                token_weights: vec![vec![1.0], vec![0.5, 0.5]],
            }],
        };
        let rows = heatmap_from_trace(&trace, &[s("pad"), s("a b")]);
        assert_eq!(rows.len(), 3);
        assert!((rows[0].heat - 0.25).abs() < 1e-12);
        assert!((rows[1].heat - 0.375).abs() < 1e-12);
        let total: f64 = rows.iter().map(|r| r.heat).sum();
        assert!((total - 1.0).abs() < 1e-12, "single-step heat sums to 1");
    }
}
