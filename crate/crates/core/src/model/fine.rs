//! Sketch encoder and fine state decoder.
//!
//! The sketch is re-encoded by a bidirectional GRU into sketch vectors g.
//! The fine decoder stacks two GRUs: the bottom cell consumes the previous
//! token (or, when the previous token matches the sketch cursor, that sketch
//! vector projected into embedding space) and attends over the utterance
//! memory; the top cell consumes the mixed bottom output and attends over the
//! token memory, with token weights scaled by the first-stage utterance
//! weights — the two-stage attention. The output mixes a vocabulary softmax
//! with a copy distribution that scatters the two-stage weights onto the
//! input token identities.

use crate::codec::GrammarMode;
use crate::corpus::TokenId;
use crate::model::encoder::EncodedDialogue;
use crate::model::gru::bidirectional;
use crate::model::{
    sample_from, AttentionTrace, CreditModel, DecodeMode, DecodeOptions, DecodeRun, Dropout,
    FineStepDist, TraceStep,
};
use crate::tape::{NodeId, Tape};

pub struct StateRun {
    pub run: DecodeRun,
    pub trace: Option<AttentionTrace>,
    pub dists: Option<Vec<FineStepDist>>,
    /// How many sketch positions the input cursor consumed.
    pub sketch_consumed: usize,
    /// Set when an emitted structural token disagreed with the sketch cursor.
    pub diverged: bool,
}

impl CreditModel {
    /// Encode a sketch into sketch vectors g, one per sketch token.
    pub fn encode_sketch(
        &self,
        tape: &mut Tape,
        sketch: &[TokenId],
        drop: &mut Dropout,
    ) -> Vec<NodeId> {
        assert!(!sketch.is_empty(), "a sketch has at least <EOB>");
        let emb = tape.leaf(self.p.emb);
        let xs: Vec<NodeId> = sketch
            .iter()
            .map(|&id| {
                let e = tape.row(emb, id as usize);
                drop.apply(tape, e)
            })
            .collect();
        let bi = bidirectional(tape, &self.p.sk_enc_cell, &xs, self.meta.d_h);
        bi.concat
    }

    /// Decoder input i_t: the projected sketch vector when the previous token
    /// matches the sketch at the cursor, otherwise the token embedding.
    #[allow(clippy::too_many_arguments)]
    fn select_input(
        &self,
        tape: &mut Tape,
        prev: TokenId,
        sketch: &[TokenId],
        g: Option<&[NodeId]>,
        cursor: &mut usize,
        diverged: &mut bool,
        drop: &mut Dropout,
    ) -> NodeId {
        if let Some(g) = g {
            if self.is_structural(prev) {
                if *cursor < sketch.len() && sketch[*cursor] == prev {
                    let gv = g[*cursor];
                    *cursor += 1;
                    return tape.affine(self.p.g_proj_w, self.p.g_proj_b, gv);
                }
                *diverged = true;
            }
        }
        let emb = tape.leaf(self.p.emb);
        let e = tape.row(emb, prev as usize);
        drop.apply(tape, e)
    }

    /// Decode the fine state conditioned on the encoded dialogue and a sketch
    /// (empty slice + `g: None` under the no-coarse ablation).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_state(
        &self,
        tape: &mut Tape,
        enc: &EncodedDialogue,
        sketch: &[TokenId],
        g: Option<&[NodeId]>,
        mode: DecodeMode,
        opts: &DecodeOptions,
        drop: &mut Dropout,
    ) -> StateRun {
        let mut mode = mode;
        let eob = self.vocab.eob();
        let emb_prev_start = self.vocab.sos();

        let mut d1 = tape.affine(self.p.fine_init1_w, self.p.fine_init1_b, enc.final_hidden);
        let mut d2 = tape.affine(self.p.fine_init2_w, self.p.fine_init2_b, enc.final_hidden);
        let mut prev: TokenId = emb_prev_start;
        let mut cursor = 0usize;
        let mut diverged = false;

        let mut auto = self.automaton(GrammarMode::State);
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut hiddens = Vec::new();
        let mut trace = opts.collect_trace.then(|| AttentionTrace { steps: Vec::new() });
        let mut dists = opts.collect_dists.then(Vec::new);
        let mut truncated = false;

        let forced_len = match &mode {
            DecodeMode::Forced(gold) => gold.len(),
            _ => self.meta.max_state_len,
        };

        for t in 0..forced_len.max(1) {
            let x = self.select_input(tape, prev, sketch, g, &mut cursor, &mut diverged, drop);
            d1 = self.p.bottom_cell.step(tape, x, d1);

            // first stage: utterance-level attention from the bottom hidden
            let u_scores = tape.mat_t_vec(enc.utt_mat, d1);
            let s_u = tape.softmax(u_scores);
            let e_u = tape.matvec(enc.utt_mat, s_u);
            let cat1 = tape.concat(d1, e_u);
            let mixed = tape.affine(self.p.wy1, self.p.by1, cat1);
            let d_y2u = tape.tanh(mixed);

            d2 = self.p.top_cell.step(tape, d_y2u, d2);
            hiddens.push(d2);

            // second stage: token-level attention, scaled by the first stage
            let mut scaled_ctx = Vec::with_capacity(enc.tok_mats.len());
            let mut tok_w_nodes = Vec::with_capacity(enc.tok_mats.len());
            for (i, &mat) in enc.tok_mats.iter().enumerate() {
                let sc = tape.mat_t_vec(mat, d2);
                let w = tape.softmax(sc);
                let ctx = tape.matvec(mat, w);
                let ctx = tape.scale_entry(ctx, s_u, i);
                tok_w_nodes.push(w);
                scaled_ctx.push(ctx);
            }
            let e_t = tape.add_n(scaled_ctx);

            let cat2 = {
                let a = tape.concat(d2, e_t);
                tape.concat(a, e_u)
            };
            let mixed2 = tape.affine(self.p.wy2, self.p.by2, cat2);
            let d_y2k = tape.tanh(mixed2);
            let logits = tape.affine(self.p.wy, self.p.by, d_y2k);
            let p_g = tape.softmax(logits);

            let p_y = if self.meta.no_copy {
                p_g
            } else {
                let p_gen = match opts.gate_override {
                    Some(v) => tape.scalar_const(v),
                    None => {
                        let gate_in = tape.affine(self.p.wgen, self.p.bgen, cat2);
                        tape.sigmoid(gate_in)
                    }
                };
                let p_c =
                    tape.copy_dist(s_u, tok_w_nodes.clone(), enc.token_ids.clone(), self.vocab.len());
                if let Some(d) = dists.as_mut() {
                    d.push(self.fine_step_dist(tape, s_u, &tok_w_nodes, p_g, p_c, p_gen));
                }
                tape.mixture(p_gen, p_g, p_c)
            };
            if self.meta.no_copy {
                if let Some(d) = dists.as_mut() {
                    let gate = tape.scalar_const(1.0);
                    d.push(self.fine_step_dist(tape, s_u, &tok_w_nodes, p_g, p_g, gate));
                }
            }

            let (next, logp) = match &mut mode {
                DecodeMode::Forced(gold) => {
                    let tok = gold[t];
                    let p = tape.pick(p_y, tok as usize);
                    (tok, tape.ln(p))
                }
                DecodeMode::MaskedGreedy => {
                    let mask = self.state_mask(&auto, self.meta.max_state_len - t);
                    let vals = tape.value(p_y).as_slice();
                    let mut best: Option<usize> = None;
                    for (i, ok) in mask.iter().enumerate() {
                        if *ok && (best.is_none() || vals[i] > vals[best.unwrap()]) {
                            best = Some(i);
                        }
                    }
                    let chosen = best.expect("grammar mask is never empty before <EOB>");
                    let p = tape.pick(p_y, chosen);
                    (chosen as TokenId, tape.ln(p))
                }
                DecodeMode::Sample { temperature, rng } => {
                    let mask = self.state_mask(&auto, self.meta.max_state_len - t);
                    let masked = tape.mask_probs(p_y, mask);
                    let idx = sample_from(tape.value(masked).as_slice(), *temperature, rng);
                    let p = tape.pick(masked, idx);
                    (idx as TokenId, tape.ln(p))
                }
            };

            if let Some(tr) = trace.as_mut() {
                tr.steps.push(TraceStep {
                    token: self.vocab.token(next).to_string(),
                    utt_weights: tape.value(s_u).as_slice().to_vec(),
                    token_weights: tok_w_nodes
                        .iter()
                        .map(|&w| tape.value(w).as_slice().to_vec())
                        .collect(),
                });
            }

            tokens.push(next);
            logps.push(logp);
            if !matches!(mode, DecodeMode::Forced(_)) {
                auto.advance(self.vocab.token(next)).expect("masked step is grammatical");
            }
            if next == eob {
                break;
            }
            prev = next;
        }

        if tokens.last() != Some(&eob) && !matches!(mode, DecodeMode::Forced(_)) {
            truncated = true;
            tokens.push(eob);
        }

        StateRun {
            run: DecodeRun { tokens, logps, hiddens, truncated },
            trace,
            dists,
            sketch_consumed: cursor,
            diverged,
        }
    }

    fn fine_step_dist(
        &self,
        tape: &Tape,
        s_u: NodeId,
        tok_ws: &[NodeId],
        p_g: NodeId,
        p_c: NodeId,
        p_gen: NodeId,
    ) -> FineStepDist {
        let uw = tape.value(s_u).as_slice().to_vec();
        let inner_sums: Vec<f64> =
            tok_ws.iter().map(|&w| tape.value(w).as_slice().iter().sum()).collect();
        let two_stage_total: f64 =
            uw.iter().zip(inner_sums.iter()).map(|(a, b)| a * b).sum();
        let gate = tape.value(p_gen).item();
        let pc = tape.value(p_c).as_slice();
        let pg = tape.value(p_g).as_slice();
        let p_y_sum = pg
            .iter()
            .zip(pc.iter())
            .map(|(g, c)| gate * g + (1.0 - gate) * c)
            .sum();
        FineStepDist {
            utt_att_sum: uw.iter().sum(),
            inner_sums,
            two_stage_total,
            p_g_sum: pg.iter().sum(),
            p_c_sum: pc.iter().sum(),
            p_y_sum,
            p_gen: gate,
            p_c_support: pc
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(i, _)| i as TokenId)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{mask_accepts, DomainSchema, GrammarMode, Schema};
    use crate::corpus::{tokenize, Dialogue, Vocabulary};
    use crate::model::{CreditModel, ModelMeta};

    fn model_with_text() -> (CreditModel, Vec<Vec<TokenId>>) {
        let schema = Schema::new(vec![DomainSchema {
            domain: "hotel".into(),
            slots: vec!["name".into(), "area".into()],
        }])
        .unwrap();
        let mut st = crate::codec::DialogueState::empty();
        st.set("hotel", "area", vec!["centre".into()]);
        st.set("hotel", "name", vec!["royal".into(), "garden".into()]);
        let d = Dialogue {
            id: "d".into(),
            turns: vec![crate::corpus::Turn {
                sys: vec![],
                usr: tokenize("the hotel name is royal garden in the centre"),
                state: st,
            }],
            unseen: false,
        };
        let corpus = vec![d];
        let vocab = Vocabulary::build(&[&corpus], &schema, 128);
        let meta = ModelMeta { d_emb: 6, d_h: 3, max_state_len: 24, ..ModelMeta::default() };
        let utt1 = vocab.encode(&tokenize("the hotel name is royal garden in the centre"));
        let utt0 = vec![vocab.pad()];
        let m = CreditModel::new(meta, schema, vocab, 3).unwrap();
        (m, vec![utt0, utt1])
    }

    fn gold_ids(m: &CreditModel, s: &str) -> Vec<TokenId> {
        s.split_whitespace().map(|t| m.vocab.id(t).expect("gold token in vocab")).collect()
    }

    #[test]
    fn untrained_masked_greedy_parses() {
        let (m, utts) = model_with_text();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <name> <area> </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::MaskedGreedy,
            &DecodeOptions::default(),
            &mut drop,
        );
        let toks: Vec<String> =
            out.run.tokens.iter().map(|&t| m.vocab.token(t).to_string()).collect();
        assert!(mask_accepts(&m.schema, GrammarMode::State, &toks), "got {toks:?}");
    }

    #[test]
    fn teacher_forced_gold_consumes_sketch_exactly_once() {
        let (m, utts) = model_with_text();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <name> <area> </hotel> <EOB>");
        let gold = gold_ids(&m, "<hotel> <name> royal garden <area> centre </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::Forced(&gold),
            &DecodeOptions::default(),
            &mut drop,
        );
        assert_eq!(out.run.logps.len(), gold.len());
        assert!(!out.diverged);
        // every sketch token except the final <EOB> is consumed as an input
        assert_eq!(out.sketch_consumed, sketch.len() - 1);
    }

    #[test]
    fn value_prev_token_uses_embedding_path() {
        // cursor must not advance on value tokens: a sketch of one marker
        // plus values in gold leaves cursor at 1 (the <hotel> match).
        let (m, utts) = model_with_text();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <area> </hotel> <EOB>");
        let gold = gold_ids(&m, "<hotel> <area> centre </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::Forced(&gold),
            &DecodeOptions::default(),
            &mut drop,
        );
        assert_eq!(out.sketch_consumed, sketch.len() - 1);
        assert!(!out.diverged);
    }

    #[test]
    fn mixture_distributions_are_normalized_and_copy_is_supported_on_input() {
        let (m, utts) = model_with_text();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <name> </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::MaskedGreedy,
            &DecodeOptions { collect_dists: true, ..Default::default() },
            &mut drop,
        );
        let input_ids: std::collections::BTreeSet<TokenId> =
            enc.token_ids.iter().flatten().copied().collect();
        for d in out.dists.unwrap() {
            assert!((d.utt_att_sum - 1.0).abs() < 1e-9);
            assert!((d.two_stage_total - 1.0).abs() < 1e-9);
            assert!((d.p_g_sum - 1.0).abs() < 1e-9);
            assert!((d.p_c_sum - 1.0).abs() < 1e-9);
            assert!((d.p_y_sum - 1.0).abs() < 1e-9);
            assert!(d.p_gen > 0.0 && d.p_gen < 1.0);
            for id in d.p_c_support {
                assert!(input_ids.contains(&id), "copy mass outside the input");
            }
        }
    }

    #[test]
    fn forced_gate_one_reduces_to_generation() {
        let (m, utts) = model_with_text();
        let mut drop = Dropout::off();
        // p_gen forced to 1: P_y == P_g, so the no-copy path and the forced
        // gate agree step by step on the same greedy prefix.
        let mut tape = Tape::new(&m.params);
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <area> </hotel> <EOB>");
        let gold = gold_ids(&m, "<hotel> <area> centre </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let forced = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::Forced(&gold),
            &DecodeOptions { gate_override: Some(1.0), collect_dists: true, ..Default::default() },
            &mut drop,
        );
        for d in forced.dists.unwrap() {
            assert!((d.p_y_sum - d.p_g_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_only_decode_emits_input_tokens_as_values() {
        let (m, utts) = model_with_text();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <name> </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::MaskedGreedy,
            &DecodeOptions { gate_override: Some(0.0), ..Default::default() },
            &mut drop,
        );
        let input_ids: std::collections::BTreeSet<TokenId> =
            enc.token_ids.iter().flatten().copied().collect();
        for &t in &out.run.tokens {
            if !m.is_structural(t) {
                assert!(input_ids.contains(&t), "copied value token must come from the input");
            }
        }
    }

    #[test]
    fn no_copy_output_is_bitwise_generation() {
        let (mut m, utts) = model_with_text();
        m.meta.no_copy = true;
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &utts, &mut drop);
        let sketch = gold_ids(&m, "<hotel> <area> </hotel> <EOB>");
        let gold = gold_ids(&m, "<hotel> <area> centre </hotel> <EOB>");
        let g = m.encode_sketch(&mut tape, &sketch, &mut drop);
        let out = m.decode_state(
            &mut tape,
            &enc,
            &sketch,
            Some(&g),
            DecodeMode::Forced(&gold),
            &DecodeOptions { collect_dists: true, ..Default::default() },
            &mut drop,
        );
        for d in out.dists.unwrap() {
            assert_eq!(d.p_y_sum.to_bits(), d.p_g_sum.to_bits());
            assert_eq!(d.p_c_sum.to_bits(), d.p_g_sum.to_bits());
        }
    }
}
