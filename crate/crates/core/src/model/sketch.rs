//! Coarse sketch decoder.
//!
//! A GRU over the sketch output space (structural markers + `<EOB>`), with
//! dot-product attention over the utterance memory:
//! d_t = GRU(d_{t-1}, a_{t-1});  s_t = softmax(d_t·u);  e_t = Σ s_t u;
//! P = softmax(W_a tanh(W_1 [d_t, e_t] + b_1) + b_a).
//! The first hidden comes from the encoder's final state through a linear
//! layer. Masked decoding constrains steps to the sketch grammar, so the
//! output always parses.

use crate::codec::GrammarMode;
use crate::corpus::TokenId;
use crate::model::encoder::EncodedDialogue;
use crate::model::{
    argmax, sample_from, CreditModel, DecodeMode, DecodeOptions, DecodeRun, Dropout,
    SketchStepDist,
};
use crate::tape::Tape;

pub struct SketchRun {
    pub run: DecodeRun,
    pub dists: Option<Vec<SketchStepDist>>,
}

impl CreditModel {
    /// Decode a sketch. Greedy and sampled modes follow the sketch grammar
    /// mask; teacher forcing scores the gold sequence under the unmasked
    /// distribution. Hits `max_sketch_len` append `<EOB>` and set the
    /// truncation flag.
    pub fn decode_sketch(
        &self,
        tape: &mut Tape,
        enc: &EncodedDialogue,
        mode: DecodeMode,
        opts: &DecodeOptions,
        drop: &mut Dropout,
    ) -> SketchRun {
        assert!(!self.meta.no_coarse, "sketch decoder is disabled by the no-coarse ablation");
        let mut mode = mode;
        let eob = self.vocab.eob();

        let mut hidden = tape.affine(self.p.sketch_init_w, self.p.sketch_init_b, enc.final_hidden);
        let emb = tape.leaf(self.p.emb);
        let mut prev: TokenId = self.vocab.sos();

        let mut auto = self.automaton(GrammarMode::Sketch);
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut hiddens = Vec::new();
        let mut dists = opts.collect_dists.then(Vec::new);
        let mut truncated = false;

        let forced_len = match &mode {
            DecodeMode::Forced(gold) => gold.len(),
            _ => self.meta.max_sketch_len,
        };

        for t in 0..forced_len.max(1) {
            let x = tape.row(emb, prev as usize);
            let x = drop.apply(tape, x);
            hidden = self.p.sketch_cell.step(tape, x, hidden);
            hiddens.push(hidden);

            let scores = tape.mat_t_vec(enc.utt_mat, hidden);
            let att = tape.softmax(scores);
            let ctx = tape.matvec(enc.utt_mat, att);
            let cat = tape.concat(hidden, ctx);
            let mixed = tape.affine(self.p.w1, self.p.b1, cat);
            let mixed = tape.tanh(mixed);
            let logits = tape.affine(self.p.wa, self.p.ba, mixed);

            let (next, logp) = match &mut mode {
                DecodeMode::Forced(gold) => {
                    let tok = gold[t];
                    let pos = self
                        .sketch_pos(tok)
                        .expect("gold sketch token outside the sketch vocabulary");
                    let lsm = tape.log_softmax(logits);
                    (tok, tape.pick(lsm, pos))
                }
                DecodeMode::MaskedGreedy => {
                    let mask = self.sketch_mask(&auto, self.meta.max_sketch_len - t);
                    let probs = tape.masked_softmax(logits, mask);
                    let pos = argmax(tape.value(probs).as_slice());
                    let p = tape.pick(probs, pos);
                    (self.sketch_vocab()[pos], tape.ln(p))
                }
                DecodeMode::Sample { temperature, rng } => {
                    let mask = self.sketch_mask(&auto, self.meta.max_sketch_len - t);
                    let probs = tape.masked_softmax(logits, mask);
                    let pos = sample_from(tape.value(probs).as_slice(), *temperature, rng);
                    let p = tape.pick(probs, pos);
                    (self.sketch_vocab()[pos], tape.ln(p))
                }
            };

            if let Some(d) = dists.as_mut() {
                let probs = tape.softmax(logits);
                d.push(SketchStepDist {
                    att_sum: tape.value(att).as_slice().iter().sum(),
                    p_sum: tape.value(probs).as_slice().iter().sum(),
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

        if tokens.last() != Some(&eob) {
            if !matches!(mode, DecodeMode::Forced(_)) {
                truncated = true;
                tokens.push(eob);
            }
        }

        SketchRun { run: DecodeRun { tokens, logps, hiddens, truncated }, dists }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{mask_accepts, DomainSchema, GrammarMode, Schema};
    use crate::corpus::{Dialogue, Vocabulary};
    use crate::model::{CreditModel, ModelMeta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CreditModel {
        let schema = Schema::new(vec![
            DomainSchema { domain: "hotel".into(), slots: vec!["name".into(), "area".into()] },
            DomainSchema { domain: "train".into(), slots: vec!["day".into()] },
        ])
        .unwrap();
        let empty: Vec<Dialogue> = Vec::new();
        let vocab = Vocabulary::build(&[&empty], &schema, 64);
        let meta = ModelMeta { d_emb: 6, d_h: 3, max_sketch_len: 12, ..ModelMeta::default() };
        CreditModel::new(meta, schema, vocab, 1).unwrap()
    }

    fn encode<'a>(m: &'a CreditModel, tape: &mut Tape<'a>) -> EncodedDialogue {
        let mut drop = Dropout::off();
        m.encode(tape, &[vec![4, 5, 6], vec![7, 8]], &mut drop)
    }

    #[test]
    fn untrained_masked_greedy_is_grammatical() {
        let m = model();
        let mut tape = Tape::new(&m.params);
        let enc = encode(&m, &mut tape);
        let mut drop = Dropout::off();
        let out =
            m.decode_sketch(&mut tape, &enc, DecodeMode::MaskedGreedy, &DecodeOptions::default(), &mut drop);
        let toks: Vec<String> =
            out.run.tokens.iter().map(|&t| m.vocab.token(t).to_string()).collect();
        assert!(mask_accepts(&m.schema, GrammarMode::Sketch, &toks), "got {toks:?}");
        assert_eq!(out.run.tokens.last(), Some(&m.vocab.eob()));
    }

    #[test]
    fn teacher_forcing_aligns_logps_with_gold() {
        let m = model();
        let mut tape = Tape::new(&m.params);
        let enc = encode(&m, &mut tape);
        let gold: Vec<TokenId> = ["<hotel>", "<name>", "</hotel>", "<EOB>"]
            .iter()
            .map(|t| m.vocab.id(t).unwrap())
            .collect();
        let mut drop = Dropout::off();
        let out = m.decode_sketch(
            &mut tape,
            &enc,
            DecodeMode::Forced(&gold),
            &DecodeOptions::default(),
            &mut drop,
        );
        assert_eq!(out.run.logps.len(), gold.len());
        assert_eq!(out.run.tokens, gold);
        assert!(!out.run.truncated);
        // log-probs are genuine log-probabilities
        for &lp in &out.run.logps {
            assert!(tape.value(lp).item() <= 0.0);
        }
    }

    #[test]
    fn single_utterance_attention_is_degenerate() {
        let m = model();
        let mut tape = Tape::new(&m.params);
        let mut drop = Dropout::off();
        let enc = m.encode(&mut tape, &[vec![4, 5]], &mut drop);
        let out = m.decode_sketch(
            &mut tape,
            &enc,
            DecodeMode::MaskedGreedy,
            &DecodeOptions { collect_dists: true, ..Default::default() },
            &mut drop,
        );
        for d in out.dists.unwrap() {
            assert!((d.att_sum - 1.0).abs() < 1e-9);
            assert!((d.p_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn low_temperature_sampling_matches_greedy() {
        let m = model();
        let mut tape = Tape::new(&m.params);
        let enc = encode(&m, &mut tape);
        let mut drop = Dropout::off();
        let greedy = m
            .decode_sketch(&mut tape, &enc, DecodeMode::MaskedGreedy, &DecodeOptions::default(), &mut drop)
            .run
            .tokens;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..64 {
            let mut tape = Tape::new(&m.params);
            let enc = encode(&m, &mut tape);
            let sampled = m
                .decode_sketch(
                    &mut tape,
                    &enc,
                    DecodeMode::Sample { temperature: 0.01, rng: &mut rng },
                    &DecodeOptions::default(),
                    &mut drop,
                )
                .run
                .tokens;
            assert_eq!(sampled, greedy);
        }
    }

    #[test]
    fn termination_within_limit() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut drop = Dropout::off();
        for _ in 0..32 {
            let mut tape = Tape::new(&m.params);
            let enc = encode(&m, &mut tape);
            let out = m.decode_sketch(
                &mut tape,
                &enc,
                DecodeMode::Sample { temperature: 3.0, rng: &mut rng },
                &DecodeOptions::default(),
                &mut drop,
            );
            assert!(out.run.tokens.len() <= m.meta.max_sketch_len + 1);
            assert_eq!(out.run.tokens.last(), Some(&m.vocab.eob()));
            // emitted tokens stay in the sketch output space
            for &t in &out.run.tokens {
                assert!(m.sketch_pos(t).is_some());
            }
        }
    }
}
