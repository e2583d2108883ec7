//! Hierarchical utterance encoder.
//!
//! Token-level bidirectional GRU → per-token vectors h (the token memory);
//! attentive summarization → context-free utterance vectors u'; utterance-
//! level bidirectional GRU → contextual utterance vectors u (the utterance
//! memory) and the final hidden that initializes the decoders.
//!
//! The flat-encoder ablation reuses this path unchanged: the whole history is
//! packed into a single utterance upstream, so the utterance-level pass
//! degenerates to one element and downstream attention becomes single-stage.

use crate::corpus::TokenId;
use crate::model::{gru, CreditModel, Dropout};
use crate::tape::{NodeId, Tape};

/// Token memory + utterance memory for one dialogue prefix.
pub struct EncodedDialogue {
    /// Per-utterance matrices of token vectors, shape (2·d_h, |x^i|).
    pub tok_mats: Vec<NodeId>,
    /// Per-utterance token ids (PAD substituted for empty utterances); the
    /// copy distribution scatters onto these.
    pub token_ids: Vec<Vec<TokenId>>,
    /// Context-free utterance vectors u'_i.
    pub utt_ctx_free: Vec<NodeId>,
    /// Contextual utterance vectors u_i.
    pub utt_ctx: Vec<NodeId>,
    /// Matrix of contextual utterance vectors, shape (2·d_h, |x|).
    pub utt_mat: NodeId,
    /// Final utterance-level state, shape (2·d_h, 1); initializes decoders.
    pub final_hidden: NodeId,
}

impl EncodedDialogue {
    pub fn n_utterances(&self) -> usize {
        self.token_ids.len()
    }
}

impl CreditModel {
    /// Encode one utterance into per-token vectors. Empty input encodes a
    /// single PAD token so downstream shapes stay uniform.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        ids: &[TokenId],
        drop: &mut Dropout,
    ) -> (Vec<TokenId>, Vec<NodeId>) {
        let ids: Vec<TokenId> = if ids.is_empty() { vec![self.vocab.pad()] } else { ids.to_vec() };
        let emb = tape.leaf(self.p.emb);
        let xs: Vec<NodeId> = ids
            .iter()
            .map(|&id| {
                let e = tape.row(emb, id as usize);
                drop.apply(tape, e)
            })
            .collect();
        let bi = gru::bidirectional(tape, &self.p.tok_cell, &xs, self.meta.d_h);
        let hs = bi.concat.iter().map(|&h| drop.apply(tape, h)).collect();
        (ids, hs)
    }

    /// Attentive summarization over one utterance's token vectors:
    /// u' = softmax(vᵀ tanh(W h + b)) · h.
    pub fn summarize_utterance(
        &self,
        tape: &mut Tape,
        hs: &[NodeId],
        h_mat: NodeId,
    ) -> (NodeId, NodeId) {
        let scored: Vec<NodeId> = hs
            .iter()
            .map(|&h| {
                let a = tape.affine(self.p.att_w, self.p.att_b, h);
                tape.tanh(a)
            })
            .collect();
        let score_mat = tape.stack_cols(scored);
        let v = tape.leaf(self.p.att_v);
        let scores = tape.mat_t_vec(score_mat, v);
        let weights = tape.softmax(scores);
        let summary = tape.matvec(h_mat, weights);
        (summary, weights)
    }

    /// Full hierarchical encode of a dialogue prefix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        utterances: &[Vec<TokenId>],
        drop: &mut Dropout,
    ) -> EncodedDialogue {
        assert!(!utterances.is_empty(), "a dialogue has at least one utterance");
        let mut tok_mats = Vec::with_capacity(utterances.len());
        let mut token_ids = Vec::with_capacity(utterances.len());
        let mut utt_ctx_free = Vec::with_capacity(utterances.len());
        for utt in utterances {
            let (ids, hs) = self.encode_tokens(tape, utt, drop);
            let mat = tape.stack_cols(hs.clone());
            let (summary, _) = self.summarize_utterance(tape, &hs, mat);
            tok_mats.push(mat);
            token_ids.push(ids);
            utt_ctx_free.push(summary);
        }
        let bi = gru::bidirectional(tape, &self.p.utt_cell, &utt_ctx_free, self.meta.d_h);
        let final_hidden = bi.final_state(tape);
        let utt_ctx: Vec<NodeId> = bi.concat.iter().map(|&u| drop.apply(tape, u)).collect();
        let utt_mat = tape.stack_cols(utt_ctx.clone());
        EncodedDialogue { tok_mats, token_ids, utt_ctx_free, utt_ctx, utt_mat, final_hidden }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{DomainSchema, Schema};
    use crate::corpus::{Dialogue, Vocabulary};
    use crate::model::{CreditModel, ModelMeta};

    fn tiny_model() -> CreditModel {
        let schema = Schema::new(vec![DomainSchema {
            domain: "hotel".into(),
            slots: vec!["area".into()],
        }])
        .unwrap();
        let dialogues: Vec<Dialogue> = Vec::new();
        let vocab = Vocabulary::build(&[&dialogues], &schema, 64);
        let meta = ModelMeta { d_emb: 6, d_h: 3, ..ModelMeta::default() };
        CreditModel::new(meta, schema, vocab, 42).unwrap()
    }

    #[test]
    fn single_token_summary_equals_token_vector() {
        let model = tiny_model();
        let mut tape = Tape::new(&model.params);
        let mut drop = Dropout::off();
        let (_, hs) = model.encode_tokens(&mut tape, &[3], &mut drop);
        assert_eq!(hs.len(), 1);
        assert_eq!(tape.value(hs[0]).len(), 2 * model.meta.d_h);
        let mat = tape.stack_cols(hs.clone());
        let (summary, weights) = model.summarize_utterance(&mut tape, &hs, mat);
        assert_eq!(tape.value(weights).as_slice(), &[1.0]);
        assert_eq!(tape.value(summary).as_slice(), tape.value(hs[0]).as_slice());
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let model = tiny_model();
        let mut tape = Tape::new(&model.params);
        let mut drop = Dropout::off();
        let (_, hs) = model.encode_tokens(&mut tape, &[3, 4, 5, 6], &mut drop);
        let mat = tape.stack_cols(hs.clone());
        let (_, weights) = model.summarize_utterance(&mut tape, &hs, mat);
        let w = tape.value(weights).as_slice();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn empty_utterance_becomes_pad() {
        let model = tiny_model();
        let mut tape = Tape::new(&model.params);
        let mut drop = Dropout::off();
        let enc = model.encode(&mut tape, &[vec![], vec![4, 5]], &mut drop);
        assert_eq!(enc.token_ids[0], vec![model.vocab.pad()]);
        assert_eq!(enc.n_utterances(), 2);
        assert_eq!(tape.value(enc.utt_mat).shape(), (2 * model.meta.d_h, 2));
    }

    #[test]
    fn token_memory_is_context_free() {
        // Editing utterance j never changes token_memory[i], i ≠ j.
        let model = tiny_model();
        let mut drop = Dropout::off();
        let mut tape_a = Tape::new(&model.params);
        let a = model.encode(&mut tape_a, &[vec![3, 4], vec![5, 6]], &mut drop);
        let mut tape_b = Tape::new(&model.params);
        let b = model.encode(&mut tape_b, &[vec![3, 4], vec![6, 5]], &mut drop);
        assert_eq!(
            tape_a.value(a.tok_mats[0]).as_slice(),
            tape_b.value(b.tok_mats[0]).as_slice()
        );
        assert_eq!(
            tape_a.value(a.utt_ctx_free[0]).as_slice(),
            tape_b.value(b.utt_ctx_free[0]).as_slice()
        );
        // ... while contextual utterance vectors do change.
        let ua = tape_a.value(a.utt_ctx[0]).as_slice().to_vec();
        let ub = tape_b.value(b.utt_ctx[0]).as_slice().to_vec();
        assert!(ua.iter().zip(&ub).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn permuting_utterances_changes_context_not_summaries() {
        let model = tiny_model();
        let mut drop = Dropout::off();
        let mut tape_a = Tape::new(&model.params);
        let a = model.encode(&mut tape_a, &[vec![3, 4], vec![5, 6], vec![6]], &mut drop);
        let mut tape_b = Tape::new(&model.params);
        let b = model.encode(&mut tape_b, &[vec![5, 6], vec![3, 4], vec![6]], &mut drop);
        assert_eq!(a.n_utterances(), 3);
        // context-free summary of the third utterance is permutation-invariant
        assert_eq!(
            tape_a.value(a.utt_ctx_free[2]).as_slice(),
            tape_b.value(b.utt_ctx_free[2]).as_slice()
        );
        // its contextual vector is not
        let ua = tape_a.value(a.utt_ctx[2]).as_slice().to_vec();
        let ub = tape_b.value(b.utt_ctx[2]).as_slice().to_vec();
        assert!(ua.iter().zip(&ub).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
