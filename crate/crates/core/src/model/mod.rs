//! The coarse-to-fine tracker: hierarchical utterance encoder, sketch
//! decoder, sketch encoder, and fine state decoder with two-stage attention
//! and a copy mixture.

pub mod encoder;
pub mod fine;
pub mod gru;
pub mod sketch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{GrammarMode, MaskAutomaton, Schema, TokenClass};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{CreditError, Result};
use crate::model::gru::GruParams;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// Architecture switches and sizes. `d_h` is the hidden size per direction;
/// every decoder hidden is `2·d_h` so decoder states can dot with memories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMeta {
    pub d_emb: usize,
    pub d_h: usize,
    pub max_sketch_len: usize,
    pub max_state_len: usize,
    /// Remove the coarse decoder and sketch encoder; the fine decoder runs on
    /// embeddings alone.
    pub no_coarse: bool,
    /// Use the generation distribution alone (no copy mixture).
    pub no_copy: bool,
    /// Concatenate the whole history into one utterance before encoding.
    pub flat_encoder: bool,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            d_emb: 400,
            d_h: 400,
            max_sketch_len: 40,
            max_state_len: 120,
            no_coarse: false,
            no_copy: false,
            flat_encoder: false,
        }
    }
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_h == 0 {
            return Err(CreditError::config("model dims must be positive"));
        }
        if self.max_sketch_len < 2 || self.max_state_len < 2 {
            return Err(CreditError::config("decode limits must be at least 2"));
        }
        Ok(())
    }
}

/// Every trainable tensor, grouped by sub-model. Registration order is the
/// checkpoint order.
#[derive(Clone, Debug)]
pub struct CreditParams {
    pub emb: ParamId,
    pub tok_cell: GruParams,
    pub att_w: ParamId,
    pub att_b: ParamId,
    pub att_v: ParamId,
    pub utt_cell: GruParams,
    pub sketch_init_w: ParamId,
    pub sketch_init_b: ParamId,
    pub sketch_cell: GruParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub wa: ParamId,
    pub ba: ParamId,
    pub bse_a_w: ParamId,
    pub bse_a_b: ParamId,
    pub sk_enc_cell: GruParams,
    pub g_proj_w: ParamId,
    pub g_proj_b: ParamId,
    pub fine_init1_w: ParamId,
    pub fine_init1_b: ParamId,
    pub fine_init2_w: ParamId,
    pub fine_init2_b: ParamId,
    pub bottom_cell: GruParams,
    pub top_cell: GruParams,
    pub wy1: ParamId,
    pub by1: ParamId,
    pub wy2: ParamId,
    pub by2: ParamId,
    pub wy: ParamId,
    pub by: ParamId,
    pub wgen: ParamId,
    pub bgen: ParamId,
    pub bse_y_w: ParamId,
    pub bse_y_b: ParamId,
}

pub struct CreditModel {
    pub meta: ModelMeta,
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub p: CreditParams,
    /// Structural tokens + `<EOB>`: the sketch output space, as global ids.
    sketch_vocab: Vec<TokenId>,
    /// Global vocab id → position in `sketch_vocab`.
    sketch_pos: Vec<Option<u16>>,
    /// Vocab entries usable as value tokens under the mask (not markers, not
    /// PAD/SOS).
    value_ok: Vec<bool>,
    is_structural: Vec<bool>,
}

impl CreditModel {
    pub fn new(meta: ModelMeta, schema: Schema, vocab: Vocabulary, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let v = vocab.len();
        let (de, dh) = (meta.d_emb, meta.d_h);
        let d2 = 2 * dh;

        let sketch_tokens = schema.marker_tokens();
        let sketch_vocab: Vec<TokenId> = sketch_tokens
            .iter()
            .map(|t| {
                vocab
                    .id(t)
                    .ok_or_else(|| CreditError::config(format!("marker {t} missing from vocab")))
            })
            .collect::<Result<_>>()?;
        let vs = sketch_vocab.len();
        let mut sketch_pos = vec![None; v];
        for (i, &id) in sketch_vocab.iter().enumerate() {
            sketch_pos[id as usize] = Some(i as u16);
        }
        let mut value_ok = vec![false; v];
        let mut is_structural = vec![false; v];
        for id in 0..v {
            let tok = vocab.token(id as TokenId);
            match schema.classify(tok) {
                TokenClass::Value => {
                    value_ok[id] = id != vocab.pad() as usize && id != vocab.sos() as usize;
                }
                TokenClass::End => is_structural[id] = true,
                _ => is_structural[id] = true,
            }
        }

        let mat = |ps: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            ps.register(name, Tensor::uniform(r, c, 1.0 / (c as f64).sqrt(), rng))
        };
        let bias = |ps: &mut ParamSet, name: &str, n: usize| ps.register(name, Tensor::zeros(n, 1));

        let emb = ps.register("emb", Tensor::uniform(v, de, 0.1, &mut rng));
        let tok_cell = GruParams::register(&mut ps, "enc.tok", de, dh, &mut rng);
        let att_w = mat(&mut ps, "enc.att.w", d2, d2, &mut rng);
        let att_b = bias(&mut ps, "enc.att.b", d2);
        let att_v = mat(&mut ps, "enc.att.v", d2, 1, &mut rng);
        let utt_cell = GruParams::register(&mut ps, "enc.utt", d2, dh, &mut rng);
        let sketch_init_w = mat(&mut ps, "sketch.init.w", d2, d2, &mut rng);
        let sketch_init_b = bias(&mut ps, "sketch.init.b", d2);
        let sketch_cell = GruParams::register(&mut ps, "sketch.cell", de, d2, &mut rng);
        let w1 = mat(&mut ps, "sketch.w1", d2, 2 * d2, &mut rng);
        let b1 = bias(&mut ps, "sketch.b1", d2);
        let wa = mat(&mut ps, "sketch.wa", vs, d2, &mut rng);
        let ba = bias(&mut ps, "sketch.ba", vs);
        let bse_a_w = mat(&mut ps, "sketch.bse.w", 1, d2, &mut rng);
        let bse_a_b = bias(&mut ps, "sketch.bse.b", 1);
        let sk_enc_cell = GruParams::register(&mut ps, "skenc", de, dh, &mut rng);
        let g_proj_w = mat(&mut ps, "fine.gproj.w", de, d2, &mut rng);
        let g_proj_b = bias(&mut ps, "fine.gproj.b", de);
        let fine_init1_w = mat(&mut ps, "fine.init1.w", d2, d2, &mut rng);
        let fine_init1_b = bias(&mut ps, "fine.init1.b", d2);
        let fine_init2_w = mat(&mut ps, "fine.init2.w", d2, d2, &mut rng);
        let fine_init2_b = bias(&mut ps, "fine.init2.b", d2);
        let bottom_cell = GruParams::register(&mut ps, "fine.bottom", de, d2, &mut rng);
        let top_cell = GruParams::register(&mut ps, "fine.top", d2, d2, &mut rng);
        let wy1 = mat(&mut ps, "fine.wy1", d2, 2 * d2, &mut rng);
        let by1 = bias(&mut ps, "fine.by1", d2);
        let wy2 = mat(&mut ps, "fine.wy2", d2, 3 * d2, &mut rng);
        let by2 = bias(&mut ps, "fine.by2", d2);
        let wy = mat(&mut ps, "fine.wy", v, d2, &mut rng);
        let by = bias(&mut ps, "fine.by", v);
        let wgen = mat(&mut ps, "fine.gate.w", 1, 3 * d2, &mut rng);
        let bgen = bias(&mut ps, "fine.gate.b", 1);
        let bse_y_w = mat(&mut ps, "fine.bse.w", 1, d2, &mut rng);
        let bse_y_b = bias(&mut ps, "fine.bse.b", 1);

        let p = CreditParams {
            emb,
            tok_cell,
            att_w,
            att_b,
            att_v,
            utt_cell,
            sketch_init_w,
            sketch_init_b,
            sketch_cell,
            w1,
            b1,
            wa,
            ba,
            bse_a_w,
            bse_a_b,
            sk_enc_cell,
            g_proj_w,
            g_proj_b,
            fine_init1_w,
            fine_init1_b,
            fine_init2_w,
            fine_init2_b,
            bottom_cell,
            top_cell,
            wy1,
            by1,
            wy2,
            by2,
            wy,
            by,
            wgen,
            bgen,
            bse_y_w,
            bse_y_b,
        };
        Ok(CreditModel {
            meta,
            schema,
            vocab,
            params: ps,
            p,
            sketch_vocab,
            sketch_pos,
            value_ok,
            is_structural,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn sketch_vocab(&self) -> &[TokenId] {
        &self.sketch_vocab
    }

    pub fn sketch_pos(&self, id: TokenId) -> Option<usize> {
        self.sketch_pos[id as usize].map(|p| p as usize)
    }

    pub fn is_structural(&self, id: TokenId) -> bool {
        self.is_structural[id as usize]
    }

    /// Legal-set mask over the sketch output space for the automaton's
    /// current position, restricted to tokens that let the decode finish
    /// within `remaining` steps.
    pub(crate) fn sketch_mask(&self, auto: &MaskAutomaton, remaining: usize) -> Vec<bool> {
        let legal = auto.legal_within(remaining);
        self.sketch_vocab
            .iter()
            .map(|&id| legal.markers.iter().any(|m| m == self.vocab.token(id)))
            .collect()
    }

    /// Legal-set mask over the full vocabulary for the automaton's current
    /// position (state grammar), budget-aware as above.
    pub(crate) fn state_mask(&self, auto: &MaskAutomaton, remaining: usize) -> Vec<bool> {
        let legal = auto.legal_within(remaining);
        let mut mask = vec![false; self.vocab.len()];
        if legal.allows_values {
            mask.copy_from_slice(&self.value_ok);
        }
        for m in &legal.markers {
            if let Some(id) = self.vocab.id(m) {
                mask[id as usize] = true;
            }
        }
        mask
    }

    pub fn automaton(&self, mode: GrammarMode) -> MaskAutomaton<'_> {
        MaskAutomaton::new(&self.schema, mode)
    }
}

/// Dropout context for training forward passes; `off()` for inference and
/// gradient checks. Masks come from a dedicated stream so runs are
/// reproducible under a fixed seed.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            Dropout::off()
        } else {
            Dropout { rate, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, v: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_mut() else { return v };
        let keep = 1.0 - self.rate;
        let n = tape.value(v).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rand::Rng::gen_bool(rng, keep) { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_mask(v, mask)
    }
}

/// How a decoder picks the next token.
pub enum DecodeMode<'a> {
    /// Grammar-masked argmax; output always parses.
    MaskedGreedy,
    /// Grammar-masked sampling from the renormalized distribution. Log-probs
    /// are taken from the τ=1 masked distribution; temperature only reshapes
    /// the sampling draw (τ→0 recovers masked greedy).
    Sample { temperature: f64, rng: &'a mut ChaCha8Rng },
    /// Teacher forcing against a gold sequence; log-probs come from the full
    /// unmasked distribution.
    Forced(&'a [TokenId]),
}

/// Runtime decode switches.
#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    pub collect_trace: bool,
    pub collect_dists: bool,
    /// Test hook: force p_gen to a constant (1.0 → pure generation,
    /// 0.0 → pure copy).
    pub gate_override: Option<f64>,
}

/// Common decode output. `tokens` always ends with `<EOB>`; when the length
/// limit truncates a decode, the appended `<EOB>` has no log-prob node and
/// `truncated` is set.
pub struct DecodeRun {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<NodeId>,
    pub hiddens: Vec<NodeId>,
    pub truncated: bool,
}

/// Per-step sketch-decoder diagnostics.
#[derive(Clone, Debug)]
pub struct SketchStepDist {
    pub att_sum: f64,
    pub p_sum: f64,
}

/// Per-step fine-decoder diagnostics.
#[derive(Clone, Debug)]
pub struct FineStepDist {
    pub utt_att_sum: f64,
    pub inner_sums: Vec<f64>,
    pub two_stage_total: f64,
    pub p_g_sum: f64,
    pub p_c_sum: f64,
    pub p_y_sum: f64,
    pub p_gen: f64,
    /// Vocab ids with nonzero copy probability.
    pub p_c_support: Vec<TokenId>,
}

/// Token-level attention trace of a fine decode, for heat-map export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    /// Emitted token at this step.
    pub token: String,
    /// First-stage weights s^{y2u}, one per utterance.
    pub utt_weights: Vec<f64>,
    /// Within-utterance softmax weights; the two-stage weight of token (i, j)
    /// is `utt_weights[i] * token_weights[i][j]`.
    pub token_weights: Vec<Vec<f64>>,
}

impl TraceStep {
    pub fn two_stage(&self, utt: usize, tok: usize) -> f64 {
        self.utt_weights[utt] * self.token_weights[utt][tok]
    }
}

/// One masked-greedy end-to-end decode: sketch pass (unless no-coarse), then
/// state pass. Carries the decode-call accounting the ITC probe reads.
pub struct Prediction {
    pub state_tokens: Vec<String>,
    pub sketch_tokens: Option<Vec<String>>,
    /// Parsed triple set; `None` when the output is untranslatable (never
    /// happens under masked decoding).
    pub state: Option<crate::codec::DialogueState>,
    /// Number of decoder forward sequences run for this dialogue.
    pub decoder_passes: usize,
    /// Total decoded tokens across passes.
    pub decoded_tokens: usize,
    pub truncated: bool,
    pub trace: Option<AttentionTrace>,
}

impl CreditModel {
    /// Masked-greedy inference over one dialogue prefix.
    pub fn predict(&self, utterances: &[Vec<TokenId>], opts: &DecodeOptions) -> Prediction {
        let mut tape = Tape::new(&self.params);
        let mut drop = Dropout::off();
        let enc = self.encode(&mut tape, utterances, &mut drop);

        let mut decoder_passes = 0usize;
        let mut decoded_tokens = 0usize;
        let mut truncated = false;

        let (sketch_ids, sketch_tokens) = if self.meta.no_coarse {
            (Vec::new(), None)
        } else {
            let run =
                self.decode_sketch(&mut tape, &enc, DecodeMode::MaskedGreedy, opts, &mut drop);
            decoder_passes += 1;
            decoded_tokens += run.run.tokens.len();
            truncated |= run.run.truncated;
            let toks: Vec<String> =
                run.run.tokens.iter().map(|&t| self.vocab.token(t).to_string()).collect();
            (run.run.tokens, Some(toks))
        };

        let g = if self.meta.no_coarse {
            None
        } else {
            Some(self.encode_sketch(&mut tape, &sketch_ids, &mut drop))
        };
        let out = self.decode_state(
            &mut tape,
            &enc,
            &sketch_ids,
            g.as_deref(),
            DecodeMode::MaskedGreedy,
            opts,
            &mut drop,
        );
        decoder_passes += 1;
        decoded_tokens += out.run.tokens.len();
        truncated |= out.run.truncated;

        let state_tokens: Vec<String> =
            out.run.tokens.iter().map(|&t| self.vocab.token(t).to_string()).collect();
        let state = crate::codec::parse_state(&state_tokens, &self.schema).ok().map(|(s, _)| s);

        Prediction {
            state_tokens,
            sketch_tokens,
            state,
            decoder_passes,
            decoded_tokens,
            truncated,
            trace: out.trace,
        }
    }
}

pub(crate) fn sample_from(probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    // p^{1/τ} underflows f64 once (1/τ)·ln-gap exceeds ~700; below this τ the
    // distribution is the argmax limit, so take it exactly.
    if temperature <= 0.01 {
        return argmax(probs);
    }
    let shaped: Vec<f64> = if (temperature - 1.0).abs() < 1e-12 {
        probs.to_vec()
    } else {
        let inv = 1.0 / temperature;
        let mx = probs.iter().cloned().fold(0.0f64, f64::max);
        probs.iter().map(|p| if *p > 0.0 { (p / mx).powf(inv) } else { 0.0 }).collect()
    };
    let total: f64 = shaped.iter().sum();
    let mut u = rand::Rng::gen_range(rng, 0.0..1.0) * total;
    for (i, p) in shaped.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    shaped.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
