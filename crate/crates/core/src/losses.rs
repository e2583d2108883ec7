//! Learning objectives: teacher-forced cross-entropy, the shaped BLEU
//! reward, discounted returns, learned baselines, the policy-gradient losses,
//! and the β-weighted combination.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{CreditError, Result};
use crate::metrics::sentence_bleu;
use crate::model::DecodeRun;
use crate::tape::{NodeId, ParamId, Tape};

/// Which policy-gradient weighting to use. The squared form is the faithful
/// default; the signed advantage is the standard escape hatch.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RlVariant {
    PaperSquared,
    StandardAdvantage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the sketch CE term.
    pub beta1: f64,
    /// Weight of the state CE term.
    pub beta2: f64,
    /// Weight of the sketch RL term; the state RL term gets 1-β1-β2-β3.
    pub beta3: f64,
    /// Return discount.
    pub lambda: f64,
    /// Per-token membership reward magnitude.
    pub step_reward: f64,
    /// Terminal reward is sentence BLEU when set; otherwise the membership
    /// reward applies at `<EOB>` too.
    pub bleu_terminal: bool,
    pub variant: RlVariant,
    /// Weight of the baseline regression (MSE to returns).
    pub baseline_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta1: 0.25,
            beta2: 0.25,
            beta3: 0.25,
            lambda: 1.0,
            step_reward: 0.01,
            bleu_terminal: true,
            variant: RlVariant::PaperSquared,
            baseline_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn beta4(&self) -> f64 {
        1.0 - self.beta1 - self.beta2 - self.beta3
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(CreditError::config(format!("{name} must be in [0,1], got {b}")));
            }
        }
        if self.beta4() < -1e-12 {
            return Err(CreditError::config("beta1+beta2+beta3 must not exceed 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CreditError::config("lambda must be in [0,1]"));
        }
        if self.step_reward < 0.0 || self.baseline_weight < 0.0 {
            return Err(CreditError::config("reward and baseline weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood over the per-step gold log-probs. Empty
/// targets define a zero loss.
pub fn ce_loss(tape: &mut Tape, logps: &[NodeId]) -> NodeId {
    if logps.is_empty() {
        return tape.scalar_const(0.0);
    }
    let total = tape.add_n(logps.to_vec());
    tape.scale(total, -1.0 / logps.len() as f64)
}

/// Shaped per-token reward for a sampled sequence against the gold:
/// membership in the gold earns `+step_reward`, absence `-step_reward`, and
/// the terminal `<EOB>` earns the sentence BLEU of the whole sequence.
pub fn shaped_reward(
    sampled: &[TokenId],
    gold: &[TokenId],
    eob: TokenId,
    cfg: &LossConfig,
) -> Vec<f64> {
    sampled
        .iter()
        .map(|tok| {
            if *tok == eob && cfg.bleu_terminal {
                sentence_bleu(sampled, gold)
            } else if gold.contains(tok) {
                cfg.step_reward
            } else {
                -cfg.step_reward
            }
        })
        .collect()
}

/// r_i = Σ_{k≥i} λ^{k-i} R_k.
pub fn discounted_returns(rewards: &[f64], lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + lambda * acc;
        out[i] = acc;
    }
    out
}

/// Per-step baseline values b_i = W·h_i + b. Hidden states are detached so
/// the regression trains the head alone.
pub fn baseline_values(
    tape: &mut Tape,
    head_w: ParamId,
    head_b: ParamId,
    hiddens: &[NodeId],
) -> Vec<NodeId> {
    hiddens
        .iter()
        .map(|&h| {
            let frozen = tape.stop_grad(h);
            tape.affine(head_w, head_b, frozen)
        })
        .collect()
}

/// One sampled decoding episode with everything the RL losses need. All
/// per-step sequences share one length (a truncation-appended `<EOB>` is
/// excluded — it has no log-prob — but its reward still flows into returns).
pub struct EpisodeTrace {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<NodeId>,
    pub hiddens: Vec<NodeId>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub baseline_nodes: Vec<NodeId>,
    pub baseline_values: Vec<f64>,
    /// Terminal sentence BLEU of the sampled sequence (for logging).
    pub terminal_bleu: f64,
}

pub fn make_episode(
    tape: &mut Tape,
    run: &DecodeRun,
    gold: &[TokenId],
    eob: TokenId,
    head: (ParamId, ParamId),
    cfg: &LossConfig,
) -> EpisodeTrace {
    let rewards_full = shaped_reward(&run.tokens, gold, eob, cfg);
    let returns_full = discounted_returns(&rewards_full, cfg.lambda);
    let n = run.logps.len();
    let baseline_nodes = baseline_values(tape, head.0, head.1, &run.hiddens);
    let baseline_vals: Vec<f64> =
        baseline_nodes.iter().map(|&b| tape.value(b).item()).collect();
    EpisodeTrace {
        tokens: run.tokens[..n].to_vec(),
        logps: run.logps.clone(),
        hiddens: run.hiddens.clone(),
        rewards: rewards_full[..n].to_vec(),
        returns: returns_full[..n].to_vec(),
        baseline_nodes,
        baseline_values: baseline_vals,
        terminal_bleu: sentence_bleu(&run.tokens, gold),
    }
}

/// Policy-gradient loss: -(1/m) Σ w_i · log P(ā_i), where w_i is (r_i-b_i)²
/// (squared variant) or r_i-b_i (standard advantage). The weight is a
/// constant — no gradient flows through returns or baselines here.
pub fn rl_loss(tape: &mut Tape, trace: &EpisodeTrace, variant: RlVariant) -> NodeId {
    if trace.logps.is_empty() {
        return tape.scalar_const(0.0);
    }
    let m = trace.logps.len() as f64;
    let terms: Vec<NodeId> = trace
        .logps
        .iter()
        .zip(trace.returns.iter().zip(trace.baseline_values.iter()))
        .map(|(&lp, (r, b))| {
            let adv = r - b;
            let w = match variant {
                RlVariant::PaperSquared => adv * adv,
                RlVariant::StandardAdvantage => adv,
            };
            tape.scale(lp, -w / m)
        })
        .collect();
    tape.add_n(terms)
}

/// Baseline regression: mean (b_i - r_i)², with r_i constant.
pub fn baseline_loss(tape: &mut Tape, trace: &EpisodeTrace) -> NodeId {
    if trace.baseline_nodes.is_empty() {
        return tape.scalar_const(0.0);
    }
    let n = trace.baseline_nodes.len() as f64;
    let terms: Vec<NodeId> = trace
        .baseline_nodes
        .iter()
        .zip(trace.returns.iter())
        .map(|(&b, r)| {
            let d = tape.add_const(b, -r);
            tape.mul(d, d)
        })
        .collect();
    let total = tape.add_n(terms);
    tape.scale(total, 1.0 / n)
}

/// β1·L_ce^a + β2·L_ce^y + β3·L_rl^a + (1-β1-β2-β3)·L_rl^y.
pub fn combined_loss(
    tape: &mut Tape,
    l_ce_a: NodeId,
    l_ce_y: NodeId,
    l_rl_a: NodeId,
    l_rl_y: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let a = tape.scale(l_ce_a, cfg.beta1);
    let b = tape.scale(l_ce_y, cfg.beta2);
    let c = tape.scale(l_rl_a, cfg.beta3);
    let d = tape.scale(l_rl_y, cfg.beta4());
    Ok(tape.add_n(vec![a, b, c, d]))
}
