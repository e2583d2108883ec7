//! Two-stage training: supervised cross-entropy pretraining, then
//! policy-gradient fine-tuning with the β-weighted combined loss.
//!
//! Batch gradients are a data-parallel map over examples followed by an
//! ordered sequential reduce, so results are bit-identical across thread
//! counts. All stochastic choices (shuffles, dropout masks, episode
//! sampling) derive from per-(step, slot) seeds, never from scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{CreditError, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{CreditModel, DecodeMode, DecodeOptions, Dropout};
use crate::par;
use crate::tape::{Grads, ParamSet, Tape};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> =
            params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.by_param.len() {
            let g = grads.by_param[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = params.get_mut(crate::tape::ParamId(i)).as_mut_slice();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configs, logs, outcomes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SlConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub grad_clip: Option<f64>,
    /// Stop as soon as dev joint accuracy reaches this.
    pub target_dev_acc: Option<f64>,
    pub seed: u64,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            lr: 1e-4,
            batch_size: 16,
            epochs: 10,
            dropout: 0.2,
            grad_clip: Some(10.0),
            target_dev_acc: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub dropout: f64,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lr: 1e-5,
            batch_size: 16,
            steps: 200,
            dropout: 0.0,
            grad_clip: Some(10.0),
            eval_every: 50,
            seed: 1,
            loss: LossConfig::default(),
        }
    }
}

/// One structured training-log record per optimizer step (dev metrics appear
/// on evaluation steps).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_ce_a: Option<f64>,
    pub l_ce_y: Option<f64>,
    pub l_rl_a: Option<f64>,
    pub l_rl_y: Option<f64>,
    pub mean_bleu_reward: Option<f64>,
    pub dev_joint_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    /// Dev report of the selected (best) parameters.
    pub best_dev: EvalReport,
    pub diverged: bool,
    pub steps_run: usize,
}

// ---------------------------------------------------------------------------
// Per-example losses
// ---------------------------------------------------------------------------

struct StepStats {
    l_ce_a: f64,
    l_ce_y: f64,
    l_rl_a: f64,
    l_rl_y: f64,
    bleu_reward: f64,
    grads: Grads,
}

fn mix_seed(seed: u64, step: u64, slot: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Supervised loss for one example: L_ce^a + L_ce^y under teacher forcing on
/// the gold sketch and gold state.
fn sl_example(model: &CreditModel, ex: &Example, dropout: f64, drop_seed: u64) -> StepStats {
    let mut tape = Tape::new(&model.params);
    let mut drop = Dropout::new(dropout, drop_seed);
    let enc = model.encode(&mut tape, &ex.utterances, &mut drop);
    let opts = DecodeOptions::default();

    let mut parts = Vec::new();
    let l_ce_a = if model.meta.no_coarse {
        0.0
    } else {
        let run = model.decode_sketch(
            &mut tape,
            &enc,
            DecodeMode::Forced(&ex.sketch_ids),
            &opts,
            &mut drop,
        );
        let l = losses::ce_loss(&mut tape, &run.run.logps);
        parts.push(l);
        tape.value(l).item()
    };
    let g = if model.meta.no_coarse {
        None
    } else {
        Some(model.encode_sketch(&mut tape, &ex.sketch_ids, &mut drop))
    };
    let run = model.decode_state(
        &mut tape,
        &enc,
        &ex.sketch_ids,
        g.as_deref(),
        DecodeMode::Forced(&ex.state_ids),
        &opts,
        &mut drop,
    );
    let l_y = losses::ce_loss(&mut tape, &run.run.logps);
    parts.push(l_y);
    let l_ce_y = tape.value(l_y).item();

    let loss = tape.add_n(parts);
    let grads = tape.backward(loss);
    StepStats { l_ce_a, l_ce_y, l_rl_a: 0.0, l_rl_y: 0.0, bleu_reward: 0.0, grads }
}

/// Combined loss for one example at the RL stage: teacher-forced CE terms
/// plus policy-gradient terms on sampled episodes (the state episode is
/// conditioned on the sampled sketch), plus the baseline regressions.
fn rl_example(
    model: &CreditModel,
    ex: &Example,
    cfg: &RlConfig,
    drop_seed: u64,
    sample_seed: u64,
) -> Result<StepStats> {
    let mut tape = Tape::new(&model.params);
    let mut drop = Dropout::new(cfg.dropout, drop_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let enc = model.encode(&mut tape, &ex.utterances, &mut drop);
    let opts = DecodeOptions::default();
    let eob = model.vocab.eob();
    let lc = &cfg.loss;

    // CE terms (gold sketch, gold state)
    let (l_ce_a_node, l_ce_a) = if model.meta.no_coarse {
        (tape.scalar_const(0.0), 0.0)
    } else {
        let run = model.decode_sketch(
            &mut tape,
            &enc,
            DecodeMode::Forced(&ex.sketch_ids),
            &opts,
            &mut drop,
        );
        let l = losses::ce_loss(&mut tape, &run.run.logps);
        (l, tape.value(l).item())
    };
    let g_gold = if model.meta.no_coarse {
        None
    } else {
        Some(model.encode_sketch(&mut tape, &ex.sketch_ids, &mut drop))
    };
    let run = model.decode_state(
        &mut tape,
        &enc,
        &ex.sketch_ids,
        g_gold.as_deref(),
        DecodeMode::Forced(&ex.state_ids),
        &opts,
        &mut drop,
    );
    let l_ce_y_node = losses::ce_loss(&mut tape, &run.run.logps);
    let l_ce_y = tape.value(l_ce_y_node).item();

    // Sampled episodes
    let (l_rl_a_node, l_rl_a, bse_a, sampled_sketch) = if model.meta.no_coarse {
        (tape.scalar_const(0.0), 0.0, tape.scalar_const(0.0), Vec::new())
    } else {
        let srun = model.decode_sketch(
            &mut tape,
            &enc,
            DecodeMode::Sample { temperature: 1.0, rng: &mut rng },
            &opts,
            &mut drop,
        );
        let ep = losses::make_episode(
            &mut tape,
            &srun.run,
            &ex.sketch_ids,
            eob,
            (model.p.bse_a_w, model.p.bse_a_b),
            lc,
        );
        let l = losses::rl_loss(&mut tape, &ep, lc.variant);
        let bse = losses::baseline_loss(&mut tape, &ep);
        (l, tape.value(l).item(), bse, srun.run.tokens)
    };

    let (g_sampled, fine_sketch) = if model.meta.no_coarse {
        (None, Vec::new())
    } else {
        (Some(model.encode_sketch(&mut tape, &sampled_sketch, &mut drop)), sampled_sketch)
    };
    let yrun = model.decode_state(
        &mut tape,
        &enc,
        &fine_sketch,
        g_sampled.as_deref(),
        DecodeMode::Sample { temperature: 1.0, rng: &mut rng },
        &opts,
        &mut drop,
    );
    let ep_y = losses::make_episode(
        &mut tape,
        &yrun.run,
        &ex.state_ids,
        eob,
        (model.p.bse_y_w, model.p.bse_y_b),
        lc,
    );
    let l_rl_y_node = losses::rl_loss(&mut tape, &ep_y, lc.variant);
    let l_rl_y = tape.value(l_rl_y_node).item();
    let bse_y = losses::baseline_loss(&mut tape, &ep_y);

    let combined =
        losses::combined_loss(&mut tape, l_ce_a_node, l_ce_y_node, l_rl_a_node, l_rl_y_node, lc)?;
    let bse_sum = tape.add(bse_a, bse_y);
    let bse_scaled = tape.scale(bse_sum, lc.baseline_weight);
    let total = tape.add(combined, bse_scaled);
    let grads = tape.backward(total);

    Ok(StepStats {
        l_ce_a,
        l_ce_y,
        l_rl_a,
        l_rl_y,
        bleu_reward: ep_y.terminal_bleu,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Batch gradients (parallel map, ordered sequential reduce)
// ---------------------------------------------------------------------------

fn reduce_batch(model: &CreditModel, stats: Vec<StepStats>) -> (Grads, [f64; 5]) {
    let n = stats.len().max(1) as f64;
    let mut grads = Grads::zeros_like(&model.params);
    let mut sums = [0.0; 5];
    for s in stats {
        grads.add(&s.grads);
        sums[0] += s.l_ce_a;
        sums[1] += s.l_ce_y;
        sums[2] += s.l_rl_a;
        sums[3] += s.l_rl_y;
        sums[4] += s.bleu_reward;
    }
    grads.scale(1.0 / n);
    for v in sums.iter_mut() {
        *v /= n;
    }
    (grads, sums)
}

/// Mean SL gradients over a batch (parallel when the `parallel` feature is
/// on).
pub fn sl_batch_grads(
    model: &CreditModel,
    batch: &[&Example],
    dropout: f64,
    seed: u64,
    step: u64,
) -> (Grads, [f64; 5]) {
    let indexed: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
    let stats = par::ordered_map(&indexed, |(slot, ex)| {
        sl_example(model, ex, dropout, mix_seed(seed, step, *slot as u64))
    });
    reduce_batch(model, stats)
}

/// Always-sequential twin of [`sl_batch_grads`]; same inputs, same outputs.
pub fn sl_batch_grads_seq(
    model: &CreditModel,
    batch: &[&Example],
    dropout: f64,
    seed: u64,
    step: u64,
) -> (Grads, [f64; 5]) {
    let indexed: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
    let stats = par::ordered_map_seq(&indexed, |(slot, ex)| {
        sl_example(model, ex, dropout, mix_seed(seed, step, *slot as u64))
    });
    reduce_batch(model, stats)
}

fn rl_batch_grads(
    model: &CreditModel,
    batch: &[&Example],
    cfg: &RlConfig,
    step: u64,
) -> Result<(Grads, [f64; 5])> {
    let indexed: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
    let stats: Vec<Result<StepStats>> = par::ordered_map(&indexed, |(slot, ex)| {
        rl_example(
            model,
            ex,
            cfg,
            mix_seed(cfg.seed, step, *slot as u64),
            mix_seed(cfg.seed ^ 0x5151_5151, step, *slot as u64),
        )
    });
    let stats: Result<Vec<StepStats>> = stats.into_iter().collect();
    Ok(reduce_batch(model, stats?))
}

fn clip_grads(grads: &mut Grads, clip: Option<f64>) {
    if let Some(c) = clip {
        let norm = grads.l2_norm();
        if norm > c {
            grads.scale(c / norm);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Supervised pretraining. Keeps the parameters with the best dev joint
/// accuracy; aborts (restoring them) if the loss goes non-finite.
pub fn train_sl(
    model: &mut CreditModel,
    train: &[Example],
    dev: &[Example],
    cfg: &SlConfig,
    verbose: bool,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CreditError::config("empty training set"));
    }
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut log = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_dev: Option<EvalReport> = None;
    let mut diverged = false;
    let mut step: u64 = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut grads, sums) = sl_batch_grads(model, &batch, cfg.dropout, cfg.seed, step);
            if !sums[..2].iter().all(|v| v.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            clip_grads(&mut grads, cfg.grad_clip);
            adam.step(&mut model.params, &grads);
            log.push(TrainLogRecord {
                step: step as usize,
                l_ce_a: Some(sums[0]),
                l_ce_y: Some(sums[1]),
                l_rl_a: None,
                l_rl_y: None,
                mean_bleu_reward: None,
                dev_joint_acc: None,
            });
            step += 1;
        }

        let report = evaluate(model, dev).report;
        if verbose {
            eprintln!(
                "epoch {epoch}: dev joint acc {:.4}, sketch acc {:?}, bleu {:.4}",
                report.joint_goal_acc, report.joint_sketch_acc, report.mean_sentence_bleu
            );
        }
        log.push(TrainLogRecord {
            step: step as usize,
            l_ce_a: None,
            l_ce_y: None,
            l_rl_a: None,
            l_rl_y: None,
            mean_bleu_reward: None,
            dev_joint_acc: Some(report.joint_goal_acc),
        });
        if report.joint_goal_acc > best_acc {
            best_acc = report.joint_goal_acc;
            best_params = model.params.clone();
            best_dev = Some(report.clone());
        }
        if let Some(t) = cfg.target_dev_acc {
            if report.joint_goal_acc >= t {
                break;
            }
        }
    }

    model.params = best_params;
    let best_dev = match best_dev {
        Some(r) => r,
        None => evaluate(model, dev).report,
    };
    Ok(TrainOutcome { log, best_dev, diverged, steps_run: step as usize })
}

/// Policy-gradient fine-tuning from a pretrained model. The pre-RL parameters
/// are a selection candidate, so the selected model never scores below the
/// starting point on the selection metric (dev joint accuracy + mean
/// sentence BLEU).
pub fn finetune_rl(
    model: &mut CreditModel,
    train: &[Example],
    dev: &[Example],
    cfg: &RlConfig,
    verbose: bool,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CreditError::config("empty training set"));
    }
    cfg.loss.validate()?;
    let score = |r: &EvalReport| r.joint_goal_acc + r.mean_sentence_bleu;

    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut log = Vec::new();
    let start = evaluate(model, dev).report;
    let mut best_params = model.params.clone();
    let mut best_score = score(&start);
    let mut best_dev = start;
    let mut diverged = false;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX, 1));
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;

    let bs = cfg.batch_size.min(order.len());
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            cursor = 0;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64, 2));
            order.shuffle(&mut rng);
        }
        let batch: Vec<&Example> =
            order[cursor..cursor + bs].iter().map(|&i| &train[i]).collect();
        cursor += bs;

        let (mut grads, sums) = rl_batch_grads(model, &batch, cfg, step as u64)?;
        if !sums.iter().all(|v| v.is_finite()) {
            diverged = true;
            break;
        }
        clip_grads(&mut grads, cfg.grad_clip);
        adam.step(&mut model.params, &grads);

        let eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        let dev_acc = if eval_now {
            let report = evaluate(model, dev).report;
            if verbose {
                eprintln!(
                    "rl step {step}: dev joint acc {:.4}, bleu {:.4}, reward {:.4}",
                    report.joint_goal_acc, report.mean_sentence_bleu, sums[4]
                );
            }
            let s = score(&report);
            if s > best_score {
                best_score = s;
                best_params = model.params.clone();
                best_dev = report.clone();
            }
            Some(report.joint_goal_acc)
        } else {
            None
        };
        log.push(TrainLogRecord {
            step,
            l_ce_a: Some(sums[0]),
            l_ce_y: Some(sums[1]),
            l_rl_a: Some(sums[2]),
            l_rl_y: Some(sums[3]),
            mean_bleu_reward: Some(sums[4]),
            dev_joint_acc: dev_acc,
        });
    }

    model.params = best_params;
    Ok(TrainOutcome { log, best_dev, diverged, steps_run: cfg.steps })
}
