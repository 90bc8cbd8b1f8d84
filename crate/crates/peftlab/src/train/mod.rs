//! The optimization loop: composite objective (cross-entropy plus the
//! sparsity, basis-regularization, and orthogonality penalties),
//! gradient accumulation, rank-allocation cadence, and greedy-decoding
//! evaluation.

mod adam;
mod task;

pub use adam::Adam;
pub use task::{apply_kind, make_task, Sample, TaskData, TaskKind, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::alloc::{
    rank_report, reallocate, BudgetSchedule, ImportanceTracker, DEFAULT_BETA1, DEFAULT_BETA2,
    REPORT_THRESHOLD,
};
use crate::model::{Model, BOS, EOS};
use crate::peft::{attach, AdaptedModel, AdapterSpec, Method, MethodStates, S2State, SharedBasisStore};
use crate::real::Real;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    2
}
fn default_accum() -> usize {
    8
}
fn default_orth_weight() -> f64 {
    0.1
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Loop hyperparameters. The learning rate defaults to 1e-3 for adapter
/// methods and 1e-4 for full fine-tuning when left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accumulation: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the orthogonality penalty (adaptive-rank method).
    #[serde(default = "default_orth_weight")]
    pub orth_weight: f64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Off by default; exposed for experiments.
    #[serde(default)]
    pub weight_decay: f64,
    /// Off by default; exposed for experiments.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: None,
            epochs: default_epochs(),
            batch_size: default_batch(),
            grad_accumulation: default_accum(),
            seed: 0,
            orth_weight: default_orth_weight(),
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn resolved_lr(&self, method: Method) -> f64 {
        self.learning_rate.unwrap_or(match method {
            Method::FullFt => 1e-4,
            _ => 1e-3,
        })
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::Validation(
                "epochs, batch_size and grad_accumulation must be positive".into(),
            ));
        }
        if let Some(lr) = self.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Validation(format!("bad learning rate {lr}")));
            }
        }
        Ok(())
    }
}

/// Loss components of one optimizer step; the recorded total is their sum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub ce: f64,
    pub l1_term: f64,
    pub l2_term: f64,
    pub orth_term: f64,
    pub total: f64,
}

/// Active-rank totals captured at epoch boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSnapshot {
    pub epoch: usize,
    pub total_active_rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingRun {
    pub steps: Vec<StepRecord>,
    pub rank_snapshots: Vec<RankSnapshot>,
    pub in_domain_ter: f64,
    pub ood_ter: f64,
    /// Wall-clock is informational and excluded from serialized metrics
    /// so same-seed runs stay byte-identical.
    #[serde(skip)]
    pub wall_secs: f64,
}

// ---- composite objective ---------------------------------------------------

/// Scaled sparsity and basis-regularization terms of the shared-basis
/// objective: `alpha1/N * sum_i ||s_i||_1` and
/// `alpha2/(2r) * sum_pairs sum_k (||B[:,k]||_2 + ||A[k,:]||_2)`.
/// The basis term is computed once per stored pair.
pub fn s2_terms<T: Real>(
    tape: &mut Tape<T>,
    store: &SharedBasisStore<T>,
    sites: &BTreeMap<usize, S2State<T>>,
    alpha1: f64,
    alpha2: f64,
) -> Result<(Var, Var)> {
    let n = sites.len().max(1);
    let mut l1_sum: Option<Var> = None;
    for st in sites.values() {
        let s = tape.param(&st.coeffs);
        let norm = tape.l1_norm(s);
        l1_sum = Some(match l1_sum {
            None => norm,
            Some(acc) => tape.add(acc, norm)?,
        });
    }
    let l1 = l1_sum.unwrap_or_else(|| tape.scalar_const(T::zero()));
    let l1_scaled = tape.scale(l1, T::from_f64(alpha1 / n as f64));

    let mut l2_sum: Option<Var> = None;
    for (_, pair) in store.pairs() {
        let b = tape.param(&pair.b);
        let a = tape.param(&pair.a);
        let bcols = tape.sum_col_l2(b)?;
        let arows = tape.sum_row_l2(a)?;
        let both = tape.add(bcols, arows)?;
        l2_sum = Some(match l2_sum {
            None => both,
            Some(acc) => tape.add(acc, both)?,
        });
    }
    let l2 = l2_sum.unwrap_or_else(|| tape.scalar_const(T::zero()));
    let l2_scaled = tape.scale(l2, T::from_f64(alpha2 / (2.0 * store.rank as f64)));
    Ok((l1_scaled, l2_scaled))
}

/// Full shared-basis objective: cross-entropy plus both penalty terms.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    ce: Var,
    store: &SharedBasisStore<T>,
    sites: &BTreeMap<usize, S2State<T>>,
    alpha1: f64,
    alpha2: f64,
) -> Result<Var> {
    let (l1, l2) = s2_terms(tape, store, sites, alpha1, alpha2)?;
    let partial = tape.add(ce, l1)?;
    tape.add(partial, l2)
}

/// Soft orthogonality penalty on one adaptive-rank site:
/// `||B^T B - I||_F^2 + ||A A^T - I||_F^2`.
pub fn orth_penalty<T: Real>(
    tape: &mut Tape<T>,
    state: &crate::peft::AdaLoraState<T>,
) -> Result<Var> {
    let rank = state.mask.len();
    let b = tape.param(&state.b);
    let bt = tape.transpose(b)?;
    let gram_b = tape.matmul(bt, b)?;
    let eye = tape.identity(rank);
    let diff_b = tape.sub(gram_b, eye)?;
    let sq_b = tape.mul(diff_b, diff_b)?;
    let term_b = tape.sum(sq_b);

    let a = tape.param(&state.a);
    let gram_a = tape.matmul_nt(a, a)?;
    let eye2 = tape.identity(rank);
    let diff_a = tape.sub(gram_a, eye2)?;
    let sq_a = tape.mul(diff_a, diff_a)?;
    let term_a = tape.sum(sq_a);
    tape.add(term_b, term_a)
}

// ---- evaluation ------------------------------------------------------------

/// Classic DP edit distance.
pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &av) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between decodes and references, summed over the set,
/// divided by total reference length.
pub fn evaluate_with<F>(mut decode: F, set: &[Sample]) -> Result<f64>
where
    F: FnMut(&[u32]) -> Result<Vec<u32>>,
{
    if set.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut dist = 0usize;
    let mut total = 0usize;
    for sample in set {
        let hyp = decode(&sample.src)?;
        dist += levenshtein(&hyp, &sample.tgt);
        total += sample.tgt.len();
    }
    Ok(dist as f64 / total as f64)
}

pub fn evaluate_model<T: Real>(model: &Model<T>, set: &[Sample]) -> Result<f64> {
    let cap = model.arch.max_tgt_len - 1;
    evaluate_with(|src| model.greedy_decode(src, cap), set)
}

pub fn evaluate_adapted<T: Real>(adapted: &AdaptedModel<T>, set: &[Sample]) -> Result<f64> {
    let cap = adapted.model.arch.max_tgt_len - 1;
    evaluate_with(|src| adapted.greedy_decode(src, cap), set)
}

// ---- the loop ---------------------------------------------------------------

struct AllocatorState {
    tracker: ImportanceTracker,
    schedule: BudgetSchedule,
}

/// Trains an adapted model in place on the given samples. Deterministic
/// given the config seed.
pub fn train_on<T: Real>(
    adapted: &mut AdaptedModel<T>,
    tcfg: &TrainConfig,
    data: &[Sample],
) -> Result<(Vec<StepRecord>, Vec<RankSnapshot>, f64)> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let started = Instant::now();
    let params = adapted.trainable_params();
    let lr = tcfg.resolved_lr(adapted.spec.method);
    let mut adam = Adam::new(
        lr,
        tcfg.adam_beta1,
        tcfg.adam_beta2,
        tcfg.adam_eps,
        tcfg.weight_decay,
        &params,
    );

    let eff_batch = tcfg.effective_batch();
    let steps_per_epoch = data.len().div_ceil(eff_batch);
    let total_steps = steps_per_epoch * tcfg.epochs;

    let mut allocator = match (&adapted.states, adapted.spec.alloc_on) {
        (MethodStates::AdaLora(map), true) => {
            let sites = map.len();
            let b_init = adapted.spec.resolved_initial_rank() * sites;
            let b_target = adapted.spec.rank * sites;
            let t_warmup = total_steps / 10;
            let t_final = ((total_steps * 7) / 10).max(t_warmup + 1);
            let schedule =
                BudgetSchedule::with_anchors(b_init, b_target, t_warmup, t_final, total_steps.max(t_final))?;
            Some(AllocatorState {
                tracker: ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2),
                schedule,
            })
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut steps = Vec::with_capacity(total_steps);
    let mut snapshots = Vec::new();
    let mut t = 0usize;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(eff_batch) {
            adapted.zero_grads();
            let mut ce_sum = 0.0f64;
            for &i in chunk {
                let sample = &data[i];
                let mut dec_in = Vec::with_capacity(sample.tgt.len() + 1);
                dec_in.push(BOS);
                dec_in.extend_from_slice(&sample.tgt);
                let mut targets: Vec<usize> =
                    sample.tgt.iter().map(|&t| t as usize).collect();
                targets.push(EOS as usize);

                let mut tape: Tape<T> = Tape::new();
                let logits = adapted.forward_on_tape(&mut tape, &sample.src, None, &dec_in)?;
                let ce = tape.cross_entropy(logits, &targets)?;
                ce_sum += tape.scalar_value(ce)?.as_f64();
                let scaled = tape.scale(ce, T::from_f64(1.0 / chunk.len() as f64));
                tape.backward(scaled)?;
            }
            let ce_mean = ce_sum / chunk.len() as f64;

            // Penalty terms contribute once per optimizer step.
            let (l1_v, l2_v, orth_v) = apply_penalties(adapted, tcfg)?;

            let record = StepRecord {
                ce: ce_mean,
                l1_term: l1_v,
                l2_term: l2_v,
                orth_term: orth_v,
                total: ce_mean + l1_v + l2_v + orth_v,
            };
            if !record.total.is_finite() {
                return Err(Error::Diverged {
                    step: t,
                    detail: format!(
                        "ce {} l1 {} l2 {} orth {}",
                        record.ce, record.l1_term, record.l2_term, record.orth_term
                    ),
                });
            }
            steps.push(record);

            if let Some(alloc) = &mut allocator {
                alloc.tracker.sensitivity_update(&adapted.adapter_params());
            }
            if let Some(clip) = tcfg.grad_clip {
                clip_gradients(&params, clip);
            }
            adam.step(&params);
            t += 1;
            if let Some(alloc) = &allocator {
                if t > alloc.schedule.t_warmup && t <= alloc.schedule.t_final {
                    let budget = alloc.schedule.budget_at(t);
                    reallocate(&alloc.tracker, adapted, budget)?;
                }
            }
        }
        if matches!(&adapted.states, MethodStates::AdaLora(_) | MethodStates::S2Lora { .. }) {
            let report = rank_report(adapted, REPORT_THRESHOLD)?;
            snapshots.push(RankSnapshot { epoch, total_active_rank: report.total() });
        }
    }
    Ok((steps, snapshots, started.elapsed().as_secs_f64()))
}

/// Builds and backpropagates the per-step penalty tape; returns the
/// recorded (l1, l2, orth) component values.
fn apply_penalties<T: Real>(
    adapted: &mut AdaptedModel<T>,
    tcfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    match &adapted.states {
        MethodStates::S2Lora { store, sites } => {
            let mut tape: Tape<T> = Tape::new();
            let (l1, l2) = s2_terms(&mut tape, store, sites, adapted.spec.alpha1, adapted.spec.alpha2)?;
            let total = tape.add(l1, l2)?;
            let l1_v = tape.scalar_value(l1)?.as_f64();
            let l2_v = tape.scalar_value(l2)?.as_f64();
            tape.backward(total)?;
            Ok((l1_v, l2_v, 0.0))
        }
        MethodStates::AdaLora(map) if adapted.spec.orth_on && tcfg.orth_weight > 0.0 => {
            let mut tape: Tape<T> = Tape::new();
            let mut sum: Option<Var> = None;
            for st in map.values() {
                let p = orth_penalty(&mut tape, st)?;
                sum = Some(match sum {
                    None => p,
                    Some(acc) => tape.add(acc, p)?,
                });
            }
            let total = tape.scale(sum.expect("adalora has sites"), T::from_f64(tcfg.orth_weight));
            let orth_v = tape.scalar_value(total)?.as_f64();
            tape.backward(total)?;
            Ok((0.0, 0.0, orth_v))
        }
        _ => Ok((0.0, 0.0, 0.0)),
    }
}

fn clip_gradients<T: Real>(params: &[(String, crate::tensor::Param<T>)], clip: f64) {
    let mut sq = 0.0f64;
    for (_, p) in params {
        for g in p.grad_vec() {
            let g = g.as_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let factor = T::from_f64(clip / norm);
        for (_, p) in params {
            p.borrow_mut().scale_grad(factor);
        }
    }
}

/// End-to-end run: generates the task, attaches the adapter, trains on
/// the adaptation split, and evaluates on both held-out splits.
pub fn run_training<T: Real>(
    model: Model<T>,
    spec: AdapterSpec,
    tcfg: &TrainConfig,
    task: &TaskSpec,
) -> Result<(AdaptedModel<T>, TrainingRun)> {
    let data = make_task(task, tcfg.seed)?;
    let mut adapted = attach(model, spec, tcfg.seed.wrapping_add(1))?;
    let (steps, rank_snapshots, wall_secs) = train_on(&mut adapted, tcfg, &data.adapt_train)?;
    let in_domain_ter = evaluate_adapted(&adapted, &data.in_domain_eval)?;
    let ood_ter = evaluate_adapted(&adapted, &data.ood_eval)?;
    Ok((adapted, TrainingRun { steps, rank_snapshots, in_domain_ter, ood_ter, wall_secs }))
}
