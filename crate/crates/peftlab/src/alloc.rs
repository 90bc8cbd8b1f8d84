//! Importance-aware rank budgeting: smoothed sensitivity tracking, the
//! decaying global budget, triplet masking, and rank-distribution
//! reports shared by the adaptive and shared-basis methods.

use std::collections::BTreeMap;

use crate::model::{ModuleGroup, Role};
use crate::peft::{AdaptedModel, MethodStates};
use crate::real::Real;
use crate::tensor::Param;
use crate::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.85;
pub const DEFAULT_BETA2: f64 = 0.85;
/// Masking threshold used by rank-distribution reports.
pub const REPORT_THRESHOLD: f64 = 1e-4;

/// Raw per-coordinate sensitivity `|theta * grad|`.
pub fn raw_sensitivity(theta: f64, grad: f64) -> f64 {
    (theta * grad).abs()
}

#[derive(Debug, Clone, Default)]
struct EmaPair {
    i_bar: Vec<f64>,
    u_bar: Vec<f64>,
}

impl EmaPair {
    fn update(&mut self, beta1: f64, beta2: f64, theta: &[f64], grad: &[f64]) {
        if self.i_bar.is_empty() {
            self.i_bar = vec![0.0; theta.len()];
            self.u_bar = vec![0.0; theta.len()];
        }
        for idx in 0..theta.len() {
            let raw = raw_sensitivity(theta[idx], grad[idx]);
            self.i_bar[idx] = beta1 * self.i_bar[idx] + (1.0 - beta1) * raw;
            self.u_bar[idx] = beta2 * self.u_bar[idx] + (1.0 - beta2) * (raw - self.i_bar[idx]).abs();
        }
    }

    fn score(&self, idx: usize) -> f64 {
        if self.i_bar.is_empty() {
            0.0
        } else {
            self.i_bar[idx] * self.u_bar[idx]
        }
    }
}

/// Exponentially smoothed sensitivity and uncertainty per tracked
/// coordinate. The importance of a coordinate is the product of the two
/// EMAs; both stay non-negative by construction.
#[derive(Debug, Clone)]
pub struct ImportanceTracker {
    pub beta1: f64,
    pub beta2: f64,
    entries: BTreeMap<String, EmaPair>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped_steps: usize,
}

impl ImportanceTracker {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        ImportanceTracker { beta1, beta2, entries: BTreeMap::new(), skipped_steps: 0 }
    }

    /// One smoothing step over all tracked parameters. Skips the whole
    /// step (and flags it) when any gradient is non-finite; parameters
    /// without a gradient count as zero sensitivity.
    pub fn sensitivity_update<T: Real>(&mut self, params: &[(String, Param<T>)]) -> bool {
        let mut staged: Vec<(&String, Vec<f64>, Vec<f64>)> = Vec::with_capacity(params.len());
        for (name, p) in params {
            let theta: Vec<f64> = p.data_vec().iter().map(|v| v.as_f64()).collect();
            let grad: Vec<f64> = p.grad_vec().iter().map(|v| v.as_f64()).collect();
            if grad.iter().any(|g| !g.is_finite()) {
                self.skipped_steps += 1;
                return false;
            }
            staged.push((name, theta, grad));
        }
        for (name, theta, grad) in staged {
            self.entries
                .entry(name.clone())
                .or_default()
                .update(self.beta1, self.beta2, &theta, &grad);
        }
        true
    }

    /// Importance score of one coordinate of a tracked parameter.
    pub fn importance(&self, name: &str, idx: usize) -> f64 {
        self.entries.get(name).map_or(0.0, |e| e.score(idx))
    }

    pub fn smoothed_sensitivity(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.i_bar.as_slice())
    }

    pub fn uncertainty(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.u_bar.as_slice())
    }
}

/// Tracker key of an adaptive-rank site field, derived from the site's
/// registry name.
pub fn adalora_key(site_name: &str, field: &str) -> String {
    format!("adapter/adalora/{site_name}/{field}")
}

/// Importance of the k-th triplet of one site: the singular value's own
/// score plus the mean score of its left and right vectors.
pub fn triplet_importance(
    tracker: &ImportanceTracker,
    site_name: &str,
    out_dim: usize,
    initial_rank: usize,
    in_dim: usize,
    k: usize,
) -> f64 {
    let lambda = tracker.importance(&adalora_key(site_name, "lambda"), k);
    let b_key = adalora_key(site_name, "b");
    let mut b_mean = 0.0;
    for j in 0..out_dim {
        b_mean += tracker.importance(&b_key, j * initial_rank + k);
    }
    b_mean /= out_dim as f64;
    let a_key = adalora_key(site_name, "a");
    let mut a_mean = 0.0;
    for j in 0..in_dim {
        a_mean += tracker.importance(&a_key, k * in_dim + j);
    }
    a_mean /= in_dim as f64;
    lambda + b_mean + a_mean
}

/// The decaying global rank budget: flat at `b_init` through the warmup,
/// cubic decay to `b_target` by `t_final`, flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSchedule {
    pub b_init: usize,
    pub b_target: usize,
    pub t_warmup: usize,
    pub t_final: usize,
    pub total_steps: usize,
}

impl BudgetSchedule {
    /// Anchors at 10% and 70% of the run.
    pub fn new(b_init: usize, b_target: usize, total_steps: usize) -> Result<Self> {
        let t_warmup = total_steps / 10;
        let t_final = (total_steps * 7) / 10;
        BudgetSchedule::with_anchors(b_init, b_target, t_warmup, t_final, total_steps)
    }

    pub fn with_anchors(
        b_init: usize,
        b_target: usize,
        t_warmup: usize,
        t_final: usize,
        total_steps: usize,
    ) -> Result<Self> {
        if b_target > b_init {
            return Err(Error::Validation(format!(
                "target budget {b_target} exceeds initial budget {b_init}"
            )));
        }
        if t_final <= t_warmup {
            return Err(Error::Validation(format!(
                "t_final {t_final} must exceed t_warmup {t_warmup}"
            )));
        }
        if total_steps < t_final {
            return Err(Error::Validation(format!(
                "total_steps {total_steps} shorter than t_final {t_final}"
            )));
        }
        Ok(BudgetSchedule { b_init, b_target, t_warmup, t_final, total_steps })
    }

    /// Budget at optimizer step `t`; non-increasing in `t`.
    pub fn budget_at(&self, t: usize) -> usize {
        if t <= self.t_warmup {
            return self.b_init;
        }
        if t >= self.t_final {
            return self.b_target;
        }
        let progress = (t - self.t_warmup) as f64 / (self.t_final - self.t_warmup) as f64;
        let span = (self.b_init - self.b_target) as f64;
        let value = self.b_target as f64 + span * (1.0 - progress).powi(3);
        value.round() as usize
    }
}

/// One maskable triplet with its score and deterministic tie-break
/// identity (site enumeration order, then rank index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletScore {
    pub site_order: usize,
    pub k: usize,
    pub score: f64,
}

/// Retains the top `budget` triplets: sort by score descending, ties
/// broken by (site_order, k) ascending. Returns the retained identities.
pub fn select_top(scores: &[TripletScore], budget: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<&TripletScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.site_order.cmp(&b.site_order))
            .then(a.k.cmp(&b.k))
    });
    order.into_iter().take(budget).map(|t| (t.site_order, t.k)).collect()
}

/// Globally re-ranks all triplets of an adaptive-rank model and unmasks
/// exactly `budget` of them (soft masking: values are retained). Returns
/// the scores used, for auditing.
pub fn reallocate<T: Real>(
    tracker: &ImportanceTracker,
    adapted: &mut AdaptedModel<T>,
    budget: usize,
) -> Result<Vec<TripletScore>> {
    let site_names: BTreeMap<usize, String> = adapted
        .model
        .arch
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.name()))
        .collect();
    let MethodStates::AdaLora(states) = &mut adapted.states else {
        return Err(Error::Contract("reallocate requires an adaptive-rank adapter".into()));
    };
    let mut scores = Vec::new();
    for (order, (&site_idx, st)) in states.iter().enumerate() {
        let name = &site_names[&site_idx];
        let out_dim = st.b.shape()[0];
        let initial_rank = st.mask.len();
        let in_dim = st.a.shape()[1];
        for k in 0..initial_rank {
            scores.push(TripletScore {
                site_order: order,
                k,
                score: triplet_importance(tracker, name, out_dim, initial_rank, in_dim, k),
            });
        }
    }
    if budget > scores.len() {
        return Err(Error::Validation(format!(
            "budget {budget} exceeds {} triplets",
            scores.len()
        )));
    }
    let retained = select_top(&scores, budget);
    for st in states.values_mut() {
        st.mask.fill(false);
    }
    for (order, k) in retained {
        let st = states.values_mut().nth(order).expect("site order in range");
        st.mask[k] = true;
    }
    Ok(scores)
}

/// Allocated-rank matrix: one panel per module group, rows in display
/// order (q, v, k, o for attention panels; fc1, fc2 for FFM panels),
/// columns are layer indices.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub threshold: f64,
    pub panels: Vec<RankPanel>,
}

#[derive(Debug, Clone)]
pub struct RankPanel {
    pub group: ModuleGroup,
    pub roles: Vec<Role>,
    pub layers: usize,
    /// entries[row][layer]
    pub entries: Vec<Vec<usize>>,
}

impl RankReport {
    pub fn total(&self) -> usize {
        self.panels
            .iter()
            .map(|p| p.entries.iter().map(|row| row.iter().sum::<usize>()).sum::<usize>())
            .sum()
    }
}

/// Display row order within a panel.
pub fn panel_roles(group: ModuleGroup) -> Vec<Role> {
    if group.is_attention() {
        vec![Role::Q, Role::V, Role::K, Role::O]
    } else {
        vec![Role::Fc1, Role::Fc2]
    }
}

/// Counts active ranks per site. For shared-basis adapters an entry is
/// the number of coefficients at or above the threshold; for
/// adaptive-rank adapters it is the number of unmasked triplets.
/// Sites without adapter state report zero.
pub fn rank_report<T: Real>(adapted: &AdaptedModel<T>, threshold: f64) -> Result<RankReport> {
    if threshold <= 0.0 {
        return Err(Error::Validation("threshold must be positive".into()));
    }
    let arch = &adapted.model.arch;
    let count_for = |site_idx: usize| -> Result<usize> {
        match &adapted.states {
            MethodStates::AdaLora(map) => {
                Ok(map.get(&site_idx).map_or(0, |st| st.active_rank()))
            }
            MethodStates::S2Lora { sites, .. } => Ok(sites.get(&site_idx).map_or(0, |st| {
                st.coeffs
                    .data_vec()
                    .iter()
                    .filter(|v| v.as_f64().abs() >= threshold)
                    .count()
            })),
            _ => Err(Error::Validation(format!(
                "method {} has no rank semantics to report",
                adapted.spec.method
            ))),
        }
    };

    let sites = arch.sites();
    let mut panels = Vec::with_capacity(5);
    for group in ModuleGroup::ALL {
        let roles = panel_roles(group);
        let layers = match group {
            ModuleGroup::EncSam | ModuleGroup::EncFfm => arch.n_enc_layers,
            _ => arch.n_dec_layers,
        };
        let mut entries = vec![vec![0usize; layers]; roles.len()];
        for (idx, site) in sites.iter().enumerate() {
            if site.group != group {
                continue;
            }
            let row = roles.iter().position(|&r| r == site.role).expect("role in panel");
            entries[row][site.layer_index] = count_for(idx)?;
        }
        panels.push(RankPanel { group, roles, layers, entries });
    }
    Ok(RankReport { threshold, panels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, Model};
    use crate::peft::{attach, AdapterSpec, Method};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_sensitivity_is_abs_product() {
        assert_eq!(raw_sensitivity(2.0, 0.5), 1.0);
        assert_eq!(raw_sensitivity(-2.0, 0.5), 1.0);
        assert_eq!(raw_sensitivity(3.0, 0.0), 0.0);
    }

    fn tracked_param(theta: &[f64], grad: &[f64]) -> (String, Param<f64>) {
        let p = Param::trainable(Tensor::new(vec![theta.len()], theta.to_vec()).unwrap());
        p.borrow_mut().accumulate_grad(grad);
        ("p".into(), p)
    }

    #[test]
    fn zero_gradients_decay_sensitivity_geometrically() {
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        let seeded = tracked_param(&[2.0], &[0.5]);
        tracker.sensitivity_update(std::slice::from_ref(&seeded)).then_some(()).unwrap();
        let first = tracker.smoothed_sensitivity("p").unwrap()[0];
        assert!((first - 0.15).abs() < 1e-15); // (1 - beta1) * 1.0

        let silent = {
            let p = Param::trainable(Tensor::new(vec![1], vec![2.0]).unwrap());
            ("p".to_string(), p)
        };
        let mut tracker2 = tracker.clone();
        for _ in 0..50 {
            assert!(tracker2.sensitivity_update(std::slice::from_ref(&silent)));
        }
        let decayed = tracker2.smoothed_sensitivity("p").unwrap()[0];
        assert!((decayed - first * DEFAULT_BETA1.powi(50)).abs() < 1e-15);
    }

    #[test]
    fn constant_sensitivity_converges_within_1e10_after_200_steps() {
        // Geometric series oracle: after n steps of constant raw value c,
        // the EMA equals c (1 - beta1^n).
        let c = 0.7f64;
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        let p = tracked_param(&[1.0], &[c]);
        for _ in 0..200 {
            tracker.sensitivity_update(std::slice::from_ref(&p));
        }
        let i_bar = tracker.smoothed_sensitivity("p").unwrap()[0];
        assert!((i_bar - c).abs() < 1e-10, "i_bar {i_bar}");
        let oracle = c * (1.0 - DEFAULT_BETA1.powi(200));
        assert!((i_bar - oracle).abs() < 1e-15);
        // Uncertainty decays toward zero under constant input.
        let u_bar = tracker.uncertainty("p").unwrap()[0];
        assert!(u_bar < 1e-9, "u_bar {u_bar}");
    }

    #[test]
    fn non_finite_gradient_skips_and_flags_the_step() {
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        let p = tracked_param(&[1.0], &[f64::NAN]);
        assert!(!tracker.sensitivity_update(std::slice::from_ref(&p)));
        assert_eq!(tracker.skipped_steps, 1);
        assert!(tracker.smoothed_sensitivity("p").is_none());
    }

    #[test]
    fn triplet_importance_is_additive_and_zero_when_untracked() {
        let tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        assert_eq!(triplet_importance(&tracker, "enc/0/sam/q", 4, 2, 4, 0), 0.0);
    }

    #[test]
    fn triplet_importance_with_only_lambda_mass() {
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        // Drive lambda's EMA product toward a known value with constant
        // raw sensitivity 1.0 on coordinate 0.
        let lam = {
            let p = Param::trainable(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
            p.borrow_mut().accumulate_grad(&[0.5, 0.0]);
            (adalora_key("enc/0/sam/q", "lambda"), p)
        };
        for _ in 0..400 {
            tracker.sensitivity_update(std::slice::from_ref(&lam));
        }
        let score = triplet_importance(&tracker, "enc/0/sam/q", 4, 2, 4, 0);
        let lambda_score = tracker.importance(&adalora_key("enc/0/sam/q", "lambda"), 0);
        assert_eq!(score, lambda_score);
        // Madeup vector masses are zero, so the triplet equals lambda's own score.
        assert!(score > 0.0);
        assert_eq!(triplet_importance(&tracker, "enc/0/sam/q", 4, 2, 4, 1), 0.0);
    }

    #[test]
    fn triplet_importance_matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        let (d2, ri, d1) = (4, 3, 5);
        let name = "dec/1/cam/v";
        let make = |rng: &mut ChaCha8Rng, n: usize, key: String| {
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = Param::trainable(Tensor::new(vec![n], theta).unwrap());
            p.borrow_mut().accumulate_grad(&grad);
            (key, p)
        };
        let params = vec![
            make(&mut rng, ri, adalora_key(name, "lambda")),
            make(&mut rng, d2 * ri, adalora_key(name, "b")),
            make(&mut rng, ri * d1, adalora_key(name, "a")),
        ];
        for _ in 0..7 {
            tracker.sensitivity_update(&params);
        }
        for k in 0..ri {
            let got = triplet_importance(&tracker, name, d2, ri, d1, k);
            // Recompute from the stored EMAs directly.
            let lam_i = tracker.smoothed_sensitivity(&adalora_key(name, "lambda")).unwrap();
            let lam_u = tracker.uncertainty(&adalora_key(name, "lambda")).unwrap();
            let b_i = tracker.smoothed_sensitivity(&adalora_key(name, "b")).unwrap();
            let b_u = tracker.uncertainty(&adalora_key(name, "b")).unwrap();
            let a_i = tracker.smoothed_sensitivity(&adalora_key(name, "a")).unwrap();
            let a_u = tracker.uncertainty(&adalora_key(name, "a")).unwrap();
            let mut want = lam_i[k] * lam_u[k];
            want += (0..d2).map(|j| b_i[j * ri + k] * b_u[j * ri + k]).sum::<f64>() / d2 as f64;
            want += (0..d1).map(|j| a_i[k * d1 + j] * a_u[k * d1 + j]).sum::<f64>() / d1 as f64;
            assert!((got - want).abs() < 1e-15, "triplet {k}: {got} vs {want}");
        }
    }

    #[test]
    fn budget_boundaries_and_midpoint() {
        let sched = BudgetSchedule::with_anchors(1728, 1152, 100, 700, 1000).unwrap();
        assert_eq!(sched.budget_at(0), 1728);
        assert_eq!(sched.budget_at(100), 1728);
        assert_eq!(sched.budget_at(400), 1224); // 1152 + 576 * 0.5^3
        assert_eq!(sched.budget_at(700), 1152);
        assert_eq!(sched.budget_at(1000), 1152);
        // Non-increasing everywhere.
        let mut prev = sched.budget_at(0);
        for t in 1..=1000 {
            let b = sched.budget_at(t);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn schedule_rejects_inverted_anchors() {
        assert!(BudgetSchedule::with_anchors(10, 5, 70, 70, 100).is_err());
        assert!(BudgetSchedule::with_anchors(10, 5, 80, 70, 100).is_err());
        assert!(BudgetSchedule::with_anchors(5, 10, 10, 70, 100).is_err());
    }

    #[test]
    fn select_top_keeps_highest_scores() {
        let scores = vec![
            TripletScore { site_order: 0, k: 0, score: 0.9 },
            TripletScore { site_order: 0, k: 1, score: 0.1 },
            TripletScore { site_order: 1, k: 0, score: 0.5 },
        ];
        assert_eq!(select_top(&scores, 2), vec![(0, 0), (1, 0)]);
        assert_eq!(select_top(&scores, 3).len(), 3);
    }

    #[test]
    fn select_top_matches_full_sort_oracle_on_500_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let scores: Vec<TripletScore> = (0..500)
            .map(|i| TripletScore {
                site_order: i / 12,
                k: i % 12,
                score: rng.gen_range(0.0..1.0),
            })
            .collect();
        let retained = select_top(&scores, 200);
        // Oracle: exhaustive sort of (score, identity).
        let mut oracle: Vec<(f64, usize, usize)> =
            scores.iter().map(|t| (t.score, t.site_order, t.k)).collect();
        oracle.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let want: Vec<(usize, usize)> = oracle[..200].iter().map(|&(_, s, k)| (s, k)).collect();
        assert_eq!(retained, want);
        // Monotonicity: every retained score >= every dropped score.
        let min_kept = retained
            .iter()
            .map(|&(s, k)| scores.iter().find(|t| t.site_order == s && t.k == k).unwrap().score)
            .fold(f64::INFINITY, f64::min);
        let max_dropped = scores
            .iter()
            .filter(|t| !retained.contains(&(t.site_order, t.k)))
            .map(|t| t.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_dropped);
    }

    #[test]
    fn select_top_ties_break_deterministically() {
        let scores = vec![
            TripletScore { site_order: 1, k: 0, score: 0.5 },
            TripletScore { site_order: 0, k: 1, score: 0.5 },
            TripletScore { site_order: 0, k: 0, score: 0.5 },
        ];
        assert_eq!(select_top(&scores, 2), vec![(0, 0), (0, 1)]);
    }

    fn toy_adalora() -> AdaptedModel<f64> {
        let model = Model::<f64>::build(ArchSpec::toy_small(), 11).unwrap();
        attach(model, AdapterSpec::new(Method::AdaLora), 5).unwrap()
    }

    #[test]
    fn reallocate_with_full_budget_masks_nothing() {
        let mut adapted = toy_adalora();
        let tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        reallocate(&tracker, &mut adapted, 12 * 12).unwrap();
        let MethodStates::AdaLora(map) = &adapted.states else { panic!() };
        for st in map.values() {
            assert_eq!(st.active_rank(), 12);
        }
    }

    #[test]
    fn reallocate_hits_budget_exactly_and_deterministically() {
        let mut adapted = toy_adalora();
        let mut tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        // Give the tracker a random but reproducible signal.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = adapted.adapter_params();
        for (_, p) in &params {
            let g: Vec<f64> = (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.borrow_mut().accumulate_grad(&g);
            let d: Vec<f64> = (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.set_data(&d);
        }
        tracker.sensitivity_update(&params);
        reallocate(&tracker, &mut adapted, 96).unwrap();
        let MethodStates::AdaLora(map) = &adapted.states else { panic!() };
        let active: usize = map.values().map(|st| st.active_rank()).sum();
        assert_eq!(active, 96);
        let masks_first: Vec<Vec<bool>> = map.values().map(|st| st.mask.clone()).collect();
        // Rerunning with the same tracker state reproduces the masks.
        reallocate(&tracker, &mut adapted, 96).unwrap();
        let MethodStates::AdaLora(map) = &adapted.states else { panic!() };
        let masks_second: Vec<Vec<bool>> = map.values().map(|st| st.mask.clone()).collect();
        assert_eq!(masks_first, masks_second);
    }

    #[test]
    fn rank_report_fresh_s2_is_all_zero() {
        let model = Model::<f64>::build(ArchSpec::toy_small(), 1).unwrap();
        let adapted = attach(model, AdapterSpec::new(Method::S2Lora), 2).unwrap();
        let report = rank_report(&adapted, REPORT_THRESHOLD).unwrap();
        assert_eq!(report.total(), 0);
        assert_eq!(report.panels.len(), 5);
        for panel in &report.panels {
            let want_rows = if panel.group.is_attention() { 4 } else { 2 };
            assert_eq!(panel.entries.len(), want_rows);
            assert_eq!(panel.roles.first(), Some(&if panel.group.is_attention() {
                Role::Q
            } else {
                Role::Fc1
            }));
        }
    }

    #[test]
    fn rank_report_counts_threshold_survivors() {
        let model = Model::<f64>::build(ArchSpec::toy_small(), 1).unwrap();
        let mut spec = AdapterSpec::new(Method::S2Lora);
        spec.rank = 4;
        let adapted = attach(model, spec, 2).unwrap();
        let MethodStates::S2Lora { sites, .. } = &adapted.states else { panic!() };
        let (&first_idx, st) = sites.iter().next().unwrap();
        st.coeffs.set_data(&[2e-4, 5e-5, 0.3, 0.0]);
        let report = rank_report(&adapted, 1e-4).unwrap();
        assert_eq!(report.total(), 2);
        let site = adapted.model.site(first_idx).spec.clone();
        let panel = report.panels.iter().find(|p| p.group == site.group).unwrap();
        let row = panel.roles.iter().position(|&r| r == site.role).unwrap();
        assert_eq!(panel.entries[row][site.layer_index], 2);
    }

    #[test]
    fn rank_report_after_reallocate_sums_to_budget() {
        let mut adapted = toy_adalora();
        let tracker = ImportanceTracker::new(DEFAULT_BETA1, DEFAULT_BETA2);
        reallocate(&tracker, &mut adapted, 96).unwrap();
        let report = rank_report(&adapted, REPORT_THRESHOLD).unwrap();
        assert_eq!(report.total(), 96);
    }

    #[test]
    fn rank_report_rejects_rankless_methods() {
        let model = Model::<f64>::build(ArchSpec::toy_small(), 1).unwrap();
        let adapted = attach(model, AdapterSpec::new(Method::BitFit), 2).unwrap();
        assert!(rank_report(&adapted, REPORT_THRESHOLD).is_err());
    }

    #[test]
    fn threshold_zero_is_rejected_but_tiny_threshold_counts_all() {
        let model = Model::<f64>::build(ArchSpec::toy_small(), 1).unwrap();
        let adapted = attach(model, AdapterSpec::new(Method::S2Lora), 2).unwrap();
        assert!(rank_report(&adapted, 0.0).is_err());
        // Nonzero coefficients everywhere: every cell reports full rank.
        let MethodStates::S2Lora { sites, .. } = &adapted.states else { panic!() };
        for st in sites.values() {
            st.coeffs.set_data(&[0.5; 8]);
        }
        let report = rank_report(&adapted, 1e-12).unwrap();
        assert_eq!(report.total(), 32 * 8);
    }
}
