//! The training loop: seeded query batches, K rollouts per query, group
//! scoring with the trust weight and progressive gate, group-relative
//! advantages, and one KL-regularized policy-gradient step per batch.
//!
//! Rollouts for distinct queries are independent — each derives its own RNG
//! stream from `(seed, step, query index)` — so they may run in parallel; the
//! reduction and the parameter update stay sequential in query order, making
//! runs bitwise reproducible with or without the `parallel` feature.

use super::{
    policy_sample, response_logprob, response_logprob_grad, sample_query, MockRm, PrototypeTable,
    ReasoningScorer, ToyEnvError, ToyPolicyParams, ToyQuery, ToyResponse,
};
use crate::grpo::{self, GrpoConfig, GrpoSample, PolicyUpdateStats};
use crate::par;
use crate::reward::{
    self, ReasoningWeights, ResponseRecord, RewardWeights, ScheduleState, TrustStats,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full settings of one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub steps: usize,
    /// Queries per step; each spawns `grpo.group_size` rollouts.
    pub batch_queries: usize,
    pub grpo: GrpoConfig,
    pub reward_weights: RewardWeights,
    pub reasoning_weights: ReasoningWeights,
    /// Sliding window (in steps) of the progressive gate; 0 disables the
    /// schedule and opens the gate from step 0.
    pub gate_window: usize,
    pub gate_threshold: f64,
    pub noise_eps: f64,
    pub table: PrototypeTable,
    /// Use the adversarial mock scorer (reward-hacking stress test).
    pub adversarial: bool,
    /// When false the trust weight is pinned to 1.
    pub trust_enabled: bool,
    pub seed: u64,
    /// Fan rollouts out over rayon when the `parallel` feature is enabled.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_queries: 4,
            grpo: GrpoConfig::default(),
            reward_weights: RewardWeights::default(),
            reasoning_weights: ReasoningWeights::default(),
            gate_window: 20,
            gate_threshold: 0.5,
            noise_eps: 0.05,
            table: PrototypeTable::four(),
            adversarial: false,
            trust_enabled: true,
            seed: 0,
            parallel: true,
        }
    }
}

impl RunConfig {
    /// Validates every field, naming the offending key.
    pub fn validate(&self) -> Result<(), ToyEnvError> {
        let bad = |key: &'static str, message: String| Err(ToyEnvError::Config { key, message });
        if self.steps == 0 {
            return bad("steps", "must be >= 1".into());
        }
        if self.batch_queries == 0 {
            return bad("batch_queries", "must be >= 1".into());
        }
        if self.grpo.group_size < 2 {
            return bad("group_size", format!("K must be >= 2, got {}", self.grpo.group_size));
        }
        if self.grpo.kl_coefficient < 0.0 || !self.grpo.kl_coefficient.is_finite() {
            return bad("kl_coefficient", format!("must be >= 0, got {}", self.grpo.kl_coefficient));
        }
        if !(self.grpo.learning_rate > 0.0) || !self.grpo.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be > 0, got {}", self.grpo.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.noise_eps) {
            return bad("noise_eps", format!("must be in [0, 1], got {}", self.noise_eps));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return bad("gate_threshold", format!("must be in [0, 1], got {}", self.gate_threshold));
        }
        if self.table.len() < 2 {
            return bad("emotions", "prototype table needs at least 2 emotions".into());
        }
        Ok(())
    }
}

/// One row of the per-step metrics series.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean outcome reward over the step's rollouts.
    pub accuracy: f64,
    /// Mean composite reward.
    pub mean_reward: f64,
    /// Mean trust weight over the step's groups.
    pub tau_mean: f64,
    /// Gate state after this step's schedule update.
    pub gate_open: bool,
    /// Mean k3 KL estimate against the frozen reference.
    pub kl: f64,
    pub loss: f64,
    /// Fidelity after this step's parameter update.
    pub fidelity_phi: f64,
    /// Mean reasoning-term contribution to the composite reward; exactly 0
    /// while the gate is closed.
    pub mean_reasoning_term: f64,
}

/// Metrics series plus the trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingResult {
    pub metrics: Vec<StepMetrics>,
    pub final_params: ToyPolicyParams,
}

impl TrainingResult {
    /// Mean accuracy over the final `window` steps (or all of them).
    pub fn final_window_accuracy(&self, window: usize) -> f64 {
        let n = self.metrics.len().min(window).max(1);
        let tail = &self.metrics[self.metrics.len() - n..];
        tail.iter().map(|m| m.accuracy).sum::<f64>() / n as f64
    }

    /// First step whose row shows the gate open.
    pub fn gate_open_step(&self) -> Option<usize> {
        self.metrics.iter().find(|m| m.gate_open).map(|m| m.step)
    }

    /// Mean of `tau_mean` over steps at or after the gate opened.
    pub fn mean_tau_post_gate(&self) -> Option<f64> {
        let open: Vec<f64> =
            self.metrics.iter().filter(|m| m.gate_open).map(|m| m.tau_mean).collect();
        (!open.is_empty()).then(|| open.iter().sum::<f64>() / open.len() as f64)
    }
}

/// One query's sampled group: the rollouts and their composite rewards.
#[derive(Debug, Clone)]
pub struct SampledGroup {
    pub query: ToyQuery,
    pub responses: Vec<ToyResponse>,
    pub rewards: Vec<f64>,
}

struct GroupRollout {
    group: SampledGroup,
    records: Vec<ResponseRecord>,
    trust: TrustStats,
}

/// Mixes (seed, step, query) into one RNG stream seed (splitmix64 finalizer).
fn stream_seed(seed: u64, step: u64, query: u64) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ query.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rollout_query(
    params: &ToyPolicyParams,
    config: &RunConfig,
    scorer: &dyn ReasoningScorer,
    gate_open: bool,
    step: usize,
    query_index: usize,
) -> Result<GroupRollout, ToyEnvError> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(stream_seed(config.seed, step as u64, query_index as u64));
    let query = sample_query(&mut rng, config.noise_eps, &config.table);
    let responses: Vec<ToyResponse> =
        (0..config.grpo.group_size).map(|_| policy_sample(params, &query, &mut rng)).collect();
    let scores: Vec<_> = responses.iter().map(|r| scorer.score(r, &query, &config.table)).collect();
    let texts: Vec<&str> = responses.iter().map(|r| r.rendered_text.as_str()).collect();
    let (records, trust) = reward::score_group_gated(
        query.gold_label,
        &texts,
        &scores,
        &config.reasoning_weights,
        &config.reward_weights,
        gate_open,
        config.trust_enabled,
    )?;
    let rewards = records.iter().map(|r| r.composite).collect();
    Ok(GroupRollout { group: SampledGroup { query, responses, rewards }, records, trust })
}

/// GRPO loss and analytic gradient over fixed sampled groups.
///
/// Advantages come from each group's recorded rewards and the reference
/// log-probabilities from `ref_params`; both are constants of the
/// optimization, so this is a deterministic, differentiable function of
/// `params` alone — exactly what the finite-difference harness probes.
pub fn grpo_loss_and_grad(
    params: &ToyPolicyParams,
    ref_params: &ToyPolicyParams,
    groups: &[SampledGroup],
    config: &GrpoConfig,
) -> Result<(PolicyUpdateStats, Vec<f64>), ToyEnvError> {
    if groups.is_empty() {
        return Err(ToyEnvError::InvalidArgument("no sampled groups".into()));
    }
    let dim = params.dim();
    let mut grad = vec![0.0; dim];
    let mut loss_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut adv_sum = 0.0;
    let mut n_samples = 0usize;

    for group in groups {
        let advantages = grpo::group_advantages(&group.rewards, config.std_floor)?;
        let mut samples = Vec::with_capacity(group.responses.len());
        let mut sample_grads = Vec::with_capacity(group.responses.len());
        for (response, advantage) in group.responses.iter().zip(&advantages) {
            let (logprob, g) =
                response_logprob_grad(params, &group.query, response.label, &response.claims);
            let ref_logprob =
                response_logprob(ref_params, &group.query, response.label, &response.claims);
            kl_sum += grpo::kl_k3(logprob, ref_logprob);
            adv_sum += advantage.abs();
            samples.push(GrpoSample { logprob, ref_logprob, advantage: *advantage });
            sample_grads.push(g);
        }
        reward_sum += group.rewards.iter().sum::<f64>();
        n_samples += group.responses.len();

        let (group_loss, weights) = grpo::grpo_objective(&samples, config.kl_coefficient)?;
        loss_sum += group_loss;
        for (w, g) in weights.iter().zip(&sample_grads) {
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
    }

    let g_count = groups.len() as f64;
    for g in grad.iter_mut() {
        *g /= g_count;
    }
    let stats = PolicyUpdateStats {
        mean_reward: reward_sum / n_samples as f64,
        mean_advantage_magnitude: adv_sum / n_samples as f64,
        kl_estimate: kl_sum / n_samples as f64,
        loss: loss_sum / g_count,
        gradient_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    Ok((stats, grad))
}

/// Runs training with the mock scorer selected by `config.adversarial`.
pub fn run_training(config: &RunConfig) -> Result<TrainingResult, ToyEnvError> {
    run_training_with(config, &MockRm { adversarial: config.adversarial })
}

/// Runs training with an externally supplied reasoning scorer.
pub fn run_training_with(
    config: &RunConfig,
    scorer: &dyn ReasoningScorer,
) -> Result<TrainingResult, ToyEnvError> {
    config.validate()?;
    let mut params = ToyPolicyParams::for_table(&config.table);
    let ref_params = params.clone();
    let mut schedule = ScheduleState::new(config.gate_window, config.gate_threshold);
    let mut metrics = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let gate_open = schedule.gate_open();
        let rollouts: Vec<Result<GroupRollout, ToyEnvError>> =
            par::map_indexed(config.batch_queries, config.parallel, |q| {
                rollout_query(&params, config, scorer, gate_open, step, q)
            });
        let rollouts: Vec<GroupRollout> = rollouts.into_iter().collect::<Result<_, _>>()?;

        let n_responses: usize = rollouts.iter().map(|r| r.records.len()).sum();
        let accuracy = rollouts
            .iter()
            .flat_map(|r| r.records.iter().map(|rec| rec.outcome_reward))
            .sum::<f64>()
            / n_responses as f64;
        let tau_mean =
            rollouts.iter().map(|r| r.trust.tau).sum::<f64>() / rollouts.len() as f64;
        let base = &config.reward_weights;
        let mean_reasoning_term = rollouts
            .iter()
            .flat_map(|r| {
                r.records.iter().map(|rec| {
                    rec.composite
                        - (base.alpha_f * rec.format_reward + base.alpha_o * rec.outcome_reward)
                })
            })
            .sum::<f64>()
            / n_responses as f64;

        let groups: Vec<SampledGroup> = rollouts.into_iter().map(|r| r.group).collect();
        let (stats, grad) = grpo_loss_and_grad(&params, &ref_params, &groups, &config.grpo)?;
        let mut flat = params.to_flat();
        grpo::apply_gradient(&mut flat, &grad, config.grpo.learning_rate)?;
        params = ToyPolicyParams::from_flat(params.labels().to_vec(), &flat)?;

        schedule.update(accuracy);
        metrics.push(StepMetrics {
            step,
            accuracy,
            mean_reward: stats.mean_reward,
            tau_mean,
            gate_open: schedule.gate_open(),
            kl: stats.kl_estimate,
            loss: stats.loss,
            fidelity_phi: params.fidelity(),
            mean_reasoning_term,
        });
    }

    Ok(TrainingResult { metrics, final_params: params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quick_config(steps: usize, seed: u64) -> RunConfig {
        RunConfig { steps, seed, ..RunConfig::default() }
    }

    #[test]
    fn config_validation_names_keys() {
        let mut cfg = quick_config(10, 0);
        cfg.grpo.group_size = 1;
        match cfg.validate().unwrap_err() {
            ToyEnvError::Config { key, message } => {
                assert_eq!(key, "group_size");
                assert!(message.contains(">= 2"));
            }
            other => panic!("unexpected error {other:?}"),
        }
        let mut cfg = quick_config(10, 0);
        cfg.noise_eps = 1.5;
        assert!(matches!(cfg.validate().unwrap_err(), ToyEnvError::Config { key: "noise_eps", .. }));
        let mut cfg = quick_config(10, 0);
        cfg.grpo.learning_rate = 0.0;
        assert!(matches!(
            cfg.validate().unwrap_err(),
            ToyEnvError::Config { key: "learning_rate", .. }
        ));
    }

    #[test]
    fn training_smoke_and_gate_monotone() {
        let result = run_training(&quick_config(60, 0)).unwrap();
        assert_eq!(result.metrics.len(), 60);
        let mut prev = false;
        for (i, m) in result.metrics.iter().enumerate() {
            assert_eq!(m.step, i);
            assert!(m.gate_open >= prev);
            prev = m.gate_open;
            assert!(m.kl >= -1e-9);
            assert!((0.0..=1.0).contains(&m.accuracy));
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let a = run_training(&quick_config(40, 7)).unwrap();
        let b = run_training(&quick_config(40, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut cfg = quick_config(30, 3);
        cfg.parallel = true;
        let par = run_training(&cfg).unwrap();
        cfg.parallel = false;
        let seq = run_training(&cfg).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn reasoning_term_zero_before_gate() {
        let result = run_training(&quick_config(60, 1)).unwrap();
        let flip = result.gate_open_step().unwrap_or(usize::MAX);
        for m in &result.metrics {
            if m.step < flip {
                assert_eq!(m.mean_reasoning_term, 0.0, "step {}", m.step);
            }
        }
    }

    #[test]
    fn alpha_t_zero_makes_adversarial_flag_inert() {
        // With the reasoning weight zeroed, criterion scores cannot reach the
        // policy: trajectories agree bitwise (tau_mean still reflects the
        // scorer, so it is excluded).
        let mut clean = quick_config(50, 5);
        clean.reward_weights = RewardWeights { alpha_t: 0.0, ..RewardWeights::default() };
        let mut adv = clean.clone();
        adv.adversarial = true;
        let a = run_training(&clean).unwrap();
        let b = run_training(&adv).unwrap();
        assert_eq!(a.final_params, b.final_params);
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
            assert_eq!(x.mean_reward.to_bits(), y.mean_reward.to_bits());
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.kl.to_bits(), y.kl.to_bits());
            assert_eq!(x.fidelity_phi.to_bits(), y.fidelity_phi.to_bits());
            assert_eq!(x.gate_open, y.gate_open);
        }
    }

    #[test]
    fn zero_window_gate_is_open_from_step_zero() {
        let mut cfg = quick_config(5, 0);
        cfg.gate_window = 0;
        let result = run_training(&cfg).unwrap();
        assert!(result.metrics[0].gate_open);
        assert_eq!(result.gate_open_step(), Some(0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Freeze a sampled batch, then probe the analytic gradient.
        let cfg = quick_config(1, 0);
        let params = ToyPolicyParams::for_table(&cfg.table);
        let scorer = MockRm::default();
        let groups: Vec<SampledGroup> = (0..4)
            .map(|q| rollout_query(&params, &cfg, &scorer, true, 0, q).unwrap().group)
            .collect();

        // Three parameter points: zeros, and two seeded random points.
        use rand::{Rng, SeedableRng};
        let labels = cfg.table.labels();
        let mut points = vec![params.to_flat()];
        for seed in [1u64, 2] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            points.push((0..params.dim()).map(|_| rng.gen_range(-1.5..1.5)).collect());
        }

        for (i, flat) in points.into_iter().enumerate() {
            let p = ToyPolicyParams::from_flat(labels.clone(), &flat).unwrap();
            let (_, analytic) = grpo_loss_and_grad(&p, &params, &groups, &cfg.grpo).unwrap();
            let loss_fn = |x: &[f64]| {
                let px = ToyPolicyParams::from_flat(labels.clone(), x).unwrap();
                grpo_loss_and_grad(&px, &params, &groups, &cfg.grpo).unwrap().0.loss
            };
            let err = grpo::finite_difference_check(&flat, loss_fn, &analytic, 1e-5, 30, 42);
            assert!(err <= 1e-4, "point {i}: max relative error {err}");
        }
    }

    #[test]
    fn loss_reduction_matches_concatenated_mean() {
        // Averaging per-group losses equals the grand mean over samples when
        // groups share one size.
        let cfg = quick_config(1, 9);
        let params = ToyPolicyParams::for_table(&cfg.table);
        let scorer = MockRm::default();
        let groups: Vec<SampledGroup> = (0..3)
            .map(|q| rollout_query(&params, &cfg, &scorer, false, 0, q).unwrap().group)
            .collect();
        let (stats, _) = grpo_loss_and_grad(&params, &params, &groups, &cfg.grpo).unwrap();

        let mut all = Vec::new();
        for g in &groups {
            let adv = grpo::group_advantages(&g.rewards, cfg.grpo.std_floor).unwrap();
            for (r, a) in g.responses.iter().zip(adv) {
                let lp = response_logprob(&params, &g.query, r.label, &r.claims);
                all.push(GrpoSample { logprob: lp, ref_logprob: lp, advantage: a });
            }
        }
        let (grand, _) = grpo::grpo_objective(&all, cfg.grpo.kl_coefficient).unwrap();
        assert_abs_diff_eq!(stats.loss, grand, epsilon = 1e-12);
    }
}
