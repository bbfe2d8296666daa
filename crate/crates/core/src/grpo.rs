//! Group-relative policy optimization on flat parameter vectors: normalized
//! group advantages, a KL-regularized policy-gradient objective, plain
//! gradient-descent updates, and a finite-difference verification harness.
//!
//! Training is strictly on-policy here — one gradient step per sampled group,
//! so the importance ratio is 1 at the sampling point and `clip_epsilon`
//! stays inert unless a caller reuses groups across epochs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: params {params} vs gradient {gradient}")]
    ShapeMismatch { params: usize, gradient: usize },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, GrpoError> {
    Err(GrpoError::InvalidArgument(msg.into()))
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    /// Sampled responses per query (K).
    pub group_size: usize,
    /// KL penalty coefficient (beta).
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    /// Ratio clip range; inert in the default on-policy regime.
    pub clip_epsilon: f64,
    /// Below this group reward standard deviation, advantages collapse to 0.
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coefficient: 0.04,
            learning_rate: 1e-3,
            clip_epsilon: 0.2,
            std_floor: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return invalid(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.kl_coefficient < 0.0 || !self.kl_coefficient.is_finite() {
            return invalid(format!("kl_coefficient must be >= 0, got {}", self.kl_coefficient));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return invalid(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Summary statistics of one policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyUpdateStats {
    pub mean_reward: f64,
    pub mean_advantage_magnitude: f64,
    pub kl_estimate: f64,
    pub loss: f64,
    pub gradient_norm: f64,
}

/// Group-normalized advantages: `(r - mean) / std` with the population
/// standard deviation, or all zeros when the group is degenerate (std below
/// `std_floor`).
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return invalid(format!("need at least 2 rewards per group, got {}", rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return invalid("non-finite reward in group");
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// The k3 estimator of KL(pi || pi_ref) from one sample:
/// `exp(delta) - delta - 1` with `delta = logp_ref - logp`. Non-negative,
/// zero exactly at `delta = 0`.
pub fn kl_k3(logp: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp;
    delta.exp() - delta - 1.0
}

/// One response's contribution to the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoSample {
    /// Log-probability of the response under the current parameters.
    pub logprob: f64,
    /// Log-probability under the frozen reference parameters.
    pub ref_logprob: f64,
    /// Group-normalized advantage (a constant for gradient purposes).
    pub advantage: f64,
}

/// Evaluates the GRPO loss over a group and the per-sample gradient weights.
///
/// `loss = -(1/K) * sum_i [A_i * logp_i - beta * kl_k3(logp_i, ref_i)]`, with
/// the gradient flowing through `logp_i` only. The returned weights are
/// `dloss/dlogp_i = -(1/K) * (A_i + beta * (exp(delta_i) - 1))` for chain-rule
/// use by the policy.
pub fn grpo_objective(samples: &[GrpoSample], beta: f64) -> Result<(f64, Vec<f64>), GrpoError> {
    if samples.is_empty() {
        return invalid("empty sample group");
    }
    let k = samples.len() as f64;
    let mut loss = 0.0;
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        let delta = s.ref_logprob - s.logprob;
        loss -= (s.advantage * s.logprob - beta * kl_k3(s.logprob, s.ref_logprob)) / k;
        weights.push(-(s.advantage + beta * (delta.exp() - 1.0)) / k);
    }
    Ok((loss, weights))
}

/// Plain gradient-descent step, in place: `params -= learning_rate * gradient`.
pub fn apply_gradient(params: &mut [f64], gradient: &[f64], learning_rate: f64) -> Result<(), GrpoError> {
    if params.len() != gradient.len() {
        return Err(GrpoError::ShapeMismatch { params: params.len(), gradient: gradient.len() });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return invalid("non-finite gradient");
    }
    for (p, g) in params.iter_mut().zip(gradient) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Central-difference check of an analytic gradient on `probe_count` seeded
/// random coordinates; returns the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The loss must be deterministic for fixed parameters (freeze the sampled
/// group before probing).
pub fn finite_difference_check<F>(
    params: &[f64],
    loss: F,
    analytic: &[f64],
    epsilon: f64,
    probe_count: usize,
    seed: u64,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient shape mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for _ in 0..probe_count {
        let i = rng.gen_range(0..params.len());
        probe[i] = params[i] + epsilon;
        let up = loss(&probe);
        probe[i] = params[i] - epsilon;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn advantages_binary_rewards() {
        let a = group_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-8).unwrap();
        assert_eq!(a, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn advantages_degenerate_group() {
        let a = group_advantages(&[0.7; 6], 1e-8).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn advantages_hand_computed() {
        // mean 0.8125, population std 0.679...
        let a = group_advantages(&[1.65, 1.3, 0.0, 0.3], 1e-8).unwrap();
        let expected = [1.233, 0.718, -1.196, -0.755];
        for (got, want) in a.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-3);
        }
    }

    #[test]
    fn advantages_reject_small_or_bad_groups() {
        assert!(group_advantages(&[1.0], 1e-8).is_err());
        assert!(group_advantages(&[1.0, f64::NAN], 1e-8).is_err());
    }

    #[test]
    fn advantages_normalized_moments() {
        let rewards = [0.3, 1.65, 1.3, 0.0, 0.9, 1.1];
        let a = group_advantages(&rewards, 1e-8).unwrap();
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let var: f64 = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn kl_k3_examples() {
        assert_eq!(kl_k3(-1.5, -1.5), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(kl_k3(-1.0 - ln2, -1.0), 2.0 - ln2 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_k3(-1.0 - ln2, -1.0), 0.306853, epsilon = 1e-6);
        assert_abs_diff_eq!(kl_k3(-1.0 + ln2, -1.0), 0.5 + ln2 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_k3(-1.0 + ln2, -1.0), 0.193147, epsilon = 1e-6);
    }

    #[test]
    fn kl_k3_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let logp = rng.gen_range(-20.0..0.0);
            let logp_ref = rng.gen_range(-20.0..0.0);
            let kl = kl_k3(logp, logp_ref);
            assert!(kl >= 0.0, "kl_k3({logp}, {logp_ref}) = {kl}");
            if logp == logp_ref {
                assert_eq!(kl, 0.0);
            }
        }
    }

    #[test]
    fn objective_trivial_cases() {
        // Zero advantages at the reference point: loss and weights vanish.
        let samples = vec![GrpoSample { logprob: -1.2, ref_logprob: -1.2, advantage: 0.0 }; 4];
        let (loss, w) = grpo_objective(&samples, 0.04).unwrap();
        assert_eq!(loss, 0.0);
        assert!(w.iter().all(|x| *x == 0.0));

        // Single sample, A = 1, beta = 0, logp = -1 -> loss = 1.
        let samples = [GrpoSample { logprob: -1.0, ref_logprob: -1.0, advantage: 1.0 }];
        let (loss, _) = grpo_objective(&samples, 0.0).unwrap();
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_hand_computed() {
        let ln2 = std::f64::consts::LN_2;
        let samples = [
            GrpoSample { logprob: -1.0, ref_logprob: -1.0, advantage: 1.0 },
            GrpoSample { logprob: -2.0, ref_logprob: -2.0 + ln2, advantage: -1.0 },
        ];
        let (loss, w) = grpo_objective(&samples, 0.04).unwrap();
        assert_abs_diff_eq!(loss, -0.493863, epsilon = 1e-5);
        // Weight formula: -(1/K)(A + beta (exp(delta) - 1)).
        assert_abs_diff_eq!(w[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], -0.5 * (-1.0 + 0.04 * (2.0 - 1.0)), epsilon = 1e-12);
        assert!(grpo_objective(&[], 0.0).is_err());
    }

    #[test]
    fn apply_gradient_cases() {
        let mut p = vec![1.0, -2.0, 3.0];
        apply_gradient(&mut p, &[0.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);

        let mut p = vec![1.0, -2.0, 3.0];
        let g = p.clone();
        apply_gradient(&mut p, &g, 1.0).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0]);

        let mut p = vec![2.0];
        apply_gradient(&mut p, &[1.0], 0.5).unwrap();
        assert_eq!(p, vec![1.5]);

        let mut p = vec![1.0, 2.0];
        assert!(apply_gradient(&mut p, &[1.0], 0.1).is_err());
    }

    #[test]
    fn fd_check_quadratic() {
        // loss = 0.5 ||p||^2, gradient = p: exact for central differences.
        let params: Vec<f64> = (0..20).map(|i| (i as f64 - 10.0) / 3.0).collect();
        let loss = |p: &[f64]| 0.5 * p.iter().map(|x| x * x).sum::<f64>();
        let err = finite_difference_check(&params, loss, &params.clone(), 1e-5, 40, 0);
        assert!(err <= 1e-7, "relative error {err}");
    }

    #[test]
    fn fd_check_catches_corrupted_gradient() {
        let params: Vec<f64> = (0..10).map(|i| 1.0 + i as f64 / 5.0).collect();
        let loss = |p: &[f64]| 0.5 * p.iter().map(|x| x * x).sum::<f64>();
        let mut corrupted = params.clone();
        corrupted[3] *= 2.0;
        // Probe every coordinate so the corrupt one is hit.
        let err = finite_difference_check(&params, loss, &corrupted, 1e-5, 200, 1);
        assert!(err > 0.1, "harness failed to flag the corrupted coordinate: {err}");
    }

    proptest::proptest! {
        #[test]
        fn advantages_sum_zero_and_unit_std(
            rewards in proptest::collection::vec(-5.0f64..5.0, 2..17)
        ) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std >= 1e-8 {
                proptest::prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
                let var = a.iter().map(|x| x * x).sum::<f64>() / n;
                proptest::prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            } else {
                proptest::prop_assert!(a.iter().all(|x| *x == 0.0));
            }
        }

        #[test]
        fn advantages_shift_scale_invariant(
            rewards in proptest::collection::vec(-2.0f64..2.0, 2..12),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            // Near-degenerate groups are dominated by float cancellation.
            proptest::prop_assume!(std > 1e-6);
            let base = group_advantages(&rewards, 1e-12).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let a_shift = group_advantages(&shifted, 1e-12).unwrap();
            let a_scale = group_advantages(&scaled, 1e-12).unwrap();
            for i in 0..base.len() {
                proptest::prop_assert!((base[i] - a_shift[i]).abs() < 1e-6);
                proptest::prop_assert!((base[i] - a_scale[i]).abs() < 1e-6);
            }
        }
    }
}
