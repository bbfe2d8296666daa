//! A fully observable synthetic environment for the reward stack: a slot
//! prototype table, a data generator, a differentiable toy policy that emits
//! think/answer responses with per-slot claims, a template renderer, and a
//! deterministic mock reasoning scorer (with an adversarial mode for reward
//! hacking experiments).
//!
//! The policy has two knobs: a linear softmax over emotion labels and a
//! single fidelity logit governing how often its reasoning claims report the
//! true prosodic categories. That makes "the reasoning reward improves
//! reasoning" a measurable statement at desk scale.

use crate::prosody::{EnergyLevel, IntonationPattern, PitchLevel, SpeedLevel};
use crate::reward::{CriterionScores, EmotionLabel, RewardError};
use rand::Rng;
use thiserror::Error;

mod train;
pub use train::{
    grpo_loss_and_grad, run_training, run_training_with, RunConfig, SampledGroup, StepMetrics,
    TrainingResult,
};

#[derive(Debug, Error)]
pub enum ToyEnvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ToyEnvError> {
    Err(ToyEnvError::InvalidArgument(msg.into()))
}

/// Number of prosodic slots a query/claim covers.
pub const SLOT_COUNT: usize = 4;

/// Categories per slot: pitch, energy, speed, intonation pattern.
pub const SLOT_CATEGORY_COUNTS: [usize; SLOT_COUNT] = [3, 3, 3, 4];

/// One-hot feature dimension: 3 + 3 + 3 + 4 slot categories plus a bias term.
pub const FEATURE_DIM: usize = 14;

/// One category per prosodic slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotProfile {
    pub pitch: PitchLevel,
    pub energy: EnergyLevel,
    pub speed: SpeedLevel,
    pub intonation: IntonationPattern,
}

impl SlotProfile {
    pub fn new(
        pitch: PitchLevel,
        energy: EnergyLevel,
        speed: SpeedLevel,
        intonation: IntonationPattern,
    ) -> Self {
        Self { pitch, energy, speed, intonation }
    }

    /// Index of this profile's category within slot `slot`.
    pub fn category_index(&self, slot: usize) -> usize {
        match slot {
            0 => PitchLevel::ALL.iter().position(|x| *x == self.pitch).unwrap(),
            1 => EnergyLevel::ALL.iter().position(|x| *x == self.energy).unwrap(),
            2 => SpeedLevel::ALL.iter().position(|x| *x == self.speed).unwrap(),
            3 => IntonationPattern::ALL.iter().position(|x| *x == self.intonation).unwrap(),
            _ => panic!("slot {slot} out of range"),
        }
    }

    /// Replaces the category of slot `slot` by index.
    pub fn set_category(&mut self, slot: usize, index: usize) {
        match slot {
            0 => self.pitch = PitchLevel::ALL[index],
            1 => self.energy = EnergyLevel::ALL[index],
            2 => self.speed = SpeedLevel::ALL[index],
            3 => self.intonation = IntonationPattern::ALL[index],
            _ => panic!("slot {slot} out of range"),
        }
    }

    /// Number of slots on which two profiles agree.
    pub fn matching_slots(&self, other: &SlotProfile) -> usize {
        (0..SLOT_COUNT)
            .filter(|s| self.category_index(*s) == other.category_index(*s))
            .count()
    }

    /// One-hot encoding of the four slots plus a trailing bias of 1.
    pub fn feature_vector(&self) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        let mut offset = 0;
        for slot in 0..SLOT_COUNT {
            x[offset + self.category_index(slot)] = 1.0;
            offset += SLOT_CATEGORY_COUNTS[slot];
        }
        x[FEATURE_DIM - 1] = 1.0;
        x
    }

    /// Indices of the non-zero features (four slot one-hots plus bias).
    fn active_features(&self) -> [usize; SLOT_COUNT + 1] {
        let mut idx = [0usize; SLOT_COUNT + 1];
        let mut offset = 0;
        for slot in 0..SLOT_COUNT {
            idx[slot] = offset + self.category_index(slot);
            offset += SLOT_CATEGORY_COUNTS[slot];
        }
        idx[SLOT_COUNT] = FEATURE_DIM - 1;
        idx
    }
}

/// Emotion-to-prototype mapping with pairwise distinct rows and a stable
/// order (the policy's label indexing follows it).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    entries: Vec<(EmotionLabel, SlotProfile)>,
}

impl PrototypeTable {
    pub fn new(entries: Vec<(EmotionLabel, SlotProfile)>) -> Result<Self, ToyEnvError> {
        if entries.len() < 2 {
            return invalid("prototype table needs at least 2 emotions");
        }
        for (i, (label, slots)) in entries.iter().enumerate() {
            for (other_label, other_slots) in entries.iter().take(i) {
                if label == other_label {
                    return invalid(format!("duplicate label {label}"));
                }
                if slots == other_slots {
                    return invalid(format!("{label} and {other_label} share one prototype row"));
                }
            }
        }
        Ok(Self { entries })
    }

    /// The default desk-scale table: four well-separated emotions.
    pub fn four() -> Self {
        use EmotionLabel::*;
        use EnergyLevel as E;
        use IntonationPattern as I;
        use PitchLevel as P;
        use SpeedLevel as S;
        Self::new(vec![
            (Neutral, SlotProfile::new(P::Medium, E::Medium, S::Medium, I::Falling)),
            (Happy, SlotProfile::new(P::High, E::High, S::Fast, I::Rising)),
            (Sad, SlotProfile::new(P::Low, E::Low, S::Slow, I::Falling)),
            (Angry, SlotProfile::new(P::High, E::High, S::Fast, I::RisingFalling)),
        ])
        .expect("built-in table is valid")
    }

    /// All nine categories with pairwise distinct prototypes.
    pub fn nine() -> Self {
        use EmotionLabel::*;
        use EnergyLevel as E;
        use IntonationPattern as I;
        use PitchLevel as P;
        use SpeedLevel as S;
        Self::new(vec![
            (Neutral, SlotProfile::new(P::Medium, E::Medium, S::Medium, I::Falling)),
            (Happy, SlotProfile::new(P::High, E::High, S::Fast, I::Rising)),
            (Sad, SlotProfile::new(P::Low, E::Low, S::Slow, I::Falling)),
            (Angry, SlotProfile::new(P::High, E::High, S::Fast, I::RisingFalling)),
            (ContemptDisgust, SlotProfile::new(P::Medium, E::Medium, S::Slow, I::FallingRising)),
            (Confused, SlotProfile::new(P::Medium, E::Medium, S::Slow, I::Rising)),
            (Whisper, SlotProfile::new(P::Low, E::Low, S::Medium, I::Falling)),
            (Surprise, SlotProfile::new(P::High, E::Medium, S::Fast, I::Rising)),
            (Fear, SlotProfile::new(P::High, E::Medium, S::Fast, I::FallingRising)),
        ])
        .expect("built-in table is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<EmotionLabel> {
        self.entries.iter().map(|(l, _)| *l).collect()
    }

    pub fn entries(&self) -> &[(EmotionLabel, SlotProfile)] {
        &self.entries
    }

    pub fn prototype(&self, label: EmotionLabel) -> Option<&SlotProfile> {
        self.entries.iter().find(|(l, _)| *l == label).map(|(_, s)| s)
    }
}

/// One synthetic query: the true slot categories, the gold label they were
/// derived from, and the one-hot feature encoding the policy consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyQuery {
    pub true_slots: SlotProfile,
    pub gold_label: EmotionLabel,
    pub features: [f64; FEATURE_DIM],
}

/// Draws one query: a uniform emotion, its prototype with each slot
/// independently corrupted to a different category with probability `eps`.
pub fn sample_query<R: Rng>(rng: &mut R, noise_eps: f64, table: &PrototypeTable) -> ToyQuery {
    let idx = rng.gen_range(0..table.len());
    let (gold_label, prototype) = table.entries[idx];
    let mut slots = prototype;
    for slot in 0..SLOT_COUNT {
        if rng.gen::<f64>() < noise_eps {
            let count = SLOT_CATEGORY_COUNTS[slot];
            let current = slots.category_index(slot);
            let alt = rng.gen_range(0..count - 1);
            slots.set_category(slot, if alt >= current { alt + 1 } else { alt });
        }
    }
    ToyQuery { true_slots: slots, gold_label, features: slots.feature_vector() }
}

/// Generates a seeded dataset of `n` queries.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    noise_eps: f64,
    table: &PrototypeTable,
) -> Result<Vec<ToyQuery>, ToyEnvError> {
    if n == 0 {
        return invalid("dataset size must be >= 1");
    }
    if !(0.0..=1.0).contains(&noise_eps) {
        return invalid(format!("noise_eps must be in [0, 1], got {noise_eps}"));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_query(&mut rng, noise_eps, table)).collect())
}

/// Softmax label weights plus the fidelity logit; the object GRPO optimizes.
///
/// The flat layout is `[label_weights row-major (labels x FEATURE_DIM),
/// fidelity_logit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicyParams {
    labels: Vec<EmotionLabel>,
    label_weights: Vec<f64>,
    fidelity_logit: f64,
}

impl ToyPolicyParams {
    /// Zero-initialized policy: uniform label distribution, fidelity 0.5.
    pub fn zeros(labels: Vec<EmotionLabel>) -> Result<Self, ToyEnvError> {
        if labels.is_empty() {
            return invalid("policy needs at least one label");
        }
        let n = labels.len();
        Ok(Self { labels, label_weights: vec![0.0; n * FEATURE_DIM], fidelity_logit: 0.0 })
    }

    pub fn for_table(table: &PrototypeTable) -> Self {
        Self::zeros(table.labels()).expect("table is non-empty")
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn fidelity_logit(&self) -> f64 {
        self.fidelity_logit
    }

    /// Probability that a reasoning claim reports the true category,
    /// `sigmoid(fidelity_logit)`, strictly inside (0, 1).
    pub fn fidelity(&self) -> f64 {
        1.0 / (1.0 + (-self.fidelity_logit).exp())
    }

    /// Total parameter count of the flat layout.
    pub fn dim(&self) -> usize {
        self.labels.len() * FEATURE_DIM + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.label_weights.clone();
        flat.push(self.fidelity_logit);
        flat
    }

    pub fn from_flat(labels: Vec<EmotionLabel>, flat: &[f64]) -> Result<Self, ToyEnvError> {
        let expected = labels.len() * FEATURE_DIM + 1;
        if flat.len() != expected {
            return invalid(format!("flat params of length {}, expected {expected}", flat.len()));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite parameter");
        }
        Ok(Self {
            labels,
            label_weights: flat[..flat.len() - 1].to_vec(),
            fidelity_logit: flat[flat.len() - 1],
        })
    }
}

/// One sampled response with its exact log-probabilities and rendered text.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyResponse {
    pub label: EmotionLabel,
    pub claims: SlotProfile,
    pub label_logprob: f64,
    pub claim_logprobs: [f64; SLOT_COUNT],
    pub rendered_text: String,
}

impl ToyResponse {
    pub fn total_logprob(&self) -> f64 {
        self.label_logprob + self.claim_logprobs.iter().sum::<f64>()
    }
}

/// Stable softmax over `weights x features`.
fn label_probs(params: &ToyPolicyParams, features: &[f64; FEATURE_DIM]) -> Vec<f64> {
    let n = params.labels.len();
    let mut logits = vec![0.0f64; n];
    for (e, logit) in logits.iter_mut().enumerate() {
        let row = &params.label_weights[e * FEATURE_DIM..(e + 1) * FEATURE_DIM];
        *logit = row.iter().zip(features.iter()).map(|(w, x)| w * x).sum();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability the policy claims a given category for one slot:
/// `phi` mass on the truth plus a uniform `(1 - phi)` spread over all
/// categories of the slot.
fn claim_prob(phi: f64, claim_is_true: f64, category_count: usize) -> f64 {
    phi * claim_is_true + (1.0 - phi) / category_count as f64
}

/// Samples one response: a label from the softmax head and one claim per
/// slot from the fidelity mixture, with the exact log-probabilities of the
/// drawn values recorded.
pub fn policy_sample<R: Rng>(
    params: &ToyPolicyParams,
    query: &ToyQuery,
    rng: &mut R,
) -> ToyResponse {
    let probs = label_probs(params, &query.features);
    let u: f64 = rng.gen();
    let mut label_idx = probs.len() - 1;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            label_idx = i;
            break;
        }
    }
    let label = params.labels[label_idx];
    let label_logprob = probs[label_idx].ln();

    let phi = params.fidelity();
    let mut claims = query.true_slots;
    let mut claim_logprobs = [0.0; SLOT_COUNT];
    for slot in 0..SLOT_COUNT {
        let count = SLOT_CATEGORY_COUNTS[slot];
        let truth = query.true_slots.category_index(slot);
        let drawn = if rng.gen::<f64>() < phi { truth } else { rng.gen_range(0..count) };
        claims.set_category(slot, drawn);
        let is_true = if drawn == truth { 1.0 } else { 0.0 };
        claim_logprobs[slot] = claim_prob(phi, is_true, count).ln();
    }

    let rendered_text = render_trace(&claims, label);
    ToyResponse { label, claims, label_logprob, claim_logprobs, rendered_text }
}

/// Renders claims and label into the fixed think/answer template. The output
/// always passes the format schema and mentions all four slots.
pub fn render_trace(claims: &SlotProfile, label: EmotionLabel) -> String {
    format!(
        "<think>pitch is {}; energy is {}; pace is {}; intonation is {}</think><answer>{}</answer>",
        claims.pitch, claims.energy, claims.speed, claims.intonation, label
    )
}

/// Log-probability of a (label, claims) pair under arbitrary parameters;
/// used for the frozen reference policy and for gradient checks.
pub fn response_logprob(
    params: &ToyPolicyParams,
    query: &ToyQuery,
    label: EmotionLabel,
    claims: &SlotProfile,
) -> f64 {
    let probs = label_probs(params, &query.features);
    let idx = params.labels.iter().position(|l| *l == label).expect("label not in policy");
    let mut logp = probs[idx].ln();
    let phi = params.fidelity();
    for slot in 0..SLOT_COUNT {
        let is_true =
            if claims.category_index(slot) == query.true_slots.category_index(slot) { 1.0 } else { 0.0 };
        logp += claim_prob(phi, is_true, SLOT_CATEGORY_COUNTS[slot]).ln();
    }
    logp
}

/// Log-probability plus its gradient in the flat parameter layout.
///
/// For the softmax head, `d logp(y) / dW[e][f] = (1[e = y] - p_e) x_f`; for
/// the fidelity logit, each slot contributes
/// `(1[claim true] - 1/C) * phi (1 - phi) / p_claim`.
pub(crate) fn response_logprob_grad(
    params: &ToyPolicyParams,
    query: &ToyQuery,
    label: EmotionLabel,
    claims: &SlotProfile,
) -> (f64, Vec<f64>) {
    let probs = label_probs(params, &query.features);
    let idx = params.labels.iter().position(|l| *l == label).expect("label not in policy");
    let mut grad = vec![0.0; params.dim()];
    let active = query.true_slots.active_features();
    for e in 0..params.labels.len() {
        let coef = if e == idx { 1.0 - probs[e] } else { -probs[e] };
        for f in active {
            grad[e * FEATURE_DIM + f] = coef;
        }
    }

    let phi = params.fidelity();
    let dphi_dpsi = phi * (1.0 - phi);
    let mut logp = probs[idx].ln();
    let mut psi_grad = 0.0;
    for slot in 0..SLOT_COUNT {
        let count = SLOT_CATEGORY_COUNTS[slot];
        let is_true =
            if claims.category_index(slot) == query.true_slots.category_index(slot) { 1.0 } else { 0.0 };
        let p = claim_prob(phi, is_true, count);
        logp += p.ln();
        psi_grad += (is_true - 1.0 / count as f64) * dphi_dpsi / p;
    }
    let dim = params.dim();
    grad[dim - 1] = psi_grad;
    (logp, grad)
}

/// Produces criterion scores for a response. Implemented by the mock scorer
/// below and by any externally injected scorer.
pub trait ReasoningScorer: Sync {
    fn score(&self, response: &ToyResponse, query: &ToyQuery, table: &PrototypeTable)
        -> CriterionScores;
}

/// Deterministic stand-in for a learned reasoning reward model.
///
/// Normal mode grades factual alignment by the fraction of claims matching
/// the true slots and interpretative quality by the fraction matching the
/// answered label's prototype; the fixed template maxes out completeness and
/// fluency. Adversarial mode inverts the signal — wrong answers score 5
/// across the board, correct ones 1 — the worst case for reward hacking.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRm {
    pub adversarial: bool,
}

impl ReasoningScorer for MockRm {
    fn score(&self, response: &ToyResponse, query: &ToyQuery, table: &PrototypeTable) -> CriterionScores {
        mock_rm_score(response, query, table, self.adversarial)
    }
}

/// See [`MockRm`].
pub fn mock_rm_score(
    response: &ToyResponse,
    query: &ToyQuery,
    table: &PrototypeTable,
    adversarial: bool,
) -> CriterionScores {
    if adversarial {
        let g = if response.label == query.gold_label { 1 } else { 5 };
        return CriterionScores::new(g, g, g, g).expect("in range");
    }
    let m = response.claims.matching_slots(&query.true_slots) as f64 / SLOT_COUNT as f64;
    let factual = (1.0 + 4.0 * m).round() as u8;
    let answered_proto = table.prototype(response.label).expect("answered label is in the table");
    let m_interp = response.claims.matching_slots(answered_proto) as f64 / SLOT_COUNT as f64;
    let interpretative = (1.0 + 4.0 * m_interp).round() as u8;
    CriterionScores::new(factual, interpretative, 5, 5).expect("in range")
}
