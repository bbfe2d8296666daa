//! The reward algebra: format and outcome rewards, reasoning-reward
//! aggregation, the group-level trustworthiness weight, the composite reward,
//! and the progressive scheduling gate.
//!
//! All reward computations are pure. [`ScheduleState`] is the only stateful
//! object and expects a single writer per training run.

use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, RewardError> {
    Err(RewardError::InvalidArgument(msg.into()))
}

// ---------------------------------------------------------------------------
// Emotion labels
// ---------------------------------------------------------------------------

/// The closed nine-category emotion set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
    ContemptDisgust,
    Confused,
    Whisper,
    Surprise,
    Fear,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 9] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::ContemptDisgust,
        EmotionLabel::Confused,
        EmotionLabel::Whisper,
        EmotionLabel::Surprise,
        EmotionLabel::Fear,
    ];

    /// Canonical display name.
    pub fn name(&self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Sad => "Sad",
            EmotionLabel::Angry => "Angry",
            EmotionLabel::ContemptDisgust => "Contempt/Disgust",
            EmotionLabel::Confused => "Confused",
            EmotionLabel::Whisper => "Whisper",
            EmotionLabel::Surprise => "Surprise",
            EmotionLabel::Fear => "Fear",
        }
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepted lowercase spellings beyond the canonical names.
const LABEL_ALIASES: &[(&str, EmotionLabel)] = &[
    ("neutral", EmotionLabel::Neutral),
    ("happy", EmotionLabel::Happy),
    ("happiness", EmotionLabel::Happy),
    ("joy", EmotionLabel::Happy),
    ("sad", EmotionLabel::Sad),
    ("sadness", EmotionLabel::Sad),
    ("angry", EmotionLabel::Angry),
    ("anger", EmotionLabel::Angry),
    ("contempt/disgust", EmotionLabel::ContemptDisgust),
    ("contempt", EmotionLabel::ContemptDisgust),
    ("disgust", EmotionLabel::ContemptDisgust),
    ("disgusted", EmotionLabel::ContemptDisgust),
    ("confused", EmotionLabel::Confused),
    ("confusion", EmotionLabel::Confused),
    ("whisper", EmotionLabel::Whisper),
    ("whispering", EmotionLabel::Whisper),
    ("surprise", EmotionLabel::Surprise),
    ("surprised", EmotionLabel::Surprise),
    ("fear", EmotionLabel::Fear),
    ("afraid", EmotionLabel::Fear),
    ("scared", EmotionLabel::Fear),
];

/// Maps free-form answer text onto the closed label set: trims whitespace,
/// strips terminal punctuation, lowercases, then consults the alias table.
/// Unmatched text yields `None`.
pub fn canonicalize_label(answer_text: &str) -> Option<EmotionLabel> {
    let trimmed = answer_text
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim();
    let lower = trimmed.to_lowercase();
    LABEL_ALIASES.iter().find(|(alias, _)| *alias == lower).map(|(_, label)| *label)
}

// ---------------------------------------------------------------------------
// Response format
// ---------------------------------------------------------------------------

/// A format-conforming response split into its two blocks, contents verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub think: String,
    pub answer: String,
}

/// Why a response failed the format schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing-think")]
    MissingThink,
    #[error("missing-answer")]
    MissingAnswer,
    #[error("wrong-order")]
    WrongOrder,
    #[error("extra-content")]
    ExtraContent,
    #[error("duplicate-block")]
    DuplicateBlock,
}

impl FormatError {
    pub fn reason_code(&self) -> &'static str {
        match self {
            FormatError::MissingThink => "missing-think",
            FormatError::MissingAnswer => "missing-answer",
            FormatError::WrongOrder => "wrong-order",
            FormatError::ExtraContent => "extra-content",
            FormatError::DuplicateBlock => "duplicate-block",
        }
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        out.push(from + pos);
        from += pos + needle.len();
    }
    out
}

/// Parses the strict `<think>…</think><answer>…</answer>` schema: exactly one
/// of each block, in that order, with nothing but whitespace outside them.
/// Tag matching is case-sensitive; block contents are returned verbatim.
pub fn parse_response(text: &str) -> Result<ParsedResponse, FormatError> {
    let think_open = find_all(text, "<think>");
    let think_close = find_all(text, "</think>");
    let answer_open = find_all(text, "<answer>");
    let answer_close = find_all(text, "</answer>");

    if think_open.is_empty() || think_close.is_empty() {
        return Err(FormatError::MissingThink);
    }
    if answer_open.is_empty() || answer_close.is_empty() {
        return Err(FormatError::MissingAnswer);
    }
    if think_open.len() > 1 || think_close.len() > 1 || answer_open.len() > 1 || answer_close.len() > 1 {
        return Err(FormatError::DuplicateBlock);
    }

    let (to, tc, ao, ac) = (think_open[0], think_close[0], answer_open[0], answer_close[0]);
    // The blocks must be cleanly sequential: think fully before answer.
    if !(to < tc && tc < ao && ao < ac) {
        return Err(FormatError::WrongOrder);
    }

    let before = &text[..to];
    let between = &text[tc + "</think>".len()..ao];
    let after = &text[ac + "</answer>".len()..];
    if !before.trim().is_empty() || !between.trim().is_empty() || !after.trim().is_empty() {
        return Err(FormatError::ExtraContent);
    }

    Ok(ParsedResponse {
        think: text[to + "<think>".len()..tc].to_string(),
        answer: text[ao + "<answer>".len()..ac].to_string(),
    })
}

/// 1 when the text follows the format schema, 0 otherwise.
pub fn format_reward(text: &str) -> f64 {
    if parse_response(text).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// 1 when the answer text canonicalizes to the gold label, 0 otherwise
/// (including unparseable answers).
pub fn outcome_reward(answer_text: &str, gold: EmotionLabel) -> f64 {
    match canonicalize_label(answer_text) {
        Some(label) if label == gold => 1.0,
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Reasoning reward
// ---------------------------------------------------------------------------

/// The four criterion ratings, each an integer in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriterionScores {
    factual_alignment: u8,
    interpretative_quality: u8,
    caption_completeness: u8,
    fluency_and_structural_clarity: u8,
}

impl CriterionScores {
    pub fn new(
        factual_alignment: u8,
        interpretative_quality: u8,
        caption_completeness: u8,
        fluency_and_structural_clarity: u8,
    ) -> Result<Self, RewardError> {
        for (name, g) in [
            ("factual_alignment", factual_alignment),
            ("interpretative_quality", interpretative_quality),
            ("caption_completeness", caption_completeness),
            ("fluency_and_structural_clarity", fluency_and_structural_clarity),
        ] {
            if !(1..=5).contains(&g) {
                return invalid(format!("{name} must be in 1..=5, got {g}"));
            }
        }
        Ok(Self {
            factual_alignment,
            interpretative_quality,
            caption_completeness,
            fluency_and_structural_clarity,
        })
    }

    /// Scores in field order.
    pub fn as_array(&self) -> [u8; 4] {
        [
            self.factual_alignment,
            self.interpretative_quality,
            self.caption_completeness,
            self.fluency_and_structural_clarity,
        ]
    }

    pub fn factual_alignment(&self) -> u8 {
        self.factual_alignment
    }

    pub fn interpretative_quality(&self) -> u8 {
        self.interpretative_quality
    }

    pub fn caption_completeness(&self) -> u8 {
        self.caption_completeness
    }

    pub fn fluency_and_structural_clarity(&self) -> u8 {
        self.fluency_and_structural_clarity
    }
}

/// Mixing weights over the four criteria: non-negative, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasoningWeights([f64; 4]);

impl ReasoningWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, RewardError> {
        if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return invalid(format!("reasoning weights must be non-negative, got {w:?}"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return invalid(format!("reasoning weights must sum to 1, got {sum}"));
        }
        Ok(Self(w))
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for ReasoningWeights {
    fn default() -> Self {
        Self([0.25; 4])
    }
}

/// Per-component weights of the composite reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub alpha_f: f64,
    pub alpha_o: f64,
    pub alpha_t: f64,
}

impl RewardWeights {
    pub fn new(alpha_f: f64, alpha_o: f64, alpha_t: f64) -> Result<Self, RewardError> {
        for (name, a) in [("alpha_f", alpha_f), ("alpha_o", alpha_o), ("alpha_t", alpha_t)] {
            if a < 0.0 || !a.is_finite() {
                return invalid(format!("{name} must be non-negative, got {a}"));
            }
        }
        Ok(Self { alpha_f, alpha_o, alpha_t })
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha_f: 0.3, alpha_o: 1.0, alpha_t: 0.5 }
    }
}

/// Weighted average of the normalized criterion scores; lands in [0.2, 1.0].
pub fn reasoning_reward(scores: &CriterionScores, weights: &ReasoningWeights) -> f64 {
    scores
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(g, w)| w * (*g as f64) / 5.0)
        .sum()
}

/// Reasoning reward assigned to format-invalid responses: the scale minimum,
/// so malformed output earns no reasoning credit while keeping the trust
/// statistics well defined.
pub const REASONING_FLOOR: f64 = 0.2;

// ---------------------------------------------------------------------------
// Trust weight
// ---------------------------------------------------------------------------

/// Group means of the reasoning reward over correct and wrong responses, and
/// the trust weight derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustStats {
    pub mean_correct: Option<f64>,
    pub mean_wrong: Option<f64>,
    pub tau: f64,
}

/// Computes the trustworthiness weight over a group of `(correct, reasoning
/// reward)` records.
///
/// Responses are partitioned by outcome; when the correct-side mean falls
/// below the wrong-side mean the weight shrinks to `exp(mean_c - mean_w)`,
/// otherwise it is 1. An empty partition side carries no misalignment
/// evidence, so the weight stays 1.
pub fn trust_weight(records: &[(bool, f64)]) -> Result<TrustStats, RewardError> {
    if records.is_empty() {
        return invalid("trust_weight on empty group");
    }
    let mean_of = |want: bool| {
        let vals: Vec<f64> = records.iter().filter(|(c, _)| *c == want).map(|(_, r)| *r).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean_correct = mean_of(true);
    let mean_wrong = mean_of(false);
    let tau = match (mean_correct, mean_wrong) {
        (Some(c), Some(w)) if c < w => (c - w).exp(),
        _ => 1.0,
    };
    Ok(TrustStats { mean_correct, mean_wrong, tau })
}

/// The composite reward. With the gate closed the reasoning term is exactly
/// zero; open, it contributes `alpha_t * tau * r_t`.
pub fn composite_reward(
    r_f: f64,
    r_o: f64,
    r_t: f64,
    tau: f64,
    weights: &RewardWeights,
    gate_open: bool,
) -> f64 {
    let base = weights.alpha_f * r_f + weights.alpha_o * r_o;
    if gate_open {
        base + weights.alpha_t * tau * r_t
    } else {
        base
    }
}

// ---------------------------------------------------------------------------
// Progressive schedule
// ---------------------------------------------------------------------------

/// Latched gate over a sliding window of per-step batch accuracies.
///
/// The gate opens once the window is full and its mean reaches the threshold,
/// and never closes again. A window size of zero opens the gate immediately
/// (progressive scheduling disabled).
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    gate_open: bool,
    window: VecDeque<f64>,
    window_size: usize,
    threshold: f64,
}

impl ScheduleState {
    pub fn new(window_size: usize, threshold: f64) -> Self {
        Self {
            gate_open: window_size == 0,
            window: VecDeque::with_capacity(window_size),
            window_size,
            threshold,
        }
    }

    pub fn gate_open(&self) -> bool {
        self.gate_open
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Pushes one batch accuracy and opens the gate when the full window's
    /// mean reaches the threshold. Once open, stays open.
    pub fn update(&mut self, batch_accuracy: f64) {
        debug_assert!((0.0..=1.0).contains(&batch_accuracy));
        if self.window_size > 0 {
            if self.window.len() == self.window_size {
                self.window.pop_front();
            }
            self.window.push_back(batch_accuracy);
            if !self.gate_open && self.window.len() == self.window_size {
                let mean = self.window.iter().sum::<f64>() / self.window_size as f64;
                if mean >= self.threshold {
                    self.gate_open = true;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Group scoring
// ---------------------------------------------------------------------------

/// Per-response reward breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseRecord {
    pub format_reward: f64,
    pub outcome_reward: f64,
    pub reasoning_reward: f64,
    pub composite: f64,
}

/// Scores one group of sampled responses against a shared gold label with an
/// explicit gate, without touching any schedule.
///
/// Format-invalid responses score zero on format and outcome and take the
/// [`REASONING_FLOOR`] as reasoning reward; they still enter the trust
/// statistics. With `trust_enabled` false the trust weight is forced to 1.
pub fn score_group_gated(
    gold: EmotionLabel,
    responses: &[&str],
    criterion_scores: &[CriterionScores],
    weights: &ReasoningWeights,
    alpha: &RewardWeights,
    gate_open: bool,
    trust_enabled: bool,
) -> Result<(Vec<ResponseRecord>, TrustStats), RewardError> {
    if responses.is_empty() {
        return invalid("empty response group");
    }
    if responses.len() != criterion_scores.len() {
        return invalid(format!(
            "{} responses but {} criterion scores",
            responses.len(),
            criterion_scores.len()
        ));
    }

    let mut partial: Vec<(f64, f64, f64)> = Vec::with_capacity(responses.len());
    for (text, scores) in responses.iter().zip(criterion_scores) {
        match parse_response(text) {
            Ok(parsed) => {
                let r_o = outcome_reward(&parsed.answer, gold);
                partial.push((1.0, r_o, reasoning_reward(scores, weights)));
            }
            Err(_) => partial.push((0.0, 0.0, REASONING_FLOOR)),
        }
    }

    let trust_records: Vec<(bool, f64)> =
        partial.iter().map(|(_, r_o, r_t)| (*r_o == 1.0, *r_t)).collect();
    let mut trust = trust_weight(&trust_records)?;
    if !trust_enabled {
        trust.tau = 1.0;
    }

    let records = partial
        .into_iter()
        .map(|(r_f, r_o, r_t)| ResponseRecord {
            format_reward: r_f,
            outcome_reward: r_o,
            reasoning_reward: r_t,
            composite: composite_reward(r_f, r_o, r_t, trust.tau, alpha, gate_open),
        })
        .collect();

    Ok((records, trust))
}

/// Scores one group under the schedule's current gate, then feeds the group's
/// mean outcome accuracy back into the schedule.
pub fn score_group(
    gold: EmotionLabel,
    responses: &[&str],
    criterion_scores: &[CriterionScores],
    weights: &ReasoningWeights,
    alpha: &RewardWeights,
    schedule: &mut ScheduleState,
) -> Result<(Vec<ResponseRecord>, TrustStats), RewardError> {
    let (records, trust) = score_group_gated(
        gold,
        responses,
        criterion_scores,
        weights,
        alpha,
        schedule.gate_open(),
        true,
    )?;
    let accuracy = records.iter().map(|r| r.outcome_reward).sum::<f64>() / records.len() as f64;
    schedule.update(accuracy);
    Ok((records, trust))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parse_valid_response() {
        let p = parse_response("<think>low pitch, slow pace</think><answer>Sad</answer>").unwrap();
        assert_eq!(p.think, "low pitch, slow pace");
        assert_eq!(p.answer, "Sad");
    }

    #[test]
    fn parse_allows_surrounding_whitespace_and_empty_blocks() {
        assert!(parse_response("  <think></think>\n<answer>Happy</answer>\n").is_ok());
        assert!(parse_response("<think>a</think><answer></answer>").is_ok());
    }

    #[test]
    fn parse_reason_codes() {
        use FormatError::*;
        let cases = [
            ("<answer>Sad</answer><think>x</think>", WrongOrder),
            ("<think>a</think><answer>Sad</answer> trailing words", ExtraContent),
            ("words first <think>a</think><answer>Sad</answer>", ExtraContent),
            ("<think>a</think> middle <answer>Sad</answer>", ExtraContent),
            ("<answer>Sad</answer>", MissingThink),
            ("<think>a</think>", MissingAnswer),
            ("", MissingThink),
            ("<think>a</think><think>b</think><answer>Sad</answer>", DuplicateBlock),
            ("<think>a</think><answer>Sad</answer><answer>Sad</answer>", DuplicateBlock),
            ("<think>a<answer>Sad</answer></think>", WrongOrder),
            ("<think>a</think><answer>Sad", MissingAnswer),
            ("<think>a<think>b</think></think><answer>Sad</answer>", DuplicateBlock),
        ];
        for (text, expected) in cases {
            assert_eq!(parse_response(text).unwrap_err(), expected, "for {text:?}");
        }
    }

    #[test]
    fn format_reward_is_binary() {
        assert_eq!(format_reward("<think>x</think><answer>Sad</answer>"), 1.0);
        assert_eq!(format_reward("<think></think><answer>Happy</answer>"), 1.0);
        assert_eq!(format_reward(""), 0.0);
        assert_eq!(format_reward("Sad"), 0.0);
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize_label("Sad"), Some(EmotionLabel::Sad));
        assert_eq!(canonicalize_label("  happy. "), Some(EmotionLabel::Happy));
        assert_eq!(canonicalize_label("ecstatic"), None);
        assert_eq!(canonicalize_label("contempt"), Some(EmotionLabel::ContemptDisgust));
        assert_eq!(canonicalize_label("Disgust!"), Some(EmotionLabel::ContemptDisgust));
        assert_eq!(canonicalize_label("surprised"), Some(EmotionLabel::Surprise));
        for label in EmotionLabel::ALL {
            assert_eq!(canonicalize_label(label.name()), Some(label), "round-trip {label}");
        }
    }

    #[test]
    fn outcome_examples() {
        assert_eq!(outcome_reward("Sad", EmotionLabel::Sad), 1.0);
        assert_eq!(outcome_reward("angry", EmotionLabel::Sad), 0.0);
        assert_eq!(outcome_reward("contempt", EmotionLabel::ContemptDisgust), 1.0);
        assert_eq!(outcome_reward("not a label", EmotionLabel::Sad), 0.0);
    }

    fn scores(g: [u8; 4]) -> CriterionScores {
        CriterionScores::new(g[0], g[1], g[2], g[3]).unwrap()
    }

    #[test]
    fn criterion_scores_validate_range() {
        assert!(CriterionScores::new(0, 1, 1, 1).is_err());
        assert!(CriterionScores::new(1, 6, 1, 1).is_err());
        assert!(CriterionScores::new(5, 5, 5, 5).is_ok());
    }

    #[test]
    fn reasoning_weights_validate_simplex() {
        assert!(ReasoningWeights::new([0.25, 0.25, 0.25, 0.3]).is_err());
        assert!(ReasoningWeights::new([-0.1, 0.5, 0.3, 0.3]).is_err());
        assert!(ReasoningWeights::new([0.7, 0.1, 0.1, 0.1]).is_ok());
    }

    #[test]
    fn reasoning_reward_examples() {
        let w = ReasoningWeights::default();
        assert_abs_diff_eq!(reasoning_reward(&scores([5, 5, 5, 5]), &w), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(reasoning_reward(&scores([1, 1, 1, 1]), &w), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(reasoning_reward(&scores([3, 4, 2, 5]), &w), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn reasoning_reward_monotone_and_linear_in_weights() {
        let w = ReasoningWeights::default();
        for slot in 0..4 {
            for g in 1..5u8 {
                let mut lo = [3u8; 4];
                let mut hi = [3u8; 4];
                lo[slot] = g;
                hi[slot] = g + 1;
                assert!(reasoning_reward(&scores(hi), &w) > reasoning_reward(&scores(lo), &w));
            }
        }
        // Linear in w: a convex mix of weight vectors mixes the rewards.
        let g = scores([2, 5, 1, 4]);
        let w1 = ReasoningWeights::new([0.7, 0.1, 0.1, 0.1]).unwrap();
        let w2 = ReasoningWeights::new([0.1, 0.3, 0.4, 0.2]).unwrap();
        let mix = ReasoningWeights::new([0.4, 0.2, 0.25, 0.15]).unwrap();
        assert_abs_diff_eq!(
            reasoning_reward(&g, &mix),
            0.5 * reasoning_reward(&g, &w1) + 0.5 * reasoning_reward(&g, &w2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn trust_weight_branches() {
        // Correct responses out-score wrong ones: no shrinkage.
        let t = trust_weight(&[(true, 0.9), (false, 0.3)]).unwrap();
        assert_eq!(t.tau, 1.0);
        // Wrong responses out-score correct ones: exponential shrinkage.
        let t = trust_weight(&[(true, 0.4), (false, 0.6)]).unwrap();
        assert_abs_diff_eq!(t.tau, (-0.2f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(t.tau, 0.818731, epsilon = 1e-6);
        // Empty partition side: convention tau = 1.
        let t = trust_weight(&[(true, 0.2), (true, 0.4)]).unwrap();
        assert_eq!(t.tau, 1.0);
        assert!(t.mean_wrong.is_none());
        assert!(trust_weight(&[]).is_err());
    }

    #[test]
    fn trust_weight_lower_bound() {
        let t = trust_weight(&[(true, 0.2), (false, 1.0)]).unwrap();
        assert_abs_diff_eq!(t.tau, (-0.8f64).exp(), epsilon = 1e-12);
        assert!(t.tau >= (-0.8f64).exp() - 1e-15);
    }

    #[test]
    fn composite_examples() {
        let alpha = RewardWeights::default();
        assert_abs_diff_eq!(
            composite_reward(1.0, 1.0, 0.7, 1.0, &alpha, true),
            1.65,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            composite_reward(1.0, 1.0, 0.7, 1.0, &alpha, false),
            1.3,
            epsilon = 1e-12
        );
        assert_eq!(composite_reward(0.0, 0.0, 0.9, 1.0, &alpha, false), 0.0);
    }

    #[test]
    fn composite_gate_closed_ignores_reasoning() {
        let alpha = RewardWeights::default();
        let a = composite_reward(1.0, 0.0, 0.2, 0.5, &alpha, false);
        let b = composite_reward(1.0, 0.0, 1.0, 1.0, &alpha, false);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn schedule_opens_on_full_window() {
        let mut s = ScheduleState::new(20, 0.5);
        for _ in 0..19 {
            s.update(0.6);
            assert!(!s.gate_open());
        }
        s.update(0.6);
        assert!(s.gate_open());
    }

    #[test]
    fn schedule_requires_full_window() {
        let mut s = ScheduleState::new(20, 0.5);
        for _ in 0..10 {
            s.update(1.0);
        }
        assert!(!s.gate_open());
    }

    #[test]
    fn schedule_latches() {
        let mut s = ScheduleState::new(5, 0.5);
        for _ in 0..5 {
            s.update(1.0);
        }
        assert!(s.gate_open());
        for _ in 0..10 {
            s.update(0.0);
            assert!(s.gate_open());
        }
    }

    #[test]
    fn schedule_zero_window_is_open_immediately() {
        let s = ScheduleState::new(0, 0.5);
        assert!(s.gate_open());
    }

    fn render(label: &str) -> String {
        format!("<think>reasoning here</think><answer>{label}</answer>")
    }

    #[test]
    fn score_group_half_correct() {
        let mut texts = Vec::new();
        for i in 0..8 {
            texts.push(render(if i < 4 { "Sad" } else { "Happy" }));
        }
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let g = vec![scores([3, 3, 3, 3]); 8]; // R_t = 0.6 everywhere
        let (records, trust) = score_group_gated(
            EmotionLabel::Sad,
            &refs,
            &g,
            &ReasoningWeights::default(),
            &RewardWeights::default(),
            true,
            true,
        )
        .unwrap();
        assert_eq!(trust.tau, 1.0);
        for r in &records[..4] {
            assert_abs_diff_eq!(r.composite, 1.6, epsilon = 1e-12);
            assert_eq!(r.format_reward, 1.0);
        }
        for r in &records[4..] {
            assert_abs_diff_eq!(r.composite, 0.6, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_group_adversarial_scores_shrink_tau() {
        // Wrong answers carry R_t = 1.0, correct carry R_t = 0.2.
        let texts: Vec<String> =
            (0..8).map(|i| render(if i < 4 { "Sad" } else { "Happy" })).collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let mut g = vec![scores([1, 1, 1, 1]); 4];
        g.extend(vec![scores([5, 5, 5, 5]); 4]);
        let (_, trust) = score_group_gated(
            EmotionLabel::Sad,
            &refs,
            &g,
            &ReasoningWeights::default(),
            &RewardWeights::default(),
            true,
            true,
        )
        .unwrap();
        assert_abs_diff_eq!(trust.tau, 0.449329, epsilon = 1e-6);
    }

    #[test]
    fn score_group_all_invalid_formats() {
        let texts = vec!["no tags at all", "<answer>Sad</answer>", "<think>x</think>"];
        let g = vec![scores([5, 5, 5, 5]); 3];
        let mut schedule = ScheduleState::new(20, 0.5);
        let (records, _) = score_group(
            EmotionLabel::Sad,
            &texts,
            &g,
            &ReasoningWeights::default(),
            &RewardWeights::default(),
            &mut schedule,
        )
        .unwrap();
        for r in records {
            assert_eq!(r.format_reward, 0.0);
            assert_eq!(r.outcome_reward, 0.0);
            assert_eq!(r.reasoning_reward, REASONING_FLOOR);
            assert_eq!(r.composite, 0.0);
        }
    }

    #[test]
    fn score_group_updates_schedule_with_group_accuracy() {
        let texts: Vec<String> = (0..4).map(|_| render("Sad")).collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let g = vec![scores([3, 3, 3, 3]); 4];
        let mut schedule = ScheduleState::new(2, 0.5);
        let w = ReasoningWeights::default();
        let a = RewardWeights::default();
        // First group scored pre-gate even though it opens the window later.
        let (records, _) = score_group(EmotionLabel::Sad, &refs, &g, &w, &a, &mut schedule).unwrap();
        assert_abs_diff_eq!(records[0].composite, 1.3, epsilon = 1e-12);
        assert!(!schedule.gate_open());
        let (_, _) = score_group(EmotionLabel::Sad, &refs, &g, &w, &a, &mut schedule).unwrap();
        assert!(schedule.gate_open());
        // Third group sees the open gate.
        let (records, _) = score_group(EmotionLabel::Sad, &refs, &g, &w, &a, &mut schedule).unwrap();
        assert_abs_diff_eq!(records[0].composite, 1.6, epsilon = 1e-12);
    }

    #[test]
    fn score_group_permutation_equivariant() {
        let texts: Vec<String> = ["Sad", "Happy", "Sad", "Fear"].iter().map(|l| render(l)).collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let g = vec![scores([4, 3, 5, 2]), scores([5, 5, 5, 5]), scores([1, 2, 1, 2]), scores([3, 3, 3, 3])];
        let w = ReasoningWeights::default();
        let a = RewardWeights::default();
        let (base, trust_base) =
            score_group_gated(EmotionLabel::Sad, &refs, &g, &w, &a, true, true).unwrap();

        let perm = [2usize, 0, 3, 1];
        let refs_p: Vec<&str> = perm.iter().map(|i| refs[*i]).collect();
        let g_p: Vec<CriterionScores> = perm.iter().map(|i| g[*i]).collect();
        let (permuted, trust_p) =
            score_group_gated(EmotionLabel::Sad, &refs_p, &g_p, &w, &a, true, true).unwrap();

        assert_eq!(trust_base.tau, trust_p.tau);
        for (k, i) in perm.iter().enumerate() {
            assert_eq!(base[*i], permuted[k]);
        }
    }

    #[test]
    fn score_group_rejects_misaligned_inputs() {
        let texts = vec!["<think>a</think><answer>Sad</answer>"];
        assert!(score_group_gated(
            EmotionLabel::Sad,
            &texts,
            &[],
            &ReasoningWeights::default(),
            &RewardWeights::default(),
            true,
            true
        )
        .is_err());
        let empty: Vec<&str> = vec![];
        assert!(score_group_gated(
            EmotionLabel::Sad,
            &empty,
            &[],
            &ReasoningWeights::default(),
            &RewardWeights::default(),
            true,
            true
        )
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn tau_always_in_unit_interval(
            records in proptest::collection::vec((proptest::bool::ANY, 0.2f64..=1.0), 1..24)
        ) {
            let t = trust_weight(&records).unwrap();
            proptest::prop_assert!(t.tau > 0.0 && t.tau <= 1.0);
            match (t.mean_correct, t.mean_wrong) {
                (Some(c), Some(w)) if c < w => proptest::prop_assert!((t.tau - (c - w).exp()).abs() < 1e-12),
                _ => proptest::prop_assert_eq!(t.tau, 1.0),
            }
        }

        #[test]
        fn gate_time_series_nondecreasing(stream in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let mut s = ScheduleState::new(10, 0.5);
            let mut prev = s.gate_open();
            for acc in stream {
                s.update(acc);
                proptest::prop_assert!(s.gate_open() >= prev);
                prev = s.gate_open();
            }
        }
    }
}
