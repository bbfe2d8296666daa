//! Utterance-level prosodic annotation built on the [`crate::dsp`]
//! primitives: smoothed pitch/energy contours, coarse intonation style plus a
//! fine four-way pattern, categorical pitch/energy/speed levels, and a
//! signal-based word-stress proxy driven by external alignments.
//!
//! All operations are pure; batch callers may annotate many utterances in
//! parallel.

use crate::dsp::{self, AudioBuffer, DspError};
use thiserror::Error;

/// Reference frequency for the semitone scale (A1). Slopes and ranges are
/// differences of semitones, so the reference cancels out of every decision.
pub const SEMITONE_REF_HZ: f64 = 55.0;

/// Frequency in Hz to semitones relative to [`SEMITONE_REF_HZ`].
pub fn hz_to_semitones(hz: f64) -> f64 {
    12.0 * (hz / SEMITONE_REF_HZ).log2()
}

/// Inverse of [`hz_to_semitones`].
pub fn semitones_to_hz(st: f64) -> f64 {
    SEMITONE_REF_HZ * (st / 12.0).exp2()
}

#[derive(Debug, Error)]
pub enum ProsodyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient voicing: {voiced} voiced frames, need at least {needed}")]
    InsufficientVoicing { voiced: usize, needed: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ProsodyError>,
    },
}

impl ProsodyError {
    fn at_stage(self, stage: &'static str) -> Self {
        ProsodyError::Stage { stage, source: Box::new(self) }
    }

    /// Name of the pipeline stage that failed, if the error was staged.
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            ProsodyError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ProsodyError> {
    Err(ProsodyError::InvalidArgument(msg.into()))
}

// ---------------------------------------------------------------------------
// Categories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PitchLevel {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnergyLevel {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedLevel {
    Slow,
    Medium,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntonationStyle {
    Expressive,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntonationPattern {
    Rising,
    Falling,
    RisingFalling,
    FallingRising,
}

impl PitchLevel {
    pub const ALL: [PitchLevel; 3] = [PitchLevel::Low, PitchLevel::Medium, PitchLevel::High];
}

impl EnergyLevel {
    pub const ALL: [EnergyLevel; 3] = [EnergyLevel::Low, EnergyLevel::Medium, EnergyLevel::High];
}

impl SpeedLevel {
    pub const ALL: [SpeedLevel; 3] = [SpeedLevel::Slow, SpeedLevel::Medium, SpeedLevel::Fast];
}

impl IntonationPattern {
    pub const ALL: [IntonationPattern; 4] = [
        IntonationPattern::Rising,
        IntonationPattern::Falling,
        IntonationPattern::RisingFalling,
        IntonationPattern::FallingRising,
    ];
}

impl std::fmt::Display for PitchLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PitchLevel::Low => "low",
            PitchLevel::Medium => "medium",
            PitchLevel::High => "high",
        })
    }
}

impl std::fmt::Display for EnergyLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnergyLevel::Low => "low",
            EnergyLevel::Medium => "medium",
            EnergyLevel::High => "high",
        })
    }
}

impl std::fmt::Display for SpeedLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpeedLevel::Slow => "slow",
            SpeedLevel::Medium => "medium",
            SpeedLevel::Fast => "fast",
        })
    }
}

impl std::fmt::Display for IntonationStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntonationStyle::Expressive => "expressive",
            IntonationStyle::Flat => "flat",
        })
    }
}

impl std::fmt::Display for IntonationPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntonationPattern::Rising => "rising",
            IntonationPattern::Falling => "falling",
            IntonationPattern::RisingFalling => "rising_falling",
            IntonationPattern::FallingRising => "falling_rising",
        })
    }
}

// ---------------------------------------------------------------------------
// Records and configuration
// ---------------------------------------------------------------------------

/// Frame-level pitch/energy trajectories of one utterance.
///
/// `f0_semitones` and `f0_smoothed` are present exactly where `voiced` is
/// true; all vectors share one length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyContour {
    pub frame_times: Vec<f64>,
    pub f0_semitones: Vec<Option<f64>>,
    pub f0_smoothed: Vec<Option<f64>>,
    pub energy_db: Vec<f64>,
    pub voiced: Vec<bool>,
    /// Duration of the underlying audio in seconds (the frame grid does not
    /// reach the signal tail, so it is carried along explicitly).
    pub duration_s: f64,
}

impl ProsodyContour {
    pub fn len(&self) -> usize {
        self.frame_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntonationLabel {
    pub style: IntonationStyle,
    pub pattern: IntonationPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProsodyLevels {
    pub pitch: PitchLevel,
    pub energy: EnergyLevel,
    pub speed: SpeedLevel,
}

/// One aligned word, in seconds. Alignments come from an upstream forced
/// aligner; this crate only consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAlignment {
    pub word: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Prominence score and stress flag for one word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordProminence {
    pub word: String,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
    pub stressed: bool,
}

/// Per-word stress decisions; at least one word is flagged in any non-empty
/// utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct StressAnnotation {
    pub words: Vec<WordProminence>,
}

impl StressAnnotation {
    pub fn stressed(&self) -> impl Iterator<Item = &WordProminence> {
        self.words.iter().filter(|w| w.stressed)
    }
}

/// Speaker traits supplied by an external classifier and passed through
/// verbatim.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeakerTraits {
    pub gender: Option<String>,
    pub age_group: Option<String>,
}

/// The per-utterance annotation record the pipeline emits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyAnnotation {
    pub levels: ProsodyLevels,
    pub intonation: IntonationLabel,
    pub stress: StressAnnotation,
    pub duration_s: f64,
    pub words_per_second: f64,
    pub speaker_traits: Option<SpeakerTraits>,
}

/// Frame/pitch/smoothing settings for [`extract_contour`].
#[derive(Debug, Clone, Copy)]
pub struct AnalysisConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub voicing_threshold: f64,
    pub sg_window: usize,
    pub sg_order: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            f0_min_hz: 80.0,
            f0_max_hz: 400.0,
            voicing_threshold: 0.5,
            sg_window: 11,
            sg_order: 3,
        }
    }
}

impl AnalysisConfig {
    fn validate(&self, sample_rate: f64) -> Result<(), ProsodyError> {
        if !(self.frame_ms > 0.0 && self.hop_ms > 0.0) {
            return invalid("frame_ms and hop_ms must be positive");
        }
        if !(self.f0_min_hz > 0.0 && self.f0_min_hz < self.f0_max_hz && self.f0_max_hz < sample_rate / 2.0) {
            return invalid(format!(
                "pitch band [{}, {}] invalid at {} Hz",
                self.f0_min_hz, self.f0_max_hz, sample_rate
            ));
        }
        let frame_len = (self.frame_ms * sample_rate / 1000.0).round();
        if frame_len < (2.0 * sample_rate / self.f0_min_hz).ceil() {
            return invalid(format!(
                "{} ms frame cannot hold two periods of f0_min {} Hz",
                self.frame_ms, self.f0_min_hz
            ));
        }
        if self.sg_window < 3 || self.sg_window % 2 == 0 || self.sg_order >= self.sg_window {
            return invalid(format!(
                "bad Savitzky-Golay settings: window {} order {}",
                self.sg_window, self.sg_order
            ));
        }
        Ok(())
    }
}

/// Thresholds for [`classify_intonation`].
#[derive(Debug, Clone, Copy)]
pub struct IntonationConfig {
    /// 5th-to-95th percentile pitch range (semitones) at or above which the
    /// style is expressive.
    pub range_threshold_st: f64,
    /// Half-contour slope magnitude (semitones/second) that counts as a
    /// genuine rise or fall.
    pub slope_threshold_st_s: f64,
}

impl Default for IntonationConfig {
    fn default() -> Self {
        Self { range_threshold_st: 4.0, slope_threshold_st_s: 1.0 }
    }
}

/// Thresholds for [`bin_levels`]. Energy thresholds assume audio normalized
/// to [-1, 1].
#[derive(Debug, Clone, Copy)]
pub struct LevelConfig {
    pub pitch_low_hz: f64,
    pub pitch_high_hz: f64,
    pub energy_low_db: f64,
    pub energy_high_db: f64,
    pub speed_slow_wps: f64,
    pub speed_fast_wps: f64,
    /// Frames at or below this dB level are treated as silence and excluded
    /// from the energy mean.
    pub silence_floor_db: f64,
}

impl Default for LevelConfig {
    fn default() -> Self {
        Self {
            pitch_low_hz: 140.0,
            pitch_high_hz: 220.0,
            energy_low_db: -30.0,
            energy_high_db: -15.0,
            speed_slow_wps: 2.0,
            speed_fast_wps: 3.3,
            silence_floor_db: -60.0,
        }
    }
}

/// Everything [`annotate`] needs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProsodyConfig {
    pub analysis: AnalysisConfig,
    pub intonation: IntonationConfig,
    pub levels: LevelConfig,
    pub stress_threshold: f64,
}

impl ProsodyConfig {
    pub fn with_defaults() -> Self {
        Self {
            analysis: AnalysisConfig::default(),
            intonation: IntonationConfig::default(),
            levels: LevelConfig::default(),
            stress_threshold: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Extracts the smoothed pitch/energy contour of an utterance.
///
/// Pitch is converted to semitones and Savitzky–Golay smoothed within each
/// maximal voiced run. Runs shorter than the configured window use the
/// largest valid odd window that fits (with the order reduced to stay below
/// it); runs too short for any window are copied unsmoothed.
pub fn extract_contour(audio: &AudioBuffer, config: &AnalysisConfig) -> Result<ProsodyContour, ProsodyError> {
    if audio.is_empty() {
        return invalid("empty audio");
    }
    config.validate(audio.sample_rate())?;

    let frames = dsp::frame_signal(audio, config.frame_ms, config.hop_ms)?;
    let pitch = dsp::track_pitch(
        &frames,
        audio.sample_rate(),
        config.f0_min_hz,
        config.f0_max_hz,
        config.voicing_threshold,
    )?;
    let energy = dsp::track_energy(&frames)?;

    let f0_semitones: Vec<Option<f64>> = pitch.f0_hz.iter().map(|f| f.map(hz_to_semitones)).collect();
    let voiced: Vec<bool> = f0_semitones.iter().map(|f| f.is_some()).collect();
    let f0_smoothed = smooth_voiced_runs(&f0_semitones, config.sg_window, config.sg_order)?;

    Ok(ProsodyContour {
        frame_times: frames.frame_times().to_vec(),
        f0_semitones,
        f0_smoothed,
        energy_db: energy.db,
        voiced,
        duration_s: audio.duration_s(),
    })
}

fn smooth_voiced_runs(
    st: &[Option<f64>],
    window: usize,
    order: usize,
) -> Result<Vec<Option<f64>>, DspError> {
    let mut out = vec![None; st.len()];
    let mut i = 0;
    while i < st.len() {
        if st[i].is_none() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < st.len() && st[j].is_some() {
            j += 1;
        }
        let run: Vec<f64> = st[i..j].iter().map(|v| v.unwrap()).collect();
        let mut w = window.min(run.len());
        if w % 2 == 0 {
            w -= 1;
        }
        if w >= 3 {
            let ord = order.min(w - 1);
            for (k, v) in dsp::savgol_smooth(&run, w, ord)?.into_iter().enumerate() {
                out[i + k] = Some(v);
            }
        } else {
            for (k, v) in run.into_iter().enumerate() {
                out[i + k] = Some(v);
            }
        }
        i = j;
    }
    Ok(out)
}

/// Values of `f0_smoothed` at voiced frames, with their times.
fn voiced_points(contour: &ProsodyContour) -> (Vec<f64>, Vec<f64>) {
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (i, v) in contour.f0_smoothed.iter().enumerate() {
        if let Some(y) = v {
            ts.push(contour.frame_times[i]);
            ys.push(*y);
        }
    }
    (ts, ys)
}

/// Linear-interpolation percentile of an unsorted slice, q in [0, 1].
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Least-squares slope of y against t.
fn lsq_slope(ts: &[f64], ys: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let t_mean = ts.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in ts.iter().zip(ys) {
        num += (t - t_mean) * (y - y_mean);
        den += (t - t_mean) * (t - t_mean);
    }
    if den > 1e-18 {
        num / den
    } else {
        0.0
    }
}

/// Classifies a contour into a coarse style and a four-way pattern.
///
/// Style is expressive when the 5–95 percentile span of the smoothed pitch
/// reaches `range_threshold_st`. The pattern comes from the least-squares
/// slopes of the first and second halves of the voiced contour; when neither
/// half moves decisively, the sign of the whole-utterance slope breaks the
/// tie (non-negative counts as rising).
pub fn classify_intonation(
    contour: &ProsodyContour,
    config: &IntonationConfig,
) -> Result<IntonationLabel, ProsodyError> {
    let (ts, ys) = voiced_points(contour);
    if ys.len() < 4 {
        return Err(ProsodyError::InsufficientVoicing { voiced: ys.len(), needed: 4 });
    }

    let range = percentile(&ys, 0.95) - percentile(&ys, 0.05);
    let style = if range >= config.range_threshold_st {
        IntonationStyle::Expressive
    } else {
        IntonationStyle::Flat
    };

    let mid = ys.len() / 2;
    let s1 = lsq_slope(&ts[..mid], &ys[..mid]);
    let s2 = lsq_slope(&ts[mid..], &ys[mid..]);
    let th = config.slope_threshold_st_s;

    let pattern = if s1 >= th && s2 >= -th {
        IntonationPattern::Rising
    } else if s1 <= -th && s2 <= th {
        IntonationPattern::Falling
    } else if s1 >= th && s2 <= -th {
        IntonationPattern::RisingFalling
    } else if s1 <= -th && s2 >= th {
        IntonationPattern::FallingRising
    } else if lsq_slope(&ts, &ys) >= 0.0 {
        IntonationPattern::Rising
    } else {
        IntonationPattern::Falling
    };

    Ok(IntonationLabel { style, pattern })
}

/// Bins an utterance into categorical pitch, energy, and speed levels.
///
/// Pitch uses the median voiced f0 in Hz (an all-unvoiced contour yields
/// medium); energy uses the mean dB over frames above the silence floor;
/// speed uses words per second.
pub fn bin_levels(
    contour: &ProsodyContour,
    duration_s: f64,
    word_count: usize,
    config: &LevelConfig,
) -> Result<ProsodyLevels, ProsodyError> {
    if !(duration_s > 0.0) {
        return invalid(format!("duration must be positive, got {duration_s}"));
    }

    let voiced_hz: Vec<f64> = contour
        .f0_semitones
        .iter()
        .flatten()
        .map(|st| semitones_to_hz(*st))
        .collect();
    let pitch = if voiced_hz.is_empty() {
        PitchLevel::Medium
    } else {
        let median = percentile(&voiced_hz, 0.5);
        if median < config.pitch_low_hz {
            PitchLevel::Low
        } else if median > config.pitch_high_hz {
            PitchLevel::High
        } else {
            PitchLevel::Medium
        }
    };

    let loud: Vec<f64> = contour
        .energy_db
        .iter()
        .copied()
        .filter(|db| *db > config.silence_floor_db)
        .collect();
    let energy = if loud.is_empty() {
        EnergyLevel::Low
    } else {
        let mean = loud.iter().sum::<f64>() / loud.len() as f64;
        if mean < config.energy_low_db {
            EnergyLevel::Low
        } else if mean > config.energy_high_db {
            EnergyLevel::High
        } else {
            EnergyLevel::Medium
        }
    };

    let wps = word_count as f64 / duration_s;
    let speed = if wps < config.speed_slow_wps {
        SpeedLevel::Slow
    } else if wps > config.speed_fast_wps {
        SpeedLevel::Fast
    } else {
        SpeedLevel::Medium
    };

    Ok(ProsodyLevels { pitch, energy, speed })
}

/// Population z-scores; all zeros when the spread degenerates. Entries with
/// no observation (None) get a zero score and are excluded from the
/// statistics.
fn z_scores(values: &[Option<f64>]) -> Vec<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![0.0; values.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / present.len() as f64;
    let std = var.sqrt();
    values
        .iter()
        .map(|v| match v {
            Some(x) if std > 1e-12 => (x - mean) / std,
            _ => 0.0,
        })
        .collect()
}

/// Scores each aligned word by pitch + energy + duration prominence and
/// flags the stressed ones.
///
/// `score(w) = z(mean smoothed f0 in w) + z(peak energy dB in w) + z(duration)`
/// with z-scores over the utterance's words. Words above `threshold` are
/// stressed; when none qualifies the top-scoring word is flagged, earliest
/// start winning ties.
pub fn stress_prominence(
    contour: &ProsodyContour,
    alignments: &[WordAlignment],
    threshold: f64,
) -> Result<StressAnnotation, ProsodyError> {
    if alignments.is_empty() {
        return invalid("empty alignments");
    }
    let eps = 1e-9;
    for (i, w) in alignments.iter().enumerate() {
        if !(w.t_start < w.t_end) {
            return invalid(format!("alignment {i} ({}) has t_start >= t_end", w.word));
        }
        if w.t_start < -eps || w.t_end > contour.duration_s + eps {
            return invalid(format!(
                "alignment {i} ({}) [{}, {}] outside utterance span [0, {}]",
                w.word, w.t_start, w.t_end, contour.duration_s
            ));
        }
        if i > 0 && w.t_start < alignments[i - 1].t_end - eps {
            return invalid(format!("alignment {i} ({}) overlaps its predecessor", w.word));
        }
    }

    let mut pitch_means = Vec::with_capacity(alignments.len());
    let mut energy_peaks = Vec::with_capacity(alignments.len());
    let mut durations = Vec::with_capacity(alignments.len());
    for w in alignments {
        let mut f0_sum = 0.0;
        let mut f0_n = 0usize;
        let mut peak: Option<f64> = None;
        for (i, t) in contour.frame_times.iter().enumerate() {
            if *t < w.t_start || *t >= w.t_end {
                continue;
            }
            if let Some(st) = contour.f0_smoothed[i] {
                f0_sum += st;
                f0_n += 1;
            }
            let db = contour.energy_db[i];
            peak = Some(peak.map_or(db, |p: f64| p.max(db)));
        }
        pitch_means.push((f0_n > 0).then(|| f0_sum / f0_n as f64));
        energy_peaks.push(peak);
        durations.push(Some(w.t_end - w.t_start));
    }

    let zp = z_scores(&pitch_means);
    let ze = z_scores(&energy_peaks);
    let zd = z_scores(&durations);

    let mut words: Vec<WordProminence> = alignments
        .iter()
        .enumerate()
        .map(|(i, w)| WordProminence {
            word: w.word.clone(),
            t_start: w.t_start,
            t_end: w.t_end,
            score: zp[i] + ze[i] + zd[i],
            stressed: zp[i] + ze[i] + zd[i] > threshold,
        })
        .collect();

    if !words.iter().any(|w| w.stressed) {
        // Top-1 fallback; strict comparison keeps the earliest start on ties
        // because alignments are sorted.
        let mut best = 0;
        for (i, w) in words.iter().enumerate() {
            if w.score > words[best].score {
                best = i;
            }
        }
        words[best].stressed = true;
    }

    Ok(StressAnnotation { words })
}

/// Runs the full annotation pipeline on one utterance.
///
/// Composition of [`extract_contour`], [`classify_intonation`],
/// [`bin_levels`], and [`stress_prominence`]; errors carry the name of the
/// failing stage. The transcript is accepted as metadata only — word count
/// and timing come from the alignments. Deterministic for fixed inputs.
pub fn annotate(
    audio: &AudioBuffer,
    transcript: &str,
    alignments: &[WordAlignment],
    traits: Option<SpeakerTraits>,
    config: &ProsodyConfig,
) -> Result<ProsodyAnnotation, ProsodyError> {
    let _ = transcript;
    let contour = extract_contour(audio, &config.analysis).map_err(|e| e.at_stage("contour"))?;
    let intonation =
        classify_intonation(&contour, &config.intonation).map_err(|e| e.at_stage("intonation"))?;
    let duration_s = audio.duration_s();
    let levels = bin_levels(&contour, duration_s, alignments.len(), &config.levels)
        .map_err(|e| e.at_stage("levels"))?;
    let stress = stress_prominence(&contour, alignments, config.stress_threshold)
        .map_err(|e| e.at_stage("stress"))?;

    Ok(ProsodyAnnotation {
        levels,
        intonation,
        stress,
        duration_s,
        words_per_second: alignments.len() as f64 / duration_s,
        speaker_traits: traits,
    })
}
