//! Signal-level primitives: framing, short-time energy, fundamental-frequency
//! estimation, and Savitzky–Golay smoothing.
//!
//! Everything here is a pure function of its inputs and safe to call from any
//! number of threads. The prosody pipeline builds on these; file I/O lives in
//! the CLI.

use thiserror::Error;

/// dB floor added to RMS before taking the log so silence stays finite.
pub const DB_FLOOR: f64 = 1e-10;

/// Errors raised by the DSP primitives.
#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, DspError> {
    Err(DspError::InvalidArgument(msg.into()))
}

/// A mono audio signal with its sample rate.
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting non-positive sample rates and non-finite
    /// samples.
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self, DspError> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return invalid(format!("sample_rate must be positive, got {sample_rate}"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return invalid(format!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Signal duration in seconds.
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

/// Fixed-length analysis windows cut from a signal.
///
/// Frames are stored contiguously; overlapping windows are copied rather than
/// aliased, which is cheap at the scales this crate works at.
#[derive(Debug, Clone)]
pub struct FrameSeries {
    data: Vec<f64>,
    frame_length: usize,
    hop_length: usize,
    frame_times: Vec<f64>,
}

impl FrameSeries {
    pub fn len(&self) -> usize {
        self.frame_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let start = i * self.frame_length;
        &self.data[start..start + self.frame_length]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.frame_length)
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    /// Center time of each frame, in seconds.
    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }
}

/// Per-frame pitch estimates. `f0_hz[i]` is absent where the frame is
/// unvoiced; `clarity[i]` is the normalized-autocorrelation peak in [0, 1]
/// and is recorded for every frame.
#[derive(Debug, Clone)]
pub struct PitchTrack {
    pub f0_hz: Vec<Option<f64>>,
    pub clarity: Vec<f64>,
}

/// Per-frame RMS amplitude and its dB equivalent.
#[derive(Debug, Clone)]
pub struct EnergyTrack {
    pub rms: Vec<f64>,
    pub db: Vec<f64>,
}

/// Cuts a signal into frames of `frame_ms` every `hop_ms`.
///
/// Yields `floor((n - frame_len) / hop_len) + 1` frames when the signal holds
/// at least one full frame, zero otherwise; the partial tail is dropped, never
/// zero-padded.
pub fn frame_signal(audio: &AudioBuffer, frame_ms: f64, hop_ms: f64) -> Result<FrameSeries, DspError> {
    if !(frame_ms > 0.0) {
        return invalid(format!("frame_ms must be positive, got {frame_ms}"));
    }
    if !(hop_ms > 0.0) {
        return invalid(format!("hop_ms must be positive, got {hop_ms}"));
    }
    let sr = audio.sample_rate();
    let frame_length = (frame_ms * sr / 1000.0).round() as usize;
    let hop_length = ((hop_ms * sr / 1000.0).round() as usize).max(1);
    if frame_length < 2 {
        return invalid(format!(
            "frame of {frame_ms} ms is {frame_length} samples at {sr} Hz; need at least 2"
        ));
    }

    let n = audio.len();
    let n_frames = if n >= frame_length {
        (n - frame_length) / hop_length + 1
    } else {
        0
    };

    let mut data = Vec::with_capacity(n_frames * frame_length);
    let mut frame_times = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * hop_length;
        data.extend_from_slice(&audio.samples()[start..start + frame_length]);
        frame_times.push((start as f64 + frame_length as f64 / 2.0) / sr);
    }

    Ok(FrameSeries { data, frame_length, hop_length, frame_times })
}

/// Root-mean-square amplitude of one frame.
pub fn rms_energy(frame: &[f64]) -> Result<f64, DspError> {
    if frame.is_empty() {
        return invalid("rms_energy on empty frame");
    }
    let sum_sq: f64 = frame.iter().map(|s| s * s).sum();
    Ok((sum_sq / frame.len() as f64).sqrt())
}

/// RMS and dB (`20 log10(rms + floor)`) for every frame.
pub fn track_energy(frames: &FrameSeries) -> Result<EnergyTrack, DspError> {
    let mut rms = Vec::with_capacity(frames.len());
    let mut db = Vec::with_capacity(frames.len());
    for frame in frames.iter() {
        let r = rms_energy(frame)?;
        rms.push(r);
        db.push(20.0 * (r + DB_FLOOR).log10());
    }
    Ok(EnergyTrack { rms, db })
}

/// When several near-equal autocorrelation peaks compete (a periodic signal
/// correlates with itself at every multiple of the period), prefer the
/// smallest lag among peaks within this fraction of the global maximum.
const PEAK_TOLERANCE: f64 = 0.97;

/// Estimates the fundamental frequency of one frame by normalized
/// autocorrelation with parabolic peak interpolation.
///
/// Returns `Ok(None)` when the best peak's clarity falls below
/// `voicing_threshold` (the frame is treated as unvoiced). The search band is
/// `[f0_min, f0_max]` in Hz; the frame must contain at least two periods of
/// `f0_min`.
pub fn estimate_f0(
    frame: &[f64],
    sample_rate: f64,
    f0_min: f64,
    f0_max: f64,
    voicing_threshold: f64,
) -> Result<Option<(f64, f64)>, DspError> {
    Ok(f0_with_clarity(frame, sample_rate, f0_min, f0_max, voicing_threshold)?.0)
}

/// Like [`estimate_f0`] but also reports the peak clarity for unvoiced
/// frames, which [`track_pitch`] records per frame.
fn f0_with_clarity(
    frame: &[f64],
    sample_rate: f64,
    f0_min: f64,
    f0_max: f64,
    voicing_threshold: f64,
) -> Result<(Option<(f64, f64)>, f64), DspError> {
    if !(f0_min > 0.0 && f0_min < f0_max && f0_max < sample_rate / 2.0) {
        return invalid(format!(
            "need 0 < f0_min < f0_max < sample_rate/2, got [{f0_min}, {f0_max}] at {sample_rate} Hz"
        ));
    }
    let n = frame.len();
    let min_len = 2.0 * sample_rate / f0_min;
    if (n as f64) < min_len {
        return invalid(format!(
            "frame of {n} samples holds less than two periods of {f0_min} Hz (need {})",
            min_len.ceil()
        ));
    }

    let lag_min = (sample_rate / f0_max).ceil() as usize;
    let lag_max = (sample_rate / f0_min).floor() as usize;
    let lag_lo = lag_min.saturating_sub(1).max(1);
    let lag_hi = (lag_max + 1).min(n - 2);

    // r[k] holds the normalized autocorrelation at lag lag_lo + k: the inner
    // product of the frame with its shifted self, normalized by the energies
    // of the two overlapping segments so a perfectly periodic signal scores 1.
    let mut r = vec![0.0f64; lag_hi - lag_lo + 1];
    for (k, lag) in (lag_lo..=lag_hi).enumerate() {
        let m = n - lag;
        let mut cross = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for i in 0..m {
            cross += frame[i] * frame[i + lag];
            e0 += frame[i] * frame[i];
            e1 += frame[i + lag] * frame[i + lag];
        }
        let denom = (e0 * e1).sqrt();
        r[k] = if denom > 1e-24 { cross / denom } else { 0.0 };
    }

    let band = |lag: usize| lag >= lag_min && lag <= lag_max;
    let mut best = 0.0f64;
    for (k, lag) in (lag_lo..=lag_hi).enumerate() {
        if band(lag) && r[k] > best {
            best = r[k];
        }
    }
    let clarity_floor = best * PEAK_TOLERANCE;

    // Smallest-lag local maximum within tolerance of the global best; falls
    // back to the global argmax when the band edge clips every local peak.
    let mut chosen: Option<usize> = None;
    for (k, lag) in (lag_lo..=lag_hi).enumerate() {
        if !band(lag) || r[k] < clarity_floor {
            continue;
        }
        let left_ok = k == 0 || r[k - 1] <= r[k];
        let right_ok = k + 1 >= r.len() || r[k + 1] <= r[k];
        if left_ok && right_ok {
            chosen = Some(k);
            break;
        }
    }
    let k = match chosen {
        Some(k) => k,
        None => {
            let mut arg = 0;
            for (k, lag) in (lag_lo..=lag_hi).enumerate() {
                if band(lag) && r[k] > r[arg] {
                    arg = k;
                }
            }
            arg
        }
    };

    let clarity = r[k].clamp(0.0, 1.0);
    if clarity < voicing_threshold {
        return Ok((None, clarity));
    }

    // Parabolic refinement of the peak lag.
    let lag = (lag_lo + k) as f64;
    let delta = if k > 0 && k + 1 < r.len() {
        let (ym, y0, yp) = (r[k - 1], r[k], r[k + 1]);
        let denom = ym - 2.0 * y0 + yp;
        if denom.abs() > 1e-24 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let f0 = (sample_rate / (lag + delta)).clamp(f0_min, f0_max);
    Ok((Some((f0, clarity)), clarity))
}

/// Runs [`estimate_f0`] over every frame of a series.
pub fn track_pitch(
    frames: &FrameSeries,
    sample_rate: f64,
    f0_min: f64,
    f0_max: f64,
    voicing_threshold: f64,
) -> Result<PitchTrack, DspError> {
    let mut f0_hz = Vec::with_capacity(frames.len());
    let mut clarity = Vec::with_capacity(frames.len());
    for frame in frames.iter() {
        let (est, c) = f0_with_clarity(frame, sample_rate, f0_min, f0_max, voicing_threshold)?;
        f0_hz.push(est.map(|(f, _)| f));
        clarity.push(c);
    }
    Ok(PitchTrack { f0_hz, clarity })
}

/// Central-point Savitzky–Golay smoothing coefficients for an odd `window`
/// and polynomial `order`, computed from Gram polynomials.
///
/// The returned kernel has `window` taps, sums to 1, and reproduces any
/// polynomial of degree <= `order` exactly when convolved at full support.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<f64>, DspError> {
    if window < 3 || window % 2 == 0 {
        return invalid(format!("window must be odd and >= 3, got {window}"));
    }
    if order >= window {
        return invalid(format!("order {order} must be < window {window}"));
    }
    let m = ((window - 1) / 2) as i64;
    let coeffs = (-m..=m).map(|i| gram_weight(i, m, order as i64)).collect();
    Ok(coeffs)
}

/// Gram polynomial P_k evaluated at integer position `i` over 2m+1 points
/// (the s = 0 smoothing case), by the standard three-term recurrence.
fn gram_poly(i: i64, m: i64, k: i64) -> f64 {
    let mut prev = 0.0; // P_{k-2}
    let mut cur = 1.0; // P_0
    for kk in 1..=k {
        let a = (4 * kk - 2) as f64 / (kk * (2 * m - kk + 1)) as f64;
        let b = ((kk - 1) * (2 * m + kk)) as f64 / (kk * (2 * m - kk + 1)) as f64;
        let next = a * i as f64 * cur - b * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Generalized factorial a (a-1) ... (a-b+1).
fn gen_fact(a: i64, b: i64) -> f64 {
    let mut gf = 1.0;
    for j in (a - b + 1)..=a {
        gf *= j as f64;
    }
    gf
}

fn gram_weight(i: i64, m: i64, order: i64) -> f64 {
    let mut w = 0.0;
    for k in 0..=order {
        let norm = (2 * k + 1) as f64 * gen_fact(2 * m, k) / gen_fact(2 * m + k + 1, k + 1);
        w += norm * gram_poly(i, m, k) * gram_poly(0, m, k);
    }
    w
}

/// Reflects an index into [0, len) without repeating the edge sample
/// (scipy's "mirror" convention), wrapping as many times as needed.
fn mirror_index(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut k = idx.rem_euclid(period);
    if k >= len as isize {
        k = period - k;
    }
    k as usize
}

/// Smooths a series with the central Savitzky–Golay kernel, mirror-padding
/// the boundaries so the output has the input's length.
pub fn savgol_smooth(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>, DspError> {
    if series.is_empty() {
        return invalid("savgol_smooth on empty series");
    }
    let coeffs = savgol_coefficients(window, order)?;
    let m = (window as isize - 1) / 2;
    let out = (0..series.len() as isize)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| c * series[mirror_index(i + j as isize - m, series.len())])
                .sum()
        })
        .collect();
    Ok(out)
}
