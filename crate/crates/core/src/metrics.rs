//! Objective evaluation: word error rate, autocorrelation F0, F0 voiced
//! error, gross pitch error, and per-utterance acoustic summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{AudioBuffer, FilterBank, FrameMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_words as f64
    }
}

/// Minimal unit-cost alignment of whitespace-separated words.
///
/// Among optimal alignments the backtrace prefers a substitution (or match),
/// then an insertion, then a deletion.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = WerBreakdown {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        reference_words: n,
    };
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = r[i - 1] != h[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(mismatch) == here {
                out.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            out.insertions += 1;
            j -= 1;
        } else {
            out.deletions += 1;
            i -= 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct F0Config {
    /// Analysis window in seconds.
    pub frame: f64,
    /// Hop in seconds.
    pub hop: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub voicing_threshold: f64,
    pub rms_threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            frame: 0.040,
            hop: 0.010,
            f_min: 50.0,
            f_max: 500.0,
            voicing_threshold: 0.5,
            rms_threshold: 1e-4,
        }
    }
}

impl F0Config {
    fn samples(&self, sample_rate: u32) -> (usize, usize) {
        let sr = sample_rate as f64;
        ((self.frame * sr).round() as usize, (self.hop * sr).round().max(1.0) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Frame {
    pub voiced: bool,
    /// Hz; 0 when unvoiced.
    pub f0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub frames: Vec<F0Frame>,
    pub hop: f64,
}

impl F0Track {
    /// Track with every frame voiced at the given values.
    pub fn voiced(values: &[f64], hop: f64) -> Self {
        Self {
            frames: values.iter().map(|&f0| F0Frame { voiced: true, f0 }).collect(),
            hop,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.frames.iter().filter(|f| f.voiced).count()
    }

    pub fn voiced_values(&self) -> Vec<f64> {
        self.frames.iter().filter(|f| f.voiced).map(|f| f.f0).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,voiced,f0_hz\n");
        for (i, f) in self.frames.iter().enumerate() {
            writeln!(out, "{i},{},{:.4}", u8::from(f.voiced), f.f0).expect("write to string");
        }
        out
    }
}

/// Normalized autocorrelation pitch tracker.
///
/// For each frame the normalized autocorrelation is evaluated over lags for
/// `[f_min, f_max]`; the smallest-lag local peak reaching 90% of the best
/// peak is taken (an octave-down guard), refined by parabolic interpolation.
pub fn extract_f0(audio: &AudioBuffer, cfg: &F0Config) -> Result<F0Track> {
    let (frame, hop) = cfg.samples(audio.sample_rate);
    if audio.len() < frame {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            needed: frame,
        });
    }
    let sr = audio.sample_rate as f64;
    let min_lag = ((sr / cfg.f_max).floor() as usize).max(1);
    let max_lag = ((sr / cfg.f_min).ceil() as usize).min(frame - 2);
    let x: Vec<f64> = audio.samples.iter().map(|&s| s as f64).collect();
    let count = (audio.len() - frame) / hop + 1;
    let mut frames = Vec::with_capacity(count);
    let mut r = vec![0.0; max_lag + 2];
    // Prefix sums of squares give each lagged energy in O(1).
    let mut cum = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        cum[i + 1] = cum[i] + v * v;
    }
    for t in 0..count {
        let w = &x[t * hop..t * hop + frame];
        let base = t * hop;
        let rms = ((cum[base + frame] - cum[base]) / frame as f64).sqrt();
        if rms < cfg.rms_threshold {
            frames.push(F0Frame { voiced: false, f0: 0.0 });
            continue;
        }
        let lo = min_lag.saturating_sub(1).max(1);
        for lag in lo..=max_lag + 1 {
            let n = frame - lag;
            let num: f64 = w[..n].iter().zip(&w[lag..]).map(|(a, b)| a * b).sum();
            let e0 = cum[base + n] - cum[base];
            let e1 = cum[base + frame] - cum[base + lag];
            let den = (e0 * e1).sqrt();
            r[lag] = if den > 0.0 { num / den } else { 0.0 };
        }
        let mut best = f64::NEG_INFINITY;
        for lag in min_lag..=max_lag {
            best = best.max(r[lag]);
        }
        let mut pick = None;
        for lag in min_lag..=max_lag {
            let is_peak = r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1];
            if is_peak && r[lag] >= 0.9 * best {
                pick = Some(lag);
                break;
            }
        }
        let voiced_frame = pick.and_then(|lag| {
            if r[lag] < cfg.voicing_threshold {
                return None;
            }
            let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
            let den = a - 2.0 * b + c;
            let shift = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
            let f0 = sr / (lag as f64 + shift);
            (cfg.f_min..=cfg.f_max).contains(&f0).then_some(f0)
        });
        frames.push(match voiced_frame {
            Some(f0) => F0Frame { voiced: true, f0 },
            None => F0Frame { voiced: false, f0: 0.0 },
        });
    }
    Ok(F0Track {
        frames,
        hop: hop as f64 / sr,
    })
}

fn check_lengths(f: &F0Track, f_hat: &F0Track) -> Result<()> {
    if f.len() != f_hat.len() {
        return Err(Error::LengthMismatch {
            expected: f.len(),
            got: f_hat.len(),
        });
    }
    Ok(())
}

/// RMS F0 difference in Hz over frames voiced in the reference track.
/// A synthesized frame that is unvoiced counts as 0 Hz.
pub fn f0_voiced_error(f: &F0Track, f_hat: &F0Track) -> Result<f64> {
    check_lengths(f, f_hat)?;
    let mut n = 0usize;
    let mut ss = 0.0;
    for (a, b) in f.frames.iter().zip(&f_hat.frames) {
        if !a.voiced {
            continue;
        }
        let est = if b.voiced { b.f0 } else { 0.0 };
        ss += (a.f0 - est) * (a.f0 - est);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoVoicedFrames);
    }
    Ok((ss / n as f64).sqrt())
}

pub const GPE_DELTA: f64 = 0.20;

/// Percentage of frames voiced in both tracks whose estimate deviates from
/// the reference by more than `delta * f`. A deviation of exactly
/// `delta * f` counts as correct; a relative slack of 1e-9 absorbs the
/// rounding in `f * (1 + delta)`.
pub fn f0_gross_pitch_error(f: &F0Track, f_hat: &F0Track, delta: f64) -> Result<f64> {
    check_lengths(f, f_hat)?;
    let mut both = 0usize;
    let mut gross = 0usize;
    for (a, b) in f.frames.iter().zip(&f_hat.frames) {
        if a.voiced && b.voiced {
            both += 1;
            if (b.f0 - a.f0).abs() > delta * a.f0 * (1.0 + 1e-9) {
                gross += 1;
            }
        }
    }
    if both == 0 {
        return Err(Error::NoVoicedFrames);
    }
    Ok(100.0 * gross as f64 / both as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticSummary {
    /// Mean F0 over voiced frames, 0 when none are voiced.
    pub mean_f0: f64,
    pub voiced_duration: f64,
    pub total_duration: f64,
    pub rms: f64,
    pub f0: F0Track,
    pub mel: FrameMatrix,
}

impl AcousticSummary {
    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            0.0
        } else {
            self.f0.voiced_count() as f64 / self.f0.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "mean_f0,voiced_duration,total_duration,rms,voiced_fraction\n{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.mean_f0,
            self.voiced_duration,
            self.total_duration,
            self.rms,
            self.voiced_fraction()
        )
    }
}

pub fn acoustic_summary(
    audio: &AudioBuffer,
    f0_cfg: &F0Config,
    bank: &FilterBank,
) -> Result<AcousticSummary> {
    let f0 = extract_f0(audio, f0_cfg)?;
    let mel = bank.analyze(audio)?;
    let voiced = f0.voiced_values();
    let mean_f0 = if voiced.is_empty() {
        0.0
    } else {
        voiced.iter().sum::<f64>() / voiced.len() as f64
    };
    Ok(AcousticSummary {
        mean_f0,
        voiced_duration: voiced.len() as f64 * f0.hop,
        total_duration: audio.duration(),
        rms: audio.rms(),
        f0,
        mel,
    })
}

/// Frame-major CSV with one column per band.
pub fn mel_to_csv(mel: &FrameMatrix) -> String {
    let mut out = String::from("frame");
    for b in 0..mel.dims() {
        write!(out, ",band{b}").expect("write to string");
    }
    out.push('\n');
    for t in 0..mel.len() {
        write!(out, "{t}").expect("write to string");
        for v in mel.row(t) {
            write!(out, ",{v:.6}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
