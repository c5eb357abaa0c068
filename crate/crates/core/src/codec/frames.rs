//! Filter-bank analysis and sinusoidal overlap-add resynthesis.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Floor applied to band magnitudes before the log.
pub const MAG_FLOOR: f64 = 1e-5;
/// Synthesis peak limit.
pub const PEAK_LIMIT: f32 = 0.99;
/// Band magnitude of a full-scale sine. Puts the floor 60 dB below full
/// scale, so window leakage and 16-bit rounding noise clamp to the floor
/// instead of flickering between codes.
pub const ANALYSIS_GAIN: f64 = 0.01;

/// Frame geometry and filter-bank layout shared by analysis and synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop: usize,
    pub bands: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_size: 400,
            hop: 160,
            bands: 40,
            f_min: 50.0,
            f_max: 7000.0,
        }
    }
}

impl FrameConfig {
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_size {
            0
        } else {
            (num_samples - self.frame_size) / self.hop + 1
        }
    }

    pub fn num_samples(&self, num_frames: usize) -> usize {
        if num_frames == 0 {
            0
        } else {
            (num_frames - 1) * self.hop + self.frame_size
        }
    }

    pub fn fft_size(&self) -> usize {
        self.frame_size.next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_size == 0 || self.hop == 0 || self.bands == 0 {
            return Err(Error::Config("frame geometry must be positive".into()));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "filter bank range {}..{} Hz invalid for {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok(())
    }
}

/// `L_t x D_f` log band magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Tensor2<f64>,
    pub hop: usize,
    pub frame_size: usize,
}

impl FrameMatrix {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.frames.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular mel-spaced filters evaluated on FFT bins.
#[derive(Clone)]
pub struct FilterBank {
    cfg: FrameConfig,
    /// Band center frequencies in Hz.
    pub centers: Vec<f64>,
    /// Per band: first bin and weights from there.
    weights: Vec<(usize, Vec<f64>)>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    norm: f64,
}

impl std::fmt::Debug for FilterBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterBank")
            .field("cfg", &self.cfg)
            .field("centers", &self.centers)
            .finish()
    }
}

impl FilterBank {
    pub fn new(cfg: &FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.fft_size();
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.bands + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.bands + 1) as f64))
            .collect();
        let mut weights = Vec::with_capacity(cfg.bands);
        for b in 0..cfg.bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let first = (lo / bin_hz).ceil() as usize;
            let last = ((hi / bin_hz).floor() as usize).min(n_fft / 2);
            let w: Vec<f64> = (first..=last)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                    .max(0.0)
                })
                .collect();
            weights.push((first, w));
        }
        let window = hann(cfg.frame_size);
        // A unit sine landing on a bin reads as magnitude ANALYSIS_GAIN.
        let norm = ANALYSIS_GAIN * 2.0 / window.iter().sum::<f64>();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            centers: edges[1..=cfg.bands].to_vec(),
            weights,
            window,
            fft,
            norm,
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    /// Log band magnitudes of every full frame.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<FrameMatrix> {
        let cfg = &self.cfg;
        if audio.len() < cfg.frame_size {
            return Err(Error::AudioTooShort {
                samples: audio.len(),
                needed: cfg.frame_size,
            });
        }
        if audio.sample_rate != cfg.sample_rate {
            return Err(Error::Config(format!(
                "audio at {} Hz, codec expects {} Hz",
                audio.sample_rate, cfg.sample_rate
            )));
        }
        let n_fft = cfg.fft_size();
        let frames = cfg.num_frames(audio.len());
        let mut out = Tensor2::zeros(frames, cfg.bands);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mags = vec![0.0; n_fft / 2 + 1];
        let floor = MAG_FLOOR.ln();
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.frame_size {
                    Complex::new(audio.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mags.iter_mut().zip(&buf) {
                *m = c.norm() * self.norm;
            }
            let row = out.row_mut(t);
            for (b, (first, w)) in self.weights.iter().enumerate() {
                let e: f64 = w.iter().zip(&mags[*first..]).map(|(w, m)| w * m).sum();
                row[b] = if e > MAG_FLOOR { e.ln() } else { floor };
            }
        }
        Ok(FrameMatrix {
            frames: out,
            hop: cfg.hop,
            frame_size: cfg.frame_size,
        })
    }

    /// Sum of band-center sinusoids with amplitude `exp(value)` per frame,
    /// Hann-windowed and overlap-added, normalized by the summed window and
    /// scaled down only if the peak exceeds [`PEAK_LIMIT`].
    pub fn synthesize(&self, frames: &FrameMatrix) -> Result<AudioBuffer> {
        let cfg = &self.cfg;
        if frames.dims() != cfg.bands {
            return Err(Error::DimensionMismatch {
                expected: cfg.bands,
                got: frames.dims(),
            });
        }
        if frames.frames.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite frame values".into()));
        }
        let n = cfg.num_samples(frames.len());
        let mut acc = vec![0.0f64; n];
        let mut wsum = vec![0.0f64; n];
        let sr = cfg.sample_rate as f64;
        let steps: Vec<f64> = self.centers.iter().map(|f| 2.0 * PI * f / sr).collect();
        for t in 0..frames.len() {
            let start = t * cfg.hop;
            let amps: Vec<f64> = frames.row(t).iter().map(|v| v.exp()).collect();
            for i in 0..cfg.frame_size {
                let pos = (start + i) as f64;
                let s: f64 = amps
                    .iter()
                    .zip(&steps)
                    .map(|(a, w)| a * (w * pos).sin())
                    .sum();
                acc[start + i] += self.window[i] * s;
                wsum[start + i] += self.window[i];
            }
        }
        let mut samples: Vec<f32> = acc
            .iter()
            .zip(&wsum)
            .map(|(a, w)| if *w > 1e-9 { (a / w) as f32 } else { 0.0 })
            .collect();
        let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > PEAK_LIMIT {
            let g = PEAK_LIMIT / peak;
            samples.iter_mut().for_each(|s| *s *= g);
        }
        AudioBuffer::new(samples, cfg.sample_rate)
    }
}

pub fn frame_analyze(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FrameMatrix> {
    FilterBank::new(cfg)?.analyze(audio)
}

pub fn frame_synthesize(frames: &FrameMatrix, cfg: &FrameConfig) -> Result<AudioBuffer> {
    FilterBank::new(cfg)?.synthesize(frames)
}
