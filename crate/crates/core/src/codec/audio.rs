use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Write 16-bit PCM mono.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            w.write_sample(to_pcm16(s))?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Read a mono WAV (16-bit PCM or 32-bit float).
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 1 {
            return Err(Error::format(path, format!("{} channels, expected mono", spec.channels)));
        }
        let samples = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => r
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>()?,
            (hound::SampleFormat::Float, 32) => r
                .samples::<f32>()
                .collect::<std::result::Result<Vec<_>, _>>()?,
            (fmt, bits) => {
                return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits}")))
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Round-trip through 16-bit quantization, as a WAV write/read would.
    pub fn quantized_pcm16(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|&s| to_pcm16(s) as f32 / 32768.0)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn to_pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}
