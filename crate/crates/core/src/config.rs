//! Run configuration: `key = value` lines with `#` comments, layered over a
//! named preset.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::FrameConfig;
use crate::error::{Error, Result};
use crate::model::train::SamplingConfig;
use crate::model::ModelConfig;
use crate::nn::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperScale,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperScale => "paper-scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-scale" => Ok(Preset::PaperScale),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub frame: FrameConfig,
    pub adam: AdamConfig,
    pub sampling: SamplingConfig,
    /// Training length; also the span of the weight-decay ramp.
    pub steps: usize,
    pub checkpoint_every: usize,
    pub heldout_fraction: f64,
    pub temperature: f64,
}

impl RunConfig {
    pub fn desk() -> Self {
        let steps = 20_000;
        Self {
            preset: Preset::Desk,
            seed: 1,
            model: ModelConfig::desk(),
            frame: FrameConfig::default(),
            adam: AdamConfig {
                lr: 1e-3,
                warmup_steps: 200,
                total_steps: steps,
                ..AdamConfig::default()
            },
            sampling: SamplingConfig {
                batch_size: 8,
                prompt_min: 40,
                prompt_max: 60,
            },
            steps,
            checkpoint_every: 500,
            heldout_fraction: 0.1,
            temperature: 0.2,
        }
    }

    /// Published hyperparameters: Adam at 2e-4, batch 20, weight decay 2e-4 falling linearly
    /// to 1e-6 in 1000-step increments, gradient norm capped at 100,
    /// temperature 0.2; audio at 24 kHz.
    pub fn paper_scale() -> Self {
        let steps = 100_000;
        Self {
            preset: Preset::PaperScale,
            seed: 1,
            model: ModelConfig::paper_scale(),
            frame: FrameConfig {
                sample_rate: 24_000,
                frame_size: 600,
                hop: 240,
                ..FrameConfig::default()
            },
            adam: AdamConfig {
                lr: 2e-4,
                total_steps: steps,
                ..AdamConfig::default()
            },
            sampling: SamplingConfig {
                batch_size: 20,
                prompt_min: 300,
                prompt_max: 700,
            },
            steps,
            checkpoint_every: 5_000,
            heldout_fraction: 0.1,
            temperature: 0.2,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    /// Parse `key = value` lines. A `preset` line selects the base values
    /// (default `desk`) wherever it appears; every other line overrides one
    /// field. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| Preset::parse(v))
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        let m = &mut self.model;
        let f = &mut self.frame;
        let a = &mut self.adam;
        let s = &mut self.sampling;
        match key {
            "seed" => self.seed = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "d_style" => m.d_style = num(key, value)?,
            "style_tokens" => m.style_tokens = num(key, value)?,
            "style_heads" => m.style_heads = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "ff_hidden" => m.ff_hidden = num(key, value)?,
            "ar_blocks" => m.ar_blocks = num(key, value)?,
            "nar_blocks" => m.nar_blocks = num(key, value)?,
            "codebook_size" => m.codebook_size = num(key, value)?,
            "sample_rate" => f.sample_rate = num(key, value)?,
            "frame_size" => f.frame_size = num(key, value)?,
            "hop" => f.hop = num(key, value)?,
            "bands" => f.bands = num(key, value)?,
            "f_min" => f.f_min = num(key, value)?,
            "f_max" => f.f_max = num(key, value)?,
            "lr" => a.lr = num(key, value)?,
            "beta1" => a.beta1 = num(key, value)?,
            "beta2" => a.beta2 = num(key, value)?,
            "eps" => a.eps = num(key, value)?,
            "weight_decay_start" => a.weight_decay_start = num(key, value)?,
            "weight_decay_end" => a.weight_decay_end = num(key, value)?,
            "weight_decay_interval" => a.weight_decay_interval = num(key, value)?,
            "grad_clip" => a.grad_clip = num(key, value)?,
            "grad_skip" => a.grad_skip = num(key, value)?,
            "warmup_steps" => a.warmup_steps = num(key, value)?,
            "batch_size" => s.batch_size = num(key, value)?,
            "prompt_min" => s.prompt_min = num(key, value)?,
            "prompt_max" => s.prompt_max = num(key, value)?,
            "steps" => {
                self.steps = num(key, value)?;
                a.total_steps = self.steps;
            }
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "heldout_fraction" => self.heldout_fraction = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.frame.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.sampling.batch_size == 0 || self.sampling.prompt_min == 0 || self.sampling.prompt_min > self.sampling.prompt_max {
            return Err(Error::Config("bad batch or prompt sizes".into()));
        }
        if self.steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("steps and checkpoint_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every field, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let f = &self.frame;
        let a = &self.adam;
        let s = &self.sampling;
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
        line("preset", self.preset.name().into());
        line("seed", self.seed.to_string());
        line("d_model", m.d_model.to_string());
        line("d_style", m.d_style.to_string());
        line("style_tokens", m.style_tokens.to_string());
        line("style_heads", m.style_heads.to_string());
        line("heads", m.heads.to_string());
        line("ff_hidden", m.ff_hidden.to_string());
        line("ar_blocks", m.ar_blocks.to_string());
        line("nar_blocks", m.nar_blocks.to_string());
        line("codebook_size", m.codebook_size.to_string());
        line("sample_rate", f.sample_rate.to_string());
        line("frame_size", f.frame_size.to_string());
        line("hop", f.hop.to_string());
        line("bands", f.bands.to_string());
        line("f_min", f.f_min.to_string());
        line("f_max", f.f_max.to_string());
        line("lr", a.lr.to_string());
        line("beta1", a.beta1.to_string());
        line("beta2", a.beta2.to_string());
        line("eps", a.eps.to_string());
        line("weight_decay_start", a.weight_decay_start.to_string());
        line("weight_decay_end", a.weight_decay_end.to_string());
        line("weight_decay_interval", a.weight_decay_interval.to_string());
        line("grad_clip", a.grad_clip.to_string());
        line("grad_skip", a.grad_skip.to_string());
        line("warmup_steps", a.warmup_steps.to_string());
        line("batch_size", s.batch_size.to_string());
        line("prompt_min", s.prompt_min.to_string());
        line("prompt_max", s.prompt_max.to_string());
        line("steps", self.steps.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("heldout_fraction", self.heldout_fraction.to_string());
        line("temperature", self.temperature.to_string());
        out
    }

    /// First 16 hex digits of SHA-256 over [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
