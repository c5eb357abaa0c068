//! Teacher-forced training of both decoders and held-out evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ArModel, NarModel, ModelConfig, NAR_STAGES};
use crate::codec::{QuantizedTokenGrid, STAGES};
use crate::corpus::TrainingItem;
use crate::error::{Error, Result};
use crate::nn::loss::cross_entropy;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Grads, ParamStore, Scalar};
use crate::seed::derive_seed;
use crate::style::{ControlVector, StyleKeys};

/// Both decoders with their parameters.
#[derive(Debug, Clone)]
pub struct Models<T> {
    pub cfg: ModelConfig,
    pub ar: ArModel,
    pub nar: NarModel,
    pub ar_ps: ParamStore<T>,
    pub nar_ps: ParamStore<T>,
}

impl<T: Scalar> Models<T> {
    /// Fresh initialization from `derive_seed(seed, "init/ar")` and
    /// `derive_seed(seed, "init/nar")`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut ar_ps = ParamStore::new();
        let mut nar_ps = ParamStore::new();
        let ar = ArModel::new(&mut ar_ps, cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/ar")))?;
        let nar = NarModel::new(&mut nar_ps, cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/nar")))?;
        Ok(Self {
            cfg: cfg.clone(),
            ar,
            nar,
            ar_ps,
            nar_ps,
        })
    }
}

/// How training sequences are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub batch_size: usize,
    /// Prompt crop length range, in frames (inclusive).
    pub prompt_min: usize,
    pub prompt_max: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            prompt_min: 75,
            prompt_max: 125,
        }
    }
}

/// One training or evaluation sequence: the prompt is a crop of another
/// utterance of the same voice.
#[derive(Debug, Clone)]
pub struct Example {
    pub text: Vec<usize>,
    pub prompt: QuantizedTokenGrid,
    pub target: QuantizedTokenGrid,
    /// NAR stage trained on this sequence.
    pub d: usize,
}

/// Items grouped by voice, so a prompt can be drawn from a sibling.
#[derive(Debug, Clone)]
pub struct VoiceIndex {
    by_voice: BTreeMap<usize, Vec<usize>>,
}

impl VoiceIndex {
    pub fn new(items: &[TrainingItem]) -> Self {
        let mut by_voice: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            by_voice.entry(it.voice).or_default().push(i);
        }
        Self { by_voice }
    }

    /// Another item of the same voice, or `index` itself when the voice has
    /// a single utterance.
    pub fn sibling(&self, items: &[TrainingItem], index: usize, rng: &mut impl Rng) -> usize {
        let group = &self.by_voice[&items[index].voice];
        if group.len() < 2 {
            return index;
        }
        let others: Vec<usize> = group.iter().copied().filter(|&i| i != index).collect();
        others[rng.random_range(0..others.len())]
    }
}

pub fn crop(grid: &QuantizedTokenGrid, min: usize, max: usize, rng: &mut impl Rng) -> QuantizedTokenGrid {
    let max = max.min(grid.len()).max(1);
    let min = min.min(max).max(1);
    let len = rng.random_range(min..=max);
    let start = rng.random_range(0..=grid.len() - len);
    grid.slice(start, start + len)
}

pub fn make_example(
    items: &[TrainingItem],
    voices: &VoiceIndex,
    index: usize,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Example {
    let item = &items[index];
    let sib = voices.sibling(items, index, rng);
    let prompt = crop(&items[sib].grid, sampling.prompt_min, sampling.prompt_max, rng);
    let d = rng.random_range(2..=STAGES);
    Example {
        text: item.tokens.as_usize(),
        prompt,
        target: item.grid.clone(),
        d,
    }
}

fn stage_ids(grid: &QuantizedTokenGrid, s: usize) -> Vec<usize> {
    grid.stage(s).iter().map(|&v| v as usize).collect()
}

/// Loss, gradients and accuracy of one sequence for one decoder.
#[derive(Debug, Clone)]
pub struct ItemGrads<T> {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub grads: Grads<T>,
}

pub fn ar_item<T: Scalar>(m: &Models<T>, ex: &Example) -> Result<ItemGrads<T>> {
    let target = stage_ids(&ex.target, 0);
    let (logits, cache) = m.ar.forward(&m.ar_ps, &ex.text, &stage_ids(&ex.prompt, 0), &target)?;
    let labels = m.ar.labels(&target);
    let (loss, dl, correct) = cross_entropy(&logits, &labels);
    let mut grads = m.ar_ps.zero_grads();
    m.ar.backward(&m.ar_ps, &cache, &dl, &mut grads);
    Ok(ItemGrads {
        loss: loss.to_f64().unwrap_or(f64::NAN),
        correct,
        total: labels.len(),
        grads,
    })
}

pub fn nar_item<T: Scalar>(m: &Models<T>, ex: &Example, keys: StyleKeys) -> Result<ItemGrads<T>> {
    let grid = ex.prompt.concat(&ex.target)?;
    let (logits, cache) = m.nar.forward(&m.nar_ps, &ex.text, &grid, ex.prompt.len(), ex.d, keys)?;
    let labels = stage_ids(&ex.target, ex.d - 1);
    let (loss, dl, correct) = cross_entropy(&logits, &labels);
    let mut grads = m.nar_ps.zero_grads();
    m.nar.backward(&m.nar_ps, &cache, &dl, &mut grads);
    Ok(ItemGrads {
        loss: loss.to_f64().unwrap_or(f64::NAN),
        correct,
        total: labels.len(),
        grads,
    })
}

/// Per-step summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub ar_loss: f64,
    pub nar_loss: f64,
    pub ar_accuracy: f64,
    pub nar_accuracy: f64,
    pub ar_grad_norm: f64,
    pub nar_grad_norm: f64,
}

/// Models plus optimizer state; one [`Trainer::step`] is one Adam update
/// of each decoder.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub models: Models<f32>,
    pub ar_opt: Adam<f32>,
    pub nar_opt: Adam<f32>,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, adam: AdamConfig, sampling: SamplingConfig, seed: u64) -> Result<Self> {
        let models = Models::new(cfg, seed)?;
        let ar_opt = Adam::new(adam.clone(), &models.ar_ps);
        let nar_opt = Adam::new(adam, &models.nar_ps);
        Ok(Self {
            models,
            ar_opt,
            nar_opt,
            sampling,
            seed,
            step: 0,
        })
    }

    /// The batch drawn at a given step; depends only on the seed and step
    /// number, so a resumed run sees the same data.
    pub fn batch(&self, items: &[TrainingItem], voices: &VoiceIndex, step: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("step/{step}")));
        (0..self.sampling.batch_size)
            .map(|_| {
                let i = rng.random_range(0..items.len());
                make_example(items, voices, i, &self.sampling, &mut rng)
            })
            .collect()
    }

    /// One update of both decoders with the all-ones control vector.
    pub fn step(&mut self, items: &[TrainingItem], voices: &VoiceIndex) -> Result<StepStats> {
        self.step_with_control(items, voices, &ControlVector::ones(self.models.cfg.style_tokens))
    }

    pub fn step_with_control(
        &mut self,
        items: &[TrainingItem],
        voices: &VoiceIndex,
        control: &ControlVector,
    ) -> Result<StepStats> {
        control.validate_training(self.models.cfg.style_tokens)?;
        if items.is_empty() {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        let batch = self.batch(items, voices, self.step);
        let keys = StyleKeys::Scaled(control);
        let m = &self.models;
        let results: Vec<(ItemGrads<f32>, ItemGrads<f32>)> = batch
            .par_iter()
            .map(|ex| Ok((ar_item(m, ex)?, nar_item(m, ex, keys)?)))
            .collect::<Result<_>>()?;
        let (ar, ar_norm) = reduce(results.iter().map(|r| &r.0), self.step, "AR")?;
        let (nar, nar_norm) = reduce(results.iter().map(|r| &r.1), self.step, "NAR")?;
        let ar_grad_norm = self.ar_opt.update(&mut self.models.ar_ps, &ar_norm);
        let nar_grad_norm = self.nar_opt.update(&mut self.models.nar_ps, &nar_norm);
        let stats = StepStats {
            step: self.step,
            ar_loss: ar.0,
            nar_loss: nar.0,
            ar_accuracy: ar.1,
            nar_accuracy: nar.1,
            ar_grad_norm,
            nar_grad_norm,
        };
        self.step += 1;
        Ok(stats)
    }
}

/// Sums item gradients in batch order and averages them; returns
/// `((mean loss, accuracy), grads)`.
fn reduce<'a>(
    items: impl Iterator<Item = &'a ItemGrads<f32>>,
    step: usize,
    which: &str,
) -> Result<((f64, f64), Grads<f32>)> {
    let mut sum: Option<Grads<f32>> = None;
    let (mut loss, mut correct, mut total, mut n) = (0.0, 0, 0, 0);
    for it in items {
        loss += it.loss;
        correct += it.correct;
        total += it.total;
        n += 1;
        match &mut sum {
            None => sum = Some(it.grads.clone()),
            Some(s) => s.add_assign(&it.grads),
        }
    }
    let mut grads = sum.expect("non-empty batch");
    grads.scale(1.0 / n as f32);
    let loss = loss / n as f64;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NumericFault(format!(
            "{which} loss {loss} at step {step}"
        )));
    }
    Ok(((loss, correct as f64 / total.max(1) as f64), grads))
}

/// Held-out split: whole voices, the last `fraction` of voice ids, so no
/// held-out utterance has a sibling in training.
pub fn split_by_voice(items: &[TrainingItem], fraction: f64) -> (Vec<TrainingItem>, Vec<TrainingItem>) {
    let mut voices: Vec<usize> = items.iter().map(|it| it.voice).collect();
    voices.sort_unstable();
    voices.dedup();
    let held = ((voices.len() as f64 * fraction).round() as usize).min(voices.len());
    let cut = voices.len() - held;
    let held_voices: std::collections::BTreeSet<usize> = voices[cut..].iter().copied().collect();
    items
        .iter()
        .cloned()
        .partition(|it| !held_voices.contains(&it.voice))
}

/// Teacher-forced accuracies on a set of items.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: usize,
    pub ar_loss: f64,
    /// Next-token accuracy over target codes and end-of-sequence.
    pub ar_accuracy: f64,
    /// Argmax accuracy per NAR stage, stages 2..8.
    pub nar_accuracy: Vec<f64>,
    pub nar_loss: Vec<f64>,
}

impl EvalReport {
    pub fn min_nar_accuracy(&self) -> f64 {
        self.nar_accuracy.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluate every item once, each with a prompt cropped from a sibling
/// (drawn with `derive_seed(seed, "eval")`), on every NAR stage.
pub fn evaluate<T: Scalar>(
    m: &Models<T>,
    items: &[TrainingItem],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let voices = VoiceIndex::new(items);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval"));
    let examples: Vec<Example> = (0..items.len())
        .map(|i| make_example(items, &voices, i, sampling, &mut rng))
        .collect();
    // Per item: AR (loss*n, correct, n) and per stage (loss*n, correct, n).
    type Counts = (f64, usize, usize);
    let per_item: Vec<(Counts, Vec<Counts>)> = examples
        .par_iter()
        .map(|ex| {
            let target = stage_ids(&ex.target, 0);
            let (logits, _) = m.ar.forward(&m.ar_ps, &ex.text, &stage_ids(&ex.prompt, 0), &target)?;
            let labels = m.ar.labels(&target);
            let (loss, _, correct) = cross_entropy(&logits, &labels);
            let ar = (loss.to_f64().unwrap_or(f64::NAN) * labels.len() as f64, correct, labels.len());
            let grid = ex.prompt.concat(&ex.target)?;
            let nar = (2..=STAGES)
                .map(|d| {
                    let (logits, _) =
                        m.nar.forward(&m.nar_ps, &ex.text, &grid, ex.prompt.len(), d, StyleKeys::Bypass)?;
                    let labels = stage_ids(&ex.target, d - 1);
                    let (loss, _, correct) = cross_entropy(&logits, &labels);
                    Ok((loss.to_f64().unwrap_or(f64::NAN) * labels.len() as f64, correct, labels.len()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((ar, nar))
        })
        .collect::<Result<_>>()?;
    let mut ar = (0.0, 0, 0);
    let mut nar = vec![(0.0, 0, 0); NAR_STAGES];
    for (a, n) in &per_item {
        ar = (ar.0 + a.0, ar.1 + a.1, ar.2 + a.2);
        for (acc, x) in nar.iter_mut().zip(n) {
            *acc = (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2);
        }
    }
    Ok(EvalReport {
        items: items.len(),
        ar_loss: ar.0 / ar.2 as f64,
        ar_accuracy: ar.1 as f64 / ar.2 as f64,
        nar_accuracy: nar.iter().map(|x| x.1 as f64 / x.2 as f64).collect(),
        nar_loss: nar.iter().map(|x| x.0 / x.2 as f64).collect(),
    })
}
