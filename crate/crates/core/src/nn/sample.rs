use rand::Rng;

use crate::error::{Error, Result};

/// Draw an index from `softmax(logits / temperature)`.
///
/// As `temperature -> 0+` this becomes argmax; a `+inf` logit is returned
/// directly (first one wins).
pub fn softmax_sample(logits: &[f32], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::ShapeMismatch("no logits to sample from".into()));
    }
    if let Some(i) = logits.iter().position(|&l| l == f32::INFINITY) {
        return Ok(i);
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::NumericFault("NaN logit".into()));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    // Rounding can leave `u` just past the last bucket.
    Ok(weights
        .iter()
        .rposition(|w| *w > 0.0)
        .expect("max weight is exp(0) = 1"))
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
