//! Autoregressive sampling.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::logits_for;
use crate::model::params::ModelParams;
use tensorcore::{StreamRng, TokenIds};

/// Index of the maximum logit; ties break toward the lowest token id.
pub fn argmax_lowest_tie(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sample `n_steps` continuation tokens after `prompt`.
///
/// Each step runs the model over the trailing `context`-token window and
/// draws from `softmax(logits / temperature)` at the last position.
/// Temperature 0 picks the argmax (ties to the lowest id). The returned
/// sequence is prompt followed by the generated tokens.
pub fn generate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    prompt: &[u32],
    n_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Usage("generate requires a nonempty prompt".into()));
    }
    if temperature < 0.0 {
        return Err(Error::Usage(format!(
            "temperature must be >= 0, got {}",
            temperature
        )));
    }
    for (i, &id) in prompt.iter().enumerate() {
        if id as usize >= config.vocab {
            return Err(Error::Usage(format!(
                "prompt token {} at offset {} is outside vocab {}",
                id, i, config.vocab
            )));
        }
    }
    let mut rng = StreamRng::derived(seed, 0x9e);
    let mut tokens = prompt.to_vec();
    for _ in 0..n_steps {
        let start = tokens.len().saturating_sub(config.context);
        let window = &tokens[start..];
        let ids = TokenIds::new(1, window.len(), window.to_vec())?;
        let logits = logits_for(params, config, &ids)?;
        let v = config.vocab;
        let last = &logits.data()[(window.len() - 1) * v..window.len() * v];
        let next = if temperature == 0.0 {
            argmax_lowest_tie(last) as u32
        } else {
            sample_softmax(last, temperature, &mut rng) as u32
        };
        tokens.push(next);
    }
    Ok(tokens)
}

fn sample_softmax(logits: &[f32], temperature: f64, rng: &mut StreamRng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|&x| x as f64 / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut dart = rng.uniform_f64() * total;
    for (i, &e) in exps.iter().enumerate() {
        dart -= e;
        if dart <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}
