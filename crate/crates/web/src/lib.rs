//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export takes and returns plain numbers, arrays or JSON strings so
//! the page needs no generated type glue beyond the default bindings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rubi_core::autodiff::Tape;
use rubi_core::datagen::{build_priors, DatasetSpec, Split};
use rubi_core::strategy::{apply_activation, fuse_predictions, Combine, MaskActivation};
use rubi_core::trainer::{lr_at, TrainConfig};
use rubi_core::Tensor;

#[derive(Serialize)]
struct Modulation {
    mask: Vec<f64>,
    fused: Vec<f64>,
    probs: Vec<f64>,
    fused_probs: Vec<f64>,
    ce: f64,
    fused_ce: f64,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    rubi_core::autodiff::log_softmax_row(x).into_iter().map(f64::exp).collect()
}

fn modulation(logits: &[f64], pre: &[f64], target: usize, relu: bool, sum: bool) -> Result<Modulation, String> {
    if logits.len() != pre.len() || logits.is_empty() {
        return Err(format!("{} logits but {} mask values", logits.len(), pre.len()));
    }
    if target >= logits.len() {
        return Err(format!("target {target} out of range"));
    }
    let run = || -> rubi_core::Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(logits.to_vec()))?;
        let p = t.constant(Tensor::vector(pre.to_vec()))?;
        let act = if relu { MaskActivation::Relu } else { MaskActivation::Sigmoid };
        let comb = if sum { Combine::Sum } else { Combine::Product };
        let m = apply_activation(&mut t, p, act)?;
        let f = fuse_predictions(&mut t, l, m, comb)?;
        Ok((t.value(m).data().to_vec(), t.value(f).data().to_vec()))
    };
    let (mask, fused) = run().map_err(|e| e.to_string())?;
    let probs = softmax(logits);
    let fused_probs = softmax(&fused);
    Ok(Modulation {
        ce: -probs[target].ln(),
        fused_ce: -fused_probs[target].ln(),
        mask,
        fused,
        probs,
        fused_probs,
    })
}

/// Cross-entropy of `target` before and after masking `logits` with the
/// activated question-only pre-activation `pre`. Returns JSON.
#[wasm_bindgen]
pub fn loss_modulation(logits: Vec<f64>, pre: Vec<f64>, target: usize, relu: bool, sum: bool) -> Result<String, JsError> {
    let m = modulation(&logits, &pre, target, relu, sum).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&m)?)
}

/// Learning rate of each epoch under the default schedule with the given
/// overrides.
#[wasm_bindgen]
pub fn lr_schedule(epochs: usize, base_lr: f64, peak_lr: f64, warmup: usize, decay_start: usize, factor: f64, every: usize) -> Vec<f64> {
    let cfg = TrainConfig {
        base_lr,
        peak_lr,
        warmup_epochs: warmup,
        decay_start_epoch: decay_start,
        decay_factor: factor,
        decay_every: every.max(1),
        epochs,
        ..TrainConfig::with_seed(0)
    };
    (0..epochs).map(|e| lr_at(e, &cfg)).collect()
}

#[derive(Serialize)]
struct PriorView {
    pattern: String,
    labels: Vec<String>,
    train: Vec<f64>,
    ood: Vec<f64>,
}

/// Train and out-of-distribution answer priors of every question pattern
/// for a dataset seed and bias strength. Returns JSON.
#[wasm_bindgen]
pub fn answer_priors(seed: u64, bias_strength: f64, ood_uniform: bool) -> Result<String, JsError> {
    let spec = DatasetSpec {
        bias_strength,
        ood_mode: if ood_uniform {
            rubi_core::datagen::OodMode::Uniform
        } else {
            rubi_core::datagen::OodMode::Swap
        },
        ..DatasetSpec::with_seed(seed)
    };
    spec.validate().map_err(|e| JsError::new(&e.to_string()))?;
    let priors = build_priors(&spec).map_err(|e| JsError::new(&e.to_string()))?;
    let labels = rubi_core::datagen::AnswerSpace::new(&spec).labels();
    let view: Vec<PriorView> = priors
        .entries
        .iter()
        .map(|p| PriorView {
            pattern: p.pattern.to_string(),
            labels: p.domain.iter().map(|&a| labels[a].clone()).collect(),
            train: p.probs(Split::Train).to_vec(),
            ood: p.probs(Split::TestOod).to_vec(),
        })
        .collect();
    Ok(serde_json::to_string(&view)?)
}
