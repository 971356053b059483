//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function so the
//! numerics can be tested natively.

use sustain::loss::bce;
use sustain::mil::pooling::{attention_pool, AttentionParams, SegmentScores};
use sustain::noise::{monte_carlo_alignment, predicted_gain, TeacherSampler};
use sustain::{Result, Tensor};
use wasm_bindgen::prelude::*;

/// Pooled prediction and attention weights of a `[C × K]` score matrix.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    output: Vec<f64>,
    attention: Vec<f64>,
}

#[wasm_bindgen]
impl Pooled {
    /// Recording-level prediction per class.
    #[wasm_bindgen(getter)]
    pub fn output(&self) -> Vec<f64> {
        self.output.clone()
    }

    /// Row-major `[C × K]` weights.
    #[wasm_bindgen(getter)]
    pub fn attention(&self) -> Vec<f64> {
        self.attention.clone()
    }
}

pub fn pool(scores: &[f64], classes: usize, segments: usize, w: &[f64]) -> Result<Pooled> {
    let s = SegmentScores::new(Tensor::new(vec![classes, segments], scores.to_vec())?)?;
    let w = AttentionParams::new(Tensor::new(vec![classes, classes], w.to_vec())?)?;
    let p = attention_pool(&s, &w)?;
    Ok(Pooled {
        output: p.output,
        attention: p.attention.into_data(),
    })
}

/// Predicted quantities and their simulated counterparts for one
/// `(ε, δ, α₀)` setting.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSummary {
    pub delta_bar: f64,
    pub alignment: f64,
    pub stated_gain: f64,
    pub improves: bool,
    pub mc_agreement: f64,
    pub mc_alignment: f64,
    pub mc_std_error: f64,
}

pub fn gain(eps: f64, delta: f64, alpha0: f64, samples: usize, seed: u64) -> Result<GainSummary> {
    let g = predicted_gain(eps, delta, alpha0);
    let teacher = TeacherSampler::Composed { accuracy: eps };
    let agreement = monte_carlo_alignment(delta, teacher, 0.0, samples, seed)?;
    let mc = monte_carlo_alignment(delta, teacher, alpha0, samples, seed ^ 0x5bd1_e995)?;
    Ok(GainSummary {
        delta_bar: g.delta_bar,
        alignment: g.alignment,
        stated_gain: g.stated_gain,
        improves: g.improves,
        mc_agreement: agreement.estimate,
        mc_alignment: mc.estimate,
        mc_std_error: mc.std_error,
    })
}

/// `ℓ(p, αy + (1 − α)p̂)` at `points` evenly spaced `p` in `(0, 1)`.
pub fn loss_curve(y: f64, teacher: f64, alpha: f64, points: usize) -> Vec<f64> {
    let target = alpha * y + (1.0 - alpha) * teacher;
    (1..=points)
        .map(|i| bce(i as f64 / (points + 1) as f64, target))
        .collect()
}

fn js(e: sustain::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = attentionPool)]
pub fn attention_pool_js(scores: &[f64], classes: usize, segments: usize, w: &[f64]) -> Result<Pooled, JsError> {
    pool(scores, classes, segments, w).map_err(js)
}

#[wasm_bindgen(js_name = noiseGain)]
pub fn noise_gain_js(eps: f64, delta: f64, alpha0: f64, samples: usize, seed: u64) -> Result<GainSummary, JsError> {
    gain(eps, delta, alpha0, samples, seed).map_err(js)
}

#[wasm_bindgen(js_name = blendedLossCurve)]
pub fn blended_loss_curve_js(y: f64, teacher: f64, alpha: f64, points: usize) -> Vec<f64> {
    loss_curve(y, teacher, alpha, points)
}
