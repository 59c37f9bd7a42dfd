//! Browser demo. The plain functions hold the logic (and are tested
//! natively); the `bindings` module exposes them to JavaScript as JSON.

use cliptta::datagen::{Shift, StreamSpec, Surrogate};
use cliptta::demo::{gradient_directions, DirectionReport, ToyBatch};
use cliptta::engine::{run_stream, EngineConfig, Method};
use cliptta::gradients::binary_composition_coefficient;
use cliptta::model::{EncoderParams, DEFAULT_EPS_NORM};
use cliptta::{Error, Result};
use serde::Serialize;

/// Damping factor `N_a N_b / (N_a q_a + N_b q_b)` for one sample as its own
/// class `a` grows from 1 to `N − 1` members.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientCurve {
    pub n_own: Vec<usize>,
    pub coefficient: Vec<f64>,
    /// Coefficient relative to the balanced batch.
    pub relative: Vec<f64>,
}

pub fn coefficient_curve(q_own: f64, n: usize) -> Result<CoefficientCurve> {
    if !(0.0..=1.0).contains(&q_own) {
        return Err(Error::Invalid(format!("q_own must lie in [0, 1], got {q_own}")));
    }
    if !(2..=512).contains(&n) {
        return Err(Error::Invalid(format!("batch size must lie in [2, 512], got {n}")));
    }
    let q = [q_own, 1.0 - q_own];
    let n_own: Vec<usize> = (1..n).collect();
    let coefficient: Vec<f64> = n_own.iter().map(|&a| binary_composition_coefficient(&q, [a, n - a])).collect();
    let balanced = binary_composition_coefficient(&q, [n / 2, n - n / 2]);
    let relative = coefficient.iter().map(|c| if balanced > 0.0 { c / balanced } else { 0.0 }).collect();
    Ok(CoefficientCurve { n_own, coefficient, relative })
}

/// Per-batch TENT and CLIPTTA traces on one label-noise stream.
#[derive(Debug, Clone, Serialize)]
pub struct CollapseTrace {
    pub tent_entropy_ratio: Vec<f64>,
    pub cliptta_entropy_ratio: Vec<f64>,
    pub tent_accuracy: Vec<f64>,
    pub cliptta_accuracy: Vec<f64>,
    pub tent_deterioration: Vec<Option<f64>>,
    pub cliptta_deterioration: Vec<Option<f64>>,
    pub tent_unique: Vec<usize>,
    pub cliptta_unique: Vec<usize>,
}

pub fn collapse_trace(cluster_spread: f64, learning_rate: f64, seed: u64, n_batches: usize) -> Result<CollapseTrace> {
    if !(1..=100).contains(&n_batches) {
        return Err(Error::Invalid(format!("n_batches must lie in [1, 100], got {n_batches}")));
    }
    let spec = StreamSpec { cluster_spread, n_batches, shift: Shift::None, seed, ..StreamSpec::default() };
    let world = Surrogate::build(&spec)?;
    let stream = world.stream()?;
    let base = EngineConfig { learning_rate, batch_size: spec.samples_per_batch, seed, ..EngineConfig::default() };
    let params = EncoderParams::new(world.w_proj.clone(), base.tau, DEFAULT_EPS_NORM)?;
    let run = |method| run_stream(&EngineConfig { method, ..base.clone() }, &world.protos, &params, &stream, None);
    let (t, c) = (run(Method::Tent)?.history, run(Method::Cliptta)?.history);
    let ratio = |h: &[cliptta::metrics::MetricRecord]| {
        let e0 = h[0].mean_prediction_entropy;
        h.iter().map(|r| if e0 > 0.0 { r.mean_prediction_entropy / e0 } else { 0.0 }).collect()
    };
    Ok(CollapseTrace {
        tent_entropy_ratio: ratio(&t),
        cliptta_entropy_ratio: ratio(&c),
        tent_accuracy: t.iter().map(|r| r.accuracy).collect(),
        cliptta_accuracy: c.iter().map(|r| r.accuracy).collect(),
        tent_deterioration: t.iter().map(|r| r.deterioration_ratio).collect(),
        cliptta_deterioration: c.iter().map(|r| r.deterioration_ratio).collect(),
        tent_unique: t.iter().map(|r| r.unique_predicted_classes).collect(),
        cliptta_unique: c.iter().map(|r| r.unique_predicted_classes).collect(),
    })
}

/// Three prototypes at 0°, 120°, 240° and the reference batch, with the
/// ambiguous sample moved to `sample_deg`.
pub fn toy_directions(sample_deg: f64, tau: f64, lambda_reg: f64) -> Result<DirectionReport> {
    let toy = ToyBatch::from_angles(&[0.0, 120.0, 240.0], &[sample_deg, 126.0, 204.0, 253.0, 118.0, 238.0], 0, tau)?;
    gradient_directions(&toy, lambda_reg)
}

mod bindings {
    use wasm_bindgen::prelude::*;

    fn json<T: serde::Serialize>(r: cliptta::Result<T>) -> Result<String, JsError> {
        let v = r.map_err(|e| JsError::new(&e.to_string()))?;
        serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = coefficientCurve)]
    pub fn coefficient_curve(q_own: f64, n: usize) -> Result<String, JsError> {
        json(super::coefficient_curve(q_own, n))
    }

    #[wasm_bindgen(js_name = collapseTrace)]
    pub fn collapse_trace(cluster_spread: f64, learning_rate: f64, seed: u64, n_batches: usize) -> Result<String, JsError> {
        json(super::collapse_trace(cluster_spread, learning_rate, seed, n_batches))
    }

    #[wasm_bindgen(js_name = toyDirections)]
    pub fn toy_directions(sample_deg: f64, tau: f64, lambda_reg: f64) -> Result<String, JsError> {
        json(super::toy_directions(sample_deg, tau, lambda_reg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_peaks_near_balance_for_confident_own_class() {
        let c = coefficient_curve(0.8, 16).unwrap();
        assert_eq!(c.n_own.len(), 15);
        let i = c.n_own.iter().position(|&a| a == 8).unwrap();
        assert!((c.relative[i] - 1.0).abs() < 1e-12);
        assert!(c.coefficient[i..].windows(2).all(|w| w[1] < w[0]));
        assert!(coefficient_curve(1.5, 16).is_err());
        assert!(coefficient_curve(0.5, 1).is_err());
    }

    #[test]
    fn collapse_trace_shapes() {
        let t = collapse_trace(0.8, 0.15, 3, 4).unwrap();
        assert_eq!(t.tent_entropy_ratio.len(), 4);
        assert_eq!(t.cliptta_entropy_ratio[0], 1.0);
        assert_eq!(t.tent_accuracy[0], t.cliptta_accuracy[0]);
        assert!(collapse_trace(0.8, 0.15, 3, 0).is_err());
    }

    #[test]
    fn toy_reference_angle_reproduces_contrast() {
        let r = toy_directions(66.0, 0.2, 1.0).unwrap();
        assert_eq!((r.predicted, r.runner_up), (1, 0));
        assert!(r.tent[r.predicted] > 0.0);
        assert!(r.cliptta[r.runner_up] > 0.0);
        assert!(toy_directions(66.0, 0.0, 1.0).is_err());
    }
}
